"""Procedural longitudinal head phantoms and the INRVOL01 volume format.

A phantom is a head ellipsoid of textured tissue with a cortical shell and
two ventricles. Aging thins the shell and inflates the ventricles as a
function of biological age, so rendering one morphology at two brain ages
gives a counterfactual pair that differs only through the aging effect.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"INRVOL01"
_HEADER = struct.Struct("<8s3I3fd")

BACKGROUND = -1.0
TISSUE = 0.2
CORTEX = 0.7
VENTRICLE = -0.6
VENTRICLE_OFFSET = 0.22  # centre of each ventricle along x, normalized units

MIN_BRAIN_AGE = 45.0
MAX_BRAIN_AGE = 100.0


class VolumeFormatError(ValueError):
    pass


class MorphologyError(ValueError):
    pass


@dataclass
class Volume:
    """Intensity grid indexed ``data[x, y, z]``."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    age: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3-D array, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Grid:
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def axes(self):
        return [np.linspace(-1.0, 1.0, n) for n in self.dims]

    def coordinates(self, dtype=np.float64) -> np.ndarray:
        """Normalized voxel-centre coordinates, x-fastest, shape ``(X*Y*Z, 3)``."""
        ax, ay, az = self.axes()
        z, y, x = np.meshgrid(az, ay, ax, indexing="ij")
        return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1).astype(dtype)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))


def flat_intensities(v: Volume) -> np.ndarray:
    """Intensities in the same x-fastest order as :meth:`Grid.coordinates`."""
    return v.data.ravel(order="F")


def volume_from_flat(values, dims, spacing=(1.0, 1.0, 1.0), age=0.0) -> Volume:
    return Volume(np.asarray(values).reshape(dims, order="F"), spacing, age)


@dataclass(frozen=True)
class PhantomSettings:
    """Rendering constants; thicknesses are in voxels, rates per year."""

    cortex_thickness: float = 4.0
    thinning_rate: float = 0.06
    min_thickness: float = 1.0
    ventricle_growth: float = 0.008
    texture_amplitude: float = 0.15
    noise_std: float = 0.02


@dataclass(frozen=True)
class Morphology:
    seed: int
    head_axes: tuple[float, float, float]
    ventricle_axes: tuple[float, float, float]
    texture_phase: tuple[float, float, float]
    texture_frequency: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Morphology":
        return cls(int(d["seed"]), tuple(d["head_axes"]), tuple(d["ventricle_axes"]),
                   tuple(d["texture_phase"]), float(d["texture_frequency"]))


def ventricle_scale(brain_age: float, settings: PhantomSettings = PhantomSettings()) -> float:
    return 1.0 + settings.ventricle_growth * (brain_age - 50.0)


def cortex_thickness(brain_age: float, settings: PhantomSettings = PhantomSettings()) -> float:
    return max(settings.cortex_thickness - settings.thinning_rate * (brain_age - 50.0),
               settings.min_thickness)


def _ventricles_inside(m: Morphology, settings: PhantomSettings) -> bool:
    # extreme points of each scaled ventricle ellipsoid must sit inside the head
    vx, vy, vz = (a * ventricle_scale(MAX_BRAIN_AGE, settings) for a in m.ventricle_axes)
    hx, hy, hz = m.head_axes
    for px, py, pz in [(VENTRICLE_OFFSET + vx, 0, 0), (VENTRICLE_OFFSET, vy, 0), (VENTRICLE_OFFSET, 0, vz)]:
        if (px / hx) ** 2 + (py / hy) ** 2 + (pz / hz) ** 2 >= 0.8 ** 2:
            return False
    return VENTRICLE_OFFSET - vx > 0


def sample_morphology(rng: np.random.Generator, settings: PhantomSettings = PhantomSettings(),
                      seed: int | None = None) -> Morphology:
    """Draw a subject morphology, redrawing until the ventricles fit at any brain age."""
    for _ in range(1000):
        m = Morphology(
            seed=int(rng.integers(0, 2**31 - 1)) if seed is None else int(seed),
            head_axes=tuple(float(a) for a in rng.uniform([0.72, 0.80, 0.70], [0.88, 0.95, 0.85])),
            ventricle_axes=tuple(float(a) for a in rng.uniform([0.08, 0.20, 0.10], [0.13, 0.30, 0.16])),
            texture_phase=tuple(float(a) for a in rng.uniform(0.0, 2 * np.pi, size=3)),
            texture_frequency=float(rng.uniform(5.0, 9.0)),
        )
        if _ventricles_inside(m, settings):
            return m
    raise MorphologyError("could not sample a morphology with ventricles inside the head")


def tissue_masks(m: Morphology, brain_age: float, grid: Grid,
                 settings: PhantomSettings = PhantomSettings()):
    """Boolean (head, cortex, ventricle) masks in ``[x, y, z]`` layout."""
    ax, ay, az = grid.axes()
    x, y, z = np.meshgrid(ax, ay, az, indexing="ij")
    hx, hy, hz = m.head_axes
    rho = np.sqrt((x / hx) ** 2 + (y / hy) ** 2 + (z / hz) ** 2)
    head = rho <= 1.0
    voxel = 2.0 / (np.asarray(grid.dims, dtype=float) - 1.0)
    mean_axis_in_voxels = np.mean(np.asarray(m.head_axes) / voxel)
    inner = 1.0 - cortex_thickness(brain_age, settings) / mean_axis_in_voxels
    cortex = head & (rho > inner)
    s = ventricle_scale(brain_age, settings)
    vx, vy, vz = (a * s for a in m.ventricle_axes)
    vent = np.zeros_like(head)
    for cx in (-VENTRICLE_OFFSET, VENTRICLE_OFFSET):
        vent |= ((x - cx) / vx) ** 2 + (y / vy) ** 2 + (z / vz) ** 2 <= 1.0
    return head, cortex & ~vent, vent & head


def _noise_seed(subject_seed: int, age: float) -> int:
    return (int(subject_seed) * 1_000_003 + int(round(age * 1000))) % (2**63)


def generate_phantom(m: Morphology, brain_age: float, grid: Grid = Grid(),
                     settings: PhantomSettings = PhantomSettings(),
                     acquisition_age: float | None = None) -> Volume:
    """Render ``m`` at ``brain_age``.

    Observation noise is seeded from the subject seed and the acquisition
    age (defaulting to ``brain_age``), so counterfactual scans taken at the
    same chronological age share their noise field.
    """
    if not MIN_BRAIN_AGE <= brain_age <= MAX_BRAIN_AGE:
        raise ValueError(f"brain age {brain_age} outside [{MIN_BRAIN_AGE}, {MAX_BRAIN_AGE}]")
    if not _ventricles_inside(m, settings):
        raise MorphologyError("ventricles exceed the head ellipsoid")
    acq = brain_age if acquisition_age is None else acquisition_age
    head, cortex, vent = tissue_masks(m, brain_age, grid, settings)
    ax, ay, az = grid.axes()
    x, y, z = np.meshgrid(ax, ay, az, indexing="ij")
    f = m.texture_frequency
    px, py, pz = m.texture_phase
    texture = np.sin(f * x + px) * np.sin(f * y + py) * np.sin(f * z + pz)
    img = np.full(grid.dims, BACKGROUND)
    img[head] = TISSUE + settings.texture_amplitude * texture[head]
    img[cortex] = CORTEX
    img[vent] = VENTRICLE
    if settings.noise_std > 0:
        rng = np.random.default_rng(_noise_seed(m.seed, acq))
        img = img + rng.normal(0.0, settings.noise_std, size=grid.dims)
    return Volume(np.clip(img, -1.0, 1.0), grid.spacing, float(acq))


# --------------------------------------------------------------------------
# INRVOL01 persistence


def write_volume(v: Volume, path) -> None:
    X, Y, Z = v.dims
    header = _HEADER.pack(VOLUME_MAGIC, X, Y, Z, *v.spacing, float(v.age))
    body = np.asarray(v.data, dtype="<f4").tobytes(order="F")
    Path(path).write_bytes(header + body)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header at offset {len(raw)} "
                                f"(need {_HEADER.size} bytes)")
    magic, X, Y, Z, sx, sy, sz, age = _HEADER.unpack_from(raw, 0)
    if magic != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r} at offset 0, expected {VOLUME_MAGIC!r}")
    n = X * Y * Z
    if X == 0 or Y == 0 or Z == 0 or n * 4 > 2**40:
        raise VolumeFormatError(f"{path}: implausible dims {X}x{Y}x{Z} at offset 8")
    need = _HEADER.size + 4 * n
    if len(raw) != need:
        raise VolumeFormatError(f"{path}: payload ends at offset {len(raw)}, expected {need}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=n).reshape((X, Y, Z), order="F")
    return Volume(data.astype(np.float32), (sx, sy, sz), age)

"""Semi-disentangled spatiotemporal INR.

Coordinates and time run through separate streams (Gabor wavelets for
space, ReLU for time) that are concatenated and processed by a combined
Gabor stream before a linear head. Every layer is stored as one stacked
``(in + 1) x out`` matrix whose last row is the bias.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .phantom import Grid, Volume, flat_intensities, volume_from_flat

INR_MAGIC = b"INRW0001"
_HEADER = struct.Struct("<8s4IB2f")
_MODES = {"real": 0, "complex": 1}

AGE_RANGE = (50.0, 90.0)


class InrFormatError(ValueError):
    pass


def normalize_age(age):
    lo, hi = AGE_RANGE
    return 2.0 * (np.asarray(age, dtype=np.float64) - lo) / (hi - lo) - 1.0


@dataclass(frozen=True)
class InrArchitecture:
    hidden: int = 64
    space_layers: int = 5
    time_layers: int = 5
    combined_layers: int = 3
    omega0: float = 20.0
    s0: float = 10.0
    mode: str = "real"

    def __post_init__(self):
        if self.space_layers != self.time_layers:
            raise ValueError("spatial and temporal streams must have the same depth")
        if self.space_layers < 2 or self.combined_layers < 1 or self.hidden < 1:
            raise ValueError(f"invalid architecture {self}")
        if self.mode not in _MODES:
            raise ValueError(f"unknown activation mode {self.mode!r}")
        dc._check_gabor(self.omega0, self.s0)

    @property
    def space_shapes(self) -> list[tuple[int, int]]:
        H = self.hidden
        return [(4, H)] + [(H + 1, H)] * (self.space_layers - 1)

    @property
    def time_shapes(self) -> list[tuple[int, int]]:
        H = self.hidden
        return [(2, H)] + [(H + 1, H)] * (self.time_layers - 1)

    @property
    def combined_shapes(self) -> list[tuple[int, int]]:
        H = self.hidden
        return [(2 * H + 1, H)] + [(H + 1, H)] * (self.combined_layers - 1)

    @property
    def head_shape(self) -> tuple[int, int]:
        return (self.hidden + 1, 1)


PRESETS = {
    "paper": InrArchitecture(hidden=512),
    "desk": InrArchitecture(hidden=64),
}


def stream_parameter_count(arch: InrArchitecture, stream: str) -> int:
    """Closed-form entry count of one stream (head excluded)."""
    H = arch.hidden
    if stream == "space":
        n = 4 * H + (arch.space_layers - 1) * (H + 1) * H
        return 2 * n if arch.mode == "complex" else n
    if stream == "time":
        return 2 * H + (arch.time_layers - 1) * (H + 1) * H
    if stream == "combined":
        return (2 * H + 1) * H + (arch.combined_layers - 1) * (H + 1) * H
    if stream == "head":
        return H + 1
    raise ValueError(f"unknown stream {stream!r}")


def parameter_count(arch: InrArchitecture) -> int:
    return sum(stream_parameter_count(arch, s) for s in ("space", "time", "combined", "head"))


@dataclass
class InrParams:
    arch: InrArchitecture
    space: list[np.ndarray]
    time: list[np.ndarray]
    combined: list[np.ndarray]
    head: np.ndarray
    space_imag: list[np.ndarray] = field(default_factory=list)

    def arrays(self) -> list[np.ndarray]:
        """All matrices in file order."""
        return [*self.space, *self.space_imag, *self.time, *self.combined, self.head]

    def count(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "InrParams":
        return InrParams(self.arch, [a.copy() for a in self.space], [a.copy() for a in self.time],
                         [a.copy() for a in self.combined], self.head.copy(),
                         [a.copy() for a in self.space_imag])

    def astype(self, dtype) -> "InrParams":
        cast = lambda xs: [np.ascontiguousarray(a, dtype=dtype) for a in xs]
        return InrParams(self.arch, cast(self.space), cast(self.time), cast(self.combined),
                         np.ascontiguousarray(self.head, dtype=dtype), cast(self.space_imag))

    @property
    def dtype(self):
        return self.head.dtype


def _uniform_layer(rng, shape, scale, dtype):
    P = np.zeros(shape, dtype=dtype)
    bound = 1.0 / np.sqrt(shape[0] - 1)
    P[:-1] = rng.uniform(-bound, bound, size=(shape[0] - 1, shape[1])) * scale
    return P


def build_inr(arch: InrArchitecture, rng: np.random.Generator, dtype=np.float32,
              lift_gain: float = 0.5) -> InrParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases.

    Wavelet-stream hidden weights are further divided by ``omega0`` to keep
    the initial frequency content low. The spatial lift is scaled by
    ``lift_gain`` instead so that coordinate features start out localized.
    """
    g = 1.0 / arch.omega0

    def space_layers():
        return [_uniform_layer(rng, s, lift_gain if k == 0 else g, dtype)
                for k, s in enumerate(arch.space_shapes)]

    space = space_layers()
    space_imag = space_layers() if arch.mode == "complex" else []
    time = [_uniform_layer(rng, s, 1.0, dtype) for s in arch.time_shapes]
    combined = [_uniform_layer(rng, s, g, dtype) for s in arch.combined_shapes]
    head = _uniform_layer(rng, arch.head_shape, 1.0, dtype)
    return InrParams(arch, space, time, combined, head, space_imag)


# --------------------------------------------------------------------------
# forward pass


class _Bound:
    """Tensors wrapping an ``InrParams`` (sharing memory) for one pass."""

    def __init__(self, params: InrParams, requires_grad: bool):
        wrap = lambda xs: [dc.Tensor(a, requires_grad=requires_grad) for a in xs]
        self.space = wrap(params.space)
        self.space_imag = wrap(params.space_imag)
        self.time = wrap(params.time)
        self.combined = wrap(params.combined)
        self.head = dc.Tensor(params.head, requires_grad=requires_grad)

    def tensors(self) -> list[dc.Tensor]:
        return [*self.space, *self.space_imag, *self.time, *self.combined, self.head]


def _space_stream(arch, b: _Bound, coords, tape):
    w, s = arch.omega0, arch.s0
    if arch.mode == "complex":
        y = dc.complex_gabor(dc.complex_linear(b.space[0], b.space_imag[0], coords, tape), w, s, tape)
        for Pr, Pi in zip(b.space[1:], b.space_imag[1:]):
            u = dc.complex_linear(Pr, Pi, y, tape)
            y = dc.add(dc.complex_gabor(u, w, s, tape), y, tape)
        return dc.take_columns(y, 0, arch.hidden, tape)
    y = dc.gabor(dc.linear(b.space[0], coords, tape), w, s, tape)
    for P in b.space[1:]:
        y = dc.add(dc.gabor(dc.linear(P, y, tape), w, s, tape), y, tape)
    return y


def _time_stream(arch, b: _Bound, times, tape):
    y = dc.relu(dc.linear(b.time[0], times, tape), tape)
    for P in b.time[1:]:
        y = dc.add(dc.relu(dc.linear(P, y, tape), tape), y, tape)
    return y


def _combined_stream(arch, b: _Bound, ys, yt, tape):
    w, s = arch.omega0, arch.s0
    y = dc.gabor(dc.linear(b.combined[0], dc.concat_columns(ys, yt, tape), tape), w, s, tape)
    for P in b.combined[1:]:
        y = dc.add(dc.gabor(dc.linear(P, y, tape), w, s, tape), y, tape)
    return dc.linear(b.head, y, tape)


def _check_inputs(coords, times, dtype):
    coords = np.asarray(coords, dtype=dtype).reshape(-1, 3)
    times = np.asarray(times, dtype=dtype).reshape(-1, 1)
    if coords.shape[0] != times.shape[0]:
        raise dc.DimensionError(f"{coords.shape[0]} coordinates but {times.shape[0]} times")
    if not (np.all(np.isfinite(coords)) and np.all(np.isfinite(times))):
        raise dc.NumericError("INR inputs must be finite")
    return coords, times


def inr_forward(params: InrParams, coords, times, tape: dc.Tape | None = None,
                bound: _Bound | None = None) -> dc.Tensor:
    """Evaluate the INR at normalized ``coords`` (N x 3) and ``times`` (N,).

    Returns an ``(N, 1)`` tensor. Pass a tape plus a ``bound`` whose tensors
    require grad to differentiate with respect to the parameters.
    """
    coords, times = _check_inputs(coords, times, params.dtype)
    b = bound if bound is not None else _Bound(params, requires_grad=False)
    ys = _space_stream(params.arch, b, coords, tape)
    yt = _time_stream(params.arch, b, times, tape)
    return _combined_stream(params.arch, b, ys, yt, tape)


def stream_features(params: InrParams, coords=None, times=None):
    """Spatial and/or temporal stream outputs (no combination)."""
    b = _Bound(params, requires_grad=False)
    ys = yt = None
    if coords is not None:
        c = np.asarray(coords, dtype=params.dtype).reshape(-1, 3)
        ys = _space_stream(params.arch, b, c, None).value
    if times is not None:
        t = np.asarray(times, dtype=params.dtype).reshape(-1, 1)
        yt = _time_stream(params.arch, b, t, None).value
    return ys, yt


def evaluate_grid(params: InrParams, ages, grid: Grid, chunk: int = 8192) -> np.ndarray:
    """Intensities (flat, x-fastest) for every age in ``ages``.

    The spatial stream is evaluated once and reused across ages.
    """
    ages = np.atleast_1d(np.asarray(ages, dtype=np.float64))
    coords = grid.coordinates(params.dtype)
    ys, _ = stream_features(params, coords=coords)
    _, yt = stream_features(params, times=normalize_age(ages))
    b = _Bound(params, requires_grad=False)
    out = np.empty((ages.size, coords.shape[0]), dtype=params.dtype)
    for k in range(ages.size):
        for s in range(0, coords.shape[0], chunk):
            block = ys[s:s + chunk]
            ytb = np.broadcast_to(yt[k], block.shape)
            out[k, s:s + chunk] = _combined_stream(params.arch, b, block, ytb, None).value[:, 0]
    return out


def reconstruct_volume(params: InrParams, age: float, grid: Grid = Grid()) -> Volume:
    """Render the INR at chronological ``age`` on ``grid``, clamped to [-1, 1]."""
    flat = evaluate_grid(params, [age], grid)[0]
    return volume_from_flat(np.clip(flat, -1.0, 1.0), grid.dims, grid.spacing, float(age))


# --------------------------------------------------------------------------
# fitting


@dataclass
class Scan:
    """One training image: normalized coordinates, intensities and its age.

    ``coords`` may be shared between scans on the same grid.
    """

    coords: np.ndarray
    values: np.ndarray
    age: float

    def __post_init__(self):
        if self.coords.shape != (self.values.shape[0], 3):
            raise dc.DimensionError(f"coords {self.coords.shape} vs values {self.values.shape}")

    @classmethod
    def from_volume(cls, v: Volume, age: float | None = None, coords: np.ndarray | None = None) -> "Scan":
        if coords is None:
            coords = Grid(v.dims, v.spacing).coordinates(np.float32)
        return cls(coords, flat_intensities(v).astype(np.float32), float(v.age if age is None else age))


@dataclass
class FitResult:
    params: InrParams
    losses: list[float]


def _sample(rng, n, fraction):
    k = max(1, int(round(fraction * n)))
    return rng.choice(n, size=k, replace=False)


def _draw(rng, scan: Scan, fraction: float, dtype):
    idx = _sample(rng, scan.values.shape[0], fraction)
    return (scan.coords[idx].astype(dtype, copy=False),
            np.full(idx.size, normalize_age(scan.age), dtype=dtype),
            scan.values[idx].astype(dtype, copy=False))


def _cat(parts):
    return tuple(np.concatenate(p) for p in zip(*parts))


def _adam_fit(params: InrParams, batches, iterations: int, lr: float, lr_floor: float) -> list[float]:
    """Adam over ``batches`` with a cosine decay from ``lr`` to ``lr * lr_floor``."""
    bound = _Bound(params, requires_grad=True)
    tensors = bound.tensors()
    arrays = [t.value for t in tensors]
    state = dc.AdamState(lr=lr)
    losses = []
    for k, (coords, times, target) in enumerate(batches):
        state.lr = lr * (lr_floor + (1.0 - lr_floor) * 0.5 * (1.0 + np.cos(np.pi * k / iterations)))
        tape = dc.Tape()
        for t in tensors:
            t.zero_grad()
        pred = inr_forward(params, coords, times, tape, bound)
        loss = dc.mse_loss(pred, target.reshape(-1, 1), tape)
        tape.backward(loss)
        dc.adam_step(arrays, [t.grad for t in tensors], state)
        losses.append(float(loss.value))
    return losses


def pretrain_init(subjects: list[list[Scan]], arch: InrArchitecture, rng: np.random.Generator,
                  iterations: int = 250, batch_subjects: int = 3, voxel_fraction: float = 0.001,
                  lr: float = 1e-3, lr_floor: float = 0.05, init_params: InrParams | None = None) -> FitResult:
    """Shared initialization fitted to the average of a training cohort.

    Each iteration draws ``batch_subjects`` subjects, one scan per subject,
    and a fresh voxel subset per scan.
    """
    subjects = [s for s in subjects if s]
    if not subjects:
        raise ValueError("pretraining needs at least one subject with scans")
    params = build_inr(arch, rng) if init_params is None else init_params.copy()
    dtype = params.dtype

    def batches():
        for _ in range(iterations):
            picks = rng.choice(len(subjects), size=min(batch_subjects, len(subjects)), replace=False)
            parts = []
            for i in picks:
                scans = subjects[i]
                parts.append(_draw(rng, scans[int(rng.integers(len(scans)))], voxel_fraction, dtype))
            yield _cat(parts)

    losses = _adam_fit(params, batches(), iterations, lr, lr_floor)
    return FitResult(params, losses)


def finetune_subject(theta_star: InrParams, scans: list[Scan], rng: np.random.Generator,
                     iterations: int = 100, voxel_fraction: float = 0.01, lr: float = 5e-4,
                     lr_floor: float = 0.05) -> FitResult:
    """Adapt a copy of ``theta_star`` to one subject's scans.

    Every iteration samples ``voxel_fraction`` of the voxels of every scan.
    """
    if not scans:
        raise ValueError("finetuning needs at least one scan")
    params = theta_star.copy()

    def batches():
        for _ in range(iterations):
            yield _cat([_draw(rng, scan, voxel_fraction, params.dtype) for scan in scans])

    losses = _adam_fit(params, batches(), iterations, lr, lr_floor)
    return FitResult(params, losses)


def scans_mse(params: InrParams, scans: list[Scan]) -> float:
    """Mean squared error over every voxel of every scan."""
    total, n = 0.0, 0
    for s in scans:
        pred = predict(params, s.coords, np.full(s.values.shape[0], normalize_age(s.age)))
        d = pred.astype(np.float64) - s.values
        total += float(np.sum(d * d))
        n += d.size
    return total / n


def predict(params: InrParams, coords, times, chunk: int = 16384) -> np.ndarray:
    """Forward pass in chunks; returns a flat array of intensities."""
    coords, times = _check_inputs(coords, times, params.dtype)
    b = _Bound(params, requires_grad=False)
    out = np.empty(coords.shape[0], dtype=params.dtype)
    for s in range(0, coords.shape[0], chunk):
        out[s:s + chunk] = inr_forward(params, coords[s:s + chunk], times[s:s + chunk], None, b).value[:, 0]
    return out


# --------------------------------------------------------------------------
# INRW0001 persistence


def write_inr(params: InrParams, path) -> None:
    a = params.arch
    header = _HEADER.pack(INR_MAGIC, a.hidden, a.space_layers, a.time_layers, a.combined_layers,
                          _MODES[a.mode], a.omega0, a.s0)
    body = b"".join(np.asarray(m, dtype="<f4").tobytes(order="C") for m in params.arrays())
    Path(path).write_bytes(header + body)


def read_inr_header(path) -> InrArchitecture:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    return _parse_header(raw, path)


def _parse_header(raw: bytes, path) -> InrArchitecture:
    if len(raw) < _HEADER.size:
        raise InrFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, H, ls, lt, lc, mode, w, s = _HEADER.unpack_from(raw, 0)
    if magic != INR_MAGIC:
        raise InrFormatError(f"{path}: bad magic {magic!r}, expected {INR_MAGIC!r}")
    modes = {v: k for k, v in _MODES.items()}
    if mode not in modes:
        raise InrFormatError(f"{path}: unknown activation mode byte {mode}")
    try:
        return InrArchitecture(H, ls, lt, lc, float(w), float(s), modes[mode])
    except ValueError as exc:
        raise InrFormatError(f"{path}: invalid architecture header: {exc}") from exc


def read_inr(path, expected: InrArchitecture | None = None) -> InrParams:
    raw = Path(path).read_bytes()
    arch = _parse_header(raw, path)
    if expected is not None and arch != expected:
        raise InrFormatError(f"{path}: architecture {arch} does not match expected {expected}")
    shapes = list(arch.space_shapes)
    if arch.mode == "complex":
        shapes += arch.space_shapes
    shapes += arch.time_shapes + arch.combined_shapes + [arch.head_shape]
    need = _HEADER.size + 4 * sum(r * c for r, c in shapes)
    if len(raw) != need:
        raise InrFormatError(f"{path}: {len(raw)} bytes, expected {need} for {arch}")
    off = _HEADER.size
    mats = []
    for r, c in shapes:
        mats.append(np.frombuffer(raw, dtype="<f4", count=r * c, offset=off).reshape(r, c).astype(np.float32))
        off += 4 * r * c
    ns = arch.space_layers
    space, rest = mats[:ns], mats[ns:]
    space_imag = []
    if arch.mode == "complex":
        space_imag, rest = rest[:ns], rest[ns:]
    time, rest = rest[:arch.time_layers], rest[arch.time_layers:]
    combined, head = rest[:arch.combined_layers], rest[arch.combined_layers]
    return InrParams(arch, space, time, combined, head, space_imag)

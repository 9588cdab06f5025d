"""Pipeline configuration, presets and seed derivation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .inr import InrArchitecture
from .phantom import Grid, PhantomSettings
from .trajectory import DEFAULT_NOISE_STD, DEFAULT_STEP, DEFAULT_T_END_OFFSET


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CohortConfig:
    subjects: int = 30
    scheme: str = "irregular"
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ode_noise_std: float = DEFAULT_NOISE_STD
    ode_step: float = DEFAULT_STEP
    t_end_offset: float = DEFAULT_T_END_OFFSET
    cortex_thickness: float = 4.0
    thinning_rate: float = 0.06
    min_thickness: float = 1.0
    ventricle_growth: float = 0.008
    texture_amplitude: float = 0.15
    image_noise_std: float = 0.02

    @property
    def grid(self) -> Grid:
        return Grid(tuple(self.dims), tuple(self.spacing))

    @property
    def phantom(self) -> PhantomSettings:
        return PhantomSettings(self.cortex_thickness, self.thinning_rate, self.min_thickness,
                               self.ventricle_growth, self.texture_amplitude, self.image_noise_std)


@dataclass(frozen=True)
class InrConfig:
    hidden: int = 64
    space_layers: int = 5
    time_layers: int = 5
    combined_layers: int = 3
    omega0: float = 20.0
    s0: float = 10.0
    mode: str = "real"
    lift_gain: float = 0.5

    @property
    def arch(self) -> InrArchitecture:
        return InrArchitecture(self.hidden, self.space_layers, self.time_layers, self.combined_layers,
                               self.omega0, self.s0, self.mode)


@dataclass(frozen=True)
class FitConfig:
    pretrain_iterations: int = 250
    pretrain_voxel_fraction: float = 0.001
    batch_subjects: int = 3
    pretrain_lr: float = 1e-3
    finetune_iterations: int = 300
    finetune_voxel_fraction: float = 0.01
    finetune_lr: float = 5e-4
    lr_floor: float = 0.05


@dataclass(frozen=True)
class ClassifierConfig:
    widths: tuple[int, ...] = (128, 256, 512)
    head_hidden: int = 64
    epochs: int = 100
    batch_size: int = 8
    dropout: float = 0.2
    lr: float = 1e-3
    selections: tuple[str, ...] = ("s", "t", "s+c", "t+c", "s+t+c")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    preset: str = "desk"
    out: str = "runs/desk"
    cohort: CohortConfig = field(default_factory=CohortConfig)
    inr: InrConfig = field(default_factory=InrConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of everything that shapes the artifacts (output dir excluded)."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def validate(self) -> "PipelineConfig":
        c = self.cohort
        if c.subjects < 3 or c.subjects % 3:
            raise ConfigError(f"subjects must be a positive multiple of 3, got {c.subjects}")
        if c.scheme not in ("regular", "irregular"):
            raise ConfigError(f"scheme must be regular or irregular, got {c.scheme!r}")
        if len(c.dims) != 3 or min(c.dims) < 2:
            raise ConfigError(f"grid dims must be three integers >= 2, got {c.dims}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        f = self.fit
        for name in ("pretrain_voxel_fraction", "finetune_voxel_fraction"):
            v = getattr(f, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if f.pretrain_iterations < 1 or f.finetune_iterations < 1 or f.batch_subjects < 1:
            raise ConfigError("iteration counts and batch size must be positive")
        if self.classifier.epochs < 1 or self.classifier.batch_size < 2:
            raise ConfigError("classifier needs epochs >= 1 and batch_size >= 2")
        if not 0 <= self.classifier.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        try:
            self.inr.arch
            from .weightspace import parse_selection
            for s in self.classifier.selections:
                parse_selection(s)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


PRESETS = {
    "desk": PipelineConfig(),
    "paper": PipelineConfig(
        preset="paper",
        out="runs/paper",
        cohort=CohortConfig(subjects=450, dims=(147, 183, 169)),
        inr=InrConfig(hidden=512),
        fit=FitConfig(finetune_iterations=100, finetune_voxel_fraction=0.01),
        classifier=ClassifierConfig(widths=(512, 1024, 2048), head_hidden=256),
    ),
}

_SECTIONS = {"cohort": CohortConfig, "inr": InrConfig, "fit": FitConfig, "classifier": ClassifierConfig}


def _apply(section_obj, values: dict, where: str):
    known = {f.name: f for f in fields(section_obj)}
    updates = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"unknown key {where}.{k}")
        cur = getattr(section_obj, k)
        if isinstance(cur, tuple):
            v = tuple(v)
        elif isinstance(cur, bool) or not isinstance(cur, (int, float)):
            pass
        elif isinstance(cur, int) and not isinstance(v, int):
            raise ConfigError(f"{where}.{k} must be an integer")
        elif isinstance(cur, float):
            if not isinstance(v, (int, float)):
                raise ConfigError(f"{where}.{k} must be a number")
            v = float(v)
        updates[k] = v
    return replace(section_obj, **updates)


def from_mapping(data: dict, preset: str | None = None) -> PipelineConfig:
    name = preset or data.get("preset", "desk")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    cfg = PRESETS[name]
    top = {}
    for k, v in data.items():
        if k in _SECTIONS:
            if not isinstance(v, dict):
                raise ConfigError(f"[{k}] must be a table")
            cfg = replace(cfg, **{k: _apply(getattr(cfg, k), v, k)})
        elif k in ("seed", "out", "preset"):
            top[k] = v
        else:
            raise ConfigError(f"unknown top-level key {k!r}")
    if "seed" in top and not isinstance(top["seed"], int):
        raise ConfigError("seed must be an integer")
    top["preset"] = name
    return replace(cfg, **top).validate()


def load_config(path=None, preset: str | None = None, **overrides) -> PipelineConfig:
    """Preset defaults, then the TOML file, then keyword overrides."""
    data = {}
    if path is not None:
        try:
            data = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    cfg = from_mapping(data, preset)
    scheme = overrides.pop("scheme", None)
    if scheme is not None:
        cfg = replace(cfg, cohort=replace(cfg.cohort, scheme=scheme))
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def derive_seed(master: int, role: str, index: int | str = 0) -> int:
    """Child seed = first 8 bytes of blake2b(master | role | index)."""
    h = hashlib.blake2b(f"{int(master)}|{role}|{index}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") >> 1

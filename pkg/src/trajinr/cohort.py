"""Cohort assembly with counterfactual test pairs, and the JSON manifest."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import CohortConfig, derive_seed
from .phantom import Morphology, Volume, generate_phantom, read_volume, sample_morphology, write_volume
from .trajectory import AD_LIKE, HEALTHY, DeviationParams, generate_acquisition_ages, \
    integrate_brain_age, sample_deviation_params

MANIFEST_NAME = "manifest.json"
YEARLY_AGES = np.arange(50.0, 91.0)


@dataclass
class ScanRef:
    path: str
    chron_age: float
    bio_age: float


@dataclass
class LongitudinalRecord:
    subject_id: str
    label: str
    split: str
    morphology: Morphology
    params: DeviationParams
    scans: list[ScanRef]
    curve_ages: list[float]
    curve_bio_ages: list[float]

    @property
    def key(self) -> str:
        return f"{self.subject_id}-{self.label}"

    @property
    def y(self) -> int:
        return int(self.label == AD_LIKE)

    def bio_age(self, chron_age: float) -> float:
        return float(np.interp(chron_age, self.curve_ages, self.curve_bio_ages))

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "label": self.label,
            "split": self.split,
            "morphology": self.morphology.to_dict(),
            "params": self.params.to_dict(),
            "scans": [{"path": s.path, "chron_age": s.chron_age, "bio_age": s.bio_age} for s in self.scans],
            "bio_age_curve": {"ages": self.curve_ages, "bio_ages": self.curve_bio_ages},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LongitudinalRecord":
        return cls(d["subject_id"], d["label"], d["split"], Morphology.from_dict(d["morphology"]),
                   DeviationParams(**d["params"]),
                   [ScanRef(s["path"], float(s["chron_age"]), float(s["bio_age"])) for s in d["scans"]],
                   list(d["bio_age_curve"]["ages"]), list(d["bio_age_curve"]["bio_ages"]))


@dataclass
class CohortManifest:
    config: dict
    config_digest: str
    seed: int
    scheme: str
    train: list[LongitudinalRecord]
    test: list[LongitudinalRecord]
    root: Path | None = None

    @property
    def records(self) -> list[LongitudinalRecord]:
        return self.train + self.test

    @property
    def cohort_config(self) -> CohortConfig:
        c = dict(self.config)
        for k in ("dims", "spacing"):
            c[k] = tuple(c[k])
        return CohortConfig(**c)

    def volume_path(self, scan: ScanRef) -> Path:
        return (self.root or Path(".")) / scan.path

    def load_volume(self, scan: ScanRef) -> Volume:
        return read_volume(self.volume_path(scan))

    def to_json(self) -> str:
        return json.dumps({
            "config": self.config,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "scheme": self.scheme,
            "train": [r.to_dict() for r in self.train],
            "test": [r.to_dict() for r in self.test],
        }, indent=1, sort_keys=True)

    def write(self, directory) -> Path:
        p = Path(directory) / MANIFEST_NAME
        p.write_text(self.to_json())
        return p


def read_manifest(directory) -> CohortManifest:
    directory = Path(directory)
    path = directory / MANIFEST_NAME if directory.is_dir() else directory
    d = json.loads(path.read_text())
    return CohortManifest(d["config"], d["config_digest"], int(d["seed"]), d["scheme"],
                          [LongitudinalRecord.from_dict(r) for r in d["train"]],
                          [LongitudinalRecord.from_dict(r) for r in d["test"]], path.parent)


def _record(subject_id, label, split, morph, ages, cfg: CohortConfig, seed: int,
            rng_params: np.random.Generator) -> LongitudinalRecord:
    params = sample_deviation_params(label, rng_params, cfg.t_end_offset, cfg.ode_noise_std)
    grid_ages = np.union1d(YEARLY_AGES, ages)
    curve = integrate_brain_age(50.0, grid_ages, params, seed=derive_seed(seed, "ode", f"{subject_id}-{label}"),
                                step=cfg.ode_step)
    lookup = dict(zip(curve.ages.tolist(), curve.brain_ages.tolist()))
    scans = [ScanRef(f"volumes/{subject_id}-{label}-{a:g}.vol", float(a), float(lookup[a])) for a in ages]
    return LongitudinalRecord(subject_id, label, split, morph, params, scans,
                              curve.ages.tolist(), curve.brain_ages.tolist())


def render_scan(record: LongitudinalRecord, chron_age: float, cfg: CohortConfig) -> Volume:
    """Ground-truth volume of ``record`` at ``chron_age``."""
    return generate_phantom(record.morphology, record.bio_age(chron_age), cfg.grid, cfg.phantom,
                            acquisition_age=chron_age)


def build_cohort(cfg: CohortConfig, seed: int, directory, config_digest: str = "") -> CohortManifest:
    """Sample, render and write a cohort; returns the manifest (also written).

    The first two thirds of the subjects form the training split with one
    label each (balanced, shuffled); each remaining subject appears in the
    test split twice, once per label, sharing morphology and scan ages.
    """
    if cfg.subjects % 3:
        raise ValueError(f"subject count must be divisible by 3, got {cfg.subjects}")
    directory = Path(directory)
    (directory / "volumes").mkdir(parents=True, exist_ok=True)
    n_train = 2 * cfg.subjects // 3
    label_rng = np.random.default_rng(derive_seed(seed, "train-labels"))
    train_labels = label_rng.permutation([HEALTHY, AD_LIKE] * (n_train // 2) + [HEALTHY] * (n_train % 2))
    train, test = [], []
    for i in range(cfg.subjects):
        sid = f"s{i:03d}"
        morph = sample_morphology(np.random.default_rng(derive_seed(seed, "morphology", sid)), cfg.phantom,
                                  seed=derive_seed(seed, "noise", sid) % (2**31))
        sched = generate_acquisition_ages(cfg.scheme, np.random.default_rng(derive_seed(seed, "schedule", sid)))
        is_train = i < n_train
        labels = [str(train_labels[i])] if is_train else [HEALTHY, AD_LIKE]
        for lab in labels:
            rng_p = np.random.default_rng(derive_seed(seed, "deviation", f"{sid}-{lab}"))
            rec = _record(sid, lab, "train" if is_train else "test", morph, sched.ages, cfg, seed, rng_p)
            for s in rec.scans:
                v = generate_phantom(morph, s.bio_age, cfg.grid, cfg.phantom, acquisition_age=s.chron_age)
                try:
                    write_volume(v, directory / s.path)
                except OSError as exc:
                    raise OSError(f"cannot write volume {directory / s.path}: {exc}") from exc
            (train if is_train else test).append(rec)
    manifest = CohortManifest(cohort_config_dict(cfg), config_digest, int(seed), cfg.scheme, train, test, directory)
    manifest.write(directory)
    return manifest


def cohort_config_dict(cfg: CohortConfig) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

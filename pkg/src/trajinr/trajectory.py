"""Brain-age deviation ODE, parameter priors and acquisition schedules."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

HEALTHY = "healthy"
AD_LIKE = "ad_like"
LABELS = (HEALTHY, AD_LIKE)

REGULAR_AGES = (50.0, 58.0, 67.0, 75.0)
IRREGULAR_RANGE = (50, 75)

# Dampening onset relative to t_start. With the AD-like mean parameters this
# puts BA(80) - 80 near 10.5 years while keeping BA(t) >= t up to age 90.
DEFAULT_T_END_OFFSET = 18.5
DEFAULT_NOISE_STD = 0.05
DEFAULT_STEP = 0.05
MIN_RATE = 0.01

# (mean, std) of alpha, r and t_start per label
PRIORS = {
    AD_LIKE: {"alpha": (1.10, 0.05), "r": (0.25, 0.05), "t_start": (55.0, 2.5)},
    HEALTHY: {"alpha": (0.00, 0.10), "r": (0.25, 0.05), "t_start": (55.0, 1.0)},
}


@dataclass(frozen=True)
class DeviationParams:
    alpha: float
    r: float
    t_start: float
    t_end: float
    noise_std: float = DEFAULT_NOISE_STD
    label: str = HEALTHY

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ValueError(f"t_start ({self.t_start}) must precede t_end ({self.t_end})")
        if not self.r > 0:
            raise ValueError(f"transition rate r must be positive, got {self.r}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be non-negative, got {self.noise_std}")
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def mean(cls, label: str, t_end_offset: float = DEFAULT_T_END_OFFSET, noise_std: float = 0.0):
        """Prior means for ``label``; noise off unless requested."""
        pr = PRIORS[label]
        ts = pr["t_start"][0]
        return cls(pr["alpha"][0], pr["r"][0], ts, ts + t_end_offset, noise_std, label)


@dataclass(frozen=True)
class BrainAgeCurve:
    ages: np.ndarray
    brain_ages: np.ndarray
    params: DeviationParams
    seed: int | None


@dataclass(frozen=True)
class AcquisitionSchedule:
    scheme: str
    ages: tuple[float, ...]
    seed: int | None = None


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def brain_age_rate(t, p: DeviationParams):
    """Deterministic part of dBA/dt (no noise term)."""
    return 1.0 + p.alpha * (_sigmoid(p.r * (t - p.t_start)) - 2.0 * _sigmoid(p.r * (t - p.t_end)))


def _rk4_excess(t, h, p):
    # integrates dBA/dt - 1; the rate does not depend on BA, so k3 == k2
    k1 = brain_age_rate(t, p) - 1.0
    k2 = brain_age_rate(t + 0.5 * h, p) - 1.0
    k4 = brain_age_rate(t + h, p) - 1.0
    return h * (k1 + 4.0 * k2 + k4) / 6.0


def integrate_brain_age(t0: float, query_ages, p: DeviationParams, seed: int | None = None,
                        step: float = DEFAULT_STEP) -> BrainAgeCurve:
    """Integrate BA from ``BA(t0) = t0`` and report it at ``query_ages``.

    RK4 on the deterministic rate plus an Euler-Maruyama increment
    ``sqrt(h) * N(0, noise_std^2)`` per step. Steps are cut short to land
    exactly on each query age. The gap ``BA - t`` is what gets integrated,
    so a zero-strength curve reproduces chronological age exactly.
    """
    q = np.asarray(query_ages, dtype=np.float64)
    if q.ndim != 1 or q.size == 0:
        raise ValueError("query_ages must be a non-empty 1-D sequence")
    if np.any(np.diff(q) < 0):
        raise ValueError(f"query_ages must be sorted, got {q.tolist()}")
    if q[0] < t0:
        raise ValueError(f"first query age {q[0]} precedes t0={t0}")
    if not step > 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(seed) if p.noise_std > 0 else None
    t, gap = float(t0), 0.0
    out = np.empty_like(q)
    for k, target in enumerate(q):
        while target - t > 1e-12:
            h = min(step, target - t)
            gap += _rk4_excess(t, h, p)
            if rng is not None:
                gap += np.sqrt(h) * rng.normal(0.0, p.noise_std)
            t = t + h if target - (t + h) > 1e-12 else float(target)
        out[k] = target + gap
    return BrainAgeCurve(q, out, p, seed)


def sample_deviation_params(label: str, rng: np.random.Generator,
                            t_end_offset: float = DEFAULT_T_END_OFFSET,
                            noise_std: float = DEFAULT_NOISE_STD) -> DeviationParams:
    if label not in PRIORS:
        raise ValueError(f"unknown label {label!r}")
    pr = PRIORS[label]
    alpha = rng.normal(*pr["alpha"])
    r = max(rng.normal(*pr["r"]), MIN_RATE)
    t_start = rng.normal(*pr["t_start"])
    return DeviationParams(float(alpha), float(r), float(t_start), float(t_start + t_end_offset),
                           noise_std, label)


def generate_acquisition_ages(scheme: str, rng: np.random.Generator | None = None) -> AcquisitionSchedule:
    if scheme == "regular":
        return AcquisitionSchedule("regular", REGULAR_AGES)
    if scheme == "irregular":
        if rng is None:
            raise ValueError("irregular schedules need an rng")
        n = int(rng.integers(3, 6))
        lo, hi = IRREGULAR_RANGE
        ages = np.sort(rng.choice(np.arange(lo, hi + 1), size=n, replace=False))
        return AcquisitionSchedule("irregular", tuple(float(a) for a in ages))
    raise ValueError(f"unknown sampling scheme {scheme!r}")

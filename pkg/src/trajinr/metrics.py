"""Volume quality metrics, classification accuracy and report tables."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .phantom import Volume
from .trajectory import LABELS

DATA_RANGE = 2.0
GROUPS = ("training", "interpolation", "extrapolation")
GROUP_TITLES = {"training": "Training Data", "interpolation": "Interpolation",
                "extrapolation": "Extrapolation"}
LABEL_TITLES = {"healthy": "Healthy Subjects", "ad_like": "AD-Like Subjects"}


def _data(v):
    return np.asarray(v.data if isinstance(v, Volume) else v, dtype=np.float64)


def mse(a, b) -> float:
    x, y = _data(a), _data(b)
    if x.shape != y.shape:
        raise ValueError(f"volume dims differ: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.mean(d * d))


def psnr(mse_value: float, data_range: float = DATA_RANGE) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for a perfect match."""
    if mse_value < 0:
        raise ValueError(f"mse must be non-negative, got {mse_value}")
    if mse_value == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse_value)


def ssim3d(a, b, window: int = 7, k1: float = 0.01, k2: float = 0.03,
           data_range: float = DATA_RANGE) -> float:
    """Mean SSIM over every fully contained cubic window.

    Uniform window weights, population (biased) local variances.
    """
    x, y = _data(a), _data(b)
    if x.shape != y.shape:
        raise ValueError(f"volume dims differ: {x.shape} vs {y.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd size, got {window}")
    if min(x.shape) < window:
        raise ValueError(f"window {window} larger than volume {x.shape}")
    r = window // 2
    crop = tuple(slice(r, n - r) for n in x.shape)

    def local_mean(v):
        return uniform_filter(v, size=window, mode="reflect")[crop]

    mx, my = local_mean(x), local_mean(y)
    sxx = local_mean(x * x) - mx * mx
    syy = local_mean(y * y) - my * my
    sxy = local_mean(x * y) - mx * my
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.size == 0 or p.shape != y.shape:
        raise ValueError(f"need equal-length non-empty inputs, got {p.shape} and {y.shape}")
    return 100.0 * float(np.mean(p == y))


def compression_ratio(n_params: int, voxel_counts: Iterable[int]) -> float:
    """INR parameter count over the number of voxels it represents."""
    return n_params / float(sum(voxel_counts))


def age_group(age: float, training_ages: Sequence[float]) -> str:
    t = np.asarray(training_ages, dtype=float)
    if np.any(np.isclose(t, age, atol=1e-9)):
        return "training"
    if t.min() <= age <= t.max():
        return "interpolation"
    return "extrapolation"


# --------------------------------------------------------------------------
# reports


@dataclass
class CellMetrics:
    subject_id: str
    label: str
    age: float
    group: str
    mse: float
    psnr: float
    ssim: float


@dataclass
class ReconstructionReport:
    cells: list[CellMetrics] = field(default_factory=list)
    ssim_window: int = 7

    def add(self, cell: CellMetrics) -> None:
        self.cells.append(cell)

    def summary(self) -> dict[tuple[str, str], dict[str, float]]:
        """Mean MSE/PSNR/SSIM and cell count per (group, label)."""
        out = {}
        ordered = sorted(self.cells, key=lambda c: (c.subject_id, c.label, c.age))
        for g in GROUPS:
            for lab in LABELS:
                sel = [c for c in ordered if c.group == g and c.label == lab]
                if not sel:
                    out[(g, lab)] = {"mse": math.nan, "psnr": math.nan, "ssim": math.nan, "count": 0}
                    continue
                out[(g, lab)] = {
                    "mse": float(np.mean([c.mse for c in sel])),
                    "psnr": float(np.mean([c.psnr for c in sel])),
                    "ssim": float(np.mean([c.ssim for c in sel])),
                    "count": len(sel),
                }
        return out

    def write_csv(self, path) -> None:
        s = self.summary()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "label", "mse", "psnr", "ssim", "count"])
            for (g, lab), m in s.items():
                w.writerow([g, lab, f"{m['mse']:.6e}", f"{m['psnr']:.4f}", f"{m['ssim']:.5f}", m["count"]])

    def write_cells_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_id", "label", "age", "group", "mse", "psnr", "ssim"])
            for c in sorted(self.cells, key=lambda c: (c.subject_id, c.label, c.age)):
                w.writerow([c.subject_id, c.label, f"{c.age:g}", c.group, f"{c.mse:.6e}",
                            f"{c.psnr:.4f}", f"{c.ssim:.5f}"])

    def to_markdown(self) -> str:
        s = self.summary()
        head = ("| Reconstruction | " + " | ".join(
            f"{LABEL_TITLES[l]} MSE | PSNR | SSIM" for l in LABELS) + " |")
        lines = [head, "|" + "---|" * (1 + 3 * len(LABELS))]
        for g in GROUPS:
            cells = []
            for lab in LABELS:
                m = s[(g, lab)]
                cells += [f"{m['mse'] * 1e3:.2f} x10^-3", f"{m['psnr']:.1f}", f"{m['ssim']:.3f}"]
            lines.append(f"| {GROUP_TITLES[g]} | " + " | ".join(cells) + " |")
        lines.append("")
        lines.append(f"SSIM: uniform {self.ssim_window}^3 window, K1=0.01, K2=0.03, L=2.")
        return "\n".join(lines) + "\n"


@dataclass
class ClassificationRow:
    selection: str
    entries: int
    accuracy: float


@dataclass
class ClassificationReport:
    scheme: str
    rows: list[ClassificationRow] = field(default_factory=list)

    def accuracy_of(self, selection: str) -> float:
        for r in self.rows:
            if r.selection == selection:
                return r.accuracy
        raise KeyError(selection)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scheme", "selection", "input_size", "accuracy"])
            for r in self.rows:
                w.writerow([self.scheme, r.selection, r.entries, f"{r.accuracy:.2f}"])

    def to_markdown(self) -> str:
        lines = [f"| Model | Input Size ({self.scheme}) | Accuracy |", "|---|---|---|"]
        for r in self.rows:
            name = "+".join(f"P_{p}" for p in r.selection.split("+"))
            lines.append(f"| INR ({name}) | {_size(r.entries)} | {r.accuracy:.1f} |")
        return "\n".join(lines) + "\n"


def _size(n: int) -> str:
    if n >= 1e6:
        return f"{n / 1e6:.2f}M"
    if n >= 1e3:
        return f"{n / 1e3:.1f}K"
    return str(n)

"""End-to-end pipeline stages behind the command-line interface.

Artifacts live under one output directory::

    cohort/manifest.json, cohort/volumes/*.vol
    inr/theta_star.inr, inr/<subject>-<label>.inr, inr/losses/*.csv, inr/fit_summary.csv
    classify/<selection>.inrc, classify/<selection>_history.csv
    reports/classification.{csv,md}, reports/reconstruction.{csv,md}, ...
"""
from __future__ import annotations

import csv
import logging
import multiprocessing as mp
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort import CohortManifest, LongitudinalRecord, build_cohort, cohort_config_dict, read_manifest, \
    render_scan
from .config import ConfigError, PipelineConfig, derive_seed
from .inr import InrParams, Scan, build_inr, evaluate_grid, finetune_subject, parameter_count, pretrain_init, \
    read_inr, scans_mse, write_inr
from .metrics import CellMetrics, ClassificationReport, ClassificationRow, ReconstructionReport, \
    accuracy, age_group, compression_ratio, mse, psnr, ssim3d
from .phantom import Volume, volume_from_flat
from .weightspace import classify_trajectory, parse_selection, selection_name, stack_stream_params, \
    train_classifier, write_model

log = logging.getLogger(__name__)

THETA_STAR = "theta_star.inr"
EVAL_AGES = np.arange(50.0, 91.0)


class MissingCohortError(FileNotFoundError):
    pass


class MissingInrError(FileNotFoundError):
    pass


@dataclass
class Layout:
    root: Path

    @property
    def cohort(self) -> Path:
        return self.root / "cohort"

    @property
    def inr(self) -> Path:
        return self.root / "inr"

    @property
    def classify(self) -> Path:
        return self.root / "classify"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def record_inr(self, rec: LongitudinalRecord) -> Path:
        return self.inr / f"{rec.key}.inr"


def _layout(cfg: PipelineConfig) -> Layout:
    return Layout(Path(cfg.out))


def load_cohort(cfg: PipelineConfig) -> CohortManifest:
    lay = _layout(cfg)
    if not (lay.cohort / "manifest.json").is_file():
        raise MissingCohortError(f"no cohort manifest under {lay.cohort}; run simulate first")
    man = read_manifest(lay.cohort)
    if man.config != cohort_config_dict(cfg.cohort) or man.seed != derive_seed(cfg.seed, "cohort"):
        raise ConfigError(f"cohort in {lay.cohort} was built with a different configuration or seed")
    return man


def record_scans(man: CohortManifest, rec: LongitudinalRecord) -> list[Scan]:
    coords = man.cohort_config.grid.coordinates(np.float32)
    return [Scan.from_volume(man.load_volume(s), s.chron_age, coords) for s in rec.scans]


# --------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg: PipelineConfig) -> CohortManifest:
    lay = _layout(cfg)
    man = build_cohort(cfg.cohort, derive_seed(cfg.seed, "cohort"), lay.cohort, cfg.digest())
    print(f"simulated {cfg.cohort.subjects} subjects, {len(man.records)} records "
          f"({len(man.train)} train, {len(man.test)} test), scheme={man.scheme} -> {lay.cohort}")
    return man


# --------------------------------------------------------------------------
# fit


_WORKER: dict = {}


def _init_worker(cfg: PipelineConfig, theta_path: str) -> None:
    _WORKER["cfg"] = cfg
    _WORKER["man"] = load_cohort(cfg)
    _WORKER["theta"] = read_inr(theta_path)


def _finetune_task(key: str) -> tuple[str, float, float, float]:
    cfg, man, theta = _WORKER["cfg"], _WORKER["man"], _WORKER["theta"]
    rec = next(r for r in man.records if r.key == key)
    scans = record_scans(man, rec)
    rng = np.random.default_rng(derive_seed(cfg.seed, "finetune", key))
    f = cfg.fit
    res = finetune_subject(theta, scans, rng, f.finetune_iterations, f.finetune_voxel_fraction,
                           f.finetune_lr, f.lr_floor)
    lay = _layout(cfg)
    write_inr(res.params, lay.record_inr(rec))
    _write_losses(lay.inr / "losses" / f"{key}.csv", res.losses)
    # scores use the stored float32 parameters so they match what later stages read
    stored = read_inr(lay.record_inr(rec))
    ratio = compression_ratio(stored.count(), [man.cohort_config.grid.size] * len(scans))
    return key, scans_mse(theta, scans), scans_mse(stored, scans), ratio


def _write_losses(path: Path, losses) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for k, v in enumerate(losses, start=1):
            w.writerow([k, f"{v:.8g}"])


def cmd_fit(cfg: PipelineConfig, workers: int | None = None) -> list[tuple[str, float, float, float]]:
    """Pretrain the shared initialization, then finetune every record from it."""
    man = load_cohort(cfg)
    lay = _layout(cfg)
    lay.inr.mkdir(parents=True, exist_ok=True)
    f = cfg.fit
    train_scans = [record_scans(man, r) for r in man.train]
    pre = pretrain_init(train_scans, cfg.inr.arch, np.random.default_rng(derive_seed(cfg.seed, "pretrain")),
                        f.pretrain_iterations, f.batch_subjects, f.pretrain_voxel_fraction, f.pretrain_lr,
                        f.lr_floor, init_params=_initial_params(cfg))
    theta_path = lay.inr / THETA_STAR
    write_inr(pre.params, theta_path)
    _write_losses(lay.inr / "losses" / "theta_star.csv", pre.losses)
    keys = [r.key for r in man.records]
    workers = max(1, workers or os.cpu_count() or 1)
    if workers == 1:
        _init_worker(cfg, str(theta_path))
        rows = [_finetune_task(k) for k in keys]
    else:
        ctx = mp.get_context("spawn")
        with ctx.Pool(workers, initializer=_init_worker, initargs=(cfg, str(theta_path))) as pool:
            rows = pool.map(_finetune_task, keys, chunksize=1)
    with open(lay.inr / "fit_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record", "theta_star_mse", "final_mse", "compression_ratio"])
        for key, m0, m1, ratio in rows:
            w.writerow([key, f"{m0:.6e}", f"{m1:.6e}", f"{ratio:.4f}"])
    print(f"fitted {len(rows)} INRs ({parameter_count(cfg.inr.arch)} parameters each) -> {lay.inr}")
    return rows


def _initial_params(cfg: PipelineConfig) -> InrParams:
    rng = np.random.default_rng(derive_seed(cfg.seed, "init"))
    return build_inr(cfg.inr.arch, rng, lift_gain=cfg.inr.lift_gain)


def load_inrs(cfg: PipelineConfig, man: CohortManifest, records=None) -> dict[str, InrParams]:
    lay = _layout(cfg)
    out = {}
    for rec in records if records is not None else man.records:
        p = lay.record_inr(rec)
        if not p.is_file():
            raise MissingInrError(f"missing fitted INR {p}; run fit first")
        out[rec.key] = read_inr(p, expected=cfg.inr.arch)
    return out


# --------------------------------------------------------------------------
# classify


def cmd_classify(cfg: PipelineConfig) -> ClassificationReport:
    """One weight-space classifier per stream selection, scored on the test pairs."""
    man = load_cohort(cfg)
    inrs = load_inrs(cfg, man)
    lay = _layout(cfg)
    lay.classify.mkdir(parents=True, exist_ok=True)
    lay.reports.mkdir(parents=True, exist_ok=True)
    c = cfg.classifier
    report = ClassificationReport(man.scheme)
    pred_rows = []
    for sel_text in c.selections:
        sel = parse_selection(sel_text)
        name = selection_name(sel)
        X = [stack_stream_params(inrs[r.key], sel, r.key).values for r in man.train]
        y = [r.y for r in man.train]
        rng = np.random.default_rng(derive_seed(cfg.seed, "classifier", name))
        model, hist = train_classifier(X, y, rng, c.epochs, c.batch_size, c.lr, c.widths, c.head_hidden,
                                       c.dropout, selection=sel)
        write_model(model, lay.classify / f"{name}.inrc")
        hist.write_csv(lay.classify / f"{name}_history.csv")
        preds, truth = [], []
        for r in man.test:
            prob, label = classify_trajectory(inrs[r.key], model, sel)
            preds.append(label)
            truth.append(r.y)
            pred_rows.append((name, r.key, r.y, prob, label))
        report.rows.append(ClassificationRow(name, X[0].size, accuracy(preds, truth)))
        print(f"{name}: accuracy {report.rows[-1].accuracy:.1f}% on {len(truth)} test records")
    report.write_csv(lay.reports / "classification.csv")
    (lay.reports / "classification.md").write_text(report.to_markdown())
    with open(lay.reports / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["selection", "record", "label", "prob_ad_like", "predicted"])
        for name, key, yt, prob, label in pred_rows:
            w.writerow([name, key, yt, f"{prob:.6f}", label])
    return report


# --------------------------------------------------------------------------
# evaluate


def reconstruction_report(inrs: dict[str, InrParams], man: CohortManifest, records, ages=EVAL_AGES,
                          window: int = 7) -> ReconstructionReport:
    """Score every (record, yearly age) cell against the ground-truth rendering."""
    ccfg = man.cohort_config
    grid = ccfg.grid
    report = ReconstructionReport(ssim_window=window)
    for rec in records:
        if rec.key not in inrs:
            raise MissingInrError(f"no fitted INR for record {rec.key}")
        train_ages = [s.chron_age for s in rec.scans]
        preds = evaluate_grid(inrs[rec.key], ages, grid)
        for k, age in enumerate(ages):
            truth = render_scan(rec, float(age), ccfg)
            recon = _clamped(preds[k], grid, float(age))
            m = mse(recon, truth)
            report.add(CellMetrics(rec.subject_id, rec.label, float(age), age_group(float(age), train_ages),
                                   m, psnr(m), ssim3d(recon, truth, window)))
    return report


def _clamped(flat, grid, age) -> Volume:
    return volume_from_flat(np.clip(flat, -1.0, 1.0), grid.dims, grid.spacing, age)


def cmd_evaluate(cfg: PipelineConfig) -> ReconstructionReport:
    man = load_cohort(cfg)
    inrs = load_inrs(cfg, man, man.test)
    lay = _layout(cfg)
    lay.reports.mkdir(parents=True, exist_ok=True)
    report = reconstruction_report(inrs, man, man.test)
    report.write_csv(lay.reports / "reconstruction.csv")
    report.write_cells_csv(lay.reports / "reconstruction_cells.csv")
    (lay.reports / "reconstruction.md").write_text(report.to_markdown())
    n = parameter_count(cfg.inr.arch)
    voxels = man.cohort_config.grid.size
    with open(lay.reports / "compression.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record", "scans", "parameters", "voxels", "compression_ratio"])
        for rec in man.records:
            k = len(rec.scans)
            w.writerow([rec.key, k, n, k * voxels, f"{compression_ratio(n, [voxels] * k):.4f}"])
    print(f"evaluated {len(report.cells)} (record, age) cells -> {lay.reports}")
    return report

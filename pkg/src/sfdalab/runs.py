"""File-level orchestration: each function reads inputs from disk and writes a run directory."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Optional

import numpy as np

from . import losses, metrics, priors
from . import network as nw
from . import synthdata as sd
from . import trainer as tr
from .config import ExperimentConfig
from .ioutil import RunLock, atomic_write_text

log = logging.getLogger(__name__)


def _dump(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not JSON serializable: {type(x)}")


# ---------------------------------------------------------------------------
# generate

PRESETS = {
    "source": sd.source_spec,
    "target": sd.target_spec,
    "hard_target": sd.hard_target_spec,
    "cardiac": sd.cardiac_spec,
}


def spec_from_json(raw: dict) -> tuple:
    """Return (DomainSpec, n_subjects, slices_per_subject) from a generation request.

    Either ``{"domain": {...}}`` with explicit fields, or ``{"preset": name,
    "seed": s, "size": n, "overrides": {...}}``.
    """
    n_subjects = int(raw.get("n_subjects", 20))
    slices = int(raw.get("slices_per_subject", 8))
    if "domain" in raw:
        spec = sd.DomainSpec.from_dict(raw["domain"])
    else:
        name = raw.get("preset", "source")
        if name not in PRESETS:
            raise sd.DatasetError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        kw = {k: raw[k] for k in ("seed", "size") if k in raw}
        if "fg_ratio" in raw and name != "cardiac":
            kw["fg_ratio"] = raw["fg_ratio"]
        spec = PRESETS[name](**kw)
        over = raw.get("overrides", {})
        if over:
            merged = spec.to_dict()
            merged.update(over)
            spec = sd.DomainSpec.from_dict(merged)
    spec.validate()
    return spec, n_subjects, slices


def generate_dataset(spec: sd.DomainSpec, n_subjects: int, slices: int, out_dir) -> sd.Dataset:
    out = Path(out_dir)
    ds = sd.generate(spec, n_subjects, slices)
    sd.write_dataset(ds, out)
    priors.save_prior_table(sd.prior_table_for(spec), out / "prior_table.json")
    priors.write_tags_csv(out / "tags.csv", {s.id: s.tags[1:] for s in ds.samples})
    return ds


# ---------------------------------------------------------------------------
# training


def _write_rows(run_dir: Path, rows) -> None:
    atomic_write_text(run_dir / "metrics.csv", tr.metrics_csv_text(rows))


def train_source(cfg: ExperimentConfig, run_dir: Optional[Path] = None) -> Path:
    if not cfg.source_data:
        raise tr.TrainingError("source_data is required for train-source")
    run_dir = Path(run_dir or Path(cfg.output_dir) / "source")
    with RunLock(run_dir):
        _dump(run_dir / "resolved_config.json", cfg.resolved())
        ds = sd.read_dataset(cfg.source_data)
        res = tr.train_source(cfg.source_train, ds, out_dir=run_dir)
        nw.save(res.params, run_dir / "final.sfda")
        _write_rows(run_dir, res.rows)
    return run_dir


def run_name(c: tr.TrainConfig) -> str:
    if c.mode in ("no_adapt", "oracle"):
        return c.mode
    if c.mode == "ent_only":
        return "ent_only"
    name = f"{c.mode}_{c.prior}"
    if c.prior == "perturbed":
        name += f"_d{c.delta:g}{'p' if c.sign > 0 else 'm'}"
    return name


def _prior_table(cfg: ExperimentConfig, n_classes: int) -> priors.PriorTable:
    path = Path(cfg.prior_table) if cfg.prior_table else Path(cfg.target_data) / "prior_table.json"
    if not path.exists():
        raise priors.PriorError(f"{path}: prior table not found")
    return priors.load_prior_table(path, n_classes)


def adapt(cfg: ExperimentConfig, name: Optional[str] = None) -> Path:
    """Adapt the source checkpoint to the target dataset and evaluate when labels exist."""
    a = cfg.adapt
    a.validate()
    run_dir = Path(cfg.output_dir) / (name or run_name(a))
    ckpt = Path(cfg.source_checkpoint) if cfg.source_checkpoint else \
        Path(cfg.output_dir) / "source" / "final.sfda"
    with RunLock(run_dir):
        _dump(run_dir / "resolved_config.json", cfg.resolved())
        params0 = nw.load(ckpt)
        images_only = sd.read_dataset(cfg.target_data, masks=False)
        k = images_only.n_classes
        table = _prior_table(cfg, k)
        try:
            labeled = sd.read_dataset(cfg.target_data, masks=True)
            mask_error = None
        except sd.DatasetError as exc:
            labeled, mask_error = None, str(exc)
        if labeled is None and (a.mode == "oracle" or a.prior == "tau_gt"):
            raise sd.DatasetError(f"mode {a.mode} with prior {a.prior} needs target masks: {mask_error}")

        gt_ratios = None
        if a.prior == "tau_gt" and a.mode in ("adami", "adaent", "cda", "ada_source"):
            gt_ratios = {s.id: priors.tau_gt(s.mask, k) for s in labeled.split("train")}
        train_imgs = images_only.split("train")
        items = tr.target_items(train_imgs, table, a, gt_ratios)
        source_items = None
        if a.mode in tr.SOURCE_JOINT_MODES:
            if not cfg.source_data:
                raise tr.TrainingError(f"mode {a.mode} requires source_data in the config")
            source_items = tr.labeled_items(sd.read_dataset(cfg.source_data).split("train"), k)
        oracle_items = tr.labeled_items(labeled.split("train"), k) if a.mode == "oracle" else None
        val = labeled.split("val") if labeled is not None else None

        res = tr.adapt(a, params0, items, table, k, val_samples=val or None,
                       source_items=source_items, oracle_items=oracle_items, out_dir=run_dir)
        nw.save(res.params, run_dir / "final.sfda")
        _write_rows(run_dir, res.rows)

        imgs = [s.image for s in train_imgs]
        summary = {
            "run": run_dir.name, "mode": a.mode, "prior": a.prior, "delta": a.delta, "sign": a.sign,
            "init_pred_ratio": tr.mean_predicted_ratio(params0, imgs),
            "final_pred_ratio": tr.mean_predicted_ratio(res.params, imgs),
            "info": res.info,
        }
        if labeled is not None:
            summary["train_gt_ratio"] = np.mean([priors.tau_gt(s.mask, k)
                                                 for s in labeled.split("train")], axis=0)
            ev = tr.evaluate(res.params, labeled.split(cfg.eval_split), k, cfg.spacing)
            metrics.write_results_csv(run_dir / "results.csv", ev["per_subject"])
            summary["evaluation"] = {"split": cfg.eval_split, "dsc_mean": ev["dsc_mean"],
                                     "asd_mean": ev["asd_mean"]}
        else:
            summary["evaluation"] = {"error": f"evaluation unavailable: {mask_error}"}
            log.warning("target masks unavailable, skipping evaluation: %s", mask_error)
        _dump(run_dir / "summary.json", summary)
    return run_dir


def evaluate_checkpoint(ckpt, data_dir, out_csv, split: str = "test",
                        spacing=(1.0, 1.0, 1.0)) -> dict:
    params = nw.load(ckpt)
    ds = sd.read_dataset(data_dir, masks=True)
    if params.n_classes != ds.n_classes:
        raise ValueError(f"checkpoint has {params.n_classes} classes, dataset {ds.n_classes}")
    samples = ds.split(split)
    if not samples:
        raise sd.DatasetError(f"{data_dir}: no samples in split {split!r}")
    ev = tr.evaluate(params, samples, ds.n_classes, spacing)
    metrics.write_results_csv(out_csv, ev["per_subject"])
    return ev


# ---------------------------------------------------------------------------
# losslab


def losslab_grid(tau_e1: float, n: int = 100) -> np.ndarray:
    """Log-spaced foreground ratios in [1e-6, 1 - 1e-6], dense near both ends."""
    lo = np.logspace(-6, np.log10(0.5), n)
    grid = np.concatenate([lo, 1.0 - lo, [tau_e1]])
    return np.unique(grid)


def losslab(tau_e1: float, out_csv) -> list:
    rows = []
    for x in losslab_grid(tau_e1):
        x = float(x)
        rows.append((x, losses.binary_penalty("L1", x, tau_e1),
                     losses.binary_penalty("L2", x, tau_e1),
                     losses.boundary_gradient_probe("L1", x, tau_e1),
                     losses.boundary_gradient_probe("L2", x, tau_e1)))
    lines = ["tau_hat1,L1,L2,dL1,dL2"]
    lines += [",".join(repr(v) for v in r) for r in rows]
    atomic_write_text(Path(out_csv), "\n".join(lines) + "\n")
    return rows


def read_csv_rows(path) -> list:
    import csv
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def parse_per_class(cell: str) -> list:
    return [math.nan if v == "NA" else float(v) for v in cell.split(";")]

"""Comparison tables and SVG curves built only from run-directory CSVs.

Everything here reads ``metrics.csv`` / ``results.csv`` (and losslab CSVs)
and writes derived artifacts, so re-running a report reproduces it byte for
byte.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import metrics  # noqa: E402
from .ioutil import atomic_write_text  # noqa: E402

TABLE_COLUMNS = ("run", "mode", "epochs", "test_dsc_mean", "test_asd_mean", "asd_excluded",
                 "final_val_dsc_mean", "final_pred_ratio_fg", "final_gt_ratio_fg")


class ReportError(ValueError):
    pass


def _cells(cell: str) -> list:
    return [math.nan if v in ("NA", "") else float(v) for v in cell.split(";")]


def _nanmean(vals) -> float:
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class RunCurves:
    name: str
    mode: str
    epochs: list
    val_dsc: list         # mean foreground DSC per logged epoch
    pred_ratio: list      # mean predicted foreground ratio (summed over foreground classes)
    gt_ratio: list
    results: Optional[dict] = None


def load_run(run_dir) -> RunCurves:
    run_dir = Path(run_dir)
    mpath = run_dir / "metrics.csv"
    if not mpath.exists():
        raise ReportError(f"{run_dir}: metrics.csv not found")
    with open(mpath, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ReportError(f"{mpath}: no rows")
    epochs, dsc, pred, gt = [], [], [], []
    for r in rows:
        epochs.append(int(r["epoch"]))
        dsc.append(_nanmean(_cells(r["val_dsc_per_class"])))  # foreground only
        pred.append(float(np.sum(_cells(r["mean_pred_ratio_per_class"])[1:])))
        gt.append(float(np.sum(_cells(r["mean_gt_ratio_per_class"])[1:])))
    rpath = run_dir / "results.csv"
    results = metrics.read_results_csv(rpath) if rpath.exists() else None
    return RunCurves(run_dir.name, rows[-1]["mode"], epochs, dsc, pred, gt, results)


def summarize(run: RunCurves) -> dict:
    row = {"run": run.name, "mode": run.mode, "epochs": run.epochs[-1],
           "final_val_dsc_mean": run.val_dsc[-1], "final_pred_ratio_fg": run.pred_ratio[-1],
           "final_gt_ratio_fg": run.gt_ratio[-1],
           "test_dsc_mean": math.nan, "test_asd_mean": math.nan, "asd_excluded": 0}
    if run.results:
        n_classes = 1 + max(max(v) for v in run.results.values())
        agg = metrics.aggregate(run.results, n_classes)
        row["test_dsc_mean"] = agg["dsc_mean"]
        row["test_asd_mean"] = agg["asd_mean"]
        row["asd_excluded"] = sum(agg["asd_excluded"].values())
    return row


def _fmt(v) -> str:
    if isinstance(v, float):
        return metrics.fmt(v)
    return str(v)


def table_csv(rows: Sequence[dict]) -> str:
    out = [",".join(TABLE_COLUMNS)]
    out += [",".join(_fmt(r[c]) for c in TABLE_COLUMNS) for r in rows]
    return "\n".join(out) + "\n"


def table_markdown(rows: Sequence[dict]) -> str:
    out = ["| " + " | ".join(TABLE_COLUMNS) + " |",
           "|" + "---|" * len(TABLE_COLUMNS)]
    out += ["| " + " | ".join(_fmt(r[c]) for c in TABLE_COLUMNS) + " |" for r in rows]
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# SVG


def _svg(fig) -> str:
    buf = io.StringIO()
    with matplotlib.rc_context({"svg.hashsalt": "sfdalab", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buf.getvalue()


def line_chart(series: dict, title: str, xlabel: str, ylabel: str,
               logx: bool = False, symlog_y: bool = False) -> str:
    """``series`` maps label -> (x, y[, style]).  Returns SVG text."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, spec in series.items():
        x, y = spec[0], spec[1]
        style = spec[2] if len(spec) > 2 else "-"
        ax.plot(x, y, style, label=label, linewidth=1.5)
    if logx:
        ax.set_xscale("log")
    if symlog_y:
        ax.set_yscale("symlog", linthresh=1.0)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    if series:
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _svg(fig)


def dsc_curves_svg(runs: Sequence[RunCurves]) -> str:
    series = {r.name: (r.epochs, r.val_dsc) for r in runs}
    return line_chart(series, "Validation DSC per epoch", "epoch", "mean foreground DSC")


def size_curves_svg(runs: Sequence[RunCurves]) -> str:
    series = {}
    for r in runs:
        series[f"{r.name} predicted"] = (r.epochs, r.pred_ratio)
    if runs and not all(math.isnan(v) for v in runs[0].gt_ratio):
        series["ground truth"] = (runs[0].epochs, runs[0].gt_ratio, "k--")
    return line_chart(series, "Foreground size per epoch", "epoch", "mean foreground ratio")


def losslab_svg(rows: Sequence[tuple], tau_e1: float) -> str:
    """Two-panel chart of the binary penalties and their derivatives."""
    x = np.array([r[0] for r in rows])
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10.0, 4.0))
    a1.plot(x, [r[1] for r in rows], label="L1 = KL(prior || pred)")
    a1.plot(x, [r[2] for r in rows], label="L2 = KL(pred || prior)")
    a1.set_xlabel("predicted foreground ratio")
    a1.set_ylabel("penalty")
    a2.plot(x, [r[3] for r in rows], label="dL1")
    a2.plot(x, [r[4] for r in rows], label="dL2")
    a2.set_yscale("symlog", linthresh=1.0)
    a2.set_xlabel("predicted foreground ratio")
    a2.set_ylabel("derivative")
    for ax in (a1, a2):
        ax.axvline(tau_e1, color="k", linestyle=":", linewidth=1)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
    fig.suptitle(f"binary penalties, prior foreground ratio {tau_e1:g}")
    fig.tight_layout()
    return _svg(fig)


def build_report(run_dirs: Sequence, out_dir) -> list:
    """Write comparison.csv, comparison.md, dsc_curves.svg and size_curves.svg."""
    if not run_dirs:
        raise ReportError("report needs at least one run directory")
    runs = [load_run(d) for d in run_dirs]
    rows = [summarize(r) for r in runs]
    out = Path(out_dir)
    atomic_write_text(out / "comparison.csv", table_csv(rows))
    atomic_write_text(out / "comparison.md", table_markdown(rows))
    atomic_write_text(out / "dsc_curves.svg", dsc_curves_svg(runs))
    atomic_write_text(out / "size_curves.svg", size_curves_svg(runs))
    return rows

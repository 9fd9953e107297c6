"""Dice and average symmetric surface distance over stacked 3D label volumes."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .ioutil import atomic_write_text

# 6-connectivity structuring element
_FACES = ndimage.generate_binary_structure(3, 1)


def _as_volume(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected a (D, H, W) volume, got shape {x.shape}")
    return x


def dsc(pred, gt, cls: int = 1) -> float:
    """2|A & B| / (|A| + |B|) for the class-``cls`` voxels; both empty -> 1."""
    pred, gt = _as_volume(pred), _as_volume(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dsc: shapes differ {pred.shape} vs {gt.shape}")
    a = pred == cls
    b = gt == cls
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with a non-mask face neighbour or on the volume border."""
    mask = _as_volume(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FACES, border_value=0)


def asd(pred, gt, cls: int = 1, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance; NaN if either mask is empty."""
    pred, gt = _as_volume(pred), _as_volume(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"asd: shapes differ {pred.shape} vs {gt.shape}")
    sa = surface(pred == cls)
    sb = surface(gt == cls)
    na, nb = int(sa.sum()), int(sb.sum())
    if na == 0 or nb == 0:
        return math.nan
    # exact Euclidean distance from every voxel to the nearest surface voxel
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    return float((dist_to_b[sa].sum() + dist_to_a[sb].sum()) / (na + nb))


def evaluate_volume(pred, gt, n_classes: int, spacing=(1.0, 1.0, 1.0)) -> dict:
    """Per foreground class {cls: (dsc, asd)}."""
    return {k: (dsc(pred, gt, k), asd(pred, gt, k, spacing)) for k in range(1, n_classes)}


def aggregate(per_subject: dict, n_classes: int) -> dict:
    """Unweighted means over subjects.

    ``per_subject`` maps subject -> {cls: (dsc, asd)}.  NaN ASD values are
    excluded and counted.
    """
    if not per_subject:
        raise ValueError("aggregate needs at least one subject")
    out = {"dsc": {}, "asd": {}, "asd_excluded": {}}
    for k in range(1, n_classes):
        d = [m[k][0] for m in per_subject.values()]
        a = [m[k][1] for m in per_subject.values()]
        finite = [v for v in a if not math.isnan(v)]
        out["dsc"][k] = float(np.mean(d))
        out["asd"][k] = float(np.mean(finite)) if finite else math.nan
        out["asd_excluded"][k] = len(a) - len(finite)
    out["dsc_mean"] = float(np.mean(list(out["dsc"].values())))
    finite_cls = [v for v in out["asd"].values() if not math.isnan(v)]
    out["asd_mean"] = float(np.mean(finite_cls)) if finite_cls else math.nan
    return out


def fmt(v: float) -> str:
    return "NA" if math.isnan(v) else f"{v:.6f}"


def write_results_csv(path, per_subject: dict) -> None:
    lines = ["subject,class,dsc,asd"]
    for subj, per_cls in per_subject.items():
        for k, (d, a) in sorted(per_cls.items()):
            lines.append(f"{subj},{k},{fmt(d)},{fmt(a)}")
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_results_csv(path) -> dict:
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            a = math.nan if row["asd"] == "NA" else float(row["asd"])
            out.setdefault(row["subject"], {})[int(row["class"])] = (float(row["dsc"]), a)
    return out

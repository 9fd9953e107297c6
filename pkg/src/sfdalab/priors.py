"""Class-ratio priors: anatomical constants, tag gating, perturbation, tag-free selection."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

ZERO_TOL = 1e-4
SELECT_FRACTION = 0.25


class PriorError(ValueError):
    pass


@dataclass(frozen=True)
class AnatomicalEntry:
    """A structure's physical area and the acquisition geometry of the target images."""

    cls: int
    size_mm2: float
    r1: float
    r2: float
    omega: int
    name: str = ""

    def __post_init__(self):
        if self.size_mm2 <= 0 or self.r1 <= 0 or self.r2 <= 0 or self.omega <= 0:
            raise PriorError(f"invalid anatomical entry {self}")


def tau_bar(entry: AnatomicalEntry) -> tuple:
    """(size in pixels, class ratio) = (size / (R1 R2), size / (R1 R2 Omega))."""
    size_px = entry.size_mm2 / (entry.r1 * entry.r2)
    ratio = size_px / entry.omega
    if ratio >= 1.0:
        raise PriorError(f"class {entry.cls}: prior ratio {ratio:.4f} >= 1, structure exceeds image")
    return size_px, ratio


@dataclass(frozen=True)
class PriorTable:
    """One global ratio per foreground class (classes 1..K-1)."""

    n_classes: int
    foreground: tuple

    def __post_init__(self):
        if len(self.foreground) != self.n_classes - 1:
            raise PriorError(f"need {self.n_classes - 1} foreground ratios, got {len(self.foreground)}")
        fg = np.asarray(self.foreground, dtype=np.float64)
        if np.any(fg <= 0) or np.any(fg >= 0.5):
            raise PriorError(f"foreground ratios must lie in (0, 0.5): {self.foreground}")
        if fg.sum() >= 1.0:
            raise PriorError("foreground ratios sum to >= 1")

    @property
    def full(self) -> np.ndarray:
        """Complete simplex including the background entry."""
        fg = np.asarray(self.foreground, dtype=np.float64)
        return np.concatenate([[1.0 - fg.sum()], fg])

    @classmethod
    def from_entries(cls, entries, n_classes: Optional[int] = None) -> "PriorTable":
        entries = sorted(entries, key=lambda e: e.cls)
        n_classes = n_classes or (max(e.cls for e in entries) + 1)
        ratios = {e.cls: tau_bar(e)[1] for e in entries}
        missing = [k for k in range(1, n_classes) if k not in ratios]
        if missing:
            raise PriorError(f"prior table lacks classes {missing}")
        return cls(n_classes, tuple(ratios[k] for k in range(1, n_classes)))

    def to_json(self) -> list:
        return [{"class": k, "tau_bar": float(v)} for k, v in enumerate(self.foreground, start=1)]


def load_prior_table(path, n_classes: Optional[int] = None) -> PriorTable:
    """Read a JSON list of {class, size_mm2, R1, R2, omega} or {class, tau_bar}."""
    path = Path(path)
    rows = json.loads(path.read_text())
    if not isinstance(rows, list):
        raise PriorError(f"{path}: expected a JSON list of class entries")
    ratios = {}
    for i, row in enumerate(rows):
        try:
            k = int(row["class"])
            if "tau_bar" in row:
                ratios[k] = float(row["tau_bar"])
            else:
                entry = AnatomicalEntry(k, float(row["size_mm2"]), float(row["R1"]),
                                        float(row["R2"]), int(row["omega"]), row.get("name", ""))
                ratios[k] = tau_bar(entry)[1]
        except KeyError as exc:
            raise PriorError(f"{path}: entry [{i}] lacks field {exc}") from None
    n_classes = n_classes or (max(ratios) + 1)
    missing = [k for k in range(1, n_classes) if k not in ratios]
    if missing:
        raise PriorError(f"{path}: no prior for classes {missing}")
    return PriorTable(n_classes, tuple(ratios[k] for k in range(1, n_classes)))


def save_prior_table(table: PriorTable, path) -> None:
    from .ioutil import atomic_write_text
    atomic_write_text(Path(path), json.dumps(table.to_json(), indent=2) + "\n")


# Reference anatomical estimates for the three target datasets, with the
# printed pixel sizes and percentages for cross-checking.  Prostate resolution
# and image size are not published; they are back-solved from the printed row.
_PROSTATE_R = float(np.sqrt(2485.0 / 6095.0))
_PROSTATE_OMEGA = int(round(6095 / 0.0468))

ANATOMICAL_REFERENCE = (
    # name, size_mm2, R1, R2, omega, printed_px, printed_percent
    ("IVD", 2784.0, 1.25, 1.25, 65536, 1782, 2.72),
    ("Prostate", 2485.0, _PROSTATE_R, _PROSTATE_R, _PROSTATE_OMEGA, 6095, 4.68),
    ("Myo", 1871.0, 0.45, 0.93, 65536, 4428, 6.76),
    ("LA", 2110.0, 0.45, 0.93, 65536, 4996, 7.62),
    ("LV", 1895.0, 0.45, 0.93, 65536, 4487, 6.85),
    ("AA", 1565.0, 0.45, 0.93, 65536, 3706, 5.65),
)


def reference_entries() -> list:
    return [AnatomicalEntry(1, size, r1, r2, omega, name)
            for name, size, r1, r2, omega, _px, _pct in ANATOMICAL_REFERENCE]


def cardiac_table() -> PriorTable:
    """Five-class table (Myo, LA, LV, AA) built from the printed ratios."""
    pct = {name: p for name, *_rest, p in ANATOMICAL_REFERENCE}
    return PriorTable(5, tuple(pct[n] / 100.0 for n in ("Myo", "LA", "LV", "AA")))


# ---------------------------------------------------------------------------


def _as_fg_tags(tags, n_classes: int) -> np.ndarray:
    tags = np.asarray(tags, dtype=bool)
    if tags.shape != (n_classes - 1,):
        raise PriorError(f"expected {n_classes - 1} foreground tags, got shape {tags.shape}")
    return tags


def tau_e(table: PriorTable, tags) -> np.ndarray:
    """Tag-gated prior: tau_bar_k for present classes, 0 otherwise, background completes."""
    present = _as_fg_tags(tags, table.n_classes)
    fg = np.where(present, np.asarray(table.foreground), 0.0)
    if fg.sum() >= 1.0:
        raise PriorError("present foreground ratios sum to >= 1")
    return np.concatenate([[1.0 - fg.sum()], fg])


def perturb(tau: np.ndarray, delta: float, sign: int) -> np.ndarray:
    """Scale foreground entries by (1 + sign*delta), then recomplete background."""
    if sign not in (1, -1):
        raise PriorError(f"sign must be +1 or -1, got {sign}")
    if not 0.0 <= delta < 1.0:
        raise PriorError(f"delta must lie in [0, 1), got {delta}")
    tau = np.asarray(tau, dtype=np.float64)
    fg = tau[1:] * (1.0 + sign * delta)
    if fg.sum() >= 1.0:
        raise PriorError("perturbed foreground ratios sum to >= 1")
    return np.concatenate([[1.0 - fg.sum()], fg])


def tau_gt(mask, n_classes: int) -> np.ndarray:
    """Exact label histogram of a mask divided by its pixel count."""
    mask = np.asarray(mask)
    counts = np.bincount(mask.reshape(-1).astype(np.int64), minlength=n_classes)
    if counts.size > n_classes:
        raise PriorError(f"mask has labels >= {n_classes}")
    return counts / mask.size


@dataclass
class TagFreeDecision:
    selected: bool
    tau_e: Optional[np.ndarray]
    reasons: list = field(default_factory=list)


def tagfree_estimate(tau_hat, table: PriorTable, zero_tol: float = ZERO_TOL) -> TagFreeDecision:
    """Select or discard an image from its predicted ratio under the initial model.

    Per foreground class: above a quarter of the prior -> prior; below
    ``zero_tol`` (softmax never hits exact zero) -> 0; otherwise the image is
    discarded.
    """
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    fg = np.zeros(table.n_classes - 1)
    reasons = []
    selected = True
    for j, prior in enumerate(table.foreground):
        est = tau_hat[j + 1]
        if est > SELECT_FRACTION * prior:
            fg[j] = prior
            reasons.append("present")
        elif est < zero_tol:
            reasons.append("absent")
        else:
            reasons.append("ambiguous")
            selected = False
    if not selected:
        return TagFreeDecision(False, None, reasons)
    return TagFreeDecision(True, np.concatenate([[1.0 - fg.sum()], fg]), reasons)


# ---------------------------------------------------------------------------
# tags file: sample_id,class,present


def write_tags_csv(path, tags_by_sample: dict) -> None:
    from .ioutil import atomic_write_text
    lines = ["sample_id,class,present"]
    for sid, tags in tags_by_sample.items():
        for k, present in enumerate(tags, start=1):
            lines.append(f"{sid},{k},{int(bool(present))}")
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_tags_csv(path, n_classes: int) -> dict:
    out: dict = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            k = int(row["class"])
            if not 1 <= k < n_classes:
                raise PriorError(f"{path}: class {k} outside foreground range")
            tags = out.setdefault(row["sample_id"], np.zeros(n_classes - 1, dtype=bool))
            tags[k - 1] = row["present"].strip().lower() in ("1", "true", "yes")
    return out

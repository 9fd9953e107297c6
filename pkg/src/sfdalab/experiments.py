"""The frozen synthetic benchmark: one source model, one target domain, the full method grid."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import config, runs

SIZE = 64
FG_RATIO = 0.05
N_SUBJECTS = 20
SLICES = 8
SOURCE_SEED = 0
TARGET_SEED = 1

SOURCE_TRAIN = {"mode": "oracle", "epochs": 20, "lr": 5e-3, "lr_decay": 0.9, "lr_period": 10,
                "weight_decay": 1e-4, "batch_size": 8, "augment": True}
ADAPT = {"epochs": 20, "lr": 1e-3, "lr_decay": 0.7, "lr_period": 10, "weight_decay": 1e-4,
         "batch_size": 8, "lam": 1.0}
# the labeled upper bound follows the supervised schedule, not the adaptation one
ORACLE = {k: SOURCE_TRAIN[k] for k in ("lr", "lr_decay", "augment")}
DELTAS = (0.2, 0.4, 0.6)


def grid() -> list:
    """(mode, prior, delta, sign) for every run of the benchmark."""
    g = [("no_adapt", "anatomical", 0.0, 1), ("oracle", "anatomical", 0.0, 1),
         ("ent_only", "anatomical", 0.0, 1), ("adami", "tau_gt", 0.0, 1),
         ("adami", "anatomical", 0.0, 1), ("adami", "tagfree", 0.0, 1)]
    g += [("adami", "perturbed", d, s) for s in (1, -1) for d in DELTAS]
    return g


@dataclass
class FixtureResult:
    root: Path
    source_val_dsc: float
    summaries: dict = field(default_factory=dict)
    seconds: float = 0.0

    def dsc(self, name: str) -> float:
        return float(self.summaries[name]["evaluation"]["dsc_mean"])

    def perturbed(self, delta: float, sign: int) -> str:
        return f"adami_perturbed_d{delta:g}{'p' if sign > 0 else 'm'}"

    def degradation(self, delta: float, sign: int) -> float:
        """DSC lost relative to the unperturbed anatomical prior."""
        return self.dsc("adami_anatomical") - self.dsc(self.perturbed(delta, sign))


def experiment_config(root: Path, **adapt_kw) -> config.ExperimentConfig:
    raw = {"seed": 0, "output_dir": str(root / "runs"), "source_data": str(root / "source"),
           "target_data": str(root / "target"), "source_train": dict(SOURCE_TRAIN),
           "adapt": {**ADAPT, **adapt_kw}}
    return config.from_dict(raw)


def generate(root: Path) -> None:
    for name, seed in (("source", SOURCE_SEED), ("target", TARGET_SEED)):
        req = {"preset": name, "seed": seed, "size": SIZE, "fg_ratio": FG_RATIO,
               "n_subjects": N_SUBJECTS, "slices_per_subject": SLICES}
        spec, n, s = runs.spec_from_json(req)
        runs.generate_dataset(spec, n, s, root / name)


def run_fixture(root, progress: Optional[Callable[[str], None]] = None) -> FixtureResult:
    """Generate both domains, train the source model and run every adaptation in ``grid()``."""
    root = Path(root)
    say = progress or (lambda msg: None)
    t0 = time.perf_counter()
    generate(root)
    src_dir = runs.train_source(experiment_config(root))
    last = runs.read_csv_rows(src_dir / "metrics.csv")[-1]
    result = FixtureResult(root, float(np.nanmean(runs.parse_per_class(last["val_dsc_per_class"]))))
    say(f"source val DSC {result.source_val_dsc:.3f}")
    for mode, prior, delta, sign in grid():
        extra = ORACLE if mode == "oracle" else {}
        cfg = experiment_config(root, mode=mode, prior=prior, delta=delta, sign=sign, **extra)
        run_dir = runs.adapt(cfg)
        summary = json.loads((run_dir / "summary.json").read_text())
        result.summaries[run_dir.name] = summary
        say(f"{run_dir.name}: DSC {summary['evaluation']['dsc_mean']:.3f}")
    result.seconds = time.perf_counter() - t0
    return result

"""Command-line entry point: ``sfdalab <subcommand> ...``.

Failures print one machine-readable line to stderr,
``error: {"type": ..., "message": ...}``, and exit nonzero (2 for usage or
configuration errors, 1 for runtime errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import config, diagnostics, experiments, priors, report, runs
from . import synthdata as sd
from . import trainer as tr
from .ioutil import atomic_write_text

log = logging.getLogger("sfdalab")

GRADCHECK_TOL = 1e-4


class UsageError(ValueError):
    pass


def _sign(text: str) -> int:
    if text in ("+", "+1", "1"):
        return 1
    if text in ("-", "-1"):
        return -1
    raise argparse.ArgumentTypeError(f"sign must be + or -, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sfdalab", description="Source-free segmentation adaptation lab.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--spec", required=True, help="generation request JSON file")
    g.add_argument("--out", required=True, help="output dataset directory")

    t = sub.add_parser("train-source", help="supervised training on the source dataset")
    t.add_argument("--config", required=True)

    a = sub.add_parser("adapt", help="adapt a source checkpoint to the target dataset")
    a.add_argument("--config", required=True)
    a.add_argument("--mode", choices=tr.MODES)
    a.add_argument("--prior", choices=tr.PRIOR_SOURCES)
    a.add_argument("--delta", type=float)
    a.add_argument("--sign", type=_sign)
    a.add_argument("--lambda", dest="lam", type=float)
    a.add_argument("--epochs", type=int)
    a.add_argument("--name", help="run directory name (default derived from mode/prior)")

    e = sub.add_parser("evaluate", help="score a checkpoint on a labeled dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))

    gc = sub.add_parser("gradcheck", help="finite-difference check of the losses")
    gc.add_argument("--seed", type=int, default=0)

    ll = sub.add_parser("losslab", help="binary penalty and derivative sweep")
    ll.add_argument("--tau-e", dest="tau_e", type=float, required=True)
    ll.add_argument("--out", required=True)

    r = sub.add_parser("report", help="comparison table and curves from run directories")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)

    b = sub.add_parser("benchmark", help="run the frozen synthetic method grid end to end")
    b.add_argument("--out", required=True)
    return ap


def _cmd_generate(args) -> int:
    path = Path(args.spec)
    if not path.exists():
        raise FileNotFoundError(f"{path}: spec file not found")
    spec, n_subjects, slices = runs.spec_from_json(json.loads(path.read_text()))
    ds = runs.generate_dataset(spec, n_subjects, slices, args.out)
    print(f"wrote {len(ds.samples)} samples to {args.out}")
    return 0


def _cmd_train_source(args) -> int:
    cfg = config.load(args.config)
    run_dir = runs.train_source(cfg)
    print(f"source model: {run_dir / 'final.sfda'}")
    return 0


def _cmd_adapt(args) -> int:
    cfg = config.load(args.config)
    over = {k: v for k, v in (("mode", args.mode), ("prior", args.prior), ("delta", args.delta),
                              ("sign", args.sign), ("lam", args.lam), ("epochs", args.epochs))
            if v is not None}
    if over:
        cfg = replace(cfg, adapt=replace(cfg.adapt, **over))
    try:
        cfg.adapt.validate()
    except ValueError as exc:
        raise config.ConfigError(f"adapt: {exc}") from None
    run_dir = runs.adapt(cfg, args.name)
    summary = json.loads((run_dir / "summary.json").read_text())
    ev = summary.get("evaluation", {})
    if "dsc_mean" in ev:
        print(f"{run_dir.name}: dsc_mean={ev['dsc_mean']:.4f} asd_mean={ev['asd_mean']}")
    else:
        print(f"{run_dir.name}: adapted; {ev.get('error', 'no evaluation')}")
    return 0


def _cmd_evaluate(args) -> int:
    ev = runs.evaluate_checkpoint(args.checkpoint, args.data, args.out, args.split)
    print(f"dsc_mean={ev['dsc_mean']:.6f} asd_mean={ev['asd_mean']:.6f}")
    return 0


def _cmd_gradcheck(args) -> int:
    worst = 0.0
    for loss in diagnostics.GRAD_LOSSES:
        res = diagnostics.network_gradcheck(loss, seed=args.seed)
        worst = max(worst, res.max_rel_error)
        print(f"{loss}: max_rel_error={res.max_rel_error:.3e} checked={res.n_checked} "
              f"kinked={res.n_kinked}")
    print(f"max relative error {worst:.3e}")
    return 0 if worst < GRADCHECK_TOL and math.isfinite(worst) else 1


def _cmd_losslab(args) -> int:
    if not 0.0 < args.tau_e < 1.0:
        raise UsageError(f"--tau-e must lie in (0, 1), got {args.tau_e}")
    out = Path(args.out)
    rows = runs.losslab(args.tau_e, out)
    atomic_write_text(out.with_suffix(".svg"), report.losslab_svg(rows, args.tau_e))
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def _cmd_report(args) -> int:
    rows = report.build_report(args.runs, args.out)
    print(report.table_markdown(rows), end="")
    return 0


def _cmd_benchmark(args) -> int:
    res = experiments.run_fixture(args.out, progress=print)
    rows = report.build_report(sorted(p for p in (Path(args.out) / "runs").iterdir()
                                      if p.name != "source"), Path(args.out) / "report")
    print(report.table_markdown(rows), end="")
    print(f"finished in {res.seconds:.0f}s")
    return 0


COMMANDS = {
    "generate": _cmd_generate, "train-source": _cmd_train_source, "adapt": _cmd_adapt,
    "evaluate": _cmd_evaluate, "gradcheck": _cmd_gradcheck, "losslab": _cmd_losslab,
    "report": _cmd_report, "benchmark": _cmd_benchmark,
}

USAGE_ERRORS = (UsageError, config.ConfigError)
RUNTIME_ERRORS = (sd.DatasetError, priors.PriorError, tr.TrainingError, report.ReportError,
                  ValueError, OSError, RuntimeError)


def _error_line(exc: BaseException) -> str:
    return "error: " + json.dumps({"type": type(exc).__name__, "message": str(exc)})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except USAGE_ERRORS as exc:
        print(_error_line(exc), file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(_error_line(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

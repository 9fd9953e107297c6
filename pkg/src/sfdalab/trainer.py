"""Source training and source-free adaptation loops."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import losses
from . import metrics
from . import network as nw
from . import priors

log = logging.getLogger(__name__)

MODES = ("no_adapt", "oracle", "ent_only", "adaent", "adami", "cda", "ada_source")
SOURCE_FREE_MODES = ("ent_only", "adaent", "adami")
SOURCE_JOINT_MODES = ("cda", "ada_source")
PRIOR_SOURCES = ("anatomical", "tau_gt", "perturbed", "tagfree")

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "adami"
    prior: str = "anatomical"
    delta: float = 0.0
    sign: int = 1
    lam: float = 1.0
    epochs: int = 150
    lr: float = 1e-6
    lr_decay: float = 0.7
    lr_period: int = 20
    weight_decay: float = 1e-3
    batch_size: int = 24
    seed: int = 0
    augment: bool = False
    zero_tol: float = priors.ZERO_TOL
    tagfree_epoch: Optional[int] = None
    widths: list = field(default_factory=lambda: list(nw.DEFAULT_WIDTHS))
    save_checkpoints: bool = True

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.prior not in PRIOR_SOURCES:
            raise ValueError(f"unknown prior source {self.prior!r}; expected one of {PRIOR_SOURCES}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lr_period <= 0:
            raise ValueError("lr_period must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.sign not in (1, -1):
            raise ValueError("sign must be +1 or -1")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")
        if self.zero_tol <= 0:
            raise ValueError("zero_tol must be positive")

    def tagfree_update_epoch(self) -> int:
        """Epoch at which tag-free selection is redone (100 of 150, scaled)."""
        if self.tagfree_epoch is not None:
            return self.tagfree_epoch
        return 100 if self.epochs == 150 else (2 * self.epochs) // 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training fields: {sorted(unknown)}")
        return cls(**d)


def full_scale_source_config(**kw) -> TrainConfig:
    base = dict(mode="oracle", epochs=150, lr=5e-4, lr_decay=0.9, lr_period=20,
                weight_decay=1e-3, batch_size=24, augment=True)
    base.update(kw)
    return TrainConfig(**base)


def full_scale_adapt_config(**kw) -> TrainConfig:
    base = dict(mode="adami", epochs=150, lr=1e-6, lr_decay=0.7, lr_period=20,
                weight_decay=1e-3, batch_size=24)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays) -> "OptimizerState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def adam_step(params, grads, state: OptimizerState, lr: float, weight_decay: float = 0.0,
              names=None) -> list:
    """One bias-corrected Adam update with L2 weight decay folded into the gradient."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    names = names or [f"param{i}" for i in range(len(params))]
    for name, p, g in zip(names, params, grads):
        if g.shape != p.shape:
            raise ad.ShapeError(f"adam_step[{name}]", p.shape, g.shape)
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name}; step aborted")
    state.t += 1
    c1 = 1.0 - BETA1 ** state.t
    c2 = 1.0 - BETA2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = g + weight_decay * p
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
    return out


def lr_schedule(epoch: int, lr0: float, factor: float, period: int) -> float:
    if period <= 0:
        raise ValueError("period must be positive")
    return lr0 * factor ** (epoch // period)


# ---------------------------------------------------------------------------
# inputs


@dataclass
class LabeledItem:
    id: str
    image: np.ndarray
    onehot: np.ndarray


@dataclass
class TargetItem:
    """What the source-free loop may see: an image, its tags and a prior."""

    id: str
    image: np.ndarray
    tags: Optional[np.ndarray]
    tau_e: Optional[np.ndarray]


def labeled_items(samples, n_classes: int) -> list:
    out = []
    for s in samples:
        if s.mask is None:
            raise TrainingError(f"sample {s.id} has no mask; supervised training needs labels")
        out.append(LabeledItem(s.id, s.image, losses.one_hot(s.mask, n_classes)))
    return out


def target_items(samples, table: priors.PriorTable, cfg: TrainConfig,
                 gt_ratios: Optional[dict] = None) -> list:
    """Attach the configured prior to each target sample, dropping masks.

    ``gt_ratios`` maps sample id -> exact label ratio and is only consulted for
    the ``tau_gt`` prior source.
    """
    out = []
    for s in samples:
        fg_tags = None if s.tags is None else np.asarray(s.tags[1:], dtype=bool)
        if cfg.prior == "tagfree" or cfg.mode == "ent_only":
            tau = None
        elif cfg.prior == "tau_gt":
            if gt_ratios is None or s.id not in gt_ratios:
                raise TrainingError("tau_gt prior needs ground-truth ratios computed from masks")
            tau = np.asarray(gt_ratios[s.id], dtype=np.float64)
        else:
            if fg_tags is None:
                raise TrainingError(f"prior {cfg.prior!r} needs image-level tags ({s.id})")
            tau = priors.tau_e(table, fg_tags)
            if cfg.prior == "perturbed":
                tau = priors.perturb(tau, cfg.delta, cfg.sign)
        out.append(TargetItem(s.id, s.image, fg_tags, tau))
    return out


def _dihedral(arr: np.ndarray, code: int) -> np.ndarray:
    """Flip/transpose the last two axes; ``code`` in 0..7 picks one of the 8 symmetries."""
    if code & 4:
        arr = np.swapaxes(arr, -1, -2)
    if code & 2:
        arr = arr[..., ::-1, :]
    if code & 1:
        arr = arr[..., :, ::-1]
    return np.ascontiguousarray(arr)


# ---------------------------------------------------------------------------
# evaluation


def predict_labels(params: nw.ModelParams, samples) -> dict:
    return {s.id: nw.segment(params, s.image) for s in samples}


def evaluate(params: nw.ModelParams, samples, n_classes: int, spacing=(1.0, 1.0, 1.0)) -> dict:
    """Per-subject 3D metrics plus ratio and MI diagnostics over ``samples``."""
    by_subject: dict = {}
    for s in samples:
        if s.mask is None:
            raise TrainingError(f"cannot evaluate {s.id}: ground-truth mask unavailable")
        by_subject.setdefault(s.subject, []).append(s)
    per_subject = {}
    preds = []
    pred_ratios, gt_ratios = [], []
    for subj, items in sorted(by_subject.items()):
        items = sorted(items, key=lambda s: s.slice)
        soft = [nw.predict(params, s.image) for s in items]
        preds.extend(soft)
        hard = np.stack([np.argmax(p, axis=0) for p in soft])
        gt = np.stack([s.mask for s in items])
        per_subject[subj] = metrics.evaluate_volume(hard, gt, n_classes, spacing)
        pred_ratios.extend(p.mean(axis=(1, 2)) for p in soft)
        gt_ratios.extend(priors.tau_gt(s.mask, n_classes) for s in items)
    agg = metrics.aggregate(per_subject, n_classes)
    agg["per_subject"] = per_subject
    agg["mean_pred_ratio"] = np.mean(pred_ratios, axis=0)
    agg["mean_gt_ratio"] = np.mean(gt_ratios, axis=0)
    agg["mutual_information"] = losses.mutual_information(preds)
    return agg


def mean_predicted_ratio(params: nw.ModelParams, images) -> np.ndarray:
    return np.mean([nw.predict(params, im).mean(axis=(1, 2)) for im in images], axis=0)


# ---------------------------------------------------------------------------
# logging rows


CSV_COLUMNS = ("epoch", "phase", "mode", "lr", "loss_total", "loss_ent", "loss_kl",
               "val_dsc_per_class", "val_asd_per_class", "mean_pred_ratio_per_class",
               "mean_gt_ratio_per_class", "mutual_information")


def _join(vals) -> str:
    return ";".join(metrics.fmt(float(v)) for v in vals)


def _row(epoch, phase, mode, lr, parts, val, n_classes) -> dict:
    row = {"epoch": epoch, "phase": phase, "mode": mode, "lr": repr(float(lr)),
           "loss_total": metrics.fmt(parts.get("total", math.nan)),
           "loss_ent": metrics.fmt(parts.get("ent", math.nan)),
           "loss_kl": metrics.fmt(parts.get("kl", math.nan))}
    if val is None:
        na = ";".join(["NA"] * (n_classes - 1))
        row.update(val_dsc_per_class=na, val_asd_per_class=na,
                   mean_pred_ratio_per_class=";".join(["NA"] * n_classes),
                   mean_gt_ratio_per_class=";".join(["NA"] * n_classes),
                   mutual_information="NA")
    else:
        ks = range(1, n_classes)
        row.update(val_dsc_per_class=_join(val["dsc"][k] for k in ks),
                   val_asd_per_class=_join(val["asd"][k] for k in ks),
                   mean_pred_ratio_per_class=_join(val["mean_pred_ratio"]),
                   mean_gt_ratio_per_class=_join(val["mean_gt_ratio"]),
                   mutual_information=metrics.fmt(val["mutual_information"]))
    return row


def metrics_csv_text(rows) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for r in rows:
        lines.append(",".join(str(r[c]) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# generic loop


@dataclass
class RunResult:
    params: nw.ModelParams
    rows: list
    info: dict = field(default_factory=dict)


def _batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _train(params: nw.ModelParams, cfg: TrainConfig, n_items: int, batch_loss: Callable,
           phase: str, n_classes: int, val_samples=None, out_dir: Optional[Path] = None,
           epoch_hook: Optional[Callable] = None) -> RunResult:
    """Shared epoch loop.

    ``batch_loss(layers, idx, rng)`` returns (total tensor, {name: float}).
    ``epoch_hook(epoch, params)`` may return a new item count (tag-free
    reselection) before the epoch's batches are drawn.
    """
    if n_items == 0:
        raise TrainingError(f"{phase}: no training items")
    rng = np.random.default_rng([cfg.seed, 0xB47C])
    aug_rng = np.random.default_rng([cfg.seed, 0xA06])
    names = params.names()
    state = OptimizerState.zeros_like(params.arrays())
    rows = []
    val = evaluate(params, val_samples, n_classes) if val_samples else None
    rows.append(_row(0, "init", cfg.mode, 0.0, {}, val, n_classes))
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    for epoch in range(cfg.epochs):
        if epoch_hook is not None:
            n_new = epoch_hook(epoch, params)
            if n_new is not None:
                n_items = n_new
        lr = lr_schedule(epoch, cfg.lr, cfg.lr_decay, cfg.lr_period)
        sums: dict = {}
        seen = 0
        for idx in _batches(n_items, cfg.batch_size, rng):
            g = ad.Graph()
            layers = nw.tracked_layers(params, g)
            total, parts = batch_loss(layers, idx, aug_rng)
            ad.backward(g, total)
            grads = [t.grad for pair in layers for t in pair]
            g.clear()
            params = params.with_arrays(adam_step(params.arrays(), grads, state, lr,
                                                  cfg.weight_decay, names))
            parts = dict(parts, total=float(total.data))
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            seen += len(idx)
        parts = {k: v / seen for k, v in sums.items()}
        val = evaluate(params, val_samples, n_classes) if val_samples else None
        rows.append(_row(epoch + 1, phase, cfg.mode, lr, parts, val, n_classes))
        if ckpt_dir is not None and cfg.save_checkpoints:
            nw.save(params, ckpt_dir / f"epoch_{epoch + 1:03d}.sfda")
        log.debug("%s epoch %d lr %.3g loss %.5f", phase, epoch + 1, lr, parts.get("total", math.nan))
    return RunResult(params, rows)


# ---------------------------------------------------------------------------
# phases


def _supervised_loss(items, n_classes, augment):
    def batch_loss(layers, idx, rng):
        terms = []
        for i in idx:
            item = items[i]
            img, y = item.image, item.onehot
            if augment:
                code = int(rng.integers(8))
                img, y = _dihedral(img, code), _dihedral(y, code)
            p = nw.forward(layers, ad.Tensor(img))
            terms.append(losses.cross_entropy(y, p))
        total = losses.batch_mean(terms)
        return total, {"ce": float(total.data)}
    return batch_loss


def train_source(cfg: TrainConfig, dataset, out_dir=None, init_params=None) -> RunResult:
    """Supervised cross-entropy on the labeled source training split.

    The returned parameters are those after the last epoch; validation is
    logged but never used for selection.
    """
    cfg.validate()
    train = dataset.split("train")
    if not train:
        raise TrainingError("source dataset has no training samples")
    k = dataset.n_classes
    params = init_params or nw.init(k, cfg.seed, tuple(cfg.widths))
    items = labeled_items(train, k)
    val = dataset.split("val") or None
    res = _train(params, cfg, len(items), _supervised_loss(items, k, cfg.augment),
                 "source", k, val, out_dir)
    return res


def _target_forward(layers, item):
    return nw.forward(layers, ad.Tensor(item.image))


def adapt(cfg: TrainConfig, params: nw.ModelParams, target, table: priors.PriorTable,
          n_classes: int, val_samples=None, source_items=None, oracle_items=None,
          out_dir=None) -> RunResult:
    """Adapt ``params`` to the target domain with the configured mode.

    ``target`` is a list of :class:`TargetItem` (images, tags, priors; never
    masks).  Source-joint modes also need ``source_items`` and the oracle
    needs ``oracle_items`` (labeled target data).
    """
    cfg.validate()
    mode = cfg.mode
    k = n_classes
    if mode == "no_adapt":
        val = evaluate(params, val_samples, k) if val_samples else None
        return RunResult(params, [_row(0, "init", mode, 0.0, {}, val, k)])
    if mode == "oracle":
        if not oracle_items:
            raise TrainingError("oracle mode needs labeled target items")
        return _train(params, cfg, len(oracle_items),
                      _supervised_loss(oracle_items, k, cfg.augment), "adapt", k, val_samples, out_dir)
    if mode in SOURCE_JOINT_MODES and not source_items:
        raise TrainingError(f"mode {mode} requires a source dataset")
    if mode in ("adaent", "adami", *SOURCE_JOINT_MODES) and cfg.prior != "tagfree":
        missing = [t.id for t in target if t.tau_e is None]
        if missing:
            raise TrainingError(f"mode {mode} needs tags/priors; missing for {missing[:3]}")

    nu = losses.class_weights(table.full)
    pool = list(target)
    active = list(pool)
    info: dict = {"tagfree_updates": []}

    def reselect(epoch, current):
        nonlocal active
        chosen = []
        for item in pool:
            tau_hat = nw.predict(current, item.image).mean(axis=(1, 2))
            dec = priors.tagfree_estimate(tau_hat, table, cfg.zero_tol)
            if dec.selected:
                chosen.append(TargetItem(item.id, item.image, None, dec.tau_e))
        if not chosen:
            raise TrainingError(f"tag-free selection discarded every image at epoch {epoch}")
        active = chosen
        info["tagfree_updates"].append({"epoch": epoch, "selected": len(chosen)})
        return len(chosen)

    hook = None
    if cfg.prior == "tagfree" and mode != "ent_only":
        update_at = cfg.tagfree_update_epoch()
        reselect(0, params)

        def hook(epoch, current):
            if epoch == update_at and epoch > 0:
                return reselect(epoch, current)
            return None

    src_rng = np.random.default_rng([cfg.seed, 0x50C])
    src_queue: list = []

    def next_source(n):
        out = []
        while len(out) < n:
            if not src_queue:
                src_queue.extend(src_rng.permutation(len(source_items)).tolist())
            out.append(source_items[src_queue.pop(0)])
        return out

    def batch_loss(layers, idx, rng):
        ent_terms, kl_terms, totals = [], [], []
        for i in idx:
            item = active[i]
            p = _target_forward(layers, item)
            if mode == "ent_only":
                ent = losses.weighted_entropy(p, nu)
                ent_terms.append(ent)
                totals.append(ent)
                continue
            tau_hat = losses.predicted_ratio(p)
            if mode == "adami":
                ent = losses.weighted_entropy(p, nu)
                pen = ad.scale(losses.kl(tau_hat, item.tau_e), cfg.lam)
            elif mode == "adaent":
                ent = losses.weighted_entropy(p, nu)
                pen = ad.scale(losses.kl(item.tau_e, tau_hat), cfg.lam)
            elif mode == "cda":
                ent = None
                pen = ad.scale(losses.cda_penalty(tau_hat, item.tau_e), cfg.lam)
            else:
                ent = None
                pen = ad.scale(losses.adasource_penalty(tau_hat, item.tau_e), cfg.lam)
            kl_terms.append(pen)
            if ent is not None:
                ent_terms.append(ent)
                totals.append(ad.add(ent, pen))
            else:
                totals.append(pen)
        total = losses.batch_mean(totals)
        parts = {}
        if ent_terms:
            parts["ent"] = float(np.mean([float(t.data) for t in ent_terms]))
        if kl_terms:
            parts["kl"] = float(np.mean([float(t.data) for t in kl_terms]))
        if mode in SOURCE_JOINT_MODES:
            src = next_source(len(idx))
            ce = losses.batch_mean([losses.cross_entropy(s.onehot, _target_forward(layers, s))
                                    for s in src])
            parts["ce"] = float(ce.data)
            total = ad.add(ce, total)
        return total, parts

    res = _train(params, cfg, len(active), batch_loss, "adapt", k, val_samples, out_dir, hook)
    res.info.update(info)
    res.info["n_active"] = len(active)
    return res

"""Training objectives and information-theoretic diagnostics.

Per-image losses take a softmax prediction ``p`` of shape (K, H, W) as an
:class:`~sfdalab.autodiff.Tensor` (or array) and return a scalar tensor, so
they can be differentiated through the network.  Ratio vectors are length-K.
All logarithms are natural.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad

KL_FLOOR = 1e-8


def _t(x) -> ad.Tensor:
    return x if isinstance(x, ad.Tensor) else ad.Tensor(x)


def one_hot(mask, n_classes: int) -> np.ndarray:
    """(H, W) integer label map -> (K, H, W) float one-hot."""
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) >= n_classes:
        raise ValueError(f"mask labels outside [0, {n_classes})")
    return (np.arange(n_classes)[:, None, None] == mask[None]).astype(np.float64)


def _check_one_hot(y: np.ndarray) -> None:
    if not np.all((y == 0.0) | (y == 1.0)) or not np.all(y.sum(axis=0) == 1.0):
        raise ValueError("cross_entropy target is not one-hot per pixel")


def cross_entropy(y, p) -> ad.Tensor:
    """Mean over pixels of -sum_k y_k log p_k."""
    y, p = _t(y), _t(p)
    _check_one_hot(y.data)
    if y.shape != p.shape:
        raise ad.ShapeError("cross_entropy", y.shape, p.shape)
    n_pix = p.shape[1] * p.shape[2]
    return ad.scale(ad.sum(ad.mul(y, ad.log(p))), -1.0 / n_pix)


def class_weights(tau_bar) -> np.ndarray:
    """Normalized inverse class ratios."""
    tau_bar = np.asarray(tau_bar, dtype=np.float64)
    if np.any(tau_bar <= 0):
        raise ValueError("class_weights needs strictly positive ratios; "
                         "apply an epsilon floor to the prior first")
    inv = 1.0 / tau_bar
    return inv / inv.sum()


def _weight_map(nu, shape) -> np.ndarray:
    nu = np.asarray(nu, dtype=np.float64)
    if nu.shape != (shape[0],):
        raise ad.ShapeError("class weights", nu.shape, (shape[0],))
    return np.broadcast_to(nu[:, None, None], shape).copy()


def weighted_entropy(p, nu) -> ad.Tensor:
    """Mean over pixels of -sum_k nu_k p_k log p_k."""
    p = _t(p)
    w = ad.Tensor(_weight_map(nu, p.shape))
    n_pix = p.shape[1] * p.shape[2]
    plogp = ad.mul(p, ad.log(p))
    return ad.scale(ad.sum(ad.mul(w, plogp)), -1.0 / n_pix)


def predicted_ratio(p) -> ad.Tensor:
    """Class ratio of a soft prediction: mean softmax per class."""
    return ad.mean(_t(p), axis=(1, 2))


def _floor_renorm(a: ad.Tensor) -> ad.Tensor:
    f = ad.clamp_min(a, KL_FLOOR)
    return ad.div_scalar(f, ad.sum(f))


def kl(a, b) -> ad.Tensor:
    """KL(a || b) after flooring both arguments at 1e-8 and renormalizing."""
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ad.ShapeError("kl", a.shape, b.shape)
    a, b = _floor_renorm(a), _floor_renorm(b)
    return ad.sum(ad.mul(a, ad.sub(ad.log(a), ad.log(b))))


def adami_loss(p, nu, tau_e, lam: float = 1.0) -> ad.Tensor:
    """Weighted entropy plus lam * KL(predicted ratio || prior) for one image."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return ad.add(weighted_entropy(p, nu), ad.scale(kl(predicted_ratio(p), tau_e), lam))


def adaent_loss(p, nu, tau_e, lam: float = 1.0) -> ad.Tensor:
    """Weighted entropy plus lam * KL(prior || predicted ratio) for one image."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return ad.add(weighted_entropy(p, nu), ad.scale(kl(tau_e, predicted_ratio(p)), lam))


def cda_penalty(tau_hat, tau_e) -> ad.Tensor:
    """Squared distance between predicted and prior class ratios."""
    d = ad.sub(_t(tau_e), _t(tau_hat))
    return ad.sum(ad.mul(d, d))


def adasource_penalty(tau_hat, tau_e) -> ad.Tensor:
    return kl(tau_e, tau_hat)


def batch_mean(losses: Sequence[ad.Tensor]) -> ad.Tensor:
    """Mean of per-image scalar losses, accumulated left to right."""
    if not losses:
        raise ValueError("empty batch")
    total = losses[0]
    for item in losses[1:]:
        total = ad.add(total, item)
    return ad.scale(total, 1.0 / len(losses))


# ---------------------------------------------------------------------------
# binary penalty profiles (no floor; analytic)


def _check_open_unit(name: str, x: float) -> None:
    if not 0.0 < x < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {x}")


def binary_penalty(loss: str, tau_hat1: float, tau_e1: float) -> float:
    """L1 = KL(prior || prediction), L2 = KL(prediction || prior), binary case."""
    _check_open_unit("tau_hat1", tau_hat1)
    _check_open_unit("tau_e1", tau_e1)
    x, t = tau_hat1, tau_e1
    if loss == "L1":
        return (1 - t) * math.log((1 - t) / (1 - x)) + t * math.log(t / x)
    if loss == "L2":
        return (1 - x) * math.log((1 - x) / (1 - t)) + x * math.log(x / t)
    raise ValueError(f"unknown penalty {loss!r}; expected 'L1' or 'L2'")


def boundary_gradient_probe(loss: str, tau_hat1: float, tau_e1: float) -> float:
    """d(penalty)/d(foreground ratio) for the binary penalties."""
    _check_open_unit("tau_hat1", tau_hat1)
    _check_open_unit("tau_e1", tau_e1)
    x, t = tau_hat1, tau_e1
    if loss == "L1":
        return (1 - t) / (1 - x) - t / x
    if loss == "L2":
        return math.log(x / t) - math.log((1 - x) / (1 - t))
    raise ValueError(f"unknown penalty {loss!r}; expected 'L1' or 'L2'")


# ---------------------------------------------------------------------------
# diagnostics on plain arrays


def entropy(q) -> float:
    """Shannon entropy with 0 log 0 = 0."""
    q = np.asarray(q, dtype=np.float64)
    nz = q[q > 0]
    return float(-np.sum(nz * np.log(nz)))


def entropy_kl_identity_check(tau_hat) -> float:
    """|H(tau) - ln K + KL(tau || uniform)|."""
    tau_hat = np.asarray(tau_hat, dtype=np.float64)
    k = tau_hat.size
    kl_u = float(kl(tau_hat, np.full(k, 1.0 / k)).data)
    return abs(entropy(tau_hat) - math.log(k) + kl_u)


def _pixel_entropy_mean(p: np.ndarray) -> float:
    safe = np.maximum(p, ad.LOG_FLOOR)
    return float(-np.sum(p * np.log(safe)) / (p.shape[1] * p.shape[2]))


def mutual_information(preds) -> float:
    """Mean over images of H(predicted ratio) - mean pixel entropy (unweighted)."""
    preds = [np.asarray(p, dtype=np.float64) for p in preds]
    if not preds:
        raise ValueError("need at least one prediction")
    total = 0.0
    for p in preds:
        if np.all(p == p[:, :1, :1]):
            continue  # constant prediction: exactly zero information, skip rounding residue
        tau = p.mean(axis=(1, 2))
        total += entropy(tau) - _pixel_entropy_mean(p)
    return total / len(preds)


def mutual_information_pointwise(preds) -> float:
    """Same quantity as :func:`mutual_information` via mean_i KL(p_i || tau).

    Expands the expectation pixel by pixel instead of through the entropies,
    so it serves as an independent check of the decomposition.
    """
    preds = [np.asarray(p, dtype=np.float64) for p in preds]
    if not preds:
        raise ValueError("need at least one prediction")
    vals = []
    for p in preds:
        k = p.shape[0]
        cols = p.reshape(k, -1)
        tau = cols.sum(axis=1) / cols.shape[1]
        log_p = np.log(np.maximum(cols, ad.LOG_FLOOR))
        log_tau = np.log(np.maximum(tau, ad.LOG_FLOOR))
        vals.append(float(np.mean(np.sum(cols * (log_p - log_tau[:, None]), axis=0))))
    return float(np.mean(vals))

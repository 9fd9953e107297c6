"""Finite-difference checks of the training losses through the segmentation network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from . import network as nw

GRAD_LOSSES = ("adami", "adaent", "ce")


@dataclass
class GradcheckResult:
    loss: str
    seed: int
    max_rel_error: float
    n_checked: int
    n_kinked: int       # coordinates skipped because the stencil crosses a ReLU kink


def _problem(loss: str, seed: int, size: int, n_classes: int):
    rng = np.random.default_rng(seed)
    params = nw.init(n_classes, seed=seed)
    # perturb biases so they are not all exactly zero
    params = params.with_arrays([a if a.ndim > 1 else rng.normal(0, 0.1, a.shape)
                                 for a in params.arrays()])
    image = ad.Tensor(rng.uniform(0, 1, (1, size, size)))
    if loss == "ce":
        y = ad.Tensor(losses.one_hot(rng.integers(0, n_classes, (size, size)), n_classes))
        return params, image, lambda p: losses.cross_entropy(y, p)
    fg = rng.uniform(0.02, 0.3, n_classes - 1)
    fg = fg / max(1.0, fg.sum() / 0.8)
    tau_e = np.concatenate([[1 - fg.sum()], fg])
    nu = losses.class_weights(tau_e)
    lam = float(rng.uniform(0.5, 2.0))
    if loss == "adami":
        return params, image, lambda p: losses.adami_loss(p, nu, tau_e, lam)
    if loss == "adaent":
        return params, image, lambda p: losses.adaent_loss(p, nu, tau_e, lam)
    raise ValueError(f"unknown loss {loss!r}; expected one of {GRAD_LOSSES}")


def _evaluate(arrays, image, objective):
    layers = [(ad.Tensor(arrays[2 * i]), ad.Tensor(arrays[2 * i + 1]))
              for i in range(len(arrays) // 2)]
    trace: list = []
    value = objective(ad.softmax(nw.logits(layers, image, trace), axis=0))
    return float(value.data), [t > 0 for t in trace]


def _sample_coords(arrays, n_coords: int, rng) -> list:
    """Stratified coordinate sample: every parameter tensor gets a share."""
    per = max(1, n_coords // len(arrays))
    coords = []
    for t, a in enumerate(arrays):
        picks = rng.choice(a.size, size=min(per, a.size), replace=False)
        coords += [(t, int(j)) for j in sorted(picks)]
    return coords


def network_gradcheck(loss: str, seed: int = 0, size: int = 8, n_classes: int = 2,
                      n_coords: int = 48, h: float = 1e-5) -> GradcheckResult:
    """Compare backprop against central differences on sampled parameter coordinates.

    Relative error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.  A
    coordinate whose +-h stencil flips the sign of any hidden pre-activation is
    not differentiable there and is skipped (counted in ``n_kinked``).
    ``n_coords=None`` checks every coordinate.
    """
    params, image, objective = _problem(loss, seed, size, n_classes)
    graph = ad.Graph()
    layers = nw.tracked_layers(params, graph)
    root = objective(nw.forward(layers, image))
    ad.backward(graph, root)
    analytic = [t.grad for pair in layers for t in pair]

    arrays = params.arrays()
    _, base_signs = _evaluate(arrays, image, objective)
    rng = np.random.default_rng([seed, 7])
    if n_coords is None:
        coords = [(t, j) for t, a in enumerate(arrays) for j in range(a.size)]
    else:
        coords = _sample_coords(arrays, n_coords, rng)

    worst, kinked, checked = 0.0, 0, 0
    for t, j in coords:
        vals, crossed = [], False
        for step in (h, -h):
            moved = [a.copy() for a in arrays]
            moved[t].reshape(-1)[j] += step
            v, signs = _evaluate(moved, image, objective)
            crossed |= any(np.any(s != b) for s, b in zip(signs, base_signs))
            vals.append(v)
        if crossed:
            kinked += 1
            continue
        numeric = (vals[0] - vals[1]) / (2 * h)
        a = float(analytic[t].reshape(-1)[j])
        worst = max(worst, abs(a - numeric) / max(1e-8, abs(a) + abs(numeric)))
        checked += 1
    return GradcheckResult(loss, seed, worst, checked, kinked)

"""Tabular encoder, discriminative head, losses and prediction averaging."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import LabelError, ShapeError

EPS = 1e-12


@dataclass
class MLPParams:
    w1: nm.Tensor  # [T, H]
    b1: nm.Tensor
    w2: nm.Tensor  # [H, E_tab]
    b2: nm.Tensor


def mlp_encode(x: nm.Tensor, p: MLPParams) -> nm.Tensor:
    x = nm.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != p.w1.shape[0]:
        raise ShapeError(f"tabular input {x.shape} does not match MLP input width {p.w1.shape[0]}")
    return nm.linear(nm.relu(nm.linear(x, p.w1, p.b1)), p.w2, p.b2)


def discriminative_classify(f: nm.Tensor, w: nm.Tensor, b: nm.Tensor) -> nm.Tensor:
    f = nm.as_tensor(f)
    if f.data.ndim != 2 or f.shape[1] != w.shape[0]:
        raise ShapeError(f"features {f.shape} do not match classifier weight {w.shape}")
    return nm.softmax(nm.linear(f, w, b))


def _true_class_prob(p, y):
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (p.shape[0],):
        raise ShapeError(f"{y.shape[0] if y.ndim else 0} labels for {p.shape[0]} predictions")
    if y.size and (y.min() < 0 or y.max() >= p.shape[1]):
        raise LabelError(f"labels must lie in [0, {p.shape[1]})")
    return nm.clip(nm.pick(p, y), EPS, 1.0 - EPS), y


def cross_entropy(p: nm.Tensor, y) -> nm.Tensor:
    pt, _ = _true_class_prob(p, y)
    return nm.mul(nm.reduce_mean(nm.log(pt)), -1.0)


def focal_loss(p: nm.Tensor, y, gamma: float = 2.0, alpha=None) -> nm.Tensor:
    """Mean of ``-alpha_y (1 - p_y)^gamma log p_y``; ``alpha`` is None, a scalar or per-class."""
    pt, y = _true_class_prob(p, y)
    term = nm.mul(nm.power(nm.sub(1.0, pt), gamma), nm.log(pt))
    if alpha is not None:
        a = np.asarray(alpha, dtype=np.float64)
        term = nm.mul(term, a[y] if a.ndim else a)
    return nm.mul(nm.reduce_mean(term), -1.0)


@dataclass
class LossBreakdown:
    ce_g: nm.Tensor | None
    fl_g: nm.Tensor | None
    ce_d: nm.Tensor | None
    fl_d: nm.Tensor | None
    total: nm.Tensor

    def as_dict(self):
        return {k: (None if v is None else float(v.data)) for k, v in vars(self).items()}


def total_loss(p_g, p_d, y, gamma=2.0, alpha=None, focal=True) -> LossBreakdown:
    """Sum of cross-entropy (and, with ``focal``, focal) terms for each head that is present."""
    terms = {}
    if p_g is not None:
        terms["ce_g"] = cross_entropy(p_g, y)
        if focal:
            terms["fl_g"] = focal_loss(p_g, y, gamma, alpha)
    if p_d is not None:
        terms["ce_d"] = cross_entropy(p_d, y)
        if focal:
            terms["fl_d"] = focal_loss(p_d, y, gamma, alpha)
    if not terms:
        raise ValueError("total_loss needs at least one head")
    total = None
    for key in ("ce_g", "fl_g", "ce_d", "fl_d"):
        if key in terms:
            total = terms[key] if total is None else nm.add(total, terms[key])
    return LossBreakdown(terms.get("ce_g"), terms.get("fl_g"), terms.get("ce_d"), terms.get("fl_d"), total)


def average_prediction(p_g, p_d):
    if p_g.shape != p_d.shape:
        raise ShapeError(f"head outputs differ in shape: {p_g.shape} vs {p_d.shape}")
    if isinstance(p_g, nm.Tensor) or isinstance(p_d, nm.Tensor):
        return nm.mul(nm.add(p_g, p_d), 0.5)
    return (np.asarray(p_g) + np.asarray(p_d)) / 2.0


@dataclass
class Prediction:
    p_g: np.ndarray | None
    p_d: np.ndarray | None
    p_final: np.ndarray

"""Central finite-difference checks of the closed-form loss gradients.

The reference derivatives are computed from loss *values* only: every
coordinate of the raw feature, every coordinate of every raw proxy and the
bias are perturbed by +-h and the perturbed forward passes are evaluated in
a single batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Hyperparams, MarginVariant, l2_normalize
from .loss import head, loss_and_grads, margin_shift

REL_TOL = 1e-5
ABS_TOL = 1e-8


@dataclass
class GradCheckResult:
    kind: str
    max_rel_err: float
    max_abs_err: float
    n_params: int
    passed: bool


def _error(analytic, numeric):
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    abs_err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(abs_err <= ABS_TOL, 0.0, abs_err / np.where(scale > 0, scale, 1.0))
    return rel, abs_err


def numeric_gradients(kind, x, weights, b, y, hp, h=1e-6, shift=None, **kw):
    """(d_feature, d_weights, d_bias) by central differences of the loss value."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    K, D = weights.shape
    w_hat = l2_normalize(weights)

    def values(cos_batch, bias):
        ys = np.full(cos_batch.shape[0], y)
        sh = None if shift is None else np.full(cos_batch.shape[0], shift)
        return np.asarray(head(kind, np.clip(cos_batch, -1.0, 1.0), ys, hp, bias, shift=sh, **kw).value)

    eye = np.eye(D)
    # feature perturbations: rows x + h e_d, then x - h e_d
    xs = np.concatenate([x + h * eye, x - h * eye])
    cos_x = l2_normalize(xs) @ w_hat.T
    fx = values(cos_x, b)
    d_feature = (fx[:D] - fx[D:]) / (2 * h)

    # proxy perturbations only move column i of the cosine row
    x_hat = l2_normalize(x)
    base = w_hat @ x_hat
    cos_w = np.repeat(base[None, :], 2 * K * D, axis=0)
    row = 0
    for sign in (1.0, -1.0):
        for i in range(K):
            wp = weights[i] + sign * h * eye
            cos_w[row:row + D, i] = l2_normalize(wp) @ x_hat
            row += D
    fw = values(cos_w, b)
    d_weights = ((fw[:K * D] - fw[K * D:]) / (2 * h)).reshape(K, D)

    fb = values(np.stack([base, base]), b + h)[0], values(np.stack([base, base]), b - h)[0]
    d_bias = (fb[0] - fb[1]) / (2 * h)
    return d_feature, d_weights, d_bias


def check_instance(kind, x, weights, b, y, hp, h=1e-6, **kw) -> GradCheckResult:
    """Compare analytic and numeric gradients for one sample.

    For the arc / multiplicative margins the margin shift is computed once
    at the base point and frozen for both evaluations.
    """
    shift = None
    if kind in ("arc", "mult"):
        variant = MarginVariant.ARC_ADDITIVE if kind == "arc" else MarginVariant.MULTIPLICATIVE
        cos_y = float(l2_normalize(weights[y]) @ l2_normalize(x))
        shift = float(margin_shift(cos_y, hp.with_(margin_variant=variant)))
    out = loss_and_grads(kind, x, weights, b, y, hp, shift=shift, **kw)
    nf, nw, nb = numeric_gradients(kind, x, weights, b, y, hp, h=h, shift=shift, **kw)
    analytic = np.concatenate([out.d_feature, out.d_weights.ravel(), [out.d_bias]])
    numeric = np.concatenate([nf, nw.ravel(), [nb]])
    rel, abs_err = _error(analytic, numeric)
    max_rel = float(rel.max())
    return GradCheckResult(kind, max_rel, float(abs_err.max()), analytic.size, max_rel <= REL_TOL)


def random_instance(kind, rng, K=None, D=None):
    """Random (x, weights, b, y, hp, extra kwargs) drawn for a gradient check."""
    K = K if K is not None else int(rng.choice([2, 8, 32]))
    D = D if D is not None else int(rng.choice([4, 16]))
    x = rng.standard_normal(D) * rng.uniform(0.5, 3.0)
    weights = rng.standard_normal((K, D)) * rng.uniform(0.5, 3.0, size=(K, 1))
    y = int(rng.integers(K))
    lam = float(rng.uniform(0.3, 0.9))
    r = float(rng.uniform(10.0, 40.0))
    t = float(rng.uniform(1.0, 5.0))
    b = float(rng.uniform(-15.0, 2.0))
    kw = {}
    if kind == "arc":
        hp = Hyperparams(lam=lam, r=r, m_p=float(rng.uniform(0.0, 0.8)), m_n=0.0, t=t,
                         margin_variant=MarginVariant.ARC_ADDITIVE)
    elif kind == "mult":
        hp = Hyperparams(lam=lam, r=r, m_p=float(rng.uniform(1.0, 2.5)), m_n=0.0, t=t,
                         margin_variant=MarginVariant.MULTIPLICATIVE)
    else:
        m = float(rng.uniform(0.0, 0.5))
        hp = Hyperparams.tied(lam=lam, r=r, m=m, t=t)
    if kind == "softmax":
        kw = dict(s=float(rng.uniform(4.0, 40.0)), softmax_margin=float(rng.uniform(0.0, 0.4)))
    return x, weights, b, y, hp, kw


def run_suite(kinds, trials: int, seed: int = 0, h: float = 1e-6):
    """Run ``trials`` random checks per loss kind; returns {kind: [GradCheckResult]}."""
    rng = np.random.default_rng(seed)
    results = {}
    for kind in kinds:
        res = []
        for _ in range(trials):
            x, weights, b, y, hp, kw = random_instance(kind, rng)
            res.append(check_instance(kind, x, weights, b, y, hp, h=h, **kw))
        results[kind] = res
    return results

"""Binary one-vs-all hypersphere losses with hand-derived gradients.

Every loss here is evaluated at the cosine level first (``cos`` has shape
(K,) for one sample or (N, K) for a batch, ``y`` the matching label(s)) and
returns per-sample values together with ``d_cos`` and ``d_bias``.
:func:`backprop_normalization` then chains ``d_cos`` through the two
L2 normalizations to obtain gradients for the raw proxies and raw features.

The binary losses decompose into one term per class, ``L = sum_i f_i``.
Class sums are always folded in class-index order (:func:`ordered_sum`) so a
partitioned evaluation that continues the same fold is bitwise identical.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Hyperparams, MarginVariant, l2_normalize
from .errors import DimensionMismatch, InvalidHyperparams, LabelOutOfRange
from .simadjust import g, g_prime

ARCCOS_CLAMP = 1e-12
DEFAULT_ARC_MARGIN = 0.5
DEFAULT_MULT_MARGIN = 1.7

LOSS_KINDS = ("naive", "balanced", "curvature", "final", "arc", "mult", "softmax")


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def ordered_sum(a, axis=-1, initial=None):
    """Left-to-right sum along ``axis``, continuing from ``initial`` if given.

    ``ordered_sum(B, initial=ordered_sum(A)) == ordered_sum(concat(A, B))``
    holds bitwise, which is what partitioned evaluation relies on.
    """
    a = np.moveaxis(np.asarray(a, dtype=np.float64), axis, 0)
    acc = np.zeros(a.shape[1:]) if initial is None else np.asarray(initial, dtype=np.float64)
    return np.add.accumulate(np.concatenate([acc[None], a]), axis=0)[-1]


@dataclass
class LossGradients:
    """Loss value(s) and partial derivatives.

    ``value`` and ``d_bias`` are per-sample (scalars for a single sample).
    ``d_weights``/``d_feature`` are filled by :func:`backprop_normalization`.
    """

    value: np.ndarray | float
    d_cos: np.ndarray
    d_bias: np.ndarray | float = 0.0
    d_weights: np.ndarray | None = None
    d_feature: np.ndarray | None = None


@dataclass(frozen=True)
class AblationFlags:
    pn: bool = False
    eh: bool = False
    am: bool = False
    sa: bool = False

    def __post_init__(self):
        if self.am and not self.eh:
            raise InvalidHyperparams("angular margin requires the easy/hard (r-scaled) form")
        if self.sa and not self.am:
            raise InvalidHyperparams("similarity adjustment is only defined on the margin loss")

    @property
    def name(self) -> str:
        on = [k.upper() for k in ("pn", "eh", "am", "sa") if getattr(self, k)]
        return "+".join(on) if on else "none"


# cumulative rows of the design-principle ablation
ABLATION_LADDER = (
    AblationFlags(),
    AblationFlags(pn=True),
    AblationFlags(pn=True, eh=True),
    AblationFlags(pn=True, eh=True, am=True),
    AblationFlags(pn=True, eh=True, am=True, sa=True),
)


def _check_labels(cos, y):
    cos = np.asarray(cos, dtype=np.float64)
    y = np.asarray(y)
    if cos.ndim not in (1, 2):
        raise DimensionMismatch("cosines must have shape (K,) or (N, K)")
    if y.shape != cos.shape[:-1]:
        raise DimensionMismatch(f"labels shape {y.shape} does not match cosines {cos.shape}")
    K = cos.shape[-1]
    if np.any(y < 0) or np.any(y >= K):
        raise LabelOutOfRange(f"label outside [0, {K})")
    return cos, y


def positive_mask(y, K: int) -> np.ndarray:
    y = np.asarray(y)
    return np.arange(K) == y[..., None]


def class_terms(cos, pos, *, w_pos, w_neg, r, m_p, m_n, b, t, shift=None):
    """Per-class loss terms f_i and their derivatives (elementwise in i).

    ``pos`` marks the positive column(s).  ``shift`` is an optional
    per-sample constant added to the adjusted positive cosine; it enters the
    forward logit only (its derivative is deliberately ignored).
    Returns ``(terms, d_cos, d_bias_terms)``, each shaped like ``cos``.
    """
    gc = g(cos, t)
    gp = g_prime(cos, t)
    sh = 0.0 if shift is None else np.asarray(shift, dtype=np.float64)[..., None]
    u = r * (gc - m_p + sh) + b
    v = r * (gc + m_n) + b
    sig_neg_u = sigmoid(-u)
    sig_v = sigmoid(v)
    terms = np.where(pos, (w_pos / r) * softplus(-u), (w_neg / r) * softplus(v))
    d_cos = np.where(pos, -w_pos * sig_neg_u * gp, w_neg * sig_v * gp)
    d_b = np.where(pos, -(w_pos / r) * sig_neg_u, (w_neg / r) * sig_v)
    return terms, d_cos, d_b


def _binary(cos, y, has_bias=True, **kw) -> LossGradients:
    cos, y = _check_labels(cos, y)
    pos = positive_mask(y, cos.shape[-1])
    terms, d_cos, d_b = class_terms(cos, pos, **kw)
    value = ordered_sum(terms)
    # losses below the margin rung carry no bias parameter
    d_bias = ordered_sum(d_b) if has_bias else np.zeros_like(value)
    if value.ndim == 0:
        value, d_bias = float(value), float(d_bias)
    return LossGradients(value, d_cos, d_bias)


def loss_naive(cos, y) -> LossGradients:
    return _binary(cos, y, w_pos=1.0, w_neg=1.0, r=1.0, m_p=0.0, m_n=0.0, b=0.0, t=1.0,
                   has_bias=False)


def loss_balanced(cos, y, lam: float) -> LossGradients:
    _check_lambda(lam)
    return _binary(cos, y, w_pos=lam, w_neg=1.0 - lam, r=1.0, m_p=0.0, m_n=0.0, b=0.0, t=1.0,
                   has_bias=False)


def loss_curvature(cos, y, lam: float, r: float) -> LossGradients:
    _check_lambda(lam)
    if not r > 0:
        raise InvalidHyperparams("r must be positive")
    return _binary(cos, y, w_pos=lam, w_neg=1.0 - lam, r=r, m_p=0.0, m_n=0.0, b=0.0, t=1.0,
                   has_bias=False)


def loss_final(cos, y, hp: Hyperparams, b: float = 0.0) -> LossGradients:
    """Cosine-additive margin loss with bias and similarity adjustment."""
    return _binary(cos, y, w_pos=hp.lam, w_neg=1.0 - hp.lam, r=hp.r,
                   m_p=hp.m_p, m_n=hp.m_n, b=b, t=hp.t)


def _check_lambda(lam):
    if not 0.0 <= lam <= 1.0:
        raise InvalidHyperparams(f"lambda must lie in [0, 1], got {lam}")


def margin_shift(cos_y, hp: Hyperparams):
    """Constant added to g(cos theta_y) by the arc / multiplicative margins.

    Equals ``g(cos(theta_y')) - g(cos(theta_y))`` where ``theta_y'`` is the
    margin-shifted angle.  Callers treat the result as a constant.
    """
    cos_y = np.asarray(cos_y, dtype=np.float64)
    theta = np.arccos(np.clip(cos_y, -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP))
    m = hp.m_p
    if hp.margin_variant is MarginVariant.ARC_ADDITIVE:
        shifted = np.minimum(np.pi, theta + m)
    elif hp.margin_variant is MarginVariant.MULTIPLICATIVE:
        with np.errstate(divide="ignore"):
            mult = np.minimum(m, np.where(theta > 0, np.pi / np.where(theta > 0, theta, 1.0), np.inf))
        shifted = mult * theta
    else:
        raise InvalidHyperparams("margin_shift only applies to the arc and multiplicative variants")
    return g(np.cos(shifted), hp.t) - g(cos_y, hp.t)


def loss_variant(cos, y, hp: Hyperparams, b: float = 0.0, shift=None) -> LossGradients:
    """Arc-additive or multiplicative margin with detached shift.

    The shifted positive cosine is used in the forward pass; backward sees
    only the unshifted path.  Pass ``shift`` to freeze it explicitly (used by
    gradient checks); by default it is computed from ``cos``.
    """
    if hp.margin_variant is MarginVariant.COSINE_ADDITIVE:
        return loss_final(cos, y, hp, b)
    cos, y = _check_labels(cos, y)
    if shift is None:
        cos_y = np.take_along_axis(cos, y[..., None], axis=-1)[..., 0]
        shift = margin_shift(cos_y, hp)
    return _binary(cos, y, w_pos=hp.lam, w_neg=1.0 - hp.lam, r=hp.r,
                   m_p=0.0, m_n=0.0, b=b, t=hp.t, shift=shift)


def loss_softmax(cos, y, s: float = 30.0, margin: float = 0.0, t: float = 1.0) -> LossGradients:
    """Scale-normalized softmax cross-entropy with optional additive target margin.

    ``t != 1`` applies the similarity adjustment to every cosine first.
    """
    if not s > 0:
        raise InvalidHyperparams("softmax scale must be positive")
    cos, y = _check_labels(cos, y)
    pos = positive_mask(y, cos.shape[-1])
    z = s * (g(cos, t) - margin * pos)
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    sum_ez = ez.sum(axis=-1, keepdims=True)
    lse = zmax[..., 0] + np.log(sum_ez[..., 0])
    z_y = np.where(pos, z, 0.0).sum(axis=-1)
    value = lse - z_y
    p = ez / sum_ez
    d_cos = s * (p - pos) * g_prime(cos, t)
    if np.ndim(value) == 0:
        return LossGradients(float(value), d_cos, 0.0)
    return LossGradients(value, d_cos, np.zeros_like(value))


def loss_ablation(cos, y, flags: AblationFlags, hp: Hyperparams, b: float = 0.0) -> LossGradients:
    """Dispatch to the loss matching a cumulative set of design principles."""
    if not flags.pn and not flags.eh:
        return loss_naive(cos, y)
    w_pos, w_neg = (hp.lam, 1.0 - hp.lam) if flags.pn else (1.0, 1.0)
    if not flags.eh:
        return _binary(cos, y, w_pos=w_pos, w_neg=w_neg, r=1.0, m_p=0.0, m_n=0.0, b=0.0, t=1.0,
                   has_bias=False)
    if not flags.am:
        return _binary(cos, y, w_pos=w_pos, w_neg=w_neg, r=hp.r, m_p=0.0, m_n=0.0, b=0.0, t=1.0,
                   has_bias=False)
    t = hp.t if flags.sa else 1.0
    if hp.margin_variant is MarginVariant.COSINE_ADDITIVE:
        return _binary(cos, y, w_pos=w_pos, w_neg=w_neg, r=hp.r, m_p=hp.m_p, m_n=hp.m_n, b=b, t=t)
    cos, y = _check_labels(cos, y)
    cos_y = np.take_along_axis(cos, y[..., None], axis=-1)[..., 0]
    return _binary(cos, y, w_pos=w_pos, w_neg=w_neg, r=hp.r, m_p=0.0, m_n=0.0, b=b, t=t,
                   shift=margin_shift(cos_y, hp.with_(t=t)))


def adjusted_logits(cos, hp: Hyperparams, b: float = 0.0):
    """Positive and negative logits ``u``, ``v`` for every class (cosine-additive form)."""
    gc = g(cos, hp.t)
    return hp.r * (gc - hp.m_p) + b, hp.r * (gc + hp.m_n) + b


def backprop_normalization(x, weights, cos, d_cos):
    """Chain ``d_cos`` through ``cos_i = <W_i/|W_i|, x/|x|>``.

    Single sample (``x`` of shape (D,)): everything is elementwise per class
    except the feature gradient, which is folded in class order.  For a batch
    the proxy gradients are summed over samples (callers pre-scale ``d_cos``
    when they want a mean).
    """
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    w_norm = np.linalg.norm(weights, axis=1)
    w_hat = l2_normalize(weights)
    x_norm = np.linalg.norm(x, axis=-1)
    x_hat = l2_normalize(x)
    if x.ndim == 1:
        d_weights = d_cos[:, None] * (x_hat[None, :] - cos[:, None] * w_hat) / w_norm[:, None]
    else:
        dc_cos = (d_cos * cos).sum(axis=0)
        d_weights = (d_cos.T @ x_hat - dc_cos[:, None] * w_hat) / w_norm[:, None]
    d_feature = feature_fold(d_cos, cos, w_hat, x_hat) / np.asarray(x_norm)[..., None]
    return d_weights, d_feature


def row_cosines(w_hat, x_hat):
    """Cosines of unit proxies against unit feature(s).

    For one feature each cosine is an independent per-row reduction, so the
    value for class i does not depend on which other rows are present.
    """
    if x_hat.ndim == 1:
        return np.sum(w_hat * x_hat, axis=1)
    return x_hat @ w_hat.T


def feature_contributions(d_cos, cos, w_hat, x_hat):
    """Per-class contributions to ``|x| * dL/dx``: shape (..., K, D)."""
    return d_cos[..., None] * w_hat - (d_cos * cos)[..., None] * x_hat[..., None, :]


def feature_fold(d_cos, cos, w_hat, x_hat, initial=None):
    return ordered_sum(feature_contributions(d_cos, cos, w_hat, x_hat), axis=-2, initial=initial)


def head(kind: str, cos, y, hp: Hyperparams, b: float = 0.0, *, s: float = 30.0,
         softmax_margin: float = 0.0, softmax_t: float = 1.0, shift=None) -> LossGradients:
    """Evaluate a loss by name (one of :data:`LOSS_KINDS`)."""
    if kind == "naive":
        return loss_naive(cos, y)
    if kind == "balanced":
        return loss_balanced(cos, y, hp.lam)
    if kind == "curvature":
        return loss_curvature(cos, y, hp.lam, hp.r)
    if kind == "final":
        return loss_final(cos, y, hp.with_(margin_variant=MarginVariant.COSINE_ADDITIVE), b)
    if kind == "arc":
        return loss_variant(cos, y, hp.with_(margin_variant=MarginVariant.ARC_ADDITIVE), b, shift)
    if kind == "mult":
        return loss_variant(cos, y, hp.with_(margin_variant=MarginVariant.MULTIPLICATIVE), b, shift)
    if kind == "softmax":
        return loss_softmax(cos, y, s, softmax_margin, softmax_t)
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def loss_and_grads(kind: str, x, weights, b: float, y, hp: Hyperparams, **kw) -> LossGradients:
    """Full forward/backward from raw feature(s) and raw proxies."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if x.shape[-1] != weights.shape[1]:
        raise DimensionMismatch(f"feature dim {x.shape[-1]} != proxy dim {weights.shape[1]}")
    cos = np.clip(row_cosines(l2_normalize(weights), l2_normalize(x)), -1.0, 1.0)
    out = head(kind, cos, y, hp, b, **kw)
    out.d_weights, out.d_feature = backprop_normalization(x, weights, cos, out.d_cos)
    return out


def bias_logits_at_zero(hp: Hyperparams):
    """``(a_y, a_i)``: positive / negative logits before bias when every cosine is 0."""
    g0 = g(0.0, hp.t)
    if hp.margin_variant is MarginVariant.COSINE_ADDITIVE:
        return hp.r * (g0 - hp.m_p), hp.r * (g0 + hp.m_n)
    return hp.r * (g0 + float(margin_shift(0.0, hp))), hp.r * g0


def bias_residual(b: float, hp: Hyperparams, K: int) -> float:
    """dL/db at cos = 0 for every class."""
    a_y, a_i = bias_logits_at_zero(hp)
    return float(-(hp.lam / hp.r) * sigmoid(-a_y - b)
                 + ((1.0 - hp.lam) / hp.r) * (K - 1) * sigmoid(a_i + b))


def _bias_z(hp, K):
    if not 0.0 < hp.lam < 1.0:
        raise InvalidHyperparams(f"bias initialization needs lambda in (0, 1), got {hp.lam}")
    if K < 2:
        raise InvalidHyperparams("bias initialization needs K >= 2")
    return hp.lam / ((1.0 - hp.lam) * (K - 1))


def bias_init_direct(hp: Hyperparams, K: int) -> float:
    """Root of dL/db = 0 at cos = 0, written as the quadratic's plain root.

    Suffers cancellation when ``z < 1`` and ``exp(a_y - a_i)`` is small;
    returns -inf once the difference rounds to zero.
    """
    z = _bias_z(hp, K)
    a_y, a_i = bias_logits_at_zero(hp)
    disc = np.sqrt((1.0 - z) ** 2 + 4.0 * z * np.exp(a_y - a_i))
    with np.errstate(divide="ignore"):
        return float(np.log(-(1.0 - z) + disc) - np.log(2.0) - a_y)


def bias_init(hp: Hyperparams, K: int) -> float:
    """Bias minimizing the loss when all cosines are 0 (cancellation-free root)."""
    z = _bias_z(hp, K)
    a_y, a_i = bias_logits_at_zero(hp)
    if z > 1.0:
        # 1 - z < 0: here the plain root is the stable one
        return bias_init_direct(hp, K)
    disc = np.sqrt((1.0 - z) ** 2 + 4.0 * z * np.exp(a_y - a_i))
    return float(np.log(2.0 * z) - a_i - np.log(1.0 - z + disc))

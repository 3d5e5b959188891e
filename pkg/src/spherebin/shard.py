"""Partitioned classifier layer.

The proxies are split into contiguous class ranges, one per shard. For the
binary losses every class term depends only on its own proxy and the shared
feature, so a shard needs nothing but its own rows; the softmax baseline
must exchange a global max and a global exp-sum before any shard can form
its gradients.

Each shard holds its rows in a :class:`ShardBank`. Reads go through
:meth:`ShardBank.rows`, which records whether the reader owns the shard, so
tests can check that no shard ever touched another shard's proxies.

Merging is a fixed-order chain: shard k continues the running class-sum
left by shard k-1. Because the unsharded loss folds its class sums in the
same order, the merged result is bitwise identical.
"""
from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

import numpy as np
from threadpoolctl import threadpool_limits

from .core import Hyperparams, MarginVariant, l2_normalize
from .errors import DimensionMismatch, InvalidPlan, LabelOutOfRange
from .loss import (
    LossGradients,
    class_terms,
    feature_contributions,
    feature_fold,
    margin_shift,
    ordered_sum,
    row_cosines,
)
from .simadjust import g, g_prime


@dataclass(frozen=True)
class ShardPlan:
    """Contiguous class ranges ``[bounds[k], bounds[k+1])`` covering ``[0, K)``."""

    bounds: tuple

    def __post_init__(self):
        b = tuple(int(v) for v in self.bounds)
        object.__setattr__(self, "bounds", b)
        if len(b) < 2 or b[0] != 0:
            raise InvalidPlan(f"bounds must start at 0 and name at least one shard: {b}")
        if any(hi <= lo for lo, hi in zip(b[:-1], b[1:])):
            raise InvalidPlan(f"shard ranges must be nonempty and increasing: {b}")

    @classmethod
    def even(cls, K: int, S: int) -> "ShardPlan":
        """Split ``K`` classes into ``S`` near-equal ranges (larger ones first)."""
        if S < 1 or K < S:
            raise InvalidPlan(f"cannot split {K} classes into {S} nonempty shards")
        sizes = np.full(S, K // S)
        sizes[: K % S] += 1
        return cls(tuple(np.concatenate([[0], np.cumsum(sizes)])))

    @property
    def S(self) -> int:
        return len(self.bounds) - 1

    @property
    def K(self) -> int:
        return self.bounds[-1]

    @property
    def ranges(self):
        return list(zip(self.bounds[:-1], self.bounds[1:]))

    def owner(self, y: int) -> int:
        if not 0 <= y < self.K:
            raise LabelOutOfRange(f"label {y} outside [0, {self.K})")
        return int(np.searchsorted(self.bounds, y, side="right") - 1)


@dataclass
class CommStats:
    """Scalars that cross a shard boundary during one step."""

    feature_broadcast_scalars: int = 0
    remote_weight_scalars_read: int = 0
    normalizer_exchange_scalars: int = 0
    reduction_scalars: int = 0

    def __add__(self, other: "CommStats") -> "CommStats":
        return CommStats(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    @property
    def cross_shard_scalars(self) -> int:
        """Scalars a shard needed from its peers before forming its gradients."""
        return self.remote_weight_scalars_read + self.normalizer_exchange_scalars


class ShardBank:
    """One shard's slice of the proxies, with an access counter."""

    def __init__(self, index: int, lo: int, hi: int, weights):
        self.index = index
        self.lo, self.hi = lo, hi
        self._weights = np.asarray(weights, dtype=np.float64)
        if self._weights.shape[0] != hi - lo:
            raise InvalidPlan(f"shard {index} holds {self._weights.shape[0]} rows for range [{lo}, {hi})")
        self.local_reads = 0
        self.remote_reads = 0
        self._lock = threading.Lock()

    def rows(self, reader: int) -> np.ndarray:
        with self._lock:
            if reader == self.index:
                self.local_reads += self._weights.size
            else:
                self.remote_reads += self._weights.size
        return self._weights

    @property
    def shape(self):
        return self._weights.shape

    def reset_counters(self):
        self.local_reads = self.remote_reads = 0


def partition(weights, plan: ShardPlan) -> list:
    """Copy the rows of ``weights`` into one :class:`ShardBank` per shard."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != plan.K:
        raise InvalidPlan(f"plan covers {plan.K} classes, weights have {weights.shape[0]}")
    return [ShardBank(k, lo, hi, weights[lo:hi].copy()) for k, (lo, hi) in enumerate(plan.ranges)]


def _check(plan: ShardPlan, banks, x, y):
    if len(banks) != plan.S:
        raise InvalidPlan(f"{len(banks)} banks for {plan.S} shards")
    for k, (bank, (lo, hi)) in enumerate(zip(banks, plan.ranges)):
        if bank.index != k or (bank.lo, bank.hi) != (lo, hi):
            raise InvalidPlan(f"bank {k} covers [{bank.lo}, {bank.hi}), plan says [{lo}, {hi})")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("sharded steps take a single feature vector")
    D = banks[0].shape[1]
    if x.size != D:
        raise DimensionMismatch(f"feature dim {x.size} != proxy dim {D}")
    return x, plan.owner(int(y))


def _remote_total(banks) -> int:
    return sum(b.remote_reads for b in banks)


def _map(fn, items, parallel: bool):
    items = list(items)
    if not parallel or len(items) == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=len(items)) as pool:
        return list(pool.map(fn, items))


@dataclass
class _Local:
    """What a shard computed from its own rows."""

    cos: np.ndarray
    w_hat: np.ndarray
    w_norm: np.ndarray
    d_cos: np.ndarray
    terms: np.ndarray
    d_b: np.ndarray


def _local_binary(bank: ShardBank, x_hat, y, hp: Hyperparams, b: float) -> _Local:
    w = bank.rows(bank.index)
    w_hat = l2_normalize(w)
    cos = np.clip(row_cosines(w_hat, x_hat), -1.0, 1.0)
    pos = np.arange(bank.lo, bank.hi) == y
    shift = None
    m_p, m_n = hp.m_p, hp.m_n
    if hp.margin_variant is not MarginVariant.COSINE_ADDITIVE:
        # the margin lives entirely in the detached shift of the positive term,
        # which only the owner of y can (and needs to) compute
        m_p = m_n = 0.0
        if pos.any():
            shift = np.asarray(margin_shift(cos[y - bank.lo], hp))
    terms, d_cos, d_b = class_terms(cos, pos, w_pos=hp.lam, w_neg=1.0 - hp.lam, r=hp.r,
                                    m_p=m_p, m_n=m_n, b=b, t=hp.t, shift=shift)
    return _Local(cos, w_hat, np.linalg.norm(w, axis=1), d_cos, terms, d_b)


def _local_weight_grads(loc: _Local, x_hat):
    return loc.d_cos[:, None] * (x_hat[None, :] - loc.cos[:, None] * loc.w_hat) / loc.w_norm[:, None]


def sharded_step_sphereface2(x, y, plan: ShardPlan, banks, hp: Hyperparams, b: float = 0.0,
                             parallel: bool = True):
    """Binary loss and all gradients for one sample on a sharded classifier.

    Local work runs on one thread per shard. The merge passes three running
    accumulators (loss, bias gradient, feature gradient) through the shards
    in index order, each shard adding its own classes.
    """
    x, _ = _check(plan, banks, x, y)
    y = int(y)
    D = x.size
    x_hat = l2_normalize(x)
    remote_before = _remote_total(banks)
    locs = _map(lambda bank: _local_binary(bank, x_hat, y, hp, b), banks, parallel)

    value = np.zeros(())
    d_bias = np.zeros(())
    feat = np.zeros(D)
    for loc in locs:
        value = ordered_sum(loc.terms, initial=value)
        d_bias = ordered_sum(loc.d_b, initial=d_bias)
        feat = feature_fold(loc.d_cos, loc.cos, loc.w_hat, x_hat, initial=feat)
    S = plan.S
    stats = CommStats(
        feature_broadcast_scalars=D * S,
        remote_weight_scalars_read=_remote_total(banks) - remote_before,
        normalizer_exchange_scalars=0,
        # per shard: partial loss, partial bias gradient, D feature-gradient partials
        reduction_scalars=(2 + D) * S,
    )
    out = LossGradients(
        value=float(value),
        d_cos=np.concatenate([loc.d_cos for loc in locs]),
        d_bias=float(d_bias),
        d_weights=np.concatenate([_local_weight_grads(loc, x_hat) for loc in locs]),
        d_feature=feat / np.linalg.norm(x, axis=-1),
    )
    return out, stats


def sharded_step_softmax(x, y, plan: ShardPlan, banks, s: float = 30.0, margin: float = 0.0,
                         t: float = 1.0, parallel: bool = True):
    """Softmax baseline on a sharded classifier with the two-phase normalizer exchange.

    Phase one shares each shard's local max logit, phase two each shard's
    exp-sum relative to the global max; only then can a shard scale its
    gradients. A single shard has no peers and exchanges nothing.
    """
    x, owner = _check(plan, banks, x, y)
    y = int(y)
    D = x.size
    x_hat = l2_normalize(x)
    remote_before = _remote_total(banks)

    def logits(bank):
        w = bank.rows(bank.index)
        w_hat = l2_normalize(w)
        cos = np.clip(row_cosines(w_hat, x_hat), -1.0, 1.0)
        pos = np.arange(bank.lo, bank.hi) == y
        return cos, w_hat, np.linalg.norm(w, axis=1), pos, s * (g(cos, t) - margin * pos)

    loc = _map(logits, banks, parallel)
    zmax = max(float(z.max()) for *_, z in loc)
    partial = _map(lambda item: float(np.exp(item[4] - zmax).sum()), loc, parallel)
    total = 0.0
    for p in partial:
        total += p
    value = zmax + np.log(total) - float(loc[owner][4][y - banks[owner].lo])

    def grads(item):
        cos, w_hat, w_norm, pos, z = item
        d_cos = s * (np.exp(z - zmax) / total - pos) * g_prime(cos, t)
        d_w = d_cos[:, None] * (x_hat[None, :] - cos[:, None] * w_hat) / w_norm[:, None]
        return d_cos, d_w, ordered_sum(feature_contributions(d_cos, cos, w_hat, x_hat), axis=-2)

    parts = _map(grads, loc, parallel)
    feat = np.zeros(D)
    for _, _, f in parts:
        feat = feat + f
    S = plan.S
    stats = CommStats(
        feature_broadcast_scalars=D * S,
        remote_weight_scalars_read=_remote_total(banks) - remote_before,
        normalizer_exchange_scalars=2 * S if S > 1 else 0,
        reduction_scalars=(1 + D) * S,
    )
    out = LossGradients(
        value=float(value),
        d_cos=np.concatenate([p[0] for p in parts]),
        d_bias=0.0,
        d_weights=np.concatenate([p[1] for p in parts]),
        d_feature=feat / np.linalg.norm(x, axis=-1),
    )
    return out, stats


# ---------------------------------------------------------------- throughput

def _bench_local_binary(w, xb_hat, yb, lo, hp: Hyperparams, b: float, lr: float):
    """Gradient-only batch step over one shard (the loss value is not needed to update)."""
    n = xb_hat.shape[0]
    w_hat = l2_normalize(w)
    cos = np.clip(xb_hat @ w_hat.T, -1.0, 1.0)
    half = (cos + 1.0) * 0.5
    pw = half ** (hp.t - 1.0)
    gc = 2.0 * half * pw - 1.0
    gp = hp.t * pw
    rows = np.flatnonzero((yb >= lo) & (yb < lo + w.shape[0]))
    cols = yb[rows] - lo
    with np.errstate(over="ignore"):
        # negative-term derivative everywhere, then overwrite the positives
        d_cos = ((1.0 - hp.lam) / n) * gp / (1.0 + np.exp(-(hp.r * (gc + hp.m_n) + b)))
        u = hp.r * (gc[rows, cols] - hp.m_p) + b
        d_cos[rows, cols] = -(hp.lam / n) * gp[rows, cols] / (1.0 + np.exp(u))
    dc_cos = (d_cos * cos).sum(axis=0)
    d_w = (d_cos.T @ xb_hat - dc_cos[:, None] * w_hat) / np.linalg.norm(w, axis=1)[:, None]
    w -= lr * d_w
    return d_cos @ w_hat


def _bench_softmax_logits(w, xb_hat, yb, lo, s):
    w_hat = l2_normalize(w)
    cos = np.clip(xb_hat @ w_hat.T, -1.0, 1.0)
    z = s * cos
    return w_hat, cos, z, z.max(axis=1)


def _bench_softmax_grads(w, state, xb_hat, yb, lo, zmax, total, s, lr):
    w_hat, cos, z, _ = state
    pos = (np.arange(lo, lo + w.shape[0])[None, :] == yb[:, None])
    d_cos = s * (np.exp(z - zmax[:, None]) / total[:, None] - pos) / xb_hat.shape[0]
    dc_cos = (d_cos * cos).sum(axis=0)
    d_w = (d_cos.T @ xb_hat - dc_cos[:, None] * w_hat) / np.linalg.norm(w, axis=1)[:, None]
    w -= lr * d_w
    return d_cos @ w_hat


@dataclass
class BenchRow:
    loss: str
    S: int
    K: int
    D: int
    batch: int
    steps_per_sec: float
    remote_weight_scalars: int
    normalizer_scalars: int


def throughput_bench(K: int = 2 ** 17, D: int = 128, S_list=(1, 2, 4), batch: int = 64,
                     repetitions: int = 5, losses=("sphereface2", "softmax"), seed: int = 0,
                     hp: Hyperparams | None = None, lr: float = 0.1):
    """Classifier-layer steps per second with one worker thread per shard.

    A step is forward, backward and an SGD update of the shard's own proxies
    for a batch of features. BLAS is limited to one thread so that shards,
    not the linear-algebra library, provide the parallelism.
    """
    hp = hp or Hyperparams()
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal((K, D))
    xb_hat = l2_normalize(rng.standard_normal((batch, D)))
    yb = rng.integers(0, K, size=batch)
    b = -10.0
    rows = []
    with threadpool_limits(limits=1, user_api="blas"):
        for loss in losses:
            for S in S_list:
                plan = ShardPlan.even(K, S)
                shards = [weights[lo:hi].copy() for lo, hi in plan.ranges]
                los = [lo for lo, _ in plan.ranges]
                with ThreadPoolExecutor(max_workers=S) as pool:
                    def step():
                        if loss == "sphereface2":
                            res = list(pool.map(
                                lambda k: _bench_local_binary(shards[k], xb_hat, yb, los[k], hp, b, lr),
                                range(S)))
                            return np.sum(res, axis=0)
                        states = list(pool.map(
                            lambda k: _bench_softmax_logits(shards[k], xb_hat, yb, los[k], 30.0),
                            range(S)))
                        zmax = np.max([st[3] for st in states], axis=0)
                        partial = list(pool.map(
                            lambda k: np.exp(states[k][2] - zmax[:, None]).sum(axis=1), range(S)))
                        total = np.sum(partial, axis=0)
                        feats = list(pool.map(
                            lambda k: _bench_softmax_grads(shards[k], states[k], xb_hat, yb, los[k],
                                                           zmax, total, 30.0, lr),
                            range(S)))
                        return np.sum(feats, axis=0)

                    step()  # warm-up
                    start = time.perf_counter()
                    for _ in range(repetitions):
                        step()
                    elapsed = time.perf_counter() - start
                normalizer = 2 * S if (loss == "softmax" and S > 1) else 0
                rows.append(BenchRow(loss, S, K, D, batch, repetitions / elapsed, 0, normalizer))
    return rows


def write_bench(path, rows) -> None:
    from pathlib import Path

    lines = ["# loss,S,K,D,batch,steps_per_sec,remote_weight_scalars,normalizer_scalars"]
    for r in rows:
        lines.append(f"{r.loss},{r.S},{r.K},{r.D},{r.batch},{r.steps_per_sec:.3f},"
                     f"{r.remote_weight_scalars},{r.normalizer_scalars}")
    Path(path).write_text("\n".join(lines) + "\n")

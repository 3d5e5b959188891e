"""Pair-wise verification: pair sampling, cosine scores and threshold metrics."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import SyntheticDataset, l2_normalize
from .errors import InsufficientData


@dataclass
class PairSet:
    a: np.ndarray
    b: np.ndarray
    same: np.ndarray

    @property
    def n_pos(self) -> int:
        return int(self.same.sum())

    @property
    def n_neg(self) -> int:
        return int((~self.same).sum())

    def __len__(self):
        return self.a.size


def _positive_pairs(labels):
    a_all, b_all = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        i, j = np.triu_indices(idx.size, k=1)
        a_all.append(idx[i])
        b_all.append(idx[j])
    if not a_all:
        return np.empty(0, int), np.empty(0, int)
    return np.concatenate(a_all), np.concatenate(b_all)


def build_pairs(ds: SyntheticDataset, n_pos: int, n_neg: int, seed: int = 0) -> PairSet:
    """Sample distinct same-identity and different-identity pairs (by true label)."""
    rng = np.random.default_rng(seed)
    labels = ds.true_labels
    n = labels.size
    pa, pb = _positive_pairs(labels)
    if n_pos > pa.size:
        raise InsufficientData(f"requested {n_pos} positive pairs, only {pa.size} exist")
    pick = rng.choice(pa.size, size=n_pos, replace=False)
    pos_a, pos_b = pa[pick], pb[pick]

    counts = np.bincount(labels)
    total_neg = (n * n - int((counts ** 2).sum())) // 2
    if n_neg > total_neg:
        raise InsufficientData(f"requested {n_neg} negative pairs, only {total_neg} exist")
    if n_neg > total_neg // 2:
        i, j = np.triu_indices(n, k=1)
        diff = labels[i] != labels[j]
        i, j = i[diff], j[diff]
        pick = rng.choice(i.size, size=n_neg, replace=False)
        neg_a, neg_b = i[pick], j[pick]
    else:
        seen = set()
        neg_a, neg_b = [], []
        while len(neg_a) < n_neg:
            draw = rng.integers(0, n, size=(2 * (n_neg - len(neg_a)) + 16, 2))
            for u, v in draw:
                if labels[u] == labels[v]:
                    continue
                key = (min(u, v), max(u, v))
                if key in seen:
                    continue
                seen.add(key)
                neg_a.append(key[0])
                neg_b.append(key[1])
                if len(neg_a) == n_neg:
                    break
        neg_a, neg_b = np.array(neg_a, dtype=int), np.array(neg_b, dtype=int)
    same = np.concatenate([np.ones(n_pos, bool), np.zeros(n_neg, bool)])
    return PairSet(np.concatenate([pos_a, neg_a]).astype(int),
                   np.concatenate([pos_b, neg_b]).astype(int), same)


def embedding_scores(embeddings, pairs: PairSet) -> np.ndarray:
    """Cosine similarity of each pair of embeddings."""
    e = l2_normalize(embeddings)
    return np.clip(np.einsum("ij,ij->i", e[pairs.a], e[pairs.b]), -1.0, 1.0)


def pair_scores(model, ds: SyntheticDataset, pairs: PairSet) -> np.ndarray:
    """Scores of a trained encoder (``None`` scores the raw inputs)."""
    from .train import encoder_forward

    feats = ds.inputs if model is None else encoder_forward(model, ds.inputs)
    return embedding_scores(feats, pairs)


def best_threshold_accuracy(scores, labels):
    """Best verification accuracy over thresholds (accept when score > threshold).

    Candidates are the midpoints between sorted unique scores plus one value
    below the minimum and one above the maximum; ties go to the smallest
    threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.size == 0:
        raise InsufficientData("no scores")
    u = np.unique(scores)
    cands = np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2, [u[-1] + 1.0]])
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    tp = pos.size - np.searchsorted(pos, cands, side="right")
    tn = np.searchsorted(neg, cands, side="right")
    acc = (tp + tn) / scores.size
    best = int(np.argmax(acc))
    return float(cands[best]), float(acc[best])


def tar_at_far(scores, labels, far_levels):
    """True accept rate at each false accept rate level.

    The threshold is the smallest observed score whose empirical FAR (share
    of negatives scoring strictly above it) is <= the level.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    neg = np.sort(scores[~labels])[::-1]
    pos = scores[labels]
    if neg.size == 0 or pos.size == 0:
        raise InsufficientData("need both positive and negative pairs")
    out = []
    for level in np.atleast_1d(far_levels):
        if level < 1.0 / neg.size:
            raise InsufficientData(f"FAR {level} below resolution 1/{neg.size}")
        k = int(np.floor(level * neg.size + 1e-9))
        thr = neg[k] if k < neg.size else scores.min()
        out.append(float(np.mean(pos > thr)))
    return np.array(out)


def distribution_overlap(pos_scores, neg_scores, bins: int = 100) -> float:
    """Histogram intersection of two score distributions on [-1, 1]."""
    pos_scores = np.asarray(pos_scores, dtype=np.float64)
    neg_scores = np.asarray(neg_scores, dtype=np.float64)
    if pos_scores.size == 0 or neg_scores.size == 0:
        raise InsufficientData("both score sets must be nonempty")
    edges = np.linspace(-1.0, 1.0, bins + 1)
    p, _ = np.histogram(np.clip(pos_scores, -1, 1), edges)
    q, _ = np.histogram(np.clip(neg_scores, -1, 1), edges)
    return float(np.minimum(p / pos_scores.size, q / neg_scores.size).sum())


def write_scores(path, scores, same) -> None:
    lines = ["# same,score"] + [f"{int(s)},{float(v)!r}" for s, v in zip(same, scores)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_metrics(path, rows) -> None:
    """``rows`` is an iterable of (metric, param, value)."""
    lines = ["# metric,param,value"] + [f"{m},{p},{float(v)!r}" for m, p, v in rows]
    Path(path).write_text("\n".join(lines) + "\n")

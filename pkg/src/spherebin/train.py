"""Desk-scale trainer: MLP encoder + classifier bank + momentum SGD."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import ClassifierBank, Hyperparams, SyntheticDataset, l2_normalize
from .errors import DimensionMismatch
from .evaluation import PairSet, best_threshold_accuracy, embedding_scores
from .loss import (
    AblationFlags,
    backprop_normalization,
    bias_init,
    head,
    loss_ablation,
)

log = logging.getLogger(__name__)

BIASED_KINDS = ("final", "arc", "mult")


@dataclass
class Encoder:
    """Fully connected net: ReLU on hidden layers, identity on the output."""

    weights: list
    biases: list

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @classmethod
    def init(cls, sizes, rng: np.random.Generator) -> "Encoder":
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    def params(self):
        return [*self.weights, *self.biases]

    def copy(self) -> "Encoder":
        return Encoder([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def encoder_forward(model: Encoder, inputs, return_cache: bool = False):
    h = np.asarray(inputs, dtype=np.float64)
    if h.shape[-1] != model.sizes[0]:
        raise DimensionMismatch(f"input dim {h.shape[-1]} != encoder input {model.sizes[0]}")
    cache = [h]
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
        cache.append(h)
    return (h, cache) if return_cache else h


def encoder_backward(model: Encoder, cache, d_out):
    """Gradients (d_weights, d_biases) given dL/d(output) for a batch."""
    d = np.asarray(d_out, dtype=np.float64)
    dws, dbs = [None] * len(model.weights), [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        if k < len(model.weights) - 1:
            d = d * (cache[k + 1] > 0)
        dws[k] = cache[k].T @ d
        dbs[k] = d.sum(axis=0)
        d = d @ model.weights[k].T
    return dws, dbs


def sgd_step(params, grads, velocity, lr: float, momentum: float):
    """Classic momentum, in place: v <- momentum * v + g; p <- p - lr * v."""
    for p, g_, v in zip(params, grads, velocity):
        v *= momentum
        v += g_
        p -= lr * v
    return params, velocity


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    loss: str = "final"
    flags: AblationFlags | None = None
    hp: Hyperparams = field(default_factory=Hyperparams)
    bias_init: str = "closed_form"
    hidden: tuple = (64, 64)
    d_feat: int = 32
    weight_decay: float = 0.0
    lr_steps: tuple = ()
    lr_gamma: float = 0.1
    s: float = 30.0
    softmax_margin: float = 0.0
    softmax_t: float = 1.0
    bias_lr_mult: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.bias_init not in ("closed_form", "zero"):
            raise ValueError(f"unknown bias init mode {self.bias_init!r}")

    @property
    def uses_bias(self) -> bool:
        if self.flags is not None:
            return self.flags.am
        return self.loss in BIASED_KINDS


@dataclass
class TrainResult:
    model: Encoder
    bank: ClassifierBank
    history: list
    first_batch_d_bias: float = float("nan")


def _head(cfg: TrainConfig, cos, y, b):
    if cfg.flags is not None:
        return loss_ablation(cos, y, cfg.flags, cfg.hp, b)
    return head(cfg.loss, cos, y, cfg.hp, b, s=cfg.s, softmax_margin=cfg.softmax_margin,
                softmax_t=cfg.softmax_t)


def initial_bias(cfg: TrainConfig, K: int) -> float:
    if not cfg.uses_bias or cfg.bias_init == "zero" or K < 2:
        return 0.0
    hp = cfg.hp
    if cfg.flags is not None and not cfg.flags.sa:
        hp = hp.with_(t=1.0)
    if cfg.loss == "arc" and cfg.flags is None:
        hp = hp.with_(margin_variant="arc", m_n=0.0)
    elif cfg.loss == "mult" and cfg.flags is None:
        hp = hp.with_(margin_variant="mult", m_n=0.0)
    return bias_init(hp, K)


def batch_step(cfg: TrainConfig, model: Encoder, bank: ClassifierBank, xb, yb):
    """Forward/backward on one batch; returns (mean loss, encoder grads, proxy grad, bias grad)."""
    feats, cache = encoder_forward(model, xb, return_cache=True)
    cos = np.clip(l2_normalize(feats) @ bank.normalized().T, -1.0, 1.0)
    out = _head(cfg, cos, yb, bank.bias)
    n = xb.shape[0]
    d_cos = out.d_cos / n
    d_w, d_feat = backprop_normalization(feats, bank.weights, cos, d_cos)
    dws, dbs = encoder_backward(model, cache, d_feat)
    d_b = float(np.sum(out.d_bias)) / n if cfg.uses_bias else 0.0
    return float(np.mean(out.value)), dws + dbs, d_w, d_b


def train(cfg: TrainConfig, ds: SyntheticDataset, bank: ClassifierBank | None = None,
          val: SyntheticDataset | None = None, val_pairs: PairSet | None = None) -> TrainResult:
    """Train encoder and classifier bank on ``ds``.

    History rows are ``(epoch, mean train loss, held-out pair accuracy)``;
    accuracy is NaN unless ``val`` and ``val_pairs`` are supplied.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    model = Encoder.init([ds.D, *cfg.hidden, cfg.d_feat], rng)
    K = ds.K
    if bank is None:
        bank = ClassifierBank.random(K, cfg.d_feat, rng)
    else:
        bank = bank.copy()
    if bank.K != K or bank.D != cfg.d_feat:
        raise DimensionMismatch(f"bank is {bank.K}x{bank.D}, expected {K}x{cfg.d_feat}")
    bank.bias = initial_bias(cfg, K)

    params = model.params() + [bank.weights]
    velocity = [np.zeros_like(p) for p in params]
    bias_v = 0.0
    history = []
    first_db = float("nan")
    n = len(ds)
    n_enc = len(model.params())
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_gamma ** sum(epoch >= s for s in cfg.lr_steps)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            value, enc_grads, d_w, d_b = batch_step(cfg, model, bank, ds.inputs[idx], ds.labels[idx])
            if np.isnan(first_db):
                first_db = d_b
            if cfg.weight_decay:
                enc_grads = [g_ + cfg.weight_decay * p for g_, p in zip(enc_grads, params[:n_enc])]
            sgd_step(params, enc_grads + [d_w], velocity, lr, cfg.momentum)
            if cfg.uses_bias:
                bias_v = cfg.momentum * bias_v + d_b
                bank.bias -= cfg.bias_lr_mult * lr * bias_v
            losses.append(value * idx.size)
        acc = float("nan")
        if val is not None and val_pairs is not None:
            scores = embedding_scores(encoder_forward(model, val.inputs), val_pairs)
            acc = best_threshold_accuracy(scores, val_pairs.same)[1]
        history.append((epoch, float(np.sum(losses) / n), acc))
        log.debug("epoch %d loss %.5f acc %.4f", *history[-1])
    return TrainResult(model, bank, history, first_db)


def export_features(model: Encoder, bank: ClassifierBank, ds: SyntheticDataset, path,
                    hp: Hyperparams) -> None:
    """Write normalized features, labels and classifier directions as CSV."""
    feats = l2_normalize(encoder_forward(model, ds.inputs))
    w_hat = bank.normalized()
    lines = [f"# K={bank.K} D_feat={bank.D} r={hp.r!r} m={hp.m_p!r} lambda={hp.lam!r} "
             f"t={hp.t!r} b={bank.bias!r}"]
    for lab, f in zip(ds.labels, feats):
        lines.append(",".join([str(int(lab))] + [repr(float(v)) for v in f]))
    for k, w in enumerate(w_hat):
        lines.append(",".join(["W", str(k)] + [repr(float(v)) for v in w]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_features(path):
    """Parse an exported feature table into (header dict, labels, features, directions)."""
    text = Path(path).read_text().splitlines()
    header = {}
    for tok in text[0][1:].split():
        key, val = tok.split("=", 1)
        header[key] = int(val) if key in ("K", "D_feat") else float(val)
    labels, feats, dirs = [], [], {}
    for line in text[1:]:
        if not line.strip():
            continue
        parts = line.split(",")
        if parts[0] == "W":
            dirs[int(parts[1])] = [float(v) for v in parts[2:]]
        else:
            labels.append(int(parts[0]))
            feats.append([float(v) for v in parts[1:]])
    directions = np.array([dirs[k] for k in sorted(dirs)])
    return header, np.array(labels, dtype=int), np.array(feats), directions


def save_model(model: Encoder, bank: ClassifierBank, path, meta: dict | None = None) -> None:
    blob = {
        "sizes": model.sizes,
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "proxies": bank.weights.tolist(),
        "bias": bank.bias,
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(blob))


def load_model(path):
    blob = json.loads(Path(path).read_text())
    model = Encoder([np.array(w) for w in blob["weights"]], [np.array(b) for b in blob["biases"]])
    bank = ClassifierBank(np.array(blob["proxies"]), blob["bias"])
    return model, bank, blob.get("meta", {})


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hp"] = {k: (v.value if hasattr(v, "value") else v) for k, v in d["hp"].items()}
    return d

"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment. Every key has a default and a
one-line description; unknown keys are an error. Command-line overrides are
applied on top of the file in the order given.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .core import Hyperparams, MarginVariant
from .errors import ConfigError


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Key:
    name: str
    default: str
    parse: object
    doc: str


KEYS = [
    # run
    Key("seed", "0", int, "seed for data, initialization and pair sampling"),
    Key("out", ".", str, "output directory"),
    Key("data", "", str, "dataset file to read (empty: generate the benchmark)"),
    Key("model", "", str, "model file to read for eval (empty: score raw inputs)"),
    # data
    Key("K", "100", int, "identities used for training (gen-data: total identities)"),
    Key("K_held", "50", int, "unseen identities used for verification pairs"),
    Key("D_in", "32", int, "input dimension"),
    Key("n_per_class", "20", int, "samples per identity"),
    Key("concentration", "6.0", float, "inverse noise scale around each identity direction"),
    Key("identity_dim", "12", int, "dimension of the subspace holding identity directions"),
    Key("nuisance_dim", "16", int, "dimension of the shared nuisance subspace"),
    Key("nuisance_scale", "0.5", float, "scale of the nuisance component"),
    Key("noise_rate", "0.0", float, "fraction of training labels flipped"),
    # loss
    Key("loss", "final", str, "naive|balanced|curvature|final|arc|mult|softmax (gradcheck: also all)"),
    Key("lambda", "0.7", float, "weight of the positive term"),
    Key("r", "30.0", float, "logit scale"),
    Key("m", "0.4", float, "margin (cosine offset; arc: radians; mult: angle multiplier)"),
    Key("t", "3.0", float, "similarity adjustment exponent"),
    Key("margin_variant", "cosine", str, "cosine|arc|mult"),
    Key("s", "30", _floats, "softmax scale (plot-data easyhard: comma-separated list)"),
    Key("softmax_margin", "0.0", float, "additive target margin of the softmax baseline"),
    # training
    Key("lr", "0.5", float, "learning rate for the binary losses"),
    Key("softmax_lr", "0.05", float, "learning rate for the softmax baseline"),
    Key("momentum", "0.9", float, "SGD momentum"),
    Key("epochs", "30", int, "training epochs"),
    Key("batch_size", "64", int, "minibatch size"),
    Key("hidden", "64,64", _ints, "hidden layer widths of the encoder"),
    Key("d_feat", "32", int, "embedding dimension"),
    Key("bias_init", "closed_form", str, "closed_form|zero"),
    Key("bias_lr_mult", "1.0", float, "learning-rate multiplier for the bias"),
    Key("weight_decay", "0.0", float, "L2 penalty on encoder parameters"),
    # eval
    Key("n_pos", "3000", int, "positive verification pairs"),
    Key("n_neg", "3000", int, "negative verification pairs"),
    Key("far_levels", "0.001,0.01,0.1", _floats, "FAR levels for TAR@FAR"),
    Key("bins", "100", int, "histogram bins for score overlap"),
    # gradcheck
    Key("trials", "50", int, "random instances per loss"),
    Key("h", "1e-6", float, "finite-difference step"),
    # bench-shard
    Key("bench_K", "131072", int, "classes in the throughput bench"),
    Key("bench_D", "128", int, "feature dimension in the throughput bench"),
    Key("shards", "1,2,4", _ints, "shard counts to time"),
    Key("bench_batch", "64", int, "batch size of a bench step"),
    Key("repetitions", "5", int, "timed steps per row"),
    # noise
    Key("rates", "0,0.2,0.4,0.6,0.8", _floats, "label-noise rates"),
    Key("naive_fallback", "false", _bool, "ablate: train the all-off row with lambda=(K-1)/K"),
    # plot-data
    Key("curve", "easyhard", str, "easyhard|rcurve|g|margin|overlap|geometry"),
    Key("cos_neg", "0.2", float, "fixed negative cosine of the easyhard/rcurve sweeps"),
    Key("r_values", "10,30,60", _floats, "scales of the rcurve sweep"),
    Key("t_values", "1,2,3,5", _floats, "exponents of the g sweep"),
    Key("points", "201", int, "grid points of the curve sweeps"),
]

KEY_INDEX = {k.name: k for k in KEYS}

PRESETS = {
    "ablation": {"lambda": "0.7", "r": "30", "m": "0.4", "t": "3"},
    "large": {"lambda": "0.7", "r": "40"},
}


class RunConfig:
    """Parsed settings; attribute access by key name (``cfg.lr``, ``cfg["lambda"]``)."""

    def __init__(self, raw: dict | None = None):
        self._raw = {k.name: k.default for k in KEYS}
        self._values = {}
        for name, text in (raw or {}).items():
            self.set(name, text)
        for k in KEYS:
            if k.name not in self._values:
                self._values[k.name] = k.parse(k.default)

    def set(self, name: str, text) -> None:
        if name not in KEY_INDEX:
            raise ConfigError(f"unknown config key {name!r}")
        text = str(text).strip()
        try:
            value = KEY_INDEX[name].parse(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}: {text!r} ({exc})") from None
        self._raw[name] = text
        self._values[name] = value

    def __getitem__(self, name):
        return self._values[name]

    def __getattr__(self, name):
        try:
            return self.__dict__["_values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def dump(self) -> str:
        return "".join(f"{k.name} = {self._raw[k.name]}\n" for k in KEYS)

    def hyperparams(self) -> Hyperparams:
        try:
            variant = MarginVariant(self["margin_variant"])
        except ValueError:
            raise ConfigError(f"unknown margin_variant {self['margin_variant']!r}") from None
        m = self["m"]
        return Hyperparams(lam=self["lambda"], r=self["r"], m_p=m,
                           m_n=m if variant is MarginVariant.COSINE_ADDITIVE else 0.0,
                           t=self["t"], margin_variant=variant)


def parse_text(text: str, source: str = "<config>") -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEY_INDEX:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        raw[key] = value
    return raw


def load_config(path=None, overrides=None, preset: str | None = None) -> RunConfig:
    """Defaults, then ``preset``, then the file at ``path``, then ``overrides``."""
    raw = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        raw.update(PRESETS[preset])
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw.update(parse_text(p.read_text(), str(p)))
    raw.update(overrides or {})
    return RunConfig(raw)

"""Hypersphere geometry, the classifier bank and synthetic identity data."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateVector, DimensionMismatch, InvalidHyperparams

EPS_NORM = 1e-12
COS_CLAMP_TOL = 1e-12


class MarginVariant(str, enum.Enum):
    COSINE_ADDITIVE = "cosine"
    ARC_ADDITIVE = "arc"
    MULTIPLICATIVE = "mult"


@dataclass(frozen=True)
class Hyperparams:
    """Knobs of the binary hypersphere loss.

    ``lam`` weights the positive term, ``r`` is the logit scale, ``m_p``/``m_n``
    are the positive/negative margins and ``t`` the similarity-adjustment
    exponent.  For the arc variant ``m_p`` is an angle offset in radians, for
    the multiplicative variant it is an angle multiplier >= 1; ``m_n`` is
    ignored by both.
    """

    lam: float = 0.7
    r: float = 30.0
    m_p: float = 0.4
    m_n: float = 0.4
    t: float = 3.0
    margin_variant: MarginVariant = MarginVariant.COSINE_ADDITIVE

    def __post_init__(self):
        object.__setattr__(self, "margin_variant", MarginVariant(self.margin_variant))
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidHyperparams(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.r > 0:
            raise InvalidHyperparams(f"r must be positive, got {self.r}")
        if not self.t > 0:
            raise InvalidHyperparams(f"t must be positive, got {self.t}")
        if self.m_p < 0 or self.m_n < 0:
            raise InvalidHyperparams(f"margins must be >= 0, got m_p={self.m_p}, m_n={self.m_n}")
        if self.margin_variant is MarginVariant.MULTIPLICATIVE and self.m_p < 1:
            raise InvalidHyperparams(f"multiplicative margin needs m >= 1, got {self.m_p}")

    @classmethod
    def tied(cls, lam=0.7, r=30.0, m=0.4, t=3.0, margin_variant=MarginVariant.COSINE_ADDITIVE):
        return cls(lam=lam, r=r, m_p=m, m_n=m, t=t, margin_variant=margin_variant)

    def with_(self, **changes) -> "Hyperparams":
        return replace(self, **changes)


def l2_normalize(v):
    """Scale ``v`` (or every row of a 2-D array) to unit L2 norm."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= EPS_NORM):
        raise DegenerateVector(f"cannot normalize vector with norm <= {EPS_NORM}")
    return v / norms


def clamp_cosines(c):
    return np.clip(c, -1.0, 1.0)


@dataclass
class ClassifierBank:
    """K raw proxy vectors plus one bias shared by every class.

    Weights are stored unnormalized; consumers read them through
    :meth:`normalized` so gradients can be pushed back through the norm.
    """

    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        if self.weights.ndim != 2:
            raise DimensionMismatch("weights must be a (K, D) array")
        if np.any(np.linalg.norm(self.weights, axis=1) <= EPS_NORM):
            raise DegenerateVector("classifier bank contains a degenerate proxy")
        self.bias = float(self.bias)

    @classmethod
    def random(cls, K: int, D: int, rng: np.random.Generator, bias: float = 0.0):
        # standard normal draw, renormalized to unit length
        return cls(l2_normalize(rng.standard_normal((K, D))), bias)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def D(self) -> int:
        return self.weights.shape[1]

    def normalized(self) -> np.ndarray:
        return l2_normalize(self.weights)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.weights, axis=1)

    def copy(self) -> "ClassifierBank":
        return ClassifierBank(self.weights.copy(), self.bias)


def cosine_logits(x, bank: ClassifierBank) -> np.ndarray:
    """Cosines between feature(s) ``x`` and every proxy: shape (K,) or (N, K)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != bank.D:
        raise DimensionMismatch(f"feature dim {x.shape[-1]} != bank dim {bank.D}")
    return clamp_cosines(l2_normalize(x) @ bank.normalized().T)


def sample_sphere_uniform(D: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    if D < 2:
        raise ValueError(f"sphere sampling needs D >= 2, got {D}")
    shape = (D,) if size is None else (size, D)
    return l2_normalize(rng.standard_normal(shape))


@dataclass
class SyntheticDataset:
    inputs: np.ndarray
    labels: np.ndarray
    true_labels: np.ndarray
    class_means: np.ndarray
    noise_rate: float = 0.0
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.class_means.shape[0]

    @property
    def D(self) -> int:
        return self.inputs.shape[1]

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "SyntheticDataset":
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx],
                       true_labels=self.true_labels[idx])


def _distinct_means(K, D, rng, max_tries=100):
    for _ in range(max_tries):
        means = sample_sphere_uniform(D, rng, size=K)
        gram = np.clip(means @ means.T, -1.0, 1.0)
        np.fill_diagonal(gram, -1.0)
        if gram.max() < 1.0:
            return means
    raise RuntimeError("could not draw pairwise distinct class means")


def make_synthetic(K: int, D_in: int, n_per_class: int, concentration: float,
                   rng: np.random.Generator, *, identity_dim: int | None = None,
                   nuisance_dim: int = 0, nuisance_scale: float = 0.0,
                   seed: int | None = None) -> SyntheticDataset:
    """Labelled points scattered around K random directions on the sphere.

    Each sample is ``normalize(mean + noise / concentration)`` with isotropic
    gaussian noise.  Optionally a shared low-rank nuisance component
    (``nuisance_scale`` times a gaussian in a fixed random ``nuisance_dim``
    subspace) is added before normalizing; it mimics identity-independent
    factors such as pose that a learned encoder has to suppress.

    With ``identity_dim`` set, the class directions are confined to a random
    ``identity_dim``-dimensional subspace of the input space.
    """
    if K < 2:
        raise ValueError("need K >= 2 classes")
    if n_per_class < 1:
        raise ValueError("need at least one sample per class")
    if not concentration > 0:
        raise ValueError("concentration must be positive")
    if identity_dim is None or identity_dim == D_in:
        means = _distinct_means(K, D_in, rng)
    else:
        if not 2 <= identity_dim <= D_in:
            raise ValueError(f"identity_dim must lie in [2, {D_in}]")
        basis = np.linalg.qr(rng.standard_normal((D_in, D_in)))[0][:, :identity_dim]
        means = _distinct_means(K, identity_dim, rng) @ basis.T
    labels = np.repeat(np.arange(K), n_per_class)
    noise = rng.standard_normal((labels.size, D_in))
    points = means[labels] + (noise / concentration if np.isfinite(concentration) else 0.0)
    if nuisance_dim > 0 and nuisance_scale > 0:
        basis = l2_normalize(rng.standard_normal((nuisance_dim, D_in)))
        points = points + nuisance_scale * rng.standard_normal((labels.size, nuisance_dim)) @ basis
    return SyntheticDataset(
        inputs=l2_normalize(points),
        labels=labels.copy(),
        true_labels=labels,
        class_means=means,
        noise_rate=0.0,
        seed=seed,
    )


def split_classes(ds: SyntheticDataset, n_held_out: int):
    """Split into (train, held_out) by identity; held-out classes are relabelled from 0."""
    K = ds.K
    if not 0 < n_held_out < K:
        raise ValueError(f"n_held_out must be in (0, {K})")
    k_train = K - n_held_out
    tr = ds.true_labels < k_train
    train = SyntheticDataset(ds.inputs[tr], ds.labels[tr], ds.true_labels[tr],
                             ds.class_means[:k_train], ds.noise_rate, ds.seed)
    ho = ~tr
    held = SyntheticDataset(ds.inputs[ho], ds.true_labels[ho] - k_train,
                            ds.true_labels[ho] - k_train, ds.class_means[k_train:], 0.0, ds.seed)
    return train, held


def inject_label_noise(ds: SyntheticDataset, rate: float, rng: np.random.Generator) -> SyntheticDataset:
    """Flip exactly round(rate * N) labels to a uniformly chosen wrong class.

    Noise is always applied relative to ``true_labels``.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"noise rate must lie in [0, 1), got {rate}")
    n = len(ds)
    n_flip = int(np.floor(rate * n + 0.5))
    labels = ds.true_labels.copy()
    if n_flip:
        idx = rng.choice(n, size=n_flip, replace=False)
        offset = rng.integers(1, ds.K, size=n_flip)
        labels[idx] = (labels[idx] + offset) % ds.K
    return replace(ds, labels=labels, noise_rate=float(rate))


def save_dataset(ds: SyntheticDataset, path) -> None:
    path = Path(path)
    lines = [f"# K={ds.K} D={ds.D} noise={ds.noise_rate!r} seed={ds.seed}"]
    for lab, true, x in zip(ds.labels, ds.true_labels, ds.inputs):
        lines.append(",".join([str(int(lab)), str(int(true))] + [repr(float(v)) for v in x]))
    path.write_text("\n".join(lines) + "\n")
    means_path = path.with_suffix(path.suffix + ".means")
    means_path.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in ds.class_means) + "\n")


def load_dataset(path) -> SyntheticDataset:
    path = Path(path)
    text = path.read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise ValueError(f"{path}: missing '# K=.. D=.. noise=.. seed=..' header")
    header = dict(tok.split("=", 1) for tok in text[0][1:].split())
    K, D = int(header["K"]), int(header["D"])
    rows = [line.split(",") for line in text[1:] if line.strip()]
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    true_labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    inputs = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64).reshape(len(rows), D)
    means_path = path.with_suffix(path.suffix + ".means")
    if means_path.exists():
        means = np.array([[float(v) for v in line.split(",")]
                          for line in means_path.read_text().splitlines() if line.strip()])
    else:
        means = np.full((K, D), np.nan)
    seed = header.get("seed")
    return SyntheticDataset(inputs, labels, true_labels, means, float(header["noise"]),
                            None if seed in (None, "None") else int(seed))

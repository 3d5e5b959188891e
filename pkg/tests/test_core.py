import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spherebin.core import (
    ClassifierBank,
    Hyperparams,
    MarginVariant,
    cosine_logits,
    inject_label_noise,
    l2_normalize,
    load_dataset,
    make_synthetic,
    sample_sphere_uniform,
    save_dataset,
    split_classes,
)
from spherebin.errors import DegenerateVector, DimensionMismatch, InvalidHyperparams


class TestNormalize:
    def test_examples(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)
        np.testing.assert_array_equal(l2_normalize([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])

    def test_zero_vector(self):
        with pytest.raises(DegenerateVector):
            l2_normalize([0.0, 0.0])

    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8).filter(
        lambda v: np.linalg.norm(v) > 1e-6))
    def test_unit_and_idempotent(self, v):
        u = l2_normalize(v)
        assert abs(np.linalg.norm(u) - 1.0) <= 1e-12
        np.testing.assert_allclose(l2_normalize(u), u, atol=1e-15, rtol=0)


class TestCosineLogits:
    def test_examples(self):
        bank = ClassifierBank([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(cosine_logits([1.0, 0.0], bank), [1.0, 0.0])
        assert cosine_logits([2.0, 0.0], ClassifierBank([[5.0, 0.0]]))[0] == 1.0
        np.testing.assert_allclose(cosine_logits([1.0, 1.0], ClassifierBank([[1.0, 0.0]])),
                                   [0.7071067811865475], atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine_logits([1.0, 0.0, 0.0], ClassifierBank([[1.0, 0.0]]))

    def test_degenerate_feature(self):
        with pytest.raises(DegenerateVector):
            cosine_logits([0.0, 0.0], ClassifierBank([[1.0, 0.0]]))

    def test_degenerate_proxy(self):
        with pytest.raises(DegenerateVector):
            ClassifierBank([[1.0, 0.0], [0.0, 0.0]])

    @settings(max_examples=50)
    @given(st.integers(0, 2**31), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, ax, aw):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(5)
        W = rng.standard_normal((4, 5))
        base = cosine_logits(x, ClassifierBank(W))
        W2 = W.copy()
        W2[1] *= aw
        np.testing.assert_allclose(cosine_logits(ax * x, ClassifierBank(W2)), base, atol=1e-12, rtol=0)
        assert np.all(np.abs(base) <= 1.0)

    def test_bank_random_is_unit(self, rng):
        bank = ClassifierBank.random(7, 3, rng)
        np.testing.assert_allclose(np.linalg.norm(bank.normalized(), axis=1), 1.0, atol=1e-12)


class TestHyperparams:
    @pytest.mark.parametrize("kw", [dict(lam=-0.1), dict(lam=1.1), dict(r=0.0), dict(t=0.0),
                                    dict(m_p=-0.1), dict(m_n=-1.0)])
    def test_rejects(self, kw):
        with pytest.raises(InvalidHyperparams):
            Hyperparams(**kw)

    def test_multiplicative_needs_m_ge_1(self):
        with pytest.raises(InvalidHyperparams):
            Hyperparams(m_p=0.5, margin_variant=MarginVariant.MULTIPLICATIVE)
        Hyperparams(m_p=1.7, margin_variant="mult")

    def test_tied(self):
        hp = Hyperparams.tied(0.7, 40, 0.4, 3)
        assert (hp.m_p, hp.m_n, hp.r) == (0.4, 0.4, 40)


class TestSampling:
    def test_unit(self, rng):
        v = sample_sphere_uniform(2, rng)
        assert abs(np.linalg.norm(v) - 1) <= 1e-12

    def test_mean_near_zero(self):
        pts = sample_sphere_uniform(3, np.random.default_rng(0), size=10_000)
        assert np.all(np.abs(pts.mean(axis=0)) < 0.05)

    def test_rejects_d1(self, rng):
        with pytest.raises(ValueError):
            sample_sphere_uniform(1, rng)


class TestSynthetic:
    def test_within_beats_between(self):
        ds = make_synthetic(2, 8, 50, 10.0, np.random.default_rng(3))
        gram = ds.inputs @ ds.inputs.T
        same = ds.labels[:, None] == ds.labels[None, :]
        off = ~np.eye(len(ds), dtype=bool)
        assert gram[same & off].mean() > gram[~same].mean()

    def test_infinite_concentration(self, rng):
        ds = make_synthetic(3, 4, 5, np.inf, rng)
        np.testing.assert_allclose(ds.inputs, ds.class_means[ds.labels], atol=1e-15)

    def test_fig6_toy_shape(self, rng):
        ds = make_synthetic(6, 2, 20, 8.0, rng)
        assert ds.K == 6 and ds.D == 2 and len(ds) == 120
        gram = ds.class_means @ ds.class_means.T
        np.fill_diagonal(gram, -1)
        assert gram.max() < 1.0

    def test_split_classes(self, rng):
        ds = make_synthetic(10, 4, 3, 5.0, rng)
        tr, ho = split_classes(ds, 4)
        assert tr.K == 6 and ho.K == 4 and len(tr) == 18 and len(ho) == 12
        assert set(ho.labels) == set(range(4))


class TestLabelNoise:
    def test_zero_rate_is_identity(self, rng):
        ds = make_synthetic(4, 3, 10, 5.0, rng)
        out = inject_label_noise(ds, 0.0, rng)
        np.testing.assert_array_equal(out.labels, ds.labels)

    @pytest.mark.parametrize("rate,expected", [(0.2, 20), (0.4, 40), (0.6, 60), (0.8, 80)])
    def test_exact_count(self, rate, expected):
        ds = make_synthetic(5, 3, 20, 5.0, np.random.default_rng(0))
        out = inject_label_noise(ds, rate, np.random.default_rng(1))
        flipped = out.labels != out.true_labels
        assert flipped.sum() == expected
        assert out.noise_rate == rate
        np.testing.assert_array_equal(out.true_labels, ds.true_labels)
        np.testing.assert_array_equal(out.inputs, ds.inputs)
        assert out.labels.min() >= 0 and out.labels.max() < ds.K

    def test_rejects_rate_one(self, rng):
        ds = make_synthetic(2, 3, 2, 5.0, rng)
        with pytest.raises(ValueError):
            inject_label_noise(ds, 1.0, rng)


def test_dataset_round_trip(tmp_path, rng):
    ds = inject_label_noise(make_synthetic(3, 5, 4, 7.0, rng, seed=9), 0.25, rng)
    path = tmp_path / "d.csv"
    save_dataset(ds, path)
    first = path.read_text().splitlines()[0]
    assert first == "# K=3 D=5 noise=0.25 seed=9"
    back = load_dataset(path)
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.true_labels, ds.true_labels)
    np.testing.assert_array_equal(back.class_means, ds.class_means)
    assert back.noise_rate == 0.25 and back.seed == 9

import numpy as np
import pytest

from spherebin.core import (
    ClassifierBank,
    Hyperparams,
    SyntheticDataset,
    l2_normalize,
    make_synthetic,
)
from spherebin.errors import DegenerateVector, DimensionMismatch
from spherebin.loss import ABLATION_LADDER, bias_init
from spherebin.train import (
    Encoder,
    TrainConfig,
    batch_step,
    config_dict,
    encoder_forward,
    export_features,
    initial_bias,
    load_features,
    load_model,
    save_model,
    sgd_step,
    train,
)


def tiny_setup(rng, loss="final", flags=None, hp=None):
    ds = make_synthetic(5, 6, 4, 3.0, rng)
    cfg = TrainConfig(loss=loss, flags=flags, hp=hp or Hyperparams(), hidden=(16,), d_feat=4)
    model = Encoder.init([6, 16, 4], rng)
    bank = ClassifierBank.random(5, 4, rng, bias=-1.0)
    return cfg, model, bank, ds.inputs[:8], ds.labels[:8]


def numeric_batch_grads(cfg, model, bank, X, y, h=1e-6):
    """Central differences of the mean batch loss for every parameter."""
    out = []
    for p in model.params() + [bank.weights]:
        num = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            orig = p[i]
            p[i] = orig + h
            up = batch_step(cfg, model, bank, X, y)[0]
            p[i] = orig - h
            down = batch_step(cfg, model, bank, X, y)[0]
            p[i] = orig
            num[i] = (up - down) / (2 * h)
        out.append(num)
    b0 = bank.bias
    bank.bias = b0 + h
    up = batch_step(cfg, model, bank, X, y)[0]
    bank.bias = b0 - h
    down = batch_step(cfg, model, bank, X, y)[0]
    bank.bias = b0
    return out, (up - down) / (2 * h)


class TestEncoder:
    def test_identity_layer(self):
        model = Encoder([np.eye(3)], [np.zeros(3)])
        x = np.array([[0.3, -1.2, 2.0]])
        np.testing.assert_array_equal(encoder_forward(model, x), x)

    def test_zero_input_is_degenerate(self, rng):
        model = Encoder.init([4, 8, 3], rng)
        feats = encoder_forward(model, np.zeros((1, 4)))
        np.testing.assert_array_equal(feats, 0.0)
        with pytest.raises(DegenerateVector):
            l2_normalize(feats)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionMismatch):
            encoder_forward(Encoder.init([4, 3], rng), np.ones((2, 5)))

    def test_sizes_and_he_scale(self, rng):
        model = Encoder.init([200, 300, 10], rng)
        assert model.sizes == [200, 300, 10]
        assert np.std(model.weights[0]) == pytest.approx(np.sqrt(2 / 200), rel=0.02)


class TestEndToEndGradient:
    @pytest.mark.parametrize("loss", ["final", "balanced", "softmax"])
    def test_matches_finite_differences(self, rng, loss):
        cfg, model, bank, X, y = tiny_setup(rng, loss=loss)
        _, enc, d_w, d_b = batch_step(cfg, model, bank, X, y)
        num, num_b = numeric_batch_grads(cfg, model, bank, X, y)
        for a, n in zip(enc + [d_w], num):
            np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-8)
        assert d_b == pytest.approx(num_b if cfg.uses_bias else 0.0, rel=1e-5, abs=1e-8)

    def test_ablation_row(self, rng):
        cfg, model, bank, X, y = tiny_setup(rng, flags=ABLATION_LADDER[-1])
        _, enc, d_w, d_b = batch_step(cfg, model, bank, X, y)
        num, num_b = numeric_batch_grads(cfg, model, bank, X, y)
        for a, n in zip(enc + [d_w], num):
            np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-8)
        assert d_b == pytest.approx(num_b, rel=1e-5, abs=1e-8)


class TestSGD:
    def test_plain_step_without_momentum(self):
        p, v = [np.array([1.0, 2.0])], [np.zeros(2)]
        sgd_step(p, [np.array([0.5, -1.0])], v, lr=0.1, momentum=0.0)
        np.testing.assert_allclose(p[0], [0.95, 2.1], atol=1e-15)

    def test_two_constant_steps(self):
        lr, mu, grad = 0.1, 0.9, np.array([2.0])
        p, v = [np.array([0.0])], [np.zeros(1)]
        for _ in range(2):
            sgd_step(p, [grad], v, lr, mu)
        np.testing.assert_allclose(p[0], -lr * grad * (2 + mu), atol=1e-15)

    def test_zero_gradient_comes_to_rest(self):
        p, v = [np.array([0.0])], [np.array([1.0])]
        prev_step = None
        for _ in range(200):
            before = p[0].copy()
            sgd_step(p, [np.zeros(1)], v, 0.1, 0.5)
            step = abs(p[0][0] - before[0])
            if prev_step is not None:
                assert step == pytest.approx(0.5 * prev_step)
            prev_step = step
        # total displacement is the geometric sum lr * v0 * mu / (1 - mu)
        assert p[0][0] == pytest.approx(-0.1 * 0.5 / 0.5)

    @pytest.mark.parametrize("kw", [dict(lr=0.0), dict(momentum=1.0), dict(batch_size=0),
                                    dict(bias_init="bogus")])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestTrain:
    def test_deterministic(self, rng):
        ds = make_synthetic(6, 8, 20, 4.0, rng)
        cfg = TrainConfig(epochs=3, hidden=(16,), d_feat=4, lr=0.1, seed=7)
        a, b = train(cfg, ds), train(cfg, ds)
        np.testing.assert_array_equal(np.array(a.history), np.array(b.history))
        for p, q in zip(a.model.params() + [a.bank.weights], b.model.params() + [b.bank.weights]):
            np.testing.assert_array_equal(p, q)
        assert a.bank.bias == b.bank.bias
        assert [h[0] for h in a.history] == [0, 1, 2]

    def test_loss_decreases(self, rng):
        ds = make_synthetic(6, 8, 30, 4.0, rng)
        res = train(TrainConfig(epochs=10, hidden=(32,), d_feat=8, lr=0.5), ds)
        assert res.history[-1][1] < res.history[0][1]

    def test_closed_form_bias_init(self, rng):
        ds = make_synthetic(10, 8, 5, 4.0, rng)
        hp = Hyperparams.tied(lam=0.7, r=30.0, m=0.4, t=1.0)
        cfg = TrainConfig(epochs=1, hp=hp, hidden=(16,), d_feat=64)
        assert initial_bias(cfg, 10) == bias_init(hp, 10)
        assert initial_bias(TrainConfig(bias_init="zero"), 10) == 0.0
        assert initial_bias(TrainConfig(loss="softmax"), 10) == 0.0
        res = train(cfg, ds)
        # cosines start near (not at) zero, hence the loose bound
        assert abs(res.first_batch_d_bias) <= 1e-2

    def test_single_class_dataset(self, rng):
        x = l2_normalize(rng.standard_normal((12, 5)))
        labels = np.zeros(12, dtype=int)
        ds = SyntheticDataset(x, labels, labels.copy(), l2_normalize(np.ones((1, 5))))
        res = train(TrainConfig(epochs=2, hidden=(8,), d_feat=3, lr=0.1), ds)
        assert res.bank.K == 1
        assert np.isfinite(res.history[-1][1])

    def test_bank_mismatch(self, rng):
        ds = make_synthetic(4, 6, 3, 4.0, rng)
        with pytest.raises(DimensionMismatch):
            train(TrainConfig(epochs=1, d_feat=4), ds, bank=ClassifierBank.random(5, 4, rng))


class TestExport:
    def test_round_trip(self, rng, tmp_path):
        ds = make_synthetic(6, 8, 5, 4.0, rng)
        hp = Hyperparams.tied(lam=0.7, r=30.0, m=0.2, t=1.0)
        res = train(TrainConfig(epochs=1, hidden=(8,), d_feat=2, hp=hp), ds)
        path = tmp_path / "feat.csv"
        export_features(res.model, res.bank, ds, path, hp)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# K=6 D_feat=2 r=30.0 m=0.2 lambda=0.7 t=1.0 b=")
        assert len(lines[1].split(",")) == 3
        header, labels, feats, dirs = load_features(path)
        assert header["K"] == 6 and header["b"] == res.bank.bias
        np.testing.assert_array_equal(labels, ds.labels)
        np.testing.assert_allclose(feats, l2_normalize(encoder_forward(res.model, ds.inputs)),
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(dirs, res.bank.normalized(), rtol=0, atol=1e-12)

    def test_three_dimensional_export(self, rng, tmp_path):
        ds = make_synthetic(4, 6, 3, 4.0, rng)
        res = train(TrainConfig(epochs=1, hidden=(32,), d_feat=3), ds)
        export_features(res.model, res.bank, ds, tmp_path / "f.csv", Hyperparams())
        _, _, feats, dirs = load_features(tmp_path / "f.csv")
        assert feats.shape == (12, 3) and dirs.shape == (4, 3)

    def test_model_file_is_deterministic(self, rng, tmp_path):
        ds = make_synthetic(4, 6, 3, 4.0, rng)
        cfg = TrainConfig(epochs=1, hidden=(32,), d_feat=3)
        res = train(cfg, ds)
        save_model(res.model, res.bank, tmp_path / "a.json", meta=config_dict(cfg))
        save_model(train(cfg, ds).model, res.bank, tmp_path / "b.json", meta=config_dict(cfg))
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        model, bank, meta = load_model(tmp_path / "a.json")
        np.testing.assert_array_equal(model.weights[0], res.model.weights[0])
        assert bank.bias == res.bank.bias and meta["loss"] == "final"

import numpy as np
import pytest

from spherebin.experiments import (
    BenchmarkSpec,
    default_config,
    make_benchmark,
    run_ablation,
    run_margin_geometry,
    run_noise_sweep,
    run_similarity_overlap,
)
from spherebin.loss import ABLATION_LADDER

TINY = BenchmarkSpec(K_train=10, K_held=6, n_per_class=6, n_pos=40, n_neg=40)


@pytest.fixture(scope="module")
def bench():
    return make_benchmark(TINY)


def quick(**changes):
    return default_config(epochs=2, hidden=(16,), d_feat=8, **changes)


def test_benchmark_is_open_set(bench):
    assert bench.train.K == 10 and bench.held.K == 6
    assert len(bench.pairs) == 80
    again = make_benchmark(TINY)
    np.testing.assert_array_equal(bench.train.inputs, again.train.inputs)
    np.testing.assert_array_equal(bench.pairs.a, again.pairs.a)


def test_ablation_rows_are_reproducible(bench):
    rows = run_ablation(bench, rows=ABLATION_LADDER[1:3] * 2, cfg=quick())
    assert rows[0].accuracy == rows[2].accuracy and rows[1].accuracy == rows[3].accuracy
    assert all(r.status == "ok" for r in rows)


def test_ablation_fallback_row(bench):
    rows = run_ablation(bench, rows=ABLATION_LADDER[:1], cfg=quick(), naive_fallback=True)
    assert rows[0].status == "fallback" and np.isfinite(rows[0].accuracy)


def test_noise_sweep_layout(bench):
    rows = run_noise_sweep(bench, rates=(0.0, 0.5), cfg=quick())
    assert [(r.loss, r.rate) for r in rows] == [("final", 0.0), ("softmax", 0.0),
                                                ("final", 0.5), ("softmax", 0.5)]
    assert all(0.0 <= r.accuracy <= 1.0 for r in rows)


def test_overlap_entries(bench):
    res = run_similarity_overlap(bench, ts=(1.0, 2.0), cfg=quick())
    for overlap, acc, pos, neg in res.values():
        assert 0.0 <= overlap <= 1.0 + 1e-12 and 0.0 <= acc <= 1.0
        assert len(pos) == 40 and len(neg) == 40


def test_geometry_shapes():
    (res,) = run_margin_geometry(margins=(0.1,), K=3, n_per_class=10, epochs=2)
    assert res.features.shape == (30, 2) and res.directions.shape == (3, 2)
    np.testing.assert_allclose(np.linalg.norm(res.features, axis=1), 1.0)
    assert -1.0 <= res.within_class_cos <= 1.0 and 0.0 <= res.frac_positive_u <= 1.0

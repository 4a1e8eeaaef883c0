import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tjepa import analysis, cli, training
from tjepa.analysis import (
    AnalysisError,
    EmbeddingMatrix,
    FeatureRanking,
    embedding_variance,
    kendall_tau,
    kl_divergence,
    mean_pairwise,
    ranking_from_scores,
    to_distribution,
    uniformity,
)

from conftest import fitted_dataset, tiny_state
from oracles import bf_dist, bf_embedding_variance, bf_kl, bf_mean_kl, bf_softmax, bf_tau, bf_uniformity

# -- closed forms ----------------------------------------------------------------------------------------


def test_distribution_examples(rng):
    np.testing.assert_array_equal(to_distribution(np.full(4, 3.3)), np.full(4, 0.25))
    v = rng.standard_normal(20)
    assert abs(to_distribution(v).sum() - 1) < 1e-6
    np.testing.assert_allclose(to_distribution(v), bf_softmax(list(v)), atol=1e-7)


def test_kl_closed_forms():
    assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert abs(kl_divergence([1.0, 0.0], [0.5, 0.5]) - math.log(2)) < 1e-9
    expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert abs(kl_divergence([0.75, 0.25], [0.5, 0.5]) - expected) < 1e-9
    assert abs(expected - 0.13081) < 1e-5
    with pytest.raises(ValueError):
        kl_divergence([1.0], [0.5, 0.5])


def test_pairwise_closed_forms():
    same = np.ones((5, 3))
    assert mean_pairwise("euclidean", same) == 0.0
    assert mean_pairwise("kl", same) == 0.0
    spread = np.tile([0.0, -40.0, 10.0], (4, 1))  # softmax entries far below the floor
    assert mean_pairwise("kl", spread) == 0.0
    assert mean_pairwise("euclidean", np.array([[0.0, 0.0], [3.0, 4.0]])) == 5.0
    with pytest.raises(AnalysisError):
        mean_pairwise("euclidean", np.ones((1, 3)))
    with pytest.raises(AnalysisError):
        mean_pairwise("cosine", same)


def test_uniformity_closed_forms():
    assert uniformity(np.zeros((4, 3))) == 0.0
    assert abs(uniformity(np.array([[0.0], [1.0]]), t=2) - 2.0) < 1e-9
    with pytest.raises(AnalysisError):
        uniformity(np.zeros((3, 2)), t=0)
    with pytest.raises(AnalysisError):
        uniformity(np.zeros((1, 2)))


def test_uniformity_does_not_underflow():
    X = np.array([[0.0], [100.0], [200.0]])
    assert math.isfinite(uniformity(X)) and uniformity(X) > 1e4


def test_embedding_variance_closed_forms(rng):
    np.testing.assert_allclose(embedding_variance(np.tile(rng.standard_normal(5), (3, 1))), np.zeros(3), atol=1e-30)
    np.testing.assert_array_equal(embedding_variance(rng.standard_normal((1, 6))), [0.0])


def test_kendall_closed_forms():
    assert kendall_tau([0, 1, 2, 3], [0, 1, 2, 3])[0] == 1.0
    assert kendall_tau([0, 1, 2, 3], [3, 2, 1, 0])[0] == -1.0
    tau, p = kendall_tau([1, 2, 3, 4], [1, 3, 2, 4])
    assert abs(tau - 4 / 6) < 1e-9
    assert 0 < p <= 1
    with pytest.raises(AnalysisError):
        kendall_tau([0, 1, 1], [0, 1, 2])
    with pytest.raises(AnalysisError):
        kendall_tau([0], [0])


def test_kendall_p_value_normal_approximation():
    n = 10
    tau, p = kendall_tau(list(range(n)), list(range(n)))
    z = 1.0 / math.sqrt(2 * (2 * n + 5) / (9 * n * (n - 1)))
    assert abs(p - math.erfc(z / math.sqrt(2))) < 1e-12


# -- brute-force agreement on 100 random instances -----------------------------------------------------


@pytest.mark.parametrize("seed", range(100))
def test_metrics_match_brute_force(seed):
    r = np.random.default_rng(seed)
    n, k = int(r.integers(2, 25)), int(r.integers(1, 7))
    X = r.standard_normal((n, k)) * r.uniform(0.1, 2)
    rows = X.tolist()
    assert abs(mean_pairwise("euclidean", X) - bf_dist(rows)) < 1e-9
    assert abs(mean_pairwise("kl", X) - bf_mean_kl(rows)) < 1e-9
    assert abs(uniformity(X, t=2.0) - bf_uniformity(rows)) < 1e-9
    P, Q = to_distribution(r.standard_normal(k)), to_distribution(r.standard_normal(k))
    assert abs(kl_divergence(P, Q) - bf_kl(P.tolist(), Q.tolist())) < 1e-9
    H = r.standard_normal((int(r.integers(1, 6)), int(r.integers(1, 9))))
    np.testing.assert_allclose(embedding_variance(H), bf_embedding_variance(H.tolist()), atol=1e-9, rtol=0)
    a, b = r.permutation(k + 1), r.permutation(k + 1)
    assert abs(kendall_tau(a, b)[0] - bf_tau(a.tolist(), b.tolist())) < 1e-9


def test_subsampled_pairs_approximate_exact(rng):
    X = rng.standard_normal((300, 4))
    exact = mean_pairwise("euclidean", X)
    approx = mean_pairwise("euclidean", X, sample_cap=100, rng=1)
    assert abs(approx - exact) / exact < 0.03
    assert approx == mean_pairwise("euclidean", X, sample_cap=100, rng=1)


# -- properties ----------------------------------------------------------------------------------------


@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-20, 20)),
       arrays(np.float64, st.integers(2, 10), elements=st.floats(-20, 20)))
def test_kl_gibbs(a, b):
    if len(a) != len(b):
        return
    P, Q = to_distribution(a), to_distribution(b)
    assert kl_divergence(P, P) == 0.0
    assert kl_divergence(P, Q) >= -1e-12


@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 4)), elements=st.floats(-3, 3)),
       arrays(np.float64, 4, elements=st.floats(-50, 50)))
def test_uniformity_translation_invariant(X, c):
    assert abs(uniformity(X + c[: X.shape[1]]) - uniformity(X)) < 1e-9


def test_uniformity_rises_when_cluster_spreads(rng):
    collapsed = np.zeros((6, 3))
    spread = collapsed.copy()
    spread[:3] = rng.standard_normal((3, 3))
    assert uniformity(spread) > uniformity(collapsed)


@given(st.permutations(list(range(7))), st.permutations(list(range(7))))
def test_kendall_antisymmetric(a, b):
    assert abs(kendall_tau(a, b[::-1])[0] + kendall_tau(a, b)[0]) < 1e-12


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-10, 10)),
       st.floats(-100, 100), st.integers(0, 5))
def test_embedding_variance_column_shift(H, c, col):
    shifted = H.copy()
    shifted[:, col % H.shape[1]] += c
    np.testing.assert_allclose(embedding_variance(shifted), embedding_variance(H), atol=1e-9)


# -- rankings ----------------------------------------------------------------------------------------------


def test_ranking_ties_go_to_lower_index():
    r = ranking_from_scores([1.0, 3.0, 3.0, 0.5])
    assert r.order.tolist() == [1, 2, 0, 3]
    assert r.positions().tolist() == [2, 0, 1, 3]
    assert r.rank_of(2) == 1
    with pytest.raises(AnalysisError):
        FeatureRanking([0, 0, 1], np.zeros(3))


def test_duplicated_features_rank_adjacent(tmp_path, rng):
    ds = fitted_dataset(tmp_path, d=4)
    for row in ds.rows:
        row[2] = row[1]
    from tjepa import data

    data.fit_preprocessor(ds)
    state = tiny_state(d=4)
    for name in ("embedding.W", "embedding.b"):
        state.params[f"{name}.2"].data = state.params[f"{name}.1"].data.copy()
    state.params["embedding.index"].data[2] = state.params["embedding.index"].data[1]
    rank = analysis.rank_by_variance(state, ds)
    assert abs(rank.rank_of(1) - rank.rank_of(2)) == 1
    assert rank.rank_of(1) < rank.rank_of(2)


def test_rank_by_variance_deterministic(tmp_path):
    ds = fitted_dataset(tmp_path, d=5)
    a = analysis.rank_by_variance(tiny_state(seed=1, d=5), ds)
    b = analysis.rank_by_variance(tiny_state(seed=1, d=5), ds)
    assert a.order.tolist() == b.order.tolist()
    assert a.names == [f"x{j}" for j in range(5)]


@pytest.mark.slow
@pytest.mark.xfail(reason="with pure-noise inputs the self-supervised task carries no signal that singles out "
                          "feature 0; measured 3/10 seeds, i.e. chance level", strict=False)
def test_single_informative_feature_rank_improves(tmp_path):
    wins = 0
    for seed in range(10):
        r = np.random.default_rng(seed)
        X = r.standard_normal((1024, 8))
        path = cli.write_synthetic(tmp_path / f"s{seed}.csv", X, (X[:, 0] > 0).astype(int))
        ds = cli.load_dataset(path, "y", seed)
        cfg = training.TrainConfig(epochs=30, batch_size=32, seed=seed, checkpoint_every=0, analysis_every=30)
        res = training.pretrain(ds, cfg, snapshot_fn=lambda s, e: {"pos": analysis.rank_by_variance(s, ds).positions()})
        wins += res.snapshots[-1]["pos"][0] < res.snapshots[0]["pos"][0]
    assert wins >= 8


# -- export ------------------------------------------------------------------------------------------------


def test_export_round_trip(tmp_path):
    ds = fitted_dataset(tmp_path)
    state = tiny_state(dtype=np.float32)
    flat = analysis.export_embeddings(state, ds, tmp_path / "emb", split="test")
    assert flat.shape == (len(ds.indices("test")), 4 * 8)
    back = analysis.load_embeddings(tmp_path / "emb")
    np.testing.assert_array_equal(back.values, flat)


def test_export_empty_split_rejected(tmp_path):
    ds = fitted_dataset(tmp_path)
    ds.split_labels[:] = "train"
    with pytest.raises(AnalysisError):
        analysis.export_embeddings(tiny_state(), ds, tmp_path / "e", split="test")


def test_embedding_matrix_validation():
    with pytest.raises(AnalysisError):
        EmbeddingMatrix(np.array([[np.nan, 1.0]]))
    assert len(EmbeddingMatrix.from_representations(np.zeros((3, 2, 4)))) == 3


def test_metric_report(rng):
    H = rng.standard_normal((10, 3, 4))
    report = analysis.metric_report(H, ["kl", "dist", "uniformity", "variance"])
    assert set(report) == {"kl", "dist", "uniformity", "variance"}
    assert len(report["variance"]) == 3
    with pytest.raises(AnalysisError):
        analysis.metric_report(H, ["bogus"])

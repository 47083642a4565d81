import numpy as np
import pytest

from teddn.errors import ConfigError, DimensionError
from teddn.gradcheck import relative_error
from teddn.graph import (GraphLearnParams, PropagationParams, export_adjacency_csv, graph_convolve, hop_fusion,
                         learn_adjacency, normalize_adjacency, propagate)
from teddn.tensor import Parameter, Tensor, backward, finite_difference_grad


def graph(N=4, d=3, alpha=3.0, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    p = GraphLearnParams(N, d, alpha, rng)
    for q in p.parameters():
        q.data = rng.normal(scale=scale, size=q.shape)
    return p


def test_identical_embeddings_give_empty_graph():
    p = graph()
    p.e2.data = p.e1.data.copy()
    p.w2.data = p.w1.data.copy()
    assert not learn_adjacency(p).data.any()


def test_zero_alpha_gives_empty_graph():
    assert not learn_adjacency(graph(alpha=0.0)).data.any()


def test_adjacency_matches_dense_loop():
    p = graph(N=4, seed=1)
    a = p.alpha
    de1 = np.tanh(a * p.e1.data @ p.w1.data)
    de2 = np.tanh(a * p.e2.data @ p.w2.data)
    A = learn_adjacency(p).data
    for i in range(4):
        for j in range(4):
            m_ij = sum(de1[i, k] * de2[j, k] for k in range(3))
            m_ji = sum(de1[j, k] * de2[i, k] for k in range(3))
            assert abs(A[i, j] - max(np.tanh(a * (m_ij - m_ji)), 0.0)) < 1e-12
            assert A[i, j] * A[j, i] == 0.0
    assert np.all((A >= 0) & (A < 1))


def test_one_directional_edges_on_randoms():
    for seed in range(200):
        A = learn_adjacency(graph(N=6, seed=seed, scale=2.0)).data
        assert np.all(A * A.T == 0)
        assert np.all(np.diag(A) == 0)


def test_normalize_empty_graph():
    np.testing.assert_array_equal(normalize_adjacency(Tensor(np.zeros((3, 3)))).data, np.eye(3))


def test_normalize_hand_case():
    P = normalize_adjacency(Tensor([[0.0, 1.0], [0.0, 0.0]])).data
    assert P.tolist() == [[0.5, 0.5], [0.0, 1.0]]


def test_row_stochastic():
    rng = np.random.default_rng(2)
    for _ in range(100):
        P = normalize_adjacency(Tensor(rng.uniform(0, 1, size=(7, 7)))).data
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-6)


def test_normalize_rejects_non_square():
    with pytest.raises(DimensionError):
        normalize_adjacency(Tensor(np.zeros((2, 3))))


def test_full_retention_and_identity_graph():
    rng = np.random.default_rng(3)
    H = Tensor(rng.normal(size=(4, 2)))
    P = normalize_adjacency(learn_adjacency(graph(seed=3)))
    for h in propagate(H, P, PropagationParams(2, 3, 1.0, rng)):
        np.testing.assert_array_equal(h.data, H.data)
    for h in propagate(H, Tensor(np.eye(4)), PropagationParams(2, 3, 0.3, rng)):
        np.testing.assert_allclose(h.data, H.data, atol=1e-15)


def test_two_step_recurrence():
    rng = np.random.default_rng(4)
    H, P = rng.normal(size=(3, 2)), normalize_adjacency(Tensor(rng.uniform(size=(3, 3)))).data
    hops = propagate(Tensor(H), Tensor(P), PropagationParams(2, 2, 0.3, rng))
    h1 = 0.3 * H + 0.7 * P @ H
    h2 = 0.3 * H + 0.7 * P @ h1
    assert len(hops) == 3
    np.testing.assert_allclose(hops[1].data, h1, atol=1e-14)
    np.testing.assert_allclose(hops[2].data, h2, atol=1e-14)


def test_sup_norm_never_grows():
    rng = np.random.default_rng(5)
    for _ in range(50):
        H = rng.normal(size=(5, 3)) * 10
        P = normalize_adjacency(Tensor(rng.uniform(size=(5, 5))))
        for h in propagate(Tensor(H), P, PropagationParams(3, 4, rng.uniform(), rng)):
            assert np.abs(h.data).max() <= np.abs(H).max() + 1e-12


def test_fusion_identity_zero_and_loop():
    rng = np.random.default_rng(6)
    H = Tensor(rng.normal(size=(4, 3)))
    np.testing.assert_array_equal(hop_fusion([H], Tensor(np.eye(3))).data, H.data)
    assert not hop_fusion([H, H], Tensor(np.zeros((6, 3)))).data.any()
    H2 = Tensor(rng.normal(size=(4, 3)))
    W = rng.normal(size=(6, 3))
    out = hop_fusion([H, H2], Tensor(W)).data
    for i in range(4):
        row = list(H.data[i]) + list(H2.data[i])
        for j in range(3):
            assert abs(out[i, j] - sum(row[k] * W[k, j] for k in range(6))) < 1e-12


def test_fusion_shape_errors():
    with pytest.raises(DimensionError):
        hop_fusion([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], Tensor(np.ones((7, 3))))
    with pytest.raises(DimensionError):
        hop_fusion([Tensor(np.ones((2, 3)))], Tensor(np.ones((4, 3))))


def test_convolve_fuses_first_k_hops_only():
    rng = np.random.default_rng(7)
    gp, pp = graph(seed=7), PropagationParams(3, 2, 0.4, rng)
    H = Tensor(rng.normal(size=(4, 3)))
    hops = propagate(H, normalize_adjacency(learn_adjacency(gp)), pp)
    expect = np.concatenate([hops[0].data, hops[1].data], axis=1) @ pp.fuse.data
    np.testing.assert_allclose(graph_convolve(H, gp, pp).data, expect, atol=1e-14)


def test_bad_propagation_config():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        PropagationParams(3, 0, 0.5, rng)
    with pytest.raises(ConfigError):
        PropagationParams(3, 2, 1.5, rng)


@pytest.mark.parametrize("seed", range(5))
def test_full_chain_gradient(seed):
    rng = np.random.default_rng(seed)
    gp, pp = graph(N=5, seed=seed, scale=0.5), PropagationParams(3, 3, 0.3, rng)
    H = Parameter(rng.normal(size=(2, 5, 3)), "H")
    w = rng.normal(size=H.shape)
    f = lambda _: (graph_convolve(H, gp, pp) * w).sum()
    backward(f(None))
    for q in gp.parameters() + pp.parameters() + [H]:
        assert relative_error(q.grad, finite_difference_grad(f, q)) < 1e-4


def test_export_csv(tmp_path):
    A = learn_adjacency(graph(N=3, seed=8)).data
    export_adjacency_csv(A, tmp_path / "a.csv")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "0,1,2"
    back = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    np.testing.assert_array_equal(back, A)

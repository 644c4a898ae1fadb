import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from higstm import autodiff as ad
from higstm.relational import (GraphError, global_graph, global_macro, neighbor_aggregate,
                               neighbor_count, temporal_section_graphs, timestep_macro, topk_keep)


@pytest.mark.parametrize("N,k", [(2, 1), (4, 1), (5, 2), (11, 3), (30, 9), (31, 9), (101, 30)])
def test_neighbor_count(N, k):
    assert neighbor_count(N) == k


def test_neighbor_count_needs_two():
    with pytest.raises(GraphError):
        neighbor_count(1)


def section_graphs_loops(X_s, W_Q, W_K):
    N, T, _ = X_s.shape
    k = math.ceil(round(0.3 * (N - 1), 9))
    d = W_Q.shape[1]
    out = np.zeros((T, N, N))
    for t in range(T):
        Q, K = X_s[:, t] @ W_Q, X_s[:, t] @ W_K
        for i in range(N):
            scores = [(Q[i] @ K[j] / math.sqrt(d), j) for j in range(N) if j != i]
            top = sorted(scores, key=lambda s: (-s[0], s[1]))[:k]
            m = max(s for s, _ in top)
            z = sum(math.exp(s - m) for s, _ in top)
            for s, j in top:
                out[t, i, j] = math.exp(s - m) / z
            out[t, i, i] = 1.0
    return out


def test_section_graphs_match_loops():
    r = np.random.default_rng(0)
    X, WQ, WK = r.normal(size=(7, 4, 3)), r.normal(size=(3, 2)), r.normal(size=(3, 2))
    np.testing.assert_allclose(temporal_section_graphs(X, WQ, WK), section_graphs_loops(X, WQ, WK), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 14), st.integers(1, 5), st.integers(0, 10_000))
def test_section_graph_invariants(N, T, seed):
    r = np.random.default_rng(seed)
    G = temporal_section_graphs(r.normal(size=(N, T, 3)), r.normal(size=(3, 2)), r.normal(size=(3, 2)))
    k = neighbor_count(N)
    for g in G:
        assert np.all(np.diag(g) == 1.0)
        off = g - np.eye(N)
        assert np.all(np.abs(off.sum(axis=1) - 1.0) <= 1e-8)
        assert np.all((off != 0).sum(axis=1) == k)


def test_section_graph_tie_goes_to_lower_index():
    G = temporal_section_graphs(np.ones((5, 1, 2)), np.ones((2, 1)), np.ones((2, 1)))[0]
    # k = 2 of 4 equal neighbours: the two lowest column indices survive
    assert (G[4] != 0).tolist() == [True, True, False, False, True]
    assert (G[0] != 0).tolist() == [True, True, True, False, False]


def test_topk_keep_excludes_diagonal():
    keep = topk_keep(np.full((4, 4), 5.0), 3)
    assert not keep.diagonal().any() and np.all(keep.sum(axis=1) == 3)


def test_global_graph_dense_with_unit_diagonal():
    r = np.random.default_rng(1)
    N, T = 6, 5
    G = global_graph(r.normal(size=(N, T, 3)), r.normal(size=T), r.normal(size=(3, 2)), r.normal(size=(3, 2)))
    assert np.all(np.diag(G) == 1.0)
    off = G - np.eye(N)
    assert np.all(off[~np.eye(N, dtype=bool)] > 0)
    np.testing.assert_allclose(off.sum(axis=1), 1.0, atol=1e-12)


def test_global_graph_matches_loops():
    r = np.random.default_rng(2)
    N, T, F, d = 4, 3, 2, 2
    X, w, WQ, WK = r.normal(size=(N, T, F)), r.normal(size=T), r.normal(size=(F, d)), r.normal(size=(F, d))
    pooled = np.array([[sum(X[n, t, f] * w[t] for t in range(T)) for f in range(F)] for n in range(N)])
    Q, K = pooled @ WQ, pooled @ WK
    ref = np.eye(N)
    for i in range(N):
        s = np.array([Q[i] @ K[j] / math.sqrt(d) if j != i else -np.inf for j in range(N)])
        e = np.exp(s - s.max())
        ref[i] += e / e.sum()
    np.testing.assert_allclose(global_graph(X, w, WQ, WK), ref, atol=1e-14)


def test_aggregate_matches_triple_loop():
    r = np.random.default_rng(3)
    N, T, D = 4, 3, 2
    adj, feats = r.normal(size=(T, N, N)), r.normal(size=(N, T, D))
    ref = np.zeros((N, T, D))
    for t in range(T):
        for i in range(N):
            for j in range(N):
                ref[i, t] += adj[t, i, j] * feats[j, t]
    np.testing.assert_allclose(neighbor_aggregate(adj, feats), ref, atol=1e-14)
    shared = neighbor_aggregate(adj[0], feats)
    np.testing.assert_allclose(shared[:, 1], adj[0] @ feats[:, 1], atol=1e-14)


def test_aggregate_identity_and_shape_error():
    feats = np.random.default_rng(4).normal(size=(3, 2, 5))
    np.testing.assert_array_equal(neighbor_aggregate(np.eye(3), feats), feats)
    with pytest.raises(GraphError, match="incompatible"):
        neighbor_aggregate(np.eye(4), feats)


def test_macro_vectors():
    r = np.random.default_rng(5)
    N, T, F, d_te, d_ge = 5, 4, 3, 2, 3
    Xc, wN, WF, bF = r.normal(size=(N, T, F)), r.normal(size=N), r.normal(size=(F, d_te)), r.normal(size=d_te)
    M_S = timestep_macro(Xc, wN, WF, bF)
    ref = np.stack([(wN @ Xc[:, t]) @ WF + bF for t in range(T)])
    np.testing.assert_allclose(M_S, ref, atol=1e-14)
    wT, WG, bG = r.normal(size=T), r.normal(size=(d_te, d_ge)), r.normal(size=d_ge)
    np.testing.assert_allclose(global_macro(M_S, wT, WG, bG), (wT @ M_S) @ WG + bG, atol=1e-14)


def test_graph_gradients_flow_through_kept_entries_only():
    from higstm.relational import temporal_section_graphs_t
    r = np.random.default_rng(6)
    X = ad.Tensor(r.normal(size=(5, 2, 3)), requires_grad=True)
    WQ = ad.Tensor(r.normal(size=(3, 2)), requires_grad=True)
    WK = ad.Tensor(r.normal(size=(3, 2)), requires_grad=True)
    G, keep = temporal_section_graphs_t(X, WQ, WK)
    (G * r.normal(size=G.shape)).sum().backward()
    assert np.all(np.isfinite(WQ.grad)) and np.abs(WQ.grad).sum() > 0

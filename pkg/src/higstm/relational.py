"""Stock graphs from specificity and market-level vectors from commonality.

Each builder has a tape version (``*_t``) used by the model and a plain
numpy front end used for inspection and tests.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import numerics as nx
from .autodiff import Tensor, as_tensor

NEIGHBOR_FRACTION = 0.3


class GraphError(ValueError):
    pass


def neighbor_count(N: int, fraction: float = NEIGHBOR_FRACTION) -> int:
    """Neighbours kept per row: ceil(fraction * (N - 1)), self excluded."""
    if N < 2:
        raise GraphError(f"graphs need at least 2 stocks, got N={N}")
    # round first so 0.3 * 10 does not land on 3.0000000000000004
    return max(1, math.ceil(round(fraction * (N - 1), 9)))


def masked_softmax_t(logits: Tensor, keep: np.ndarray) -> Tensor:
    """Row softmax over the entries flagged in ``keep``; the rest are exactly 0."""
    z = np.where(keep, logits.value, nx.MASK)
    p = nx.row_softmax(z)

    def vjp(g):
        return (p * (g - (p * g).sum(axis=-1, keepdims=True)),)

    return ad.make_op(p, (logits,), vjp)


def _attention_logits(Q: Tensor, K: Tensor) -> Tensor:
    d_attn = K.shape[-1]
    return (Q @ K.transpose(*range(K.ndim - 2), K.ndim - 1, K.ndim - 2)) * (1.0 / math.sqrt(d_attn))


def topk_keep(logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the surviving neighbours (diagonal never survives)."""
    N = logits.shape[-1]
    z = np.array(logits, dtype=np.float64)
    idx = np.arange(N)
    z[..., idx, idx] = nx.MASK
    keep = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(keep, nx.topk_indices(z, k), True, axis=-1)
    keep[..., idx, idx] = False
    return keep


def temporal_section_graphs_t(X_s: Tensor, W_Q: Tensor, W_K: Tensor,
                              keep: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Per-time-step sparse graphs ``[T, N, N]`` and the top-k selection used.

    Passing ``keep`` freezes the neighbour selection (used by gradient checks).
    """
    N = X_s.shape[0]
    k = neighbor_count(N)
    Xt = X_s.transpose(1, 0, 2)                # [T, N, F]
    logits = _attention_logits(Xt @ W_Q, Xt @ W_K)
    if keep is None:
        keep = topk_keep(logits.value, k)
    G = masked_softmax_t(logits, keep) + np.eye(N)
    return G, keep


def global_graph_t(X_s: Tensor, w_time: Tensor, W_Q: Tensor, W_K: Tensor) -> Tensor:
    N, T, F = X_s.shape
    if N < 2:
        raise GraphError(f"graphs need at least 2 stocks, got N={N}")
    X_sg = (X_s.transpose(0, 2, 1) @ w_time.reshape(T, 1)).reshape(N, F)
    logits = _attention_logits(X_sg @ W_Q, X_sg @ W_K)
    keep = ~np.eye(N, dtype=bool)
    return masked_softmax_t(logits, keep) + np.eye(N)


def neighbor_aggregate_t(adj: Tensor, features: Tensor) -> Tensor:
    """``out[:, t] = adj_t @ features[:, t]``; a single ``[N, N]`` adjacency is shared by all t."""
    adj, features = as_tensor(adj), as_tensor(features)
    N, T, _ = features.shape
    if adj.shape[-2:] != (N, N) or (adj.ndim == 3 and adj.shape[0] != T):
        raise GraphError(f"adjacency {adj.shape} incompatible with features {features.shape}")
    return (adj @ features.transpose(1, 0, 2)).transpose(1, 0, 2)


def timestep_macro_t(X_c: Tensor, w_stock: Tensor, W_F: Tensor, b_F: Tensor) -> Tensor:
    N, T, F = X_c.shape
    agg = (w_stock.reshape(1, N) @ X_c.reshape(N, T * F)).reshape(T, F)
    return agg @ W_F + b_F


def global_macro_t(M_S: Tensor, w_time: Tensor, W_F: Tensor, b_F: Tensor) -> Tensor:
    T = M_S.shape[0]
    pooled = w_time.reshape(1, T) @ M_S
    return (pooled @ W_F + b_F).reshape(-1)


# ---------------------------------------------------------------------------
# numpy front ends
# ---------------------------------------------------------------------------

def _T(x):
    return as_tensor(np.asarray(x, dtype=np.float64))


def temporal_section_graphs(X_s, W_QS, W_KS) -> np.ndarray:
    X_s = np.asarray(X_s, dtype=np.float64)
    if X_s.shape[0] < 2:
        raise GraphError(f"graphs need at least 2 stocks, got N={X_s.shape[0]}")
    return temporal_section_graphs_t(_T(X_s), _T(W_QS), _T(W_KS))[0].value


def global_graph(X_s, W_Tagg_spec, W_QG, W_KG) -> np.ndarray:
    return global_graph_t(_T(X_s), _T(W_Tagg_spec), _T(W_QG), _T(W_KG)).value


def neighbor_aggregate(adj, features) -> np.ndarray:
    return neighbor_aggregate_t(_T(adj), _T(features)).value


def timestep_macro(X_c, W_Nagg, W_FS, b_FS) -> np.ndarray:
    return timestep_macro_t(_T(X_c), _T(W_Nagg), _T(W_FS), _T(b_FS)).value


def global_macro(M_S, W_Tagg_macro, W_FG, b_FG) -> np.ndarray:
    return global_macro_t(_T(M_S), _T(W_Tagg_macro), _T(W_FG), _T(b_FG)).value

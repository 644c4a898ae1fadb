"""Zero-order-hold discretisation, the selective scan and the node-independent block."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import kernels
from . import numerics as nx
from .autodiff import Tensor
from .diffopt import SeededRng, init_uniform

SERIES_CUTOFF = 1e-6
_DERIV_CUTOFF = 1e-4


def phi1(z) -> np.ndarray:
    """(e^z - 1) / z, continuous through z = 0."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < SERIES_CUTOFF
    safe = np.where(small, 1.0, z)
    out = np.atleast_1d(np.expm1(safe) / safe)
    if small.any():
        zs = z[small]
        out[np.atleast_1d(small)] = 1.0 + zs / 2.0 + zs * zs / 6.0
    return out.reshape(z.shape)


def dphi1(z, ez=None, phi=None) -> np.ndarray:
    """Derivative of :func:`phi1`; ``ez`` and ``phi`` may be passed in if already known."""
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(z) if ez is None else ez
    phi = phi1(z) if phi is None else phi
    small = np.abs(z) < _DERIV_CUTOFF
    out = np.atleast_1d((ez - phi) / np.where(small, 1.0, z))
    if small.any():
        zs = z[small]
        out[np.atleast_1d(small)] = 0.5 + zs * (1.0 / 3.0 + zs * (1.0 / 8.0 + zs / 30.0))
    return out.reshape(z.shape)


def discretize(A_diag, B, delta) -> tuple[np.ndarray, np.ndarray]:
    """ZOH for a diagonal state matrix.

    ``A_diag`` is ``[D, S]``, ``B`` is ``[..., T, S]`` and ``delta`` is
    ``[..., T, D]``. Returns ``(abar, bbar)`` shaped ``[..., T, D, S]``.
    """
    A = np.asarray(A_diag, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    dt = np.asarray(delta, dtype=np.float64)
    if np.any(dt <= 0):
        raise nx.NumericsError("discretize requires a strictly positive step")
    z = dt[..., :, None] * A
    abar = np.exp(z)
    bbar = phi1(z) * dt[..., :, None] * B[..., None, :]
    return abar, bbar


def ssm_scan(abar, bbar, C, x) -> np.ndarray:
    """Sequential scan from a zero state; accepts one sequence or a stock batch."""
    abar = np.asarray(abar, dtype=np.float64)
    single = abar.ndim == 3
    args = [np.asarray(a, dtype=np.float64) for a in (abar, bbar, C, x)]
    if single:
        args = [a[None] for a in args]
    y, _ = kernels.scan_forward(*args)
    return y[0] if single else y


# ---------------------------------------------------------------------------
# tape ops
# ---------------------------------------------------------------------------

def selective_scan_t(delta: Tensor, A: Tensor, B: Tensor, C: Tensor, x: Tensor) -> Tensor:
    """Discretise and scan in one fused kernel call.

    ``delta``/``x`` are ``[N, T, D]``, ``A`` is ``[D, S]``, ``B``/``C`` are
    ``[N, T, S]``. Equivalent to ``ssm_scan(*discretize(A, B, delta), C, x)``.
    """
    args = (delta.value, A.value, B.value, C.value, x.value)
    y, h = kernels.selective_forward(*args)
    return ad.make_op(y, (delta, A, B, C, x),
                      lambda g: kernels.selective_backward(*args, h, g))


def conv1d_t(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    xv, kv = x.value, kernel.value
    T = xv.shape[1]
    K = min(kv.shape[1], T)

    def vjp(g):
        gx = np.zeros_like(xv)
        gk = np.zeros_like(kv)
        for j in range(K):
            gx[:, : T - j, :] += kv[:, j] * g[:, j:, :]
            gk[:, j] = np.einsum("ntd,ntd->d", g[:, j:, :], xv[:, : T - j, :])
        return gx, gk, g.sum(axis=(0, 1))

    return ad.make_op(nx.conv1d_causal(xv, kv, bias.value), (x, kernel, bias), vjp)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def selective_core(u: Tensor, B: Tensor, C: Tensor, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Step sizes from ``u``, discretise ``A``, and scan ``u`` through the state."""
    delta = ad.softplus(u @ p[prefix + "W_dt"] + p[prefix + "dt_bias"])
    return selective_scan_t(delta, p[prefix + "A"], B, C, u)


def mamba_block(X: Tensor, p: Mapping[str, Tensor], prefix: str = "nim.",
                residual: bool = True) -> Tensor:
    """Per-stock selective SSM over ``[N, T, F_in]``; returns ``[N, T, d_model]``.

    Every operation acts along time or channels only, so stocks never mix.
    """
    e = X @ p[prefix + "in_proj"]
    u = ad.silu(conv1d_t(e, p[prefix + "conv_w"], p[prefix + "conv_b"]))
    y = selective_core(u, u @ p[prefix + "W_B"], u @ p[prefix + "W_C"], p, prefix)
    return y + e if residual else y


def init_ssm_params(rng: SeededRng, prefix: str, d_model: int, d_state: int, d_conv: int,
                    d_in: int | None = None, dt_min: float = 1e-3, dt_max: float = 0.1,
                    a_width: int | None = None) -> dict[str, np.ndarray]:
    """Initial values for one selective block.

    ``A`` is ``-(s + 1)`` per state (``a_width`` states, default ``d_state``);
    ``dt_bias`` inverts softplus at step sizes drawn log-uniformly in
    ``[dt_min, dt_max]``.
    """
    a_width = d_state if a_width is None else a_width
    out = {}
    if d_in is not None:
        out[prefix + "in_proj"] = init_uniform(rng, (d_in, d_model), d_in)
    out[prefix + "conv_w"] = init_uniform(rng, (d_model, d_conv), d_conv)
    out[prefix + "conv_b"] = np.zeros(d_model)
    out[prefix + "W_B"] = init_uniform(rng, (d_model, d_state), d_model)
    out[prefix + "W_C"] = init_uniform(rng, (d_model, d_state), d_model)
    out[prefix + "W_dt"] = init_uniform(rng, (d_model, d_model), d_model)
    dt = np.exp(rng.uniform(d_model, np.log(dt_min), np.log(dt_max)))
    out[prefix + "dt_bias"] = dt + np.log(-np.expm1(-dt))
    out[prefix + "A"] = -np.tile(np.arange(1, a_width + 1, dtype=np.float64), (d_model, 1))
    return out

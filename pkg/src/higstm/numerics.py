"""Dense array substrate: real DFT pair, activations, causal conv, masked softmax.

All routines take and return float64 (or complex128) numpy arrays and never
mutate their inputs.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

# most-negative finite float; keeps masked logits NaN-free under arithmetic
MASK = np.finfo(np.float64).min


class NumericsError(ValueError):
    pass


def _as_float(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# real DFT
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def dft_matrices(T: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Forward and inverse one-sided DFT matrices for length ``T``.

    Returns ``(cos_f, sin_f, cos_i, sin_i)`` with shapes ``[T, H]`` (forward)
    and ``[H, T]`` (inverse) such that for a real series ``x``::

        re = x @ cos_f ;  im = -(x @ sin_f)
        x  = re @ cos_i - im @ sin_i

    The inverse already carries the 1/T normalisation and the doubling of
    the interior bins.
    """
    if T < 2:
        raise NumericsError(f"invalid length: T={T} (need T >= 2)")
    H = T // 2 + 1
    t = np.arange(T)
    h = np.arange(H)
    # integer product mod T keeps the angles exact for large t*h
    ang = 2.0 * np.pi * ((np.outer(t, h) % T) / T)
    cos_f = np.cos(ang)
    sin_f = np.sin(ang)
    w = np.full(H, 2.0)
    w[0] = 1.0
    if T % 2 == 0:
        w[-1] = 1.0
    cos_i = (w[:, None] * cos_f.T) / T
    sin_i = (w[:, None] * sin_f.T) / T
    for m in (cos_f, sin_f, cos_i, sin_i):
        m.setflags(write=False)
    return cos_f, sin_f, cos_i, sin_i


def rfft(series, axis: int = -1) -> np.ndarray:
    """One-sided DFT along ``axis``; H = T//2 + 1 bins, bin 0 is the sum."""
    x = np.moveaxis(_as_float(series), axis, -1)
    T = x.shape[-1]
    cos_f, sin_f, _, _ = dft_matrices(T)
    out = (x @ cos_f) - 1j * (x @ sin_f)
    return np.moveaxis(out, -1, axis)


def irfft(bins, T: int, axis: int = -1) -> np.ndarray:
    """Inverse of :func:`rfft`. Imaginary parts of DC/Nyquist are ignored."""
    b = np.moveaxis(np.asarray(bins, dtype=np.complex128), axis, -1)
    if T < 2:
        raise NumericsError(f"invalid length: T={T} (need T >= 2)")
    H = T // 2 + 1
    if b.shape[-1] != H:
        raise NumericsError(f"invalid length: got {b.shape[-1]} bins, expected {H} for T={T}")
    _, _, cos_i, sin_i = dft_matrices(T)
    out = b.real @ cos_i - b.imag @ sin_i
    return np.moveaxis(out, -1, axis)


def amplitude(bins) -> np.ndarray:
    b = np.asarray(bins, dtype=np.complex128)
    return np.hypot(b.real, b.imag)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def sigmoid(x) -> np.ndarray:
    x = _as_float(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(x) -> np.ndarray:
    x = _as_float(x)
    return x * sigmoid(x)


def softplus(x) -> np.ndarray:
    x = _as_float(x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def activation(kind: str, x) -> np.ndarray:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise NumericsError(f"unknown activation {kind!r}") from None
    return fn(x)


_ACTIVATIONS = {
    "sigmoid": sigmoid,
    "silu": silu,
    "softplus": softplus,
    "tanh": lambda x: np.tanh(_as_float(x)),
}


# ---------------------------------------------------------------------------
# convolution / attention helpers
# ---------------------------------------------------------------------------

def conv1d_causal(panel, kernel, bias) -> np.ndarray:
    """Depthwise causal convolution over the time axis of ``[N, T, D]``.

    ``out[n, t, d] = bias[d] + sum_j kernel[d, j] * panel[n, t - j, d]``
    with zero left padding.
    """
    x = _as_float(panel)
    k = _as_float(kernel)
    b = _as_float(bias)
    if x.ndim != 3 or k.ndim != 2 or b.ndim != 1:
        raise NumericsError("conv1d_causal expects panel [N,T,D], kernel [D,K], bias [D]")
    D = x.shape[2]
    if k.shape[0] != D or b.shape[0] != D or k.shape[1] < 1:
        raise NumericsError(
            f"shape mismatch: panel D={D}, kernel {k.shape}, bias {b.shape}")
    T = x.shape[1]
    out = np.broadcast_to(b, x.shape).copy()
    for j in range(min(k.shape[1], T)):
        out[:, j:, :] += k[:, j] * x[:, : T - j, :]
    return out


def topk_row_mask(logits, k: int) -> np.ndarray:
    """Keep the ``k`` largest entries of every row, set the rest to ``MASK``.

    The diagonal is expected to be pre-masked by the caller. Ties go to the
    smaller column index.
    """
    z = _as_float(logits)
    N = z.shape[-1]
    if not 1 <= k <= N - 1:
        raise NumericsError(f"k={k} out of range [1, {N - 1}]")
    keep = topk_indices(z, k)
    out = np.full_like(z, MASK)
    np.put_along_axis(out, keep, np.take_along_axis(z, keep, axis=-1), axis=-1)
    return out


def topk_indices(z: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated values: equal values keep column order
    return np.argsort(-z, axis=-1, kind="stable")[..., :k]


def row_softmax(logits) -> np.ndarray:
    z = _as_float(logits)
    masked = z <= MASK
    if np.any(masked.all(axis=-1)):
        raise NumericsError("fully masked row cannot be normalised")
    zmax = np.where(masked, -np.inf, z).max(axis=-1, keepdims=True)
    e = np.where(masked, 0.0, np.exp(np.where(masked, 0.0, z - zmax)))
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# broadcast
# ---------------------------------------------------------------------------

def broadcast(x, missing: str | tuple[str, ...], N: int, T: int) -> np.ndarray:
    """Replicate ``x`` along the absent stock/time axes into ``[N, T, d]``.

    ``missing`` names the absent axes: ``"N"`` for a ``[T, d]`` input,
    ``"T"`` for ``[N, d]``, ``("N", "T")`` for a bare ``[d]`` vector.
    """
    a = _as_float(x)
    miss = set(missing)
    if not miss <= {"N", "T"}:
        raise NumericsError(f"unknown broadcast dims {missing!r}")
    expected_ndim = 3 - len(miss)
    if a.ndim != expected_ndim:
        raise NumericsError(f"broadcast over {sorted(miss)} expects a {expected_ndim}-d input")
    if "N" not in miss:
        a_n = a.shape[0]
        if a_n != N:
            raise NumericsError(f"present dim N={a_n} does not match target N={N}")
    if "T" not in miss:
        a_t = a.shape[0] if "N" in miss else a.shape[1]
        if a_t != T:
            raise NumericsError(f"present dim T={a_t} does not match target T={T}")
    if miss == {"N"}:
        a = a[None, :, :]
    elif miss == {"T"}:
        a = a[:, None, :]
    elif miss:
        a = a[None, None, :]
    return np.broadcast_to(a, (N, T, a.shape[-1])).copy()

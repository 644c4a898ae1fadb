"""Index-guided frequency filtering: split a panel into commonality and specificity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import numerics as nx
from .autodiff import Tensor


@dataclass
class DecompOutput:
    X_c: np.ndarray
    X_s: np.ndarray
    g_c: np.ndarray
    g_s: np.ndarray


def filter_gains(amp, W) -> np.ndarray:
    """sigmoid(W^T amp): one gain per frequency bin, strictly inside (0, 1)."""
    amp = np.asarray(amp, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != amp.shape[-1]:
        raise nx.NumericsError(f"shape mismatch: amplitude {amp.shape} vs W {W.shape}")
    return nx.sigmoid(amp @ W)


def index_amplitude(I) -> np.ndarray:
    return nx.amplitude(nx.rfft(np.asarray(I, dtype=np.float64)))


def complement_gains(amp, W) -> np.ndarray:
    """1 - sigmoid(W^T amp), evaluated as sigmoid(-W^T amp) so it never rounds to 0."""
    return nx.sigmoid(-(np.asarray(amp, dtype=np.float64) @ np.asarray(W, dtype=np.float64)))


def gains_t(amp: np.ndarray, W: Tensor, complement: bool = False) -> Tensor:
    z = ad.Tensor(amp[None, :]) @ W
    return ad.sigmoid(-z if complement else z).reshape(-1)


def filter_panel_t(X: Tensor, g_c: Tensor, g_s: Tensor) -> tuple[Tensor, Tensor]:
    """Scale the spectrum of every (stock, feature) series by the bin gains.

    ``g_s`` is the already-complemented specificity gain. The real gains
    scale the complex coefficients, leaving the phase untouched.
    """
    T = X.shape[1]
    cos_f, sin_f, cos_i, sin_i = nx.dft_matrices(T)
    Xt = X.transpose(0, 2, 1)                  # [N, F, T]
    re = Xt @ cos_f
    im = -(Xt @ sin_f)
    re_c, im_c = re * g_c, im * g_c
    re_s, im_s = (re - re_c) * g_s, (im - im_c) * g_s
    X_c = (re_c @ cos_i - im_c @ sin_i).transpose(0, 2, 1)
    X_s = (re_s @ cos_i - im_s @ sin_i).transpose(0, 2, 1)
    return X_c, X_s


def decompose(X, I, W_c, W_s) -> DecompOutput:
    X = np.asarray(X, dtype=np.float64)
    I = np.asarray(I, dtype=np.float64)
    if X.ndim != 3 or I.shape != (X.shape[1],):
        raise nx.NumericsError(f"panel {X.shape} and index {I.shape} must share T")
    if X.shape[1] < 2:
        raise nx.NumericsError("decompose needs T >= 2")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(I))):
        raise nx.NumericsError("non-finite input to decompose")
    amp = index_amplitude(I)
    g_c = filter_gains(amp, W_c)
    filter_gains(amp, W_s)  # shape check
    g_s = complement_gains(amp, W_s)
    X_c, X_s = filter_panel_t(ad.Tensor(X), ad.Tensor(g_c), ad.Tensor(g_s))
    return DecompOutput(X_c.value, X_s.value, g_c, g_s)

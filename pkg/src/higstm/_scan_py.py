"""Pure-numpy selective scan; reference path and import-time fallback."""
import numpy as np


def scan_forward(abar, bbar, c, x):
    """h_t = abar_t * h_{t-1} + bbar_t * x_t ;  y_t = sum_s c_t[s] * h_t[:, s].

    Shapes: abar, bbar [N, T, D, S]; c [N, T, S]; x [N, T, D].
    Returns ``(y [N, T, D], h [N, T, D, S])``.
    """
    N, T, D, S = abar.shape
    h = np.empty((N, T, D, S))
    prev = np.zeros((N, D, S))
    for t in range(T):
        prev = abar[:, t] * prev + bbar[:, t] * x[:, t, :, None]
        h[:, t] = prev
    y = np.einsum("ntds,nts->ntd", h, c)
    return y, h


def scan_backward(abar, bbar, c, x, h, gy):
    N, T, D, S = abar.shape
    ga = np.empty_like(abar)
    gb = np.empty_like(bbar)
    gx = np.empty_like(x)
    gc = np.einsum("ntd,ntds->nts", gy, h)
    gh = np.zeros((N, D, S))
    zero = np.zeros((N, D, S))
    for t in range(T - 1, -1, -1):
        gh = gh + gy[:, t, :, None] * c[:, t, None, :]
        ga[:, t] = gh * (h[:, t - 1] if t > 0 else zero)
        gb[:, t] = gh * x[:, t, :, None]
        gx[:, t] = (gh * bbar[:, t]).sum(axis=-1)
        gh = gh * abar[:, t]
    return ga, gb, gc, gx


def _phi1(z):
    small = np.abs(z) < 1e-6
    out = np.expm1(np.where(small, 1.0, z)) / np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2.0 + z * z / 6.0, out)


def _dphi1(z, ez, phi):
    small = np.abs(z) < 1e-4
    out = (ez - phi) / np.where(small, 1.0, z)
    return np.where(small, 0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z / 30.0)), out)


def selective_forward(delta, A, B, C, x):
    """Scan with zero-order-hold discretisation done on the fly.

    Shapes: delta, x [N, T, D]; A [D, S]; B, C [N, T, S].
    Returns ``(y [N, T, D], saved)`` where ``saved`` feeds the backward pass.
    """
    z = delta[..., None] * A
    ez = np.exp(z)
    phi = _phi1(z)
    y, h = scan_forward(ez, phi * delta[..., None] * B[:, :, None, :], C, x)
    return y, (h, ez, phi)


def selective_backward(delta, A, B, C, x, saved, gy):
    """Gradients ``(g_delta, g_A, g_B, g_C, g_x)`` of :func:`selective_forward`."""
    h, ez, phi = saved
    z = delta[..., None] * A
    dl = delta[..., None]
    Bx = B[:, :, None, :]
    ga, gb, gc, gx = scan_backward(ez, phi * dl * Bx, C, x, h, gy)
    g_delta = (ga * A * ez + gb * Bx * ez).sum(axis=-1)
    g_A = (ga * dl * ez + gb * _dphi1(z, ez, phi) * dl * dl * Bx).sum(axis=(0, 1))
    g_B = (gb * phi * dl).sum(axis=2)
    return g_delta, g_A, g_B, gc, gx

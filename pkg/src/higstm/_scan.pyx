# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled selective scan. Same contract as ``_scan_py``."""
import numpy as np


def scan_forward(const double[:, :, :, ::1] abar, const double[:, :, :, ::1] bbar,
                 const double[:, :, ::1] c, const double[:, :, ::1] x):
    cdef Py_ssize_t N = abar.shape[0], T = abar.shape[1], D = abar.shape[2], S = abar.shape[3]
    cdef Py_ssize_t n, t, d, s
    cdef double prev, acc, xv
    h_arr = np.empty((N, T, D, S))
    y_arr = np.empty((N, T, D))
    cdef double[:, :, :, ::1] h = h_arr
    cdef double[:, :, ::1] y = y_arr
    with nogil:
        for n in range(N):
            for d in range(D):
                for t in range(T):
                    xv = x[n, t, d]
                    acc = 0.0
                    for s in range(S):
                        if t > 0:
                            prev = h[n, t - 1, d, s]
                        else:
                            prev = 0.0
                        prev = abar[n, t, d, s] * prev + bbar[n, t, d, s] * xv
                        h[n, t, d, s] = prev
                        acc = acc + c[n, t, s] * prev
                    y[n, t, d] = acc
    return y_arr, h_arr


def scan_backward(const double[:, :, :, ::1] abar, const double[:, :, :, ::1] bbar,
                  const double[:, :, ::1] c, const double[:, :, ::1] x,
                  const double[:, :, :, ::1] h, const double[:, :, ::1] gy):
    cdef Py_ssize_t N = abar.shape[0], T = abar.shape[1], D = abar.shape[2], S = abar.shape[3]
    cdef Py_ssize_t n, t, d, s
    cdef double g, acc, gyv
    ga_arr = np.empty((N, T, D, S))
    gb_arr = np.empty((N, T, D, S))
    gc_arr = np.zeros((N, T, S))
    gx_arr = np.empty((N, T, D))
    gh_arr = np.empty(S)
    cdef double[:, :, :, ::1] ga = ga_arr
    cdef double[:, :, :, ::1] gb = gb_arr
    cdef double[:, :, ::1] gc = gc_arr
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[::1] gh = gh_arr
    with nogil:
        for n in range(N):
            for d in range(D):
                for s in range(S):
                    gh[s] = 0.0
                for t in range(T - 1, -1, -1):
                    gyv = gy[n, t, d]
                    acc = 0.0
                    for s in range(S):
                        gc[n, t, s] += gyv * h[n, t, d, s]
                        g = gh[s] + gyv * c[n, t, s]
                        if t > 0:
                            ga[n, t, d, s] = g * h[n, t - 1, d, s]
                        else:
                            ga[n, t, d, s] = 0.0
                        gb[n, t, d, s] = g * x[n, t, d]
                        acc = acc + g * bbar[n, t, d, s]
                        gh[s] = g * abar[n, t, d, s]
                    gx[n, t, d] = acc
    return ga_arr, gb_arr, gc_arr, gx_arr


from libc.math cimport exp, expm1, fabs


def selective_forward(const double[:, :, ::1] delta, const double[:, ::1] A,
                      const double[:, :, ::1] B, const double[:, :, ::1] C,
                      const double[:, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], T = x.shape[1], D = x.shape[2], S = A.shape[1]
    cdef Py_ssize_t n, t, d, s
    cdef double dl, z, e, p, prev, acc, xv
    h_arr = np.empty((N, T, D, S))
    ez_arr = np.empty((N, T, D, S))
    phi_arr = np.empty((N, T, D, S))
    y_arr = np.empty((N, T, D))
    cdef double[:, :, :, ::1] h = h_arr
    cdef double[:, :, :, ::1] ez = ez_arr
    cdef double[:, :, :, ::1] phi = phi_arr
    cdef double[:, :, ::1] y = y_arr
    with nogil:
        for n in range(N):
            for t in range(T):
                for d in range(D):
                    dl = delta[n, t, d]
                    xv = x[n, t, d]
                    acc = 0.0
                    for s in range(S):
                        z = dl * A[d, s]
                        e = exp(z)
                        if fabs(z) < 1e-6:
                            p = 1.0 + z / 2.0 + z * z / 6.0
                        elif fabs(z) < 0.5:
                            p = expm1(z) / z
                        else:
                            p = (e - 1.0) / z
                        ez[n, t, d, s] = e
                        phi[n, t, d, s] = p
                        if t > 0:
                            prev = h[n, t - 1, d, s]
                        else:
                            prev = 0.0
                        prev = e * prev + p * dl * B[n, t, s] * xv
                        h[n, t, d, s] = prev
                        acc = acc + C[n, t, s] * prev
                    y[n, t, d] = acc
    return y_arr, (h_arr, ez_arr, phi_arr)


def selective_backward(const double[:, :, ::1] delta, const double[:, ::1] A,
                       const double[:, :, ::1] B, const double[:, :, ::1] C,
                       const double[:, :, ::1] x, tuple saved,
                       const double[:, :, ::1] gy):
    cdef const double[:, :, :, ::1] h = saved[0]
    cdef const double[:, :, :, ::1] ezs = saved[1]
    cdef const double[:, :, :, ::1] phis = saved[2]
    cdef Py_ssize_t N = x.shape[0], T = x.shape[1], D = x.shape[2], S = A.shape[1]
    cdef Py_ssize_t n, t, d, s
    cdef double dl, z, ez, phi, g, gyv, xv, hprev, bv, ga, gb, acc_x, acc_dl, dphi
    gd_arr = np.empty((N, T, D))
    gA_arr = np.zeros((D, S))
    gB_arr = np.zeros((N, T, S))
    gC_arr = np.zeros((N, T, S))
    gx_arr = np.empty((N, T, D))
    gh_arr = np.empty((D, S))
    cdef double[:, :, ::1] gd = gd_arr
    cdef double[:, ::1] gA = gA_arr
    cdef double[:, :, ::1] gB = gB_arr
    cdef double[:, :, ::1] gC = gC_arr
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, ::1] gh = gh_arr
    with nogil:
        for n in range(N):
            for d in range(D):
                for s in range(S):
                    gh[d, s] = 0.0
            for t in range(T - 1, -1, -1):
                for d in range(D):
                    gyv = gy[n, t, d]
                    dl = delta[n, t, d]
                    xv = x[n, t, d]
                    acc_x = 0.0
                    acc_dl = 0.0
                    for s in range(S):
                        gC[n, t, s] += gyv * h[n, t, d, s]
                        g = gh[d, s] + gyv * C[n, t, s]
                        z = dl * A[d, s]
                        ez = ezs[n, t, d, s]
                        phi = phis[n, t, d, s]
                        bv = B[n, t, s]
                        if t > 0:
                            hprev = h[n, t - 1, d, s]
                        else:
                            hprev = 0.0
                        ga = g * hprev
                        gb = g * xv
                        if fabs(z) < 1e-4:
                            dphi = 0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z / 30.0))
                        else:
                            dphi = (ez - phi) / z
                        acc_x = acc_x + g * phi * dl * bv
                        acc_dl = acc_dl + (ga * A[d, s] + gb * bv) * ez
                        gA[d, s] += ga * dl * ez + gb * dphi * dl * dl * bv
                        gB[n, t, s] += gb * phi * dl
                        gh[d, s] = g * ez
                    gx[n, t, d] = acc_x
                    gd[n, t, d] = acc_dl
    return gd_arr, gA_arr, gB_arr, gC_arr, gx_arr

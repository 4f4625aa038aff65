# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twins of the per-area kernels in ``saecmse._kernels_py``.

Same contracts, same family codes (0 gaussian, 1 poisson-gamma,
2 binomial-beta); accumulation runs left to right over the area order the
caller supplies, so results are reproducible for a fixed input order.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, lgamma, log, M_PI

cnp.import_array()

GAUSSIAN = 0
POISSON_GAMMA = 1
BINOMIAL_BETA = 2

cdef double _LN_2PI = log(2.0 * M_PI)


cdef inline double _logistic(double lp) nogil:
    cdef double e
    if lp >= 0.0:
        return 1.0 / (1.0 + exp(-lp))
    e = exp(lp)
    return e / (1.0 + e)


cdef inline void _v_coeffs(int code, double* v0, double* v1, double* v2) nogil:
    if code == 0:
        v0[0] = 1.0; v1[0] = 0.0; v2[0] = 0.0
    elif code == 1:
        v0[0] = 0.0; v1[0] = 1.0; v2[0] = 0.0
    else:
        v0[0] = 0.0; v1[0] = 1.0; v2[0] = -1.0


cdef int _score_core(
    int code,
    double[::1] y,
    double[::1] n,
    double[:, ::1] X,
    double[::1] beta,
    double nu,
    double[::1] s,
    double[:, ::1] U,
    bint want_u,
) nogil:
    """Accumulate s (and optionally U) over areas; returns 0 on success."""
    cdef Py_ssize_t m = y.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef Py_ssize_t i, a, b
    cdef double v0, v1, v2
    cdef double lp, mu, muc, q, qp, phi, kappa, g1, g2
    cdef double d, xi2, xi3, xi4, mu2, mu3, mu4, det
    cdef double a11, a12, a22, w1, w2, c_beta, s_nu
    cdef double q2, qpphi, w_xx, w_xn, w_nn, xa

    _v_coeffs(code, &v0, &v1, &v2)

    for a in range(p + 1):
        s[a] = 0.0
    if want_u:
        for a in range(p + 1):
            for b in range(p + 1):
                U[a, b] = 0.0

    for i in range(m):
        lp = 0.0
        for a in range(p):
            lp += X[i, a] * beta[a]
        if code == 0:
            mu = lp
            q = 1.0
        elif code == 1:
            mu = exp(lp)
            q = mu
        else:
            mu = _logistic(lp)
            muc = _logistic(-lp)
            q = mu * muc
        qp = v1 + 2.0 * v2 * mu

        phi = (1.0 + nu / n[i]) / (nu - v2)
        kappa = (1.0 + v2 / n[i]) / ((nu - v2) * (nu - v2))
        g1 = y[i] - mu
        g2 = g1 * g1 - phi * q

        d = v2 / n[i]
        # prior central moments of xi; see the recursion note in _kernels_py
        xi2 = q / (nu - v2)
        xi3 = 2.0 * q * qp / ((nu - v2) * (nu - 2.0 * v2))
        xi4 = 3.0 * q * ((nu - 2.0 * v2) * q + 2.0 * qp * qp) / (
            (nu - v2) * (nu - 2.0 * v2) * (nu - 3.0 * v2)
        )
        mu2 = q * (nu / n[i] + 1.0) / (nu - v2)
        mu3 = q * qp * (nu / n[i] + 1.0) * (nu / n[i] + 2.0) / (
            (nu - v2) * (nu - 2.0 * v2)
        )
        mu4 = (
            (d + 1.0) * (2.0 * d + 1.0) * (3.0 * d + 1.0) * xi4
            + (6.0 / n[i]) * qp * (d + 1.0) * (2.0 * d + 1.0) * xi3
            + ((d + 1.0) / (n[i] * n[i]))
            * (7.0 * qp * qp + 2.0 * n[i] * (4.0 * d + 3.0) * q) * xi2
            + q / (n[i] * n[i] * n[i]) * (n[i] * (2.0 * d + 3.0) * q + qp * qp)
        )

        det = mu4 * mu2 - mu2 * mu2 * mu2 - mu3 * mu3
        if not det > 0.0:
            return 1
        a11 = (mu4 - mu2 * mu2) / det
        a12 = -mu3 / det
        a22 = mu2 / det

        w1 = a11 * g1 + a12 * g2
        w2 = a12 * g1 + a22 * g2
        c_beta = q * (w1 + qp * phi * w2)
        s_nu = -q * kappa * w2
        for a in range(p):
            s[a] += c_beta * X[i, a]
        s[p] += s_nu

        if want_u:
            q2 = q * q
            qpphi = qp * phi
            w_xx = q2 * (a11 + 2.0 * a12 * qpphi + a22 * qpphi * qpphi)
            w_xn = -q2 * kappa * (a12 + a22 * qpphi)
            w_nn = q2 * kappa * kappa * a22
            for a in range(p):
                xa = X[i, a]
                for b in range(a, p):
                    U[a, b] += w_xx * xa * X[i, b]
                U[a, p] += w_xn * xa
            U[p, p] += w_nn
    if want_u:
        for a in range(p + 1):
            for b in range(a):
                U[a, b] = U[b, a]
    return 0


def gt_score(int code, y, n, X, beta, double nu):
    """Estimating-function score s(eta), shape (p+1,)."""
    cdef double[::1] y_ = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[::1] n_ = np.ascontiguousarray(n, dtype=np.float64)
    cdef double[:, ::1] X_ = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[::1] b_ = np.ascontiguousarray(beta, dtype=np.float64)
    s = np.empty(X_.shape[1] + 1)
    cdef double[::1] s_ = s
    cdef double[:, ::1] dummy = np.empty((0, 0))
    if _score_core(code, y_, n_, X_, b_, nu, s_, dummy, 0):
        s[:] = np.nan
    return s


def gt_score_and_info(int code, y, n, X, beta, double nu):
    """(s(eta), U(eta)) with U = sum_i D_i' Sigma_i^-1 D_i."""
    cdef double[::1] y_ = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[::1] n_ = np.ascontiguousarray(n, dtype=np.float64)
    cdef double[:, ::1] X_ = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[::1] b_ = np.ascontiguousarray(beta, dtype=np.float64)
    cdef Py_ssize_t q = X_.shape[1] + 1
    s = np.empty(q)
    U = np.empty((q, q))
    cdef double[::1] s_ = s
    cdef double[:, ::1] U_ = U
    if _score_core(code, y_, n_, X_, b_, nu, s_, U_, 1):
        s[:] = np.nan
        U[:] = np.nan
    return s, U


def ml_negloglik(int code, y, n, X, beta, double nu):
    """Negative sum of log marginal densities of y."""
    cdef double[::1] y_ = np.ascontiguousarray(y, dtype=np.float64)
    cdef double[::1] n_ = np.ascontiguousarray(n, dtype=np.float64)
    cdef double[:, ::1] X_ = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[::1] b_ = np.ascontiguousarray(beta, dtype=np.float64)
    cdef Py_ssize_t m = y_.shape[0]
    cdef Py_ssize_t p = X_.shape[1]
    cdef Py_ssize_t i, a
    cdef double lp, mu, var, diff, z, sh, nn, bb
    cdef double total = 0.0

    with nogil:
        for i in range(m):
            lp = 0.0
            for a in range(p):
                lp += X_[i, a] * b_[a]
            if code == 0:
                mu = lp
                var = 1.0 / nu + 1.0 / n_[i]
                diff = y_[i] - mu
                total += -0.5 * (_LN_2PI + log(var)) - 0.5 * diff * diff / var
            elif code == 1:
                mu = exp(lp)
                z = y_[i] * n_[i]
                z = (z + 0.5) // 1.0 if z >= 0 else 0.0  # round to lattice
                sh = nu * mu
                total += (
                    lgamma(z + sh) - lgamma(z + 1.0) - lgamma(sh)
                    + z * log(n_[i] / (n_[i] + nu))
                    + sh * log(nu / (n_[i] + nu))
                )
            else:
                mu = _logistic(lp)
                z = (y_[i] * n_[i] + 0.5) // 1.0
                nn = (n_[i] + 0.5) // 1.0
                sh = nu * mu
                bb = nu * _logistic(-lp)
                total += (
                    lgamma(nn + 1.0) - lgamma(z + 1.0) - lgamma(nn - z + 1.0)
                    + lgamma(z + sh) + lgamma(nn - z + bb) - lgamma(nn + nu)
                    + lgamma(nu) - lgamma(sh) - lgamma(bb)
                )
    return -total

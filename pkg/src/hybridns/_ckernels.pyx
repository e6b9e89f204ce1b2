# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the batched element kernels in ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void _matmul(double* a, double* b, double* c, int m, int k, int n,
                         double beta) noexcept nogil:
    """Row-major ``c = a @ b + beta * c`` with ``a`` (m, k) and ``b`` (k, n)."""
    cdef char tr = b'N'
    cdef double one = 1.0
    # column-major BLAS sees the transposes: c^T = b^T a^T
    dgemm(&tr, &tr, &n, &m, &k, &one, b, &n, a, &k, &beta, c, &n)


def convection(const double[:, :, ::1] wphi, const double[:, :, :, ::1] phi,
               const double[:, :, :, :, ::1] dphi, const double[:, :, ::1] ftn,
               const double[:, ::1] fwh, const double[:, :, ::1] sflat,
               const double[:, :, ::1] dflat, const double[:, ::1] w,
               const double[:, ::1] v):
    cdef Py_ssize_t E = phi.shape[0], Q = phi.shape[1], R = phi.shape[2]
    cdef Py_ssize_t U = sflat.shape[1], NF = sflat.shape[2], X = ftn.shape[1]
    N_arr = np.zeros((E, U, U))
    N2_arr = np.zeros((E, U, R))
    cdef double[:, :, ::1] N = N_arr
    cdef double[:, :, ::1] N2 = N2_arr
    cdef double[:, ::1] adv = np.empty((2 * Q, R))
    cdef double[:, ::1] tmp = np.empty((2 * Q, R))
    cdef double[:, ::1] rr = np.empty((R, R))
    cdef double[:, ::1] scaled = np.empty((U, NF))
    cdef double[:, ::1] xf = np.empty((NF, R))
    cdef double[::1] wq = np.empty(2 * Q)
    cdef double[::1] coef = np.empty(NF)
    cdef double[:, :, ::1] vg = np.empty((Q, 2, 2))
    cdef Py_ssize_t e, q, i, j, a, c, d, x, f
    cdef double s, t0, t1, wn

    # the kernel is only called from Python, so the const inputs are never
    # written; BLAS wants non-const pointers
    for e in range(E):
        # advecting velocity at the element nodes
        for q in range(Q):
            t0 = 0.0
            t1 = 0.0
            for j in range(R):
                t0 += phi[e, q, j, 0] * w[e, j]
                t1 += phi[e, q, j, 1] * w[e, j]
            wq[2 * q] = t0
            wq[2 * q + 1] = t1
        for q in range(Q):
            for c in range(2):
                for j in range(R):
                    adv[2 * q + c, j] = (dphi[e, q, j, c, 0] * wq[2 * q]
                                         + dphi[e, q, j, c, 1] * wq[2 * q + 1])
        _matmul(<double*> &wphi[e, 0, 0], &adv[0, 0], &rr[0, 0], <int> R, <int> (2 * Q),
                <int> R, 0.0)
        # face part: N += (sflat * coef) @ dflat
        for x in range(X):
            wn = 0.0
            for j in range(R):
                wn += ftn[e, x, j] * w[e, j]
            coef[2 * x] = fwh[e, x] * wn
            coef[2 * x + 1] = fwh[e, x] * wn
        for i in range(U):
            for f in range(NF):
                scaled[i, f] = sflat[e, i, f] * coef[f]
        _matmul(&scaled[0, 0], <double*> &dflat[e, 0, 0], &N[e, 0, 0], <int> U, <int> NF,
                <int> U, 0.0)
        for i in range(R):
            for j in range(R):
                N[e, i, j] += rr[i, j]

        # derivative in the advecting slot
        for q in range(Q):
            for c in range(2):
                for d in range(2):
                    s = 0.0
                    for j in range(R):
                        s += dphi[e, q, j, c, d] * v[e, j]
                    vg[q, c, d] = s
        for q in range(Q):
            for c in range(2):
                for a in range(R):
                    tmp[2 * q + c, a] = phi[e, q, a, 0] * vg[q, c, 0] + phi[e, q, a, 1] * vg[q, c, 1]
        for f in range(NF):
            s = 0.0
            for j in range(U):
                s += dflat[e, f, j] * v[e, j]
            x = f // 2
            s *= fwh[e, x]
            for a in range(R):
                xf[f, a] = s * ftn[e, x, a]
        _matmul(<double*> &sflat[e, 0, 0], &xf[0, 0], &N2[e, 0, 0], <int> U, <int> NF,
                <int> R, 0.0)
        _matmul(<double*> &wphi[e, 0, 0], &tmp[0, 0], &rr[0, 0], <int> R, <int> (2 * Q),
                <int> R, 0.0)
        for i in range(R):
            for a in range(R):
                N2[e, i, a] += rr[i, a]
    return N_arr, N2_arr


def linf_norms(const double[:, :, :, ::1] samples, const double[:, ::1] coeffs):
    cdef Py_ssize_t E = samples.shape[0], S = samples.shape[1], R = samples.shape[2]
    out_arr = np.zeros(E)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t e, p, j
    cdef double a, b, m, val
    for e in range(E):
        m = 0.0
        for p in range(S):
            a = 0.0
            b = 0.0
            for j in range(R):
                a += samples[e, p, j, 0] * coeffs[e, j]
                b += samples[e, p, j, 1] * coeffs[e, j]
            val = a * a + b * b
            if val > m:
                m = val
        out[e] = m ** 0.5
    return out_arr

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused relu-MLP soft cross-entropy loss/gradient and Adam update.

Flat parameter layout per layer: W (in x out, row-major) then b (out).
Matrix products go through BLAS dgemm; everything else is plain loops.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _gemm_rm(char ta, char tb, int m, int n, int k,
                   const double* a, int lda, const double* b, int ldb,
                   double* c, int ldc) noexcept nogil:
    cdef double one = 1.0, zero = 0.0
    dgemm(&ta, &tb, &m, &n, &k, &one, <double*>a, &lda, <double*>b, &ldb, &zero, c, &ldc)


cdef void _affine(const double* A, const double* W, const double* bias, double* Z,
                  int n, int fin, int fout) noexcept nogil:
    # Z(n x fout) = A(n x fin) @ W(fin x fout) + bias, row-major
    cdef int i, j
    _gemm_rm(b'N', b'N', fout, n, fin, W, fout, A, fin, Z, fout)
    for i in range(n):
        for j in range(fout):
            Z[i * fout + j] += bias[j]


def mlp_logits(const double[::1] params, const long[::1] sizes, const double[:, ::1] X):
    cdef int nl = sizes.shape[0] - 1
    cdef int n = X.shape[0]
    cdef int l, i, fin, fout
    cdef Py_ssize_t off = 0
    cdef const double[:, ::1] A = X
    cdef double[:, ::1] Z
    for l in range(nl):
        fin = sizes[l]
        fout = sizes[l + 1]
        Z = np.empty((n, fout))
        _affine(&A[0, 0], &params[off], &params[off + fin * fout], &Z[0, 0], n, fin, fout)
        off += fin * fout + fout
        if l < nl - 1:
            for i in range(n * fout):
                if (&Z[0, 0])[i] < 0.0:
                    (&Z[0, 0])[i] = 0.0
        A = Z
    return np.asarray(A)


def mlp_loss_grad(const double[::1] params, const long[::1] sizes, const double[:, ::1] X,
                  const double[:, ::1] T, double[::1] grad):
    """Mean soft cross-entropy over the rows of X; gradient written into grad."""
    cdef int nl = sizes.shape[0] - 1
    cdef int n = X.shape[0]
    cdef int K = sizes[nl]
    cdef int l, i, j, fin, fout
    cdef double mx, s, lse, tsum, loss = 0.0, inv_n = 1.0 / n
    cdef Py_ssize_t off
    cdef list acts = [X]
    cdef list offs = []
    cdef const double[:, ::1] A = X
    cdef double[:, ::1] Z
    cdef double[:, ::1] dZ
    cdef double[:, ::1] dA
    cdef const double[:, ::1] Aprev

    off = 0
    for l in range(nl):
        fin = sizes[l]
        fout = sizes[l + 1]
        offs.append(off)
        Z = np.empty((n, fout))
        _affine(&A[0, 0], &params[off], &params[off + fin * fout], &Z[0, 0], n, fin, fout)
        off += fin * fout + fout
        if l < nl - 1:
            for i in range(n * fout):
                if (&Z[0, 0])[i] < 0.0:
                    (&Z[0, 0])[i] = 0.0
        acts.append(Z)
        A = Z

    # softmax cross-entropy; dZ = (p * sum(t) - t) / n
    Z = acts[nl]
    dZ = np.empty((n, K))
    for i in range(n):
        mx = Z[i, 0]
        for j in range(1, K):
            if Z[i, j] > mx:
                mx = Z[i, j]
        s = 0.0
        for j in range(K):
            s += exp(Z[i, j] - mx)
        lse = mx + log(s)
        tsum = 0.0
        for j in range(K):
            tsum += T[i, j]
            loss -= T[i, j] * (Z[i, j] - lse)
        for j in range(K):
            dZ[i, j] = (exp(Z[i, j] - lse) * tsum - T[i, j]) * inv_n

    for l in range(nl - 1, -1, -1):
        fin = sizes[l]
        fout = sizes[l + 1]
        off = offs[l]
        Aprev = acts[l]
        # dW = Aprev^T dZ ; db = column sums of dZ
        _gemm_rm(b'N', b'T', fout, fin, n, &dZ[0, 0], fout, &Aprev[0, 0], fin,
                 &grad[off], fout)
        for j in range(fout):
            s = 0.0
            for i in range(n):
                s += dZ[i, j]
            grad[off + fin * fout + j] = s
        if l > 0:
            dA = np.empty((n, fin))
            _gemm_rm(b'T', b'N', fin, n, fout, &params[off], fout, &dZ[0, 0], fout,
                     &dA[0, 0], fin)
            for i in range(n):
                for j in range(fin):
                    if Aprev[i, j] <= 0.0:
                        dA[i, j] = 0.0
            dZ = dA
    return loss * inv_n


def adam_step(double[::1] params, double[::1] grad, double[::1] m, double[::1] v,
              long t, double lr, double beta1, double beta2, double eps):
    cdef Py_ssize_t i, n = params.shape[0]
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double g, mhat, vhat
    for i in range(n):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        params[i] -= lr * mhat / (sqrt(vhat) + eps)

"""Compiled per-bin kernels for small Hermitian matrices.

``whiten_bins`` returns, for every bin, ``V`` with ``V^H N V = I`` and
``V^H R V = diag(lam)`` together with ``u = V^H x``, ``ln det N`` and a flag
marking bins whose ``N`` failed the Cholesky factorisation. It is
equivalent to Cholesky + triangular solves + ``eigh`` but avoids the
per-matrix LAPACK overhead that dominates for 4x4 matrices.
"""
import numpy as np
from numba import njit

_JACOBI_SWEEPS = 30


@njit(cache=True, fastmath=True)
def _jacobi_hermitian(A, U):
    """In-place cyclic Jacobi; on return A is diagonal and A_in = U A_out U^H."""
    M = A.shape[0]
    for i in range(M):
        for j in range(M):
            U[i, j] = 1.0 if i == j else 0.0
    scale = 0.0
    for i in range(M):
        for j in range(M):
            scale += abs(A[i, j]) ** 2
    for _ in range(_JACOBI_SWEEPS):
        off = 0.0
        for p in range(M):
            for q in range(p + 1, M):
                off += abs(A[p, q]) ** 2
        if off <= 1e-32 * scale:
            break
        for p in range(M - 1):
            for q in range(p + 1, M):
                apq = A[p, q]
                mag = abs(apq)
                if mag <= 1e-300:
                    continue
                phase = apq / mag
                app = A[p, p].real
                aqq = A[q, q].real
                tau = (aqq - app) / (2.0 * mag)
                if tau >= 0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # J = D G with D = diag(.., conj(phase) at q ..)
                jpp = c + 0j
                jpq = s + 0j
                jqp = -s * np.conj(phase)
                jqq = c * np.conj(phase)
                for k in range(M):
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = akp * jpp + akq * jqp
                    A[k, q] = akp * jpq + akq * jqq
                for k in range(M):
                    apk = A[p, k]
                    aqk = A[q, k]
                    A[p, k] = np.conj(jpp) * apk + np.conj(jqp) * aqk
                    A[q, k] = np.conj(jpq) * apk + np.conj(jqq) * aqk
                A[p, q] = 0.0
                A[q, p] = 0.0
                for k in range(M):
                    ukp = U[k, p]
                    ukq = U[k, q]
                    U[k, p] = ukp * jpp + ukq * jqp
                    U[k, q] = ukp * jpq + ukq * jqq


@njit(cache=True, fastmath=True)
def whiten_bins(N, R, X):
    """N (F, T, M, M), R (F, M, M), X (F, T, M) -> V, lam, u, logdet, pd."""
    F, T, M = X.shape
    V = np.empty((F, T, M, M), dtype=np.complex128)
    lam = np.empty((F, T, M))
    u = np.empty((F, T, M), dtype=np.complex128)
    logdet = np.empty((F, T))
    pd = np.ones((F, T), dtype=np.bool_)
    L = np.zeros((M, M), dtype=np.complex128)
    Y = np.empty((M, M), dtype=np.complex128)
    C = np.empty((M, M), dtype=np.complex128)
    U = np.empty((M, M), dtype=np.complex128)
    for f in range(F):
        for t in range(T):
            # Cholesky N = L L^H
            ld = 0.0
            for j in range(M):
                s = N[f, t, j, j].real
                for k in range(j):
                    s -= (L[j, k] * np.conj(L[j, k])).real
                if s <= 0.0:
                    pd[f, t] = False
                    s = 1e-300
                d = np.sqrt(s)
                L[j, j] = d
                ld += 2.0 * np.log(d)
                for i in range(j + 1, M):
                    z = N[f, t, i, j]
                    for k in range(j):
                        z -= L[i, k] * np.conj(L[j, k])
                    L[i, j] = z / d
            logdet[f, t] = ld
            # Y = L^-1 R  (forward substitution, column by column)
            for col in range(M):
                for i in range(M):
                    z = R[f, i, col]
                    for k in range(i):
                        z -= L[i, k] * Y[k, col]
                    Y[i, col] = z / L[i, i]
            # C = L^-1 Y^H  (Hermitian)
            for col in range(M):
                for i in range(M):
                    z = np.conj(Y[col, i])
                    for k in range(i):
                        z -= L[i, k] * C[k, col]
                    C[i, col] = z / L[i, i]
            for i in range(M):
                for j in range(i + 1, M):
                    h = 0.5 * (C[i, j] + np.conj(C[j, i]))
                    C[i, j] = h
                    C[j, i] = np.conj(h)
                C[i, i] = C[i, i].real
            _jacobi_hermitian(C, U)
            for i in range(M):
                lam[f, t, i] = max(C[i, i].real, 0.0)
            # V = L^-H U  (back substitution with L^H)
            for col in range(M):
                for i in range(M - 1, -1, -1):
                    z = U[i, col]
                    for k in range(i + 1, M):
                        z -= np.conj(L[k, i]) * V[f, t, k, col]
                    V[f, t, i, col] = z / L[i, i].real
            for k in range(M):
                z = 0j
                for i in range(M):
                    z += np.conj(V[f, t, i, k]) * X[f, t, i]
                u[f, t, k] = z
    return V, lam, u, logdet, pd

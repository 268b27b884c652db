"""Randomized truncated SVD via subspace iteration."""

from __future__ import annotations

import numpy as np

from .errors import NumericError


def truncated_svd(M: np.ndarray, r: int, n_iter: int = 8, oversample: int = 8,
                  seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-r singular triplets (U_r, S_r, V_r) of a dense matrix.

    Randomized range finder with `n_iter` power iterations (QR re-orthonormalized
    each pass, fixed seed), then an exact SVD of the projected small matrix.
    Returns U_r (d x r), S_r (r,) descending non-negative, V_r (n x r).
    """
    M = np.asarray(M, dtype=np.float64)
    d, n = M.shape
    if r > min(d, n):
        raise ValueError(f"rank {r} exceeds min(d, n) = {min(d, n)}")
    if r == 0:
        return np.zeros((d, 0)), np.zeros(0), np.zeros((n, 0))

    rng = np.random.default_rng(seed)
    p = min(r + oversample, n)
    Y = M @ rng.standard_normal((n, p))
    Q, _ = np.linalg.qr(Y)
    for _ in range(n_iter):
        Z, _ = np.linalg.qr(M.T @ Q)
        Q, _ = np.linalg.qr(M @ Z)
    B = Q.T @ M
    Ub, S, Vt = np.linalg.svd(B, full_matrices=False)
    U = Q @ Ub

    U, S, V = U[:, :r], S[:r], Vt[:r].T
    if not (np.all(np.isfinite(U)) and np.all(np.isfinite(S)) and np.all(np.isfinite(V))):
        raise NumericError("truncated SVD produced non-finite values")
    for name, F in (("U", U), ("V", V)):
        G = F.T @ F
        if np.max(np.abs(G - np.eye(r))) > 1e-8:
            raise NumericError(f"truncated SVD {name} factor lost orthonormality")
    return U, S, V

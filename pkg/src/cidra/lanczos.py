"""Golub-Kahan-Lanczos bidiagonalisation for the leading singular triplets.

Only products with ``H`` and ``H.T`` are needed, so the tall block-Hankel
matrices of a realisation never go through a dense factorisation. Every new
Lanczos vector is re-orthogonalised against all previous ones (classical
Gram-Schmidt applied twice). For the few dozen steps a realisation needs this
costs little and keeps the basis orthogonal to working precision.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)


class LanczosNotConverged(RuntimeError):
    pass


def _reorth(w, basis):
    for _ in range(2):
        w -= basis @ (basis.T @ w)
    return w


def gkl_svd(H, k: int, tol: float = 1e-13, seed: int = 0, max_dim: int | None = None):
    """Top-``k`` singular triplets of ``H`` by bidiagonalisation.

    Parameters
    ----------
    H : (m, n) array_like
        Matrix supporting ``@`` from both sides.
    k : int
        Number of triplets.
    tol : float
        Converged once every requested residual ``||H^T u - s v||`` is below
        ``tol * s_1``.
    seed : int
        Seed for the starting vector.
    max_dim : int, optional
        Largest Krylov dimension tried before giving up.

    Returns
    -------
    U : (m, k) ndarray
    s : (k,) ndarray, descending
    V : (n, k) ndarray

    Raises
    ------
    LanczosNotConverged
        If the residuals have not met ``tol`` by ``max_dim`` steps.
    """
    m, n = H.shape
    limit = min(m, n)
    if not 1 <= k <= limit:
        raise ValueError(f"need 1 <= k <= {limit}, got {k}")
    if max_dim is None:
        max_dim = min(limit, max(20 * k, 200))
    max_dim = min(max_dim, limit)

    rng = np.random.default_rng(seed)
    P = np.zeros((m, max_dim))
    Q = np.zeros((n, max_dim + 1))
    alpha = np.zeros(max_dim)
    beta = np.zeros(max_dim)
    q = rng.standard_normal(n)
    Q[:, 0] = q / np.linalg.norm(q)

    # convergence is checked after every step past k; the small SVD is cheap
    target = min(max_dim, k + 1)
    j = 0
    invariant = None  # "alpha" or "beta" once an exact invariant subspace appears
    while True:
        while j < target:
            p = H @ Q[:, j]
            if j:
                p -= beta[j - 1] * P[:, j - 1]
            p = _reorth(p, P[:, :j])
            alpha[j] = np.linalg.norm(p)
            if alpha[j] <= np.finfo(float).eps * max(alpha[:j].max(initial=0.0), 1e-300):
                # H q_j already lies in span(P): the pair of subspaces is invariant
                alpha[j] = 0.0
                invariant = "alpha"
                break
            P[:, j] = p / alpha[j]
            q = H.T @ P[:, j] - alpha[j] * Q[:, j]
            q = _reorth(q, Q[:, : j + 1])
            beta[j] = np.linalg.norm(q)
            j += 1
            if beta[j - 1] <= np.finfo(float).eps * alpha[:j].max():
                beta[j - 1] = 0.0
                invariant = "beta"
                break
            Q[:, j] = q / beta[j - 1]

        if j < k:
            raise LanczosNotConverged(f"Krylov space exhausted after {j} steps, fewer than k = {k}")
        if invariant == "alpha" and j and beta[j - 1] != 0.0:
            # square-plus-one bidiagonal acting on Q[:, :j+1]
            B = np.zeros((j, j + 1))
            B[:, :j] = np.diag(alpha[:j]) + np.diag(beta[: j - 1], 1)
            B[j - 1, j] = beta[j - 1]
            Ub, sb, Vbt = scipy.linalg.svd(B, full_matrices=False, lapack_driver="gesdd")
            return P[:, :j] @ Ub[:, :k], sb[:k], Q[:, : j + 1] @ Vbt[:k].T
        B = np.diag(alpha[:j]) + np.diag(beta[: j - 1], 1)
        Ub, sb, Vbt = scipy.linalg.svd(B, lapack_driver="gesdd")
        resid = np.abs(beta[j - 1] * Ub[-1, :k])
        scale = sb[0] if sb[0] > 0 else 1.0
        if invariant or np.all(resid <= tol * scale):
            break
        if target >= max_dim:
            raise LanczosNotConverged(f"residual {resid.max() / scale:.2e} above {tol:.0e} after {j} steps")
        target += 1

    U = P[:, :j] @ Ub[:, :k]
    V = Q[:, :j] @ Vbt[:k].T
    return U, sb[:k], V

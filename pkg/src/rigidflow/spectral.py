"""Principal eigenpairs of small symmetric non-negative matrices, batched."""

from __future__ import annotations

import numpy as np

# power iteration runs on A**(2**_SQUARINGS); the fixed point is the same as for A
_SQUARINGS = 4


class EigenConvergenceError(RuntimeError):
    def __init__(self, message, residual, index=None):
        super().__init__(message)
        self.residual = residual
        self.index = index


def check_reward_matrix(a, atol: float = 1e-12) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    if np.abs(a - np.swapaxes(a, -1, -2)).max(initial=0.0) > atol:
        raise ValueError("reward matrix must be symmetric")
    if a.min(initial=0.0) < 0.0 or a.max(initial=0.0) > 1.0:
        raise ValueError("reward matrix entries must lie in [0, 1]")
    if np.abs(np.diagonal(a, axis1=-2, axis2=-1) - 1.0).max(initial=0.0) > atol:
        raise ValueError("reward matrix diagonal must be 1")
    return a


def _orient(v: np.ndarray) -> np.ndarray:
    # largest-magnitude component made non-negative; argmax already picks the lowest index on ties
    pick = np.argmax(np.abs(v), axis=-1)
    sign = np.sign(np.take_along_axis(v, pick[:, None], axis=-1))
    sign[sign == 0] = 1.0
    return v * sign


def _power_iterate(mats: np.ndarray, tol: float, max_iter: int):
    n, d, _ = mats.shape
    boost = mats.copy()
    for _ in range(_SQUARINGS):
        boost = boost @ boost
        boost /= np.linalg.norm(boost, axis=(1, 2), keepdims=True)
    v = np.full((n, d), 1.0 / np.sqrt(d))
    bound = tol * d
    lam = np.empty(n)
    res = np.full(n, np.inf)
    active = np.arange(n)
    for _ in range(max_iter):
        av = np.einsum("nij,nj->ni", mats[active], v[active])
        lam_a = np.einsum("ni,ni->n", v[active], av)
        res_a = np.linalg.norm(av - lam_a[:, None] * v[active], axis=1)
        lam[active] = lam_a
        res[active] = res_a
        done = res_a <= bound
        active = active[~done]
        if len(active) == 0:
            break
        w = np.einsum("nij,nj->ni", boost[active], v[active])
        v[active] = w / np.linalg.norm(w, axis=1, keepdims=True)
    return lam, v, res


def batch_principal_eig(mats, tol: float = 1e-10, max_iter: int = 1000, strict: bool = True,
                        validate: bool = True):
    """Largest eigenvalue and unit eigenvector of each matrix in an ``(N, d, d)`` stack.

    Power iteration from the normalised all-ones vector. Converged when
    ``||A v - lam v|| <= tol * d``. With ``strict`` a matrix that misses the
    bound after ``max_iter`` iterations raises :class:`EigenConvergenceError`;
    otherwise its best estimate is returned. Matrices with no off-diagonal
    mass return the first basis vector of their largest diagonal entry.

    Returns ``(eigenvalues (N,), eigenvectors (N, d), residuals (N,))``.
    """
    a = check_reward_matrix(mats) if validate else np.asarray(mats, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    n, d, _ = a.shape
    if n == 0:
        return np.zeros(0), np.zeros((0, d)), np.zeros(0)
    lam, v, res = _power_iterate(a, tol, max_iter)
    off = a * (1.0 - np.eye(d))
    diagonal = ~off.any(axis=(1, 2))
    if diagonal.any():
        diag = np.diagonal(a[diagonal], axis1=1, axis2=2)
        top = np.argmax(diag, axis=1)
        v[diagonal] = np.eye(d)[top]
        lam[diagonal] = diag[np.arange(len(top)), top]
        res[diagonal] = 0.0
    if strict:
        bad = np.flatnonzero(res > tol * d)
        if len(bad):
            i = int(bad[0])
            raise EigenConvergenceError(
                f"power iteration did not converge for matrix {i} (residual {res[i]:.3g})",
                residual=float(res[i]), index=i)
    return lam, _orient(v), res


def principal_eig(a, tol: float = 1e-10, max_iter: int = 1000):
    """``(eigenvalue, eigenvector)`` of a single reward matrix."""
    lam, v, _ = batch_principal_eig(np.asarray(a, dtype=np.float64)[None], tol, max_iter)
    return float(lam[0]), v[0]

"""Dense linear algebra used throughout the engine.

Matrices are plain ``float64`` numpy arrays. A *basis* is a ``(d, k)`` array
whose columns are orthonormal; ``k`` may be zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConvergenceError",
    "SvdResult",
    "svd",
    "project",
    "orthonormalize",
    "empty_basis",
    "is_orthonormal",
    "flat_inner",
    "flat_norm",
    "RANK_RTOL",
]

MAX_SWEEPS = 100
OFF_DIAG_TOL = 1e-12
# singular values at or below RANK_RTOL * sigma_max count as zero
RANK_RTOL = 1e-10


class ConvergenceError(ArithmeticError):
    """Raised when an iterative routine hits its iteration cap."""


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.v.T


def _as_finite_matrix(m, name="m") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of disjoint pairs covering all pairs once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_columns(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged in ``keep`` by an orthonormal completion."""
    m, k = u.shape
    good = [u[:, i] for i in range(k) if keep[i]]
    basis = np.array(good).T if good else np.zeros((m, 0))
    fill = []
    for e in np.eye(m):
        if len(fill) == int((~keep).sum()):
            break
        r = e.copy()
        for _ in range(2):
            if basis.shape[1]:
                r -= basis @ (basis.T @ r)
        nr = np.linalg.norm(r)
        if nr > 1e-6:
            r /= nr
            fill.append(r)
            basis = np.column_stack([basis, r])
    out = u.copy()
    it = iter(fill)
    for i in range(k):
        if not keep[i]:
            out[:, i] = next(it)
    return out


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided (Hestenes) Jacobi on a matrix with rows >= cols."""
    m, n = a.shape
    a = a.copy()
    v = np.eye(n)
    if n < 2:
        pass
    else:
        scale = np.linalg.norm(a)
        # columns this small relative to the whole matrix are numerically null
        negligible = (1e-14 * scale) ** 2
        rounds = _round_robin(n)
        for sweep in range(MAX_SWEEPS):
            worst = 0.0
            for p, q in rounds:
                ap, aq = a[:, p], a[:, q]
                alpha = np.einsum("ij,ij->j", ap, ap)
                beta = np.einsum("ij,ij->j", aq, aq)
                gamma = np.einsum("ij,ij->j", ap, aq)
                live = (alpha > negligible) & (beta > negligible) & (gamma != 0.0)
                if not live.any():
                    continue
                corr = np.zeros_like(gamma)
                corr[live] = np.abs(gamma[live]) / np.sqrt(alpha[live] * beta[live])
                worst = max(worst, float(corr.max()))
                rot = live & (corr > OFF_DIAG_TOL)
                if not rot.any():
                    continue
                p, q = p[rot], q[rot]
                alpha, beta, gamma = alpha[rot], beta[rot], gamma[rot]
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ap, aq = a[:, p], a[:, q]
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                vp, vq = v[:, p], v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
            if worst <= OFF_DIAG_TOL:
                break
        else:
            raise ConvergenceError(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")
    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, a, v = sigma[order], a[:, order], v[:, order]
    smax = sigma[0] if n else 0.0
    keep = sigma > RANK_RTOL * smax if smax > 0 else np.zeros(n, dtype=bool)
    u = np.zeros((m, n))
    u[:, keep] = a[:, keep] / sigma[keep]
    if not keep.all():
        u = _complete_columns(u, keep)
    return u, sigma, v


def svd(m) -> SvdResult:
    """Thin SVD by one-sided Jacobi.

    Singular values come back nonincreasing. Each left singular vector is
    signed so that its largest-magnitude entry is positive (first such entry
    on ties); the matching right vector is flipped with it.
    """
    a = _as_finite_matrix(m)
    rows, cols = a.shape
    k = min(rows, cols)
    if k == 0:
        return SvdResult(np.zeros((rows, 0)), np.zeros(0), np.zeros((cols, 0)))
    if rows >= cols:
        u, s, v = _jacobi_tall(a)
    else:
        v, s, u = _jacobi_tall(a.T)
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(k)] < 0, -1.0, 1.0)
    return SvdResult(u * signs, s, v * signs)


def empty_basis(dim: int) -> np.ndarray:
    return np.zeros((dim, 0))


def is_orthonormal(b: np.ndarray, tol: float = 1e-10) -> bool:
    b = np.asarray(b)
    if b.ndim != 2 or b.shape[1] > b.shape[0]:
        return False
    if b.shape[1] == 0:
        return True
    return float(np.max(np.abs(b.T @ b - np.eye(b.shape[1])))) <= tol


def project(m, b) -> np.ndarray:
    """Project the rows of ``m`` onto span(b): ``m @ b @ b.T``."""
    m = np.asarray(m, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if m.ndim != 2 or b.ndim != 2 or m.shape[1] != b.shape[0]:
        raise ValueError(f"cannot project shape {m.shape} onto basis of shape {b.shape}")
    if b.shape[1] == 0:
        return np.zeros_like(m)
    return (m @ b) @ b.T


def orthonormalize(columns, tol: float = 1e-8) -> np.ndarray:
    """Modified Gram-Schmidt with one re-orthogonalization pass.

    Columns whose residual norm falls below ``tol`` after removing the
    already-accepted directions are dropped.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = _as_finite_matrix(columns, "columns")
    d, n = a.shape
    accepted: list[np.ndarray] = []
    for j in range(n):
        r = a[:, j].copy()
        for _ in range(2):
            for q in accepted:
                r -= (q @ r) * q
        nr = float(np.linalg.norm(r))
        if nr < tol:
            continue
        accepted.append(r / nr)
    if not accepted:
        return empty_basis(d)
    return np.column_stack(accepted)


def _check_same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def flat_inner(a, b) -> float:
    a, b = _check_same_shape(a, b)
    return float(np.dot(a.ravel(), b.ravel()))


def flat_norm(a) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64).ravel()))

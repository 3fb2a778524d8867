"""Dense real matrices and a thin, full-rank SVD (one-sided Jacobi)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from svflab.validation import check_matrix

MAX_SWEEPS = 60
ROTATION_TOL = 1e-12
# columns whose norm falls below this fraction of the largest get a completed basis vector
_NULL_COLUMN_RTOL = 1e-13


class SvdConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SvdFactors:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def rank(self) -> int:
        return self.s.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def matmul(a, b) -> np.ndarray:
    a = check_matrix(a, "a")
    b = check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("matmul produced non-finite entries")
    return out


def orthonormality_defect(m) -> float:
    """Max-norm of ``m.T @ m - I``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if m.shape[1] == 0:
        return 0.0
    gram = m.T @ m
    return float(np.max(np.abs(gram - np.eye(m.shape[1]))))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # circle-method tournament; every pair appears once per sweep, pairs within a round are disjoint
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        left, right = [], []
        for i in range(size // 2):
            a, b = players[i], players[size - 1 - i]
            if a >= 0 and b >= 0:
                left.append(min(a, b))
                right.append(max(a, b))
        rounds.append((np.array(left, dtype=np.intp), np.array(right, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(a: np.ndarray):
    """Orthogonalise the columns of ``a`` (m >= n). Returns (a @ v, v, sweeps)."""
    m, n = a.shape
    work = a.copy()
    v = np.eye(n, dtype=a.dtype)
    frob2 = float(np.sum(work * work))
    if n < 2 or frob2 == 0.0:
        return work, v, 0
    # pairs whose joint energy is negligible against the whole matrix are left alone
    floor = (ROTATION_TOL * np.sqrt(frob2)) ** 2
    rounds = _round_robin(n)
    for sweep in range(1, MAX_SWEEPS + 1):
        rotated = False
        for p, q in rounds:
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            act = (np.abs(gamma) > ROTATION_TOL * scale) & (scale > floor)
            if not act.any():
                continue
            rotated = True
            p, q = p[act], q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = work[:, p], work[:, q]
            work[:, p] = c * ap - s * aq
            work[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            return work, v, sweep
    residual = _off_diagonal_residual(work)
    raise SvdConvergenceError(
        f"one-sided Jacobi did not converge on a {a.shape[0]}x{a.shape[1]} matrix "
        f"after {MAX_SWEEPS} sweeps (relative off-diagonal residual {residual:.3e})"
    )


def _off_diagonal_residual(work: np.ndarray) -> float:
    gram = work.T @ work
    d = np.sqrt(np.abs(np.diag(gram)))
    denom = np.outer(d, d)
    off = np.abs(gram - np.diag(np.diag(gram)))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(denom > 0, off / denom, 0.0)
    return float(rel.max()) if rel.size else 0.0


def _complete_basis(u: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Fill the columns flagged in ``missing`` with unit vectors orthogonal to the rest."""
    m = u.shape[0]
    done = ~missing
    candidates = iter(range(m))
    for j in np.flatnonzero(missing):
        basis = u[:, done]
        while True:
            e = np.zeros(m, dtype=u.dtype)
            e[next(candidates)] = 1.0
            for _ in range(2):
                e -= basis @ (basis.T @ e)
            norm = np.linalg.norm(e)
            if norm > 0.5:
                break
        u[:, j] = e / norm
        done[j] = True
    return u


def _svd_tall(a: np.ndarray) -> SvdFactors:
    work, v, _ = _jacobi_tall(a)
    s = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    work = work[:, order]
    v = v[:, order]
    s_max = s[0] if s.size else 0.0
    null = s <= _NULL_COLUMN_RTOL * s_max if s_max > 0 else np.ones_like(s, dtype=bool)
    u = np.zeros_like(work)
    u[:, ~null] = work[:, ~null] / s[~null]
    if null.any():
        u = _complete_basis(u, null)
    return SvdFactors(u=u, s=s, vt=v.T.copy())


def _fix_signs(f: SvdFactors) -> SvdFactors:
    idx = np.argmax(np.abs(f.u), axis=0)
    signs = np.where(f.u[idx, np.arange(f.u.shape[1])] < 0, -1.0, 1.0)
    return SvdFactors(u=f.u * signs, s=f.s, vt=f.vt * signs[:, None])


def svd(m) -> SvdFactors:
    """Thin SVD with r = min(rows, cols) singular values in descending order.

    The largest-magnitude entry of each column of ``u`` is made non-negative, so
    repeated calls on the same matrix return bit-identical factors.
    """
    a = check_matrix(m, "m").astype(np.float64, copy=True)
    rows, cols = a.shape
    if rows >= cols:
        f = _svd_tall(a)
    else:
        t = _svd_tall(a.T)
        # m.T = U' S V'^T  =>  m = V' S U'^T
        f = SvdFactors(u=t.vt.T.copy(), s=t.s, vt=t.u.T.copy())
    return _fix_signs(f)

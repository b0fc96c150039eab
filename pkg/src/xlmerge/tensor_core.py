"""Dense numeric primitives used by the merge rules and the synthetic harness.

Tensors are plain :class:`numpy.ndarray` objects. Every routine computes in
float64 and avoids BLAS-backed reductions, so results are bitwise reproducible
regardless of how many threads the caller uses.
"""

from __future__ import annotations

import functools
import math

import numpy as np

from .errors import NumericError, ShapeError, SvdConvergenceError

Tensor = np.ndarray

COMPUTE_DTYPE = np.float64
EPS = float(np.finfo(COMPUTE_DTYPE).eps)
TINY = float(np.finfo(COMPUTE_DTYPE).tiny)


def as_tensor(x, *, finite: bool = True) -> Tensor:
    """Return ``x`` as a float64 array, optionally rejecting non-finite values."""
    a = np.asarray(x, dtype=COMPUTE_DTYPE)
    if finite and not np.all(np.isfinite(a)):
        raise NumericError("tensor contains non-finite values")
    return a


def _same_shape(a: Tensor, b: Tensor, op: str) -> tuple[Tensor, Tensor]:
    a = np.asarray(a, dtype=COMPUTE_DTYPE)
    b = np.asarray(b, dtype=COMPUTE_DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def ew_add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _same_shape(a, b, "ew_add")
    return a + b


def ew_sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _same_shape(a, b, "ew_sub")
    return a - b


def ew_mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _same_shape(a, b, "ew_mul")
    return a * b


def ew_div(a: Tensor, b: Tensor, eps: float = 1e-8, *, return_count: bool = False):
    """Element-wise ``a / b`` with sign-preserving clamping of small divisors.

    Any ``|b[i]| < eps`` is replaced by ``sign(b[i]) * eps``, where an exact
    zero counts as positive. With ``return_count=True`` the number of clamped
    entries is returned alongside the quotient.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    a, b = _same_shape(a, b, "ew_div")
    small = np.abs(b) < eps
    n_clamped = int(np.count_nonzero(small))
    if n_clamped:
        b = np.where(small, np.where(b < 0, -eps, eps), b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a / b
    if return_count:
        return out, n_clamped
    return out


def scale(a: Tensor, t: float) -> Tensor:
    return np.asarray(a, dtype=COMPUTE_DTYPE) * float(t)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with a fixed serial reduction over the inner dimension.

    Accumulates rank-one updates in index order instead of calling BLAS, so the
    result does not depend on the BLAS threading configuration.
    """
    a = np.asarray(a, dtype=COMPUTE_DTYPE)
    b = np.asarray(b, dtype=COMPUTE_DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    m, n = a.shape
    n2, p = b.shape
    if n != n2:
        raise ShapeError(f"matmul: inner dimensions differ ({m}x{n} @ {n2}x{p})")
    out = np.zeros((m, p), dtype=COMPUTE_DTYPE)
    for j in range(n):
        out += a[:, j, None] * b[None, j, :]
    return out


def frobenius_norm(a: Tensor) -> float:
    a = np.asarray(a, dtype=COMPUTE_DTYPE)
    amax = float(np.max(np.abs(a))) if a.size else 0.0
    if amax == 0.0 or not math.isfinite(amax):
        return amax
    s = a / amax
    return amax * math.sqrt(float(np.sum(s * s)))


def rel_error(a: Tensor, b: Tensor) -> float:
    """``||a - b||_F / max(||b||_F, tiny)``."""
    a, b = _same_shape(a, b, "rel_error")
    return frobenius_norm(a - b) / max(frobenius_norm(b), TINY)


@functools.lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Pairings covering every column pair once per sweep, in disjoint rounds."""
    players = list(range(n + (n % 2)))
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        p, q = [], []
        for i in range(size // 2):
            x, y = players[i], players[size - 1 - i]
            if x < n and y < n:
                p.append(min(x, y))
                q.append(max(x, y))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0], players[-1], *players[1:-1]]
    return tuple(rounds)


def _complete_basis(U: Tensor, good: np.ndarray) -> Tensor:
    """Replace the columns of ``U`` not flagged ``good`` by an orthonormal completion."""
    m = U.shape[0]
    basis = [U[:, j] for j in np.flatnonzero(good)]
    fill = [j for j in range(U.shape[1]) if not good[j]]
    out = U.copy()
    cand = 0
    while fill:
        if cand >= m:
            raise NumericError("could not complete orthonormal basis")
        v = np.zeros(m)
        v[cand] = 1.0
        cand += 1
        for _ in range(2):
            for q in basis:
                v = v - float(np.sum(q * v)) * q
        nv = math.sqrt(float(np.sum(v * v)))
        if nv < 0.5 / math.sqrt(m):
            continue
        v = v / nv
        basis.append(v)
        out[:, fill.pop(0)] = v
    return out


def svd(a: Tensor, max_sweeps: int = 80) -> tuple[Tensor, Tensor, Tensor]:
    """Thin SVD ``a = U @ diag(S) @ V.T`` by one-sided (Hestenes) Jacobi rotations.

    Returns ``U`` (m x r), ``S`` (r, descending, nonnegative) and ``V`` (n x r)
    with r = min(m, n). Raises :class:`SvdConvergenceError` if the columns are
    not mutually orthogonal after ``max_sweeps`` sweeps.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"svd expects a 2-D matrix, got shape {a.shape}")
    m, n = a.shape
    if m == 0 or n == 0:
        raise ShapeError("svd of an empty matrix")
    if m < n:
        V, S, U = svd(a.T, max_sweeps)
        return U, S, V

    G = a.copy()
    V = np.eye(n)
    tol = m * EPS
    # Columns below eps * ||a||_F are roundoff; they are neither rotated nor
    # normalized. The bound stays under the default pinv cutoff.
    null = EPS * frobenius_norm(a)
    null_sq = null * null
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = 0
        for P, Q in rounds:
            gp, gq = G[:, P], G[:, Q]
            alpha = np.sum(gp * gp, axis=0)
            beta = np.sum(gq * gq, axis=0)
            gamma = np.sum(gp * gq, axis=0)
            act = np.abs(gamma) > tol * np.sqrt(alpha) * np.sqrt(beta)
            act &= (alpha > null_sq) & (beta > null_sq)
            if not act.any():
                continue
            rotated += int(np.count_nonzero(act))
            P, Q = P[act], Q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            sgn = np.where(zeta < 0, -1.0, 1.0)
            tan = sgn / (np.abs(zeta) + np.hypot(1.0, zeta))
            cos = 1.0 / np.sqrt(1.0 + tan * tan)
            sin = cos * tan
            gp, gq = G[:, P], G[:, Q]
            G[:, P] = cos * gp - sin * gq
            G[:, Q] = sin * gp + cos * gq
            vp, vq = V[:, P], V[:, Q]
            V[:, P] = cos * vp - sin * vq
            V[:, Q] = sin * vp + cos * vq
        if rotated == 0:
            break
    else:
        raise SvdConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    S = np.sqrt(np.sum(G * G, axis=0))
    order = np.argsort(-S, kind="stable")
    S, G, V = S[order], G[:, order], V[:, order]
    good = (S > null) & (S > 0)
    U = np.zeros_like(G)
    U[:, good] = G[:, good] / S[good]
    if not good.all():
        U = _complete_basis(U, good)
    return U, S, V


def default_rtol(shape: tuple[int, ...]) -> float:
    return max(shape) * EPS


def numerical_rank(a: Tensor, rtol: float | None = None) -> int:
    a = as_tensor(a)
    _, S, _ = svd(a)
    if rtol is None:
        rtol = default_rtol(a.shape)
    return int(np.count_nonzero(S > rtol * S[0])) if S[0] > 0 else 0


def pinv(a: Tensor, rtol: float | None = None, *, return_rank: bool = False):
    """Moore-Penrose pseudo-inverse via :func:`svd`.

    Singular values at or below ``rtol * sigma_max`` are treated as zero;
    the default ``rtol`` is ``max(m, n) * eps``. With ``return_rank=True`` the
    number of retained singular values is returned as well.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"pinv expects a 2-D matrix, got shape {a.shape}")
    if rtol is None:
        rtol = default_rtol(a.shape)
    U, S, V = svd(a)
    keep = S > rtol * S[0]
    s_inv = np.zeros_like(S)
    s_inv[keep] = 1.0 / S[keep]
    out = matmul(V * s_inv, U.T)
    if return_rank:
        return out, int(np.count_nonzero(keep))
    return out


def truncated_factors(delta: Tensor, rank: int) -> tuple[Tensor, Tensor]:
    """Split ``delta`` (d x k) into ``B`` (d x rank) and ``A`` (rank x k) via truncated SVD.

    The singular values are shared evenly, ``B = U sqrt(S)`` and ``A = sqrt(S) V^T``.
    """
    U, S, V = svd(delta)
    rank = max(1, min(rank, S.shape[0]))
    root = np.sqrt(S[:rank])
    return U[:, :rank] * root, (V[:, :rank] * root).T

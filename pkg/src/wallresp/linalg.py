"""Distributed dense linear algebra on :mod:`wallresp.dmat` layouts.

All routines are collective.  They move data only through
:func:`wallresp.dmat.fetch`, so every operand may be in any layout; results
come back in the layout of the output operand (or of the input, for
transformations such as the factorizations).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .comm import world
from .dmat import (
    BlockCyclicMatrix,
    DistMatrix,
    create_block_cyclic,
    create_striped,
    fetch,
    gather_to_root,
    scatter_from_root,
)

logger = logging.getLogger(__name__)

PANEL = 64
EIG_TOL = 1e-8


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, pivot: int, what: str = "matrix"):
        super().__init__(f"{what} is not positive definite: non-positive pivot at index {pivot}")
        self.pivot = pivot


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, pivot: int):
        super().__init__(f"matrix is singular to working precision: zero pivot at index {pivot}")
        self.pivot = pivot


class ZeroDivisorError(ZeroDivisionError):
    def __init__(self, row: int):
        super().__init__(f"zero divisor for row {row}")
        self.row = row


def _block_size(A: DistMatrix) -> int:
    return A.desc.MB if isinstance(A, BlockCyclicMatrix) else PANEL


def _require_square(A: DistMatrix, name="matrix") -> int:
    m, n = A.shape
    if m != n:
        raise ValueError(f"{name} must be square, got {m}x{n}")
    return m


# -- products and transposes ------------------------------------------------


def dist_gemm(alpha: float, A: DistMatrix, B: DistMatrix, beta: float, C: DistMatrix) -> DistMatrix:
    """``alpha * A @ B + beta * C`` in the layout of C.

    Each rank pulls the A row panel and B column panel matching its own C
    indices, ``PANEL`` inner indices at a time, and accumulates locally.
    """
    (m, k), (k2, n) = A.shape, B.shape
    if k != k2 or C.shape != (m, n):
        raise ValueError(f"dist_gemm shape mismatch: A {A.shape} @ B {B.shape} -> C {C.shape}")
    rows, cols = C.index_sets()
    acc = np.zeros((len(rows), len(cols)))
    for k0 in range(0, k, PANEL):
        kk = np.arange(k0, min(k0 + PANEL, k))
        acc += fetch(A, rows, kk) @ fetch(B, kk, cols)
    out = alpha * acc
    if beta != 0.0:
        out += beta * C.local
    return C.with_local(out)


def dist_transpose(A: DistMatrix) -> DistMatrix:
    """Transpose into the mirrored layout (block-cyclic stays block-cyclic)."""
    m, n = A.shape
    if isinstance(A, BlockCyclicMatrix):
        d = A.desc.transposed()
        target = create_block_cyclic(d.M, d.N, d.MB, d.NB, d.grid)
    elif A.replicated:
        target = create_striped(n, m, distrib=False)
    else:
        target = create_striped(n, m, not A.row_wise, A.nranks)
    rows, cols = target.index_sets()
    return target.with_local(fetch(A, cols, rows).T)


def row_scale(A: DistMatrix, d) -> DistMatrix:
    """Divide row i of A by d[i]; ``d`` is replicated on every rank."""
    d = np.asarray(d, dtype=float)
    if d.shape != (A.shape[0],):
        raise ValueError(f"divisor length {d.shape} does not match {A.shape[0]} rows")
    zero = np.flatnonzero(d == 0)
    if zero.size:
        raise ZeroDivisorError(int(zero[0]) + 1)
    rows, _ = A.index_sets()
    return A.with_local(A.local / d[rows][:, None])


# -- factorizations ---------------------------------------------------------


def cholesky_factor(A: DistMatrix) -> DistMatrix:
    """Lower Cholesky factor L (A = L L^T), right-looking by blocks."""
    n = _require_square(A)
    nb = _block_size(A)
    L = A.copy()
    rows, cols = L.index_sets()
    for k0 in range(0, n, nb):
        k1 = min(k0 + nb, n)
        kr = np.arange(k0, k1)
        below = rows >= k1
        # diagonal block plus this rank's rows of the panel
        got = fetch(L, np.concatenate([kr, rows[below]]), kr)
        lkk, info = lapack.dpotrf(got[: len(kr)], lower=1, clean=1)
        if info > 0:
            raise NotPositiveDefiniteError(k0 + info)
        panel = solve_triangular(lkk, got[len(kr) :].T, lower=True).T
        in_k = (cols >= k0) & (cols < k1)
        diag_rows = (rows >= k0) & (rows < k1)
        L.local[np.ix_(diag_rows, in_k)] = lkk[np.ix_(rows[diag_rows] - k0, cols[in_k] - k0)]
        L.local[np.ix_(below, in_k)] = panel[:, cols[in_k] - k0]
        right = cols >= k1
        pcols = fetch(L, cols[right], kr)
        L.local[np.ix_(below, right)] -= panel @ pcols.T
    L.local[rows[:, None] < cols[None, :]] = 0.0
    return L


def triangular_solve(T: DistMatrix, B: DistMatrix, lower=True, trans=False, unit=False) -> DistMatrix:
    """Solve op(T) X = B with op(T) = T or T^T; only the relevant triangle of T is read."""
    n = _require_square(T, "triangular factor")
    if B.shape[0] != n:
        raise ValueError(f"right-hand side has {B.shape[0]} rows, factor is {n}x{n}")
    nb = _block_size(T)
    eff_lower = lower != trans
    X = B.copy()
    rows, cols = X.index_sets()
    starts = list(range(0, n, nb))
    if not eff_lower:
        starts.reverse()

    def op_fetch(r, c):
        return fetch(T, c, r).T if trans else fetch(T, r, c)

    for k0 in starts:
        k1 = min(k0 + nb, n)
        kr = np.arange(k0, k1)
        rest = rows >= k1 if eff_lower else rows < k0
        got = op_fetch(np.concatenate([kr, rows[rest]]), kr)
        dkk = np.tril(got[: len(kr)]) if eff_lower else np.triu(got[: len(kr)])
        xk = solve_triangular(dkk, fetch(X, kr, cols), lower=eff_lower, unit_diagonal=unit)
        mine = (rows >= k0) & (rows < k1)
        X.local[mine] = xk[rows[mine] - k0]
        X.local[rest] -= got[len(kr) :] @ xk
    return X


def cholesky_solve(A: DistMatrix, RHS: DistMatrix) -> DistMatrix:
    """X with A X = RHS for symmetric positive definite A; X has RHS's layout."""
    L = cholesky_factor(A)
    Y = triangular_solve(L, RHS, lower=True)
    return triangular_solve(L, Y, lower=True, trans=True)


def lu_factor(A: DistMatrix) -> tuple[DistMatrix, np.ndarray]:
    """Row-pivoted LU, P A = L U, packed with unit-lower L below the diagonal.

    Returns the packed factors and ``perm`` with (P A)[i] = A[perm[i]].
    """
    ctx = world()
    n = _require_square(A)
    LU = A.copy()
    rows, cols = LU.index_sets()
    perm = np.arange(n)
    col_pos = {int(c): p for p, c in enumerate(cols)}
    amax = ctx.allreduce_max(float(np.max(np.abs(LU.local))) if LU.local.size else 0.0)
    tiny = n * np.finfo(float).eps * amax
    for j in range(n):
        cj = col_pos.get(j)
        cand = None
        if cj is not None:
            sub = rows >= j
            if sub.any():
                vals = np.abs(LU.local[sub, cj])
                a = int(np.argmax(vals))
                cand = (float(vals[a]), int(rows[sub][a]))
        cands = [c for c in ctx.allgather(cand) if c is not None]
        best = max(cands, key=lambda c: (c[0], -c[1])) if cands else (0.0, j)
        if not best[0] > tiny or not np.isfinite(best[0]):
            raise SingularMatrixError(j + 1)
        p = best[1]
        if p != j:
            holds = bool(np.isin([j, p], rows).any())
            pair = fetch(LU, [j, p], cols if holds else [])
            for src, dst in ((1, j), (0, p)):
                hit = np.flatnonzero(rows == dst)
                if hit.size:
                    LU.local[hit[0]] = pair[src]
            perm[[j, p]] = perm[[p, j]]
        below = rows > j
        right = cols > j
        prow = fetch(LU, [j], np.concatenate([[j], cols[right]]) if below.any() else [])
        needs_col = below.any() and (right.any() or cj is not None)
        pcol = fetch(LU, rows[below], [j] if needs_col else [])
        if not needs_col:
            continue
        lcol = pcol[:, 0] / prow[0, 0]
        if cj is not None:
            LU.local[below, cj] = lcol
        LU.local[np.ix_(below, right)] -= np.outer(lcol, prow[0, 1:])
    return LU, perm


def invert(S: DistMatrix) -> DistMatrix:
    """Inverse through pivoted LU and two triangular solves against P I."""
    LU, perm = lu_factor(S)
    rhs = S.empty_like()
    rows, cols = rhs.index_sets()
    rhs.local[...] = perm[rows][:, None] == cols[None, :]
    Y = triangular_solve(LU, rhs, lower=True, unit=True)
    return triangular_solve(LU, Y, lower=False)


# -- generalized symmetric eigenproblem --------------------------------------


@dataclass
class EigResult:
    gamma: np.ndarray  # ascending, replicated
    S: DistMatrix  # B-orthonormal eigenvectors, columns ordered as gamma


def dense_generalized_eig(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference solver for A x = g B x: Cholesky of B, standard symmetric problem, back-transform."""
    l, info = lapack.dpotrf(np.asarray(b, dtype=float), lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(int(info), "B")
    c = solve_triangular(l, a, lower=True)
    c = solve_triangular(l, c.T, lower=True)
    c = 0.5 * (c + c.T)
    w, v = np.linalg.eigh(c)
    return w, solve_triangular(l, v, lower=True, trans="T")


def eig_errors(a: np.ndarray, b: np.ndarray, w: np.ndarray, s: np.ndarray) -> tuple[float, float]:
    """Worst scaled residual ``|A s_k - g_k B s_k| / (|A|_F + |g_k| |B|_F)`` and ``max|S^T B S - I|``."""
    if w.size == 0:
        return 0.0, 0.0
    r = np.linalg.norm(a @ s - (b @ s) * w, axis=0)
    scale = np.linalg.norm(a) + np.abs(w) * np.linalg.norm(b)
    resid = float(np.max(r / np.where(scale > 0, scale, 1.0)))
    orth = float(np.max(np.abs(s.T @ b @ s - np.eye(len(w)))))
    return resid, orth


def generalized_eig(A: DistMatrix, B: DistMatrix, root: int = 0) -> EigResult:
    """All eigenpairs of the symmetric-definite pencil (A, B).

    The pencil is gathered on ``root`` and solved there; eigenvectors are
    scattered back in A's layout and eigenvalues replicated.
    """
    ctx = world()
    n = _require_square(A)
    if B.shape != (n, n):
        raise ValueError(f"pencil dims differ: A {A.shape}, B {B.shape}")
    a = gather_to_root(A, root)
    b = gather_to_root(B, root)
    msg = None
    if ctx.rank == root:
        try:
            w, s = dense_generalized_eig(a, b)
            if ctx.debug:
                resid, orth = eig_errors(a, b, w, s)
                if resid > EIG_TOL or orth > EIG_TOL:
                    logger.warning("eigenpair check failed: residual %.3g, B-orthonormality %.3g", resid, orth)
            msg = ("ok", w, s)
        except NotPositiveDefiniteError as exc:
            msg = ("npd", exc.pivot)
    status = ctx.bcast(msg[:2] if msg and msg[0] == "ok" else msg, root)
    if status[0] == "npd":
        raise NotPositiveDefiniteError(status[1], "B")
    S = scatter_from_root(msg[2] if ctx.rank == root else None, A.empty_like(), root)
    return EigResult(np.asarray(status[1]), S)


# -- comparison helpers ------------------------------------------------------


def rel_diff(x, y) -> float:
    """max|x - y| / max|y| (0 when both vanish)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    scale = np.max(np.abs(y)) if y.size else 0.0
    err = np.max(np.abs(x - y)) if x.size else 0.0
    if scale == 0.0:
        return float(err)
    return float(err / scale)


def canonical_signs(S: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    S = np.array(S, dtype=float)
    if S.size == 0:
        return S
    idx = np.argmax(np.abs(S), axis=0)
    sign = np.sign(S[idx, np.arange(S.shape[1])])
    sign[sign == 0] = 1.0
    return S * sign


def eigen_clusters(gamma, rtol: float = 1e-9) -> list[np.ndarray]:
    """Index groups of eigenvalues within ``rtol * max|gamma|`` of their neighbour."""
    gamma = np.asarray(gamma)
    if gamma.size == 0:
        return []
    tol = rtol * np.max(np.abs(gamma))
    breaks = np.flatnonzero(np.diff(gamma) > tol) + 1
    return np.split(np.arange(gamma.size), breaks)


def eigvec_mismatch(S1: np.ndarray, S2: np.ndarray, gamma, rtol: float = 1e-9) -> float:
    """Largest relative difference between eigenvector sets, modulo sign and degenerate rotation.

    Single vectors are compared after aligning their signs (through the
    sign of their inner product, which stays well defined when several
    entries tie for the largest magnitude, as they do on symmetric meshes);
    degenerate clusters through the basis-independent product ``S_c S_c^T``.
    """
    scale = max(np.max(np.abs(S2)), np.finfo(float).tiny)
    worst = 0.0
    for grp in eigen_clusters(gamma, rtol):
        if grp.size == 1:
            a, b = S1[:, grp[0]], S2[:, grp[0]]
            d = a - b if a @ b >= 0 else a + b
            worst = max(worst, float(np.max(np.abs(d))) / scale)
        else:
            p1 = S1[:, grp] @ S1[:, grp].T
            p2 = S2[:, grp] @ S2[:, grp].T
            worst = max(worst, float(np.max(np.abs(p1 - p2))) / scale**2)
    return worst

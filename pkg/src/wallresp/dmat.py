"""Distributed matrix containers and layout conversion.

Every supported layout stores, on each rank, the Cartesian sub-block
``G[rows_r, cols_r]`` of the global matrix ``G`` for two ascending index
sets.  That covers block-cyclic, row-striped, column-striped and replicated
storage alike, so a single collective primitive, :func:`fetch`, serves all
redistribution needs: each rank states which sub-block it wants and the
owners send exactly the intersecting pieces.  No rank ever assembles the
full matrix unless :func:`gather_to_root` is called explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .comm import world
from .grid import BlockCyclicDesc, ProcessGrid, local_extent, owned_indices

DTYPE = np.float64
DEFAULT_GATHER_CAP = 1 << 26  # elements; 512 MiB of float64


class GatherTooLarge(ValueError):
    pass


class DistMatrix:
    """Common interface of the distributed layouts."""

    local: np.ndarray
    replicated: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        raise NotImplementedError

    def index_sets(self, rank: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """0-based global (rows, cols) held by ``rank`` (default: this rank)."""
        raise NotImplementedError

    def empty_like(self, fill: float = 0.0) -> "DistMatrix":
        raise NotImplementedError

    def with_local(self, local: np.ndarray) -> "DistMatrix":
        out = self.empty_like()
        out.local[...] = local
        return out

    def copy(self) -> "DistMatrix":
        return self.with_local(self.local)


@dataclass
class BlockCyclicMatrix(DistMatrix):
    desc: BlockCyclicDesc
    local: np.ndarray

    def __post_init__(self):
        g = self.desc.grid
        ext = local_extent(self.desc, g.my_row, g.my_col)
        if self.local.shape != ext:
            raise ValueError(f"local buffer {self.local.shape} != local extent {ext}")

    @property
    def shape(self):
        return self.desc.M, self.desc.N

    @property
    def kind(self) -> str:
        return "bc"

    def index_sets(self, rank=None):
        d = self.desc
        g = d.grid if rank is None else d.grid.for_rank(rank)
        return (
            owned_indices(d.M, d.MB, g.my_row, g.p_r),
            owned_indices(d.N, d.NB, g.my_col, g.p_c),
        )

    def empty_like(self, fill=0.0):
        return BlockCyclicMatrix(self.desc, np.full(self.local.shape, fill, dtype=DTYPE))


def stripe_range(D: int, P: int, r: int) -> tuple[int, int]:
    """1-based inclusive [start, end] of rank r's chunk; end < start means empty."""
    s = math.ceil(D / P) if D else 0
    return min(r * s, D) + 1, min((r + 1) * s, D)


@dataclass
class StripedMatrix(DistMatrix):
    """Row- or column-contiguous distribution (or full replication when ``distrib`` is false)."""

    loc_mat: np.ndarray
    distrib: bool
    row_wise: bool
    ind_start: int
    ind_end: int
    step: int
    dim: tuple[int, int]
    nranks: int = 1
    rank: int = 0

    def __post_init__(self):
        self.dim = tuple(int(x) for x in self.dim)
        if self.step != self.ind_end - self.ind_start + 1:
            raise ValueError(
                f"step {self.step} inconsistent with [{self.ind_start}, {self.ind_end}]"
            )
        rows, cols = self.index_sets()
        if self.loc_mat.shape != (len(rows), len(cols)):
            raise ValueError(f"loc_mat {self.loc_mat.shape} != chunk {(len(rows), len(cols))}")

    @property
    def local(self):
        return self.loc_mat

    @local.setter
    def local(self, value):
        self.loc_mat = value

    @property
    def replicated(self):
        return not self.distrib

    @property
    def shape(self):
        return self.dim

    @property
    def kind(self) -> str:
        if not self.distrib:
            return "rep"
        return "row" if self.row_wise else "col"

    def chunk(self, rank: int) -> tuple[int, int]:
        D = self.dim[0] if self.row_wise else self.dim[1]
        if not self.distrib:
            return 1, D
        return stripe_range(D, self.nranks, rank)

    def index_sets(self, rank=None):
        r = self.rank if rank is None else rank
        s, e = self.chunk(r)
        M, N = self.dim
        span = np.arange(s - 1, e, dtype=np.int64)
        if self.row_wise:
            return span, np.arange(N, dtype=np.int64)
        return np.arange(M, dtype=np.int64), span

    def empty_like(self, fill=0.0):
        return StripedMatrix(
            np.full(self.loc_mat.shape, fill, dtype=DTYPE),
            self.distrib, self.row_wise, self.ind_start, self.ind_end,
            self.step, self.dim, self.nranks, self.rank,
        )


# -- constructors -------------------------------------------------------------


def create_block_cyclic(M, N, MB, NB, grid: ProcessGrid | None = None, fill=0.0) -> BlockCyclicMatrix:
    if grid is None:
        ctx = world()
        grid = ctx.grid or ProcessGrid.create(ctx.nranks, ctx.rank)
    desc = BlockCyclicDesc(int(M), int(N), int(MB), int(NB), grid)
    ext = local_extent(desc, grid.my_row, grid.my_col)
    return BlockCyclicMatrix(desc, np.full(ext, fill, dtype=DTYPE))


def create_striped(M, N, row_wise=True, P=None, *, distrib=True, rank=None, fill=0.0) -> StripedMatrix:
    ctx = world()
    P = ctx.nranks if P is None else P
    rank = ctx.rank if rank is None else rank
    D = M if row_wise else N
    s, e = stripe_range(D, P, rank) if distrib else (1, D)
    n = e - s + 1
    shape = (n, N) if row_wise else (M, n)
    return StripedMatrix(np.full(shape, fill, dtype=DTYPE), distrib, row_wise, s, e, n, (M, N), P, rank)


def create_replicated(M, N, fill=0.0) -> StripedMatrix:
    return create_striped(M, N, True, distrib=False, fill=fill)


def create_layout(kind: str, M: int, N: int, NB: int = 64, fill=0.0) -> DistMatrix:
    """Empty matrix in one of the layouts ``bc``, ``row``, ``col``, ``rep``."""
    if kind == "bc":
        return create_block_cyclic(M, N, NB, NB, fill=fill)
    if kind == "row":
        return create_striped(M, N, True, fill=fill)
    if kind == "col":
        return create_striped(M, N, False, fill=fill)
    if kind == "rep":
        return create_replicated(M, N, fill=fill)
    raise ValueError(f"unknown layout {kind!r}")


def from_global(dense: np.ndarray, like: DistMatrix) -> DistMatrix:
    """Local extraction from a matrix every rank already holds in full."""
    dense = np.asarray(dense, dtype=DTYPE)
    if dense.shape != like.shape:
        raise ValueError(f"dense shape {dense.shape} != layout shape {like.shape}")
    rows, cols = like.index_sets()
    return like.with_local(dense[np.ix_(rows, cols)])


# -- collective data movement -------------------------------------------------


def _match(wanted: np.ndarray, mine: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions in ``wanted`` and in sorted ``mine`` of their common indices."""
    if len(mine) == 0 or len(wanted) == 0:
        e = np.empty(0, dtype=np.int64)
        return e, e
    pos = np.searchsorted(mine, wanted)
    pos_c = np.minimum(pos, len(mine) - 1)
    hit = mine[pos_c] == wanted
    return np.nonzero(hit)[0], pos_c[hit]


def fetch(A: DistMatrix, rows, cols) -> np.ndarray:
    """Collective: every rank receives ``A[rows, cols]`` for its own requested indices."""
    ctx = world()
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    M, N = A.shape
    if (rows.size and (rows.min() < 0 or rows.max() >= M)) or (
        cols.size and (cols.min() < 0 or cols.max() >= N)
    ):
        raise IndexError(f"fetch outside a {M}x{N} matrix")
    wants = ctx.allgather((rows, cols))
    if A.replicated:
        ctx.alltoall([None] * ctx.nranks)
        return A.local[np.ix_(rows, cols)].copy()
    my_r, my_c = A.index_sets()
    outgoing = []
    for wr, wc in wants:
        rw, rm = _match(wr, my_r)
        cw, cm = _match(wc, my_c)
        if rw.size and cw.size:
            outgoing.append((rw, cw, A.local[np.ix_(rm, cm)]))
        else:
            outgoing.append(None)
    out = np.zeros((rows.size, cols.size), dtype=DTYPE)
    for item in ctx.alltoall(outgoing):
        if item is not None:
            rw, cw, block = item
            out[np.ix_(rw, cw)] = block
    return out


def redistribute(A: DistMatrix, target: DistMatrix) -> DistMatrix:
    """Copy ``A``'s values into the layout of ``target`` (same global shape)."""
    if A.shape != target.shape:
        raise ValueError(f"cannot redistribute {A.shape} into {target.shape}")
    rows, cols = target.index_sets()
    return target.with_local(fetch(A, rows, cols))


def redistribute_bc_to_striped(A: BlockCyclicMatrix, row_wise: bool = True) -> StripedMatrix:
    M, N = A.shape
    return redistribute(A, create_striped(M, N, row_wise))


def redistribute_striped_to_bc(S: StripedMatrix, MB: int = 64, NB: int | None = None) -> BlockCyclicMatrix:
    M, N = S.shape
    return redistribute(S, create_block_cyclic(M, N, MB, NB or MB))


def scatter_from_root(dense: np.ndarray | None, like: DistMatrix, root: int = 0) -> DistMatrix:
    """Root holds the full matrix; every rank receives its piece of ``like``'s layout."""
    ctx = world()
    if ctx.rank == root:
        dense = np.asarray(dense, dtype=DTYPE)
        if dense.shape != like.shape:
            raise ValueError(f"dense shape {dense.shape} != layout shape {like.shape}")
        pieces = []
        for r in range(ctx.nranks):
            rows, cols = like.index_sets(r)
            pieces.append(dense[np.ix_(rows, cols)])
    else:
        pieces = [None] * ctx.nranks
    got = ctx.alltoall(pieces)
    return like.with_local(got[root])


def gather_to_root(A: DistMatrix, root: int = 0, cap: int = DEFAULT_GATHER_CAP) -> np.ndarray | None:
    """Assemble the global matrix on ``root``; other ranks get ``None``."""
    ctx = world()
    M, N = A.shape
    if M * N > cap:
        raise GatherTooLarge(
            f"refusing to gather a {M}x{N} matrix ({8 * M * N} bytes) onto one rank; cap is {cap} elements"
        )
    if A.replicated:
        ctx.gather(None, root)
        return A.local.copy() if ctx.rank == root else None
    parts = ctx.gather((*A.index_sets(), A.local), root)
    if parts is None:
        return None
    out = np.zeros((M, N), dtype=DTYPE)
    for rows, cols, block in parts:
        out[np.ix_(rows, cols)] = block
    return out


def allgather_dense(A: DistMatrix) -> np.ndarray:
    """Every rank receives the full matrix (desk-scale convenience)."""
    M, N = A.shape
    return fetch(A, np.arange(M), np.arange(N))


def ownership_counts(A: DistMatrix) -> np.ndarray:
    """How many ranks store each global entry (debug instrumentation)."""
    ctx = world()
    sets = ctx.allgather(A.index_sets())
    counts = np.zeros(A.shape, dtype=np.int64)
    for rows, cols in sets:
        counts[np.ix_(rows, cols)] += 1
    return counts


def local_nbytes(*mats: DistMatrix) -> int:
    return sum(m.local.nbytes for m in mats)


def global_trace(A: DistMatrix) -> float:
    """Sum of the diagonal, reduced in rank order."""
    ctx = world()
    rows, cols = A.index_sets()
    rw, rc = _match(rows, cols)
    part = float(A.local[rw, rc].sum()) if rw.size else 0.0
    if A.replicated:
        return part
    return float(ctx.allreduce_sum([part])[0])


def add_diagonal(A: DistMatrix, mu: float) -> DistMatrix:
    """A + mu * I (square)."""
    rows, cols = A.index_sets()
    rw, rc = _match(rows, cols)
    out = A.copy()
    out.local[rw, rc] += mu
    return out


def all_finite(A: DistMatrix) -> bool:
    ctx = world()
    ok = bool(np.isfinite(A.local).all())
    return all(ctx.allgather(ok))

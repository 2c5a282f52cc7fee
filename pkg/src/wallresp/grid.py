"""2D process grid and block-cyclic index arithmetic.

The scalar mapping functions take and return 1-based global and local
indices.  The ``*_indices`` helpers work on 0-based numpy index arrays and
are what the distributed containers use internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

DEFAULT_NB = 64


@dataclass(frozen=True)
class ProcessGrid:
    p_r: int
    p_c: int
    my_row: int = 0
    my_col: int = 0

    def __post_init__(self):
        if self.p_r < 1 or self.p_c < 1:
            raise ValueError(f"grid dims must be >= 1, got {self.p_r}x{self.p_c}")
        if not (0 <= self.my_row < self.p_r and 0 <= self.my_col < self.p_c):
            raise ValueError(
                f"coordinates ({self.my_row},{self.my_col}) outside {self.p_r}x{self.p_c} grid"
            )

    @property
    def size(self) -> int:
        return self.p_r * self.p_c

    def rank_of(self, pr: int, pc: int) -> int:
        """Row-major rank numbering."""
        return pr * self.p_c + pc

    def coords(self, rank: int) -> tuple[int, int]:
        return divmod(rank, self.p_c)

    def at(self, pr: int, pc: int) -> "ProcessGrid":
        return replace(self, my_row=pr, my_col=pc)

    def for_rank(self, rank: int) -> "ProcessGrid":
        return self.at(*self.coords(rank))

    @classmethod
    def create(cls, P: int, rank: int = 0, shape: tuple[int, int] | None = None) -> "ProcessGrid":
        p_r, p_c = shape or default_grid_shape(P)
        if p_r * p_c != P:
            raise ValueError(f"grid {p_r}x{p_c} does not cover {P} ranks")
        g = cls(p_r, p_c)
        return g.for_rank(rank)


def default_grid_shape(P: int) -> tuple[int, int]:
    """P_r = floor(sqrt(P)), P_c = P / P_r; P must factor exactly."""
    if P < 1:
        raise ValueError(f"P must be >= 1, got {P}")
    p_r = math.isqrt(P)
    if P % p_r:
        raise ValueError(
            f"P={P} does not factor as {p_r} x {P / p_r:g}; pass an explicit grid shape"
        )
    return p_r, P // p_r


@dataclass(frozen=True)
class BlockCyclicDesc:
    M: int
    N: int
    MB: int
    NB: int
    grid: ProcessGrid

    def __post_init__(self):
        if self.M < 0 or self.N < 0:
            raise ValueError(f"negative global dims {self.M}x{self.N}")
        if self.MB < 1 or self.NB < 1:
            raise ValueError(f"block sizes must be >= 1, got {self.MB}x{self.NB}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.M, self.N

    def for_rank(self, rank: int) -> "BlockCyclicDesc":
        return replace(self, grid=self.grid.for_rank(rank))

    def transposed(self) -> "BlockCyclicDesc":
        return replace(self, M=self.N, N=self.M, MB=self.NB, NB=self.MB)


def _check_global(i: int, j: int, d: BlockCyclicDesc) -> None:
    if not (1 <= i <= d.M and 1 <= j <= d.N):
        raise IndexError(f"global index ({i},{j}) outside 1..{d.M} x 1..{d.N}")


def owner_of(i: int, j: int, d: BlockCyclicDesc) -> tuple[int, int]:
    _check_global(i, j, d)
    return ((i - 1) // d.MB) % d.grid.p_r, ((j - 1) // d.NB) % d.grid.p_c


def _g2l(i: int, nb: int, nprocs: int) -> int:
    return ((i - 1) // (nb * nprocs)) * nb + (i - 1) % nb + 1


def global_to_local(i: int, j: int, d: BlockCyclicDesc) -> tuple[bool, int, int]:
    """Ownership flag and 1-based local coordinates on the descriptor's own grid position.

    Local coordinates are returned even when the entry is not owned; they are
    then the position the entry would occupy on its owner.
    """
    pr, pc = owner_of(i, j, d)
    owned = (pr, pc) == (d.grid.my_row, d.grid.my_col)
    return owned, _g2l(i, d.MB, d.grid.p_r), _g2l(j, d.NB, d.grid.p_c)


def numroc(n: int, nb: int, iproc: int, nprocs: int) -> int:
    """Number of the n indices owned by process ``iproc`` (source process 0)."""
    nblocks = n // nb
    count = (nblocks // nprocs) * nb
    extra = nblocks % nprocs
    if iproc < extra:
        count += nb
    elif iproc == extra:
        count += n % nb
    return count


def local_extent(d: BlockCyclicDesc, pr: int, pc: int) -> tuple[int, int]:
    if not (0 <= pr < d.grid.p_r and 0 <= pc < d.grid.p_c):
        raise ValueError(f"({pr},{pc}) is not on the {d.grid.p_r}x{d.grid.p_c} grid")
    return numroc(d.M, d.MB, pr, d.grid.p_r), numroc(d.N, d.NB, pc, d.grid.p_c)


def _l2g(li: int, nb: int, iproc: int, nprocs: int) -> int:
    blk, off = divmod(li - 1, nb)
    return (blk * nprocs + iproc) * nb + off + 1


def local_to_global(li: int, lj: int, d: BlockCyclicDesc) -> tuple[int, int]:
    g = d.grid
    m_loc, n_loc = local_extent(d, g.my_row, g.my_col)
    if not (1 <= li <= m_loc and 1 <= lj <= n_loc):
        raise IndexError(
            f"local index ({li},{lj}) outside extent {m_loc}x{n_loc} of process ({g.my_row},{g.my_col})"
        )
    return _l2g(li, d.MB, g.my_row, g.p_r), _l2g(lj, d.NB, g.my_col, g.p_c)


def owned_indices(n: int, nb: int, iproc: int, nprocs: int) -> np.ndarray:
    """0-based global indices owned by ``iproc``, in local storage order (ascending)."""
    idx = np.arange(n, dtype=np.int64)
    return idx[(idx // nb) % nprocs == iproc]


def ownership_table(d: BlockCyclicDesc) -> np.ndarray:
    """(M, N, 2) array holding the owning (pr, pc) of every global entry."""
    rows = (np.arange(d.M) // d.MB) % d.grid.p_r
    cols = (np.arange(d.N) // d.NB) % d.grid.p_c
    out = np.empty((d.M, d.N, 2), dtype=np.int64)
    out[..., 0] = rows[:, None]
    out[..., 1] = cols[None, :]
    return out

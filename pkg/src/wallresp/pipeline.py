"""Wall-response solver chain, consumer-side update and memory prediction."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import linalg
from .assemble import (
    InverseMultiquadric,
    assemble_harmonic,
    assemble_pairwise,
    assemble_resistance,
    generate_torus_mesh,
    harmonic_columns,
)
from .comm import world
from .dmat import (
    DistMatrix,
    add_diagonal,
    all_finite,
    create_block_cyclic,
    create_replicated,
    fetch,
    gather_to_root,
    global_trace,
    local_nbytes,
)
from .grid import DEFAULT_NB, BlockCyclicDesc, ProcessGrid, default_grid_shape, local_extent

logger = logging.getLogger(__name__)

WALL_R0, WALL_A = 3.0, 1.0
PLASMA_A = 0.6

STAGES = (
    "matrix_pp",
    "matrix_wp",
    "matrix_ww",
    "matrix_rw",
    "matrix_pe",
    "matrix_ep",
    "matrix_ew",
    "cholesky_solver",
    "a_pwe_s_computing",
    "a_ee_computing",
    "a_ew_computing",
    "a_we_computing",
    "matrix_multiplication",
    "simil_trafo",
    "a_je_computing",
    "a_ey_computing",
    "d_ee_computing",
    "s_ww_inversion",
)


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass
class SolverConfig:
    n_wu: int = 8
    n_wv: int = 8
    n_pu: int = 6
    n_pv: int = 6
    n_harm: int = 2
    N_bnd: int = 2
    eta: float = 1.0
    NB: int = DEFAULT_NB
    h: float = 0.1
    ridge: float = 1e-8
    chunk_limit: int = 2**28
    P: int = 1
    out: str | None = None

    def __post_init__(self):
        for name in ("n_wu", "n_wv", "n_pu", "n_pv", "n_harm", "N_bnd", "NB", "chunk_limit", "P"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if self.ridge < 0:
            raise ValueError(f"ridge scale must be >= 0, got {self.ridge}")

    @property
    def npot_w(self) -> int:
        return self.n_wu * self.n_wv

    @property
    def npot_p(self) -> int:
        return self.n_pu * self.n_pv

    @property
    def nd_bez(self) -> int:
        return harmonic_columns(self.n_harm, self.N_bnd)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, data) -> "SolverConfig":
        names = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, value in data.items():
            if key not in names:
                continue
            if value is None or key == "out":
                kw[key] = value
            elif key in ("eta", "h", "ridge"):
                kw[key] = float(value)
            else:
                kw[key] = int(value)
        return cls(**kw)


@dataclass
class StageRecord:
    stage: str
    seconds: float
    peak_bytes_per_rank: int


@dataclass
class ResponseSet:
    gamma: np.ndarray
    a_ye: DistMatrix
    a_ey: DistMatrix
    d_ee: DistMatrix
    s_ww_inv: DistMatrix
    S_ww: DistMatrix | None = None
    report: list[StageRecord] = field(default_factory=list)

    def records(self) -> list[DistMatrix]:
        """Matrices in on-disk order (gamma as an nd_w x 1 column)."""
        g = create_replicated(len(self.gamma), 1)
        g.local[:, 0] = self.gamma
        return [g, self.a_ye, self.a_ey, self.d_ee, self.s_ww_inv]

    def gather(self, root: int = 0) -> dict[str, np.ndarray] | None:
        out = {"gamma": self.gamma.copy()}
        for name in ("a_ye", "a_ey", "d_ee", "s_ww_inv", "S_ww"):
            m = getattr(self, name)
            if m is not None:
                out[name] = gather_to_root(m, root)
        return out if world().rank == root else None


class _StageClock:
    """Times stages (max over ranks) and records the resident bytes of live matrices."""

    def __init__(self):
        self.records: list[StageRecord] = []
        self.live: dict[str, DistMatrix] = {}
        self.peak = 0

    def run(self, stage, fn, *args):
        ctx = world()
        ctx.barrier()
        t0 = time.perf_counter()
        try:
            result = fn(*args)
        except (np.linalg.LinAlgError, ArithmeticError, ValueError) as exc:
            raise PipelineError(stage, str(exc)) from exc
        outs = result if isinstance(result, tuple) else (result,)
        for m in outs:
            if isinstance(m, DistMatrix) and not all_finite(m):
                raise PipelineError(stage, "non-finite values in result")
        elapsed = ctx.allreduce_max(time.perf_counter() - t0)
        fresh = [m for m in outs if isinstance(m, DistMatrix)]
        self.peak = max(self.peak, local_nbytes(*self.live.values(), *fresh))
        peak = int(ctx.allreduce_max(self.peak))
        self.records.append(StageRecord(stage, elapsed, peak))
        logger.debug("%s: %.3fs", stage, elapsed)
        return result

    def keep(self, **mats):
        self.live.update(mats)
        self.peak = max(self.peak, local_nbytes(*self.live.values()))

    def drop(self, *names):
        for n in names:
            self.live.pop(n, None)


def _ridge(A: DistMatrix, scale: float) -> DistMatrix:
    n = A.shape[0]
    if scale == 0.0 or n == 0:
        return A
    mu = scale * global_trace(A) / n
    return add_diagonal(A, mu)


def build_a_pwe(a_pp: DistMatrix, a_wp: DistMatrix, a_pe: DistMatrix) -> DistMatrix:
    """Solve a_pp X = [a_wp^T | a_pe]; columns 1..nd_w are the wall block."""
    npot_p = a_pp.shape[0]
    nd_w = a_wp.shape[0]
    nd_bez = a_pe.shape[1]
    if a_wp.shape[1] != npot_p or a_pe.shape[0] != npot_p:
        raise ValueError(f"inconsistent dims: a_pp {a_pp.shape}, a_wp {a_wp.shape}, a_pe {a_pe.shape}")
    NB = a_pp.desc.MB if hasattr(a_pp, "desc") else DEFAULT_NB
    rhs = create_block_cyclic(npot_p, nd_w + nd_bez, NB, NB)
    rows, cols = rhs.index_sets()
    wall = cols < nd_w
    a_pw = linalg.dist_transpose(a_wp)
    rhs.local[:, wall] = fetch(a_pw, rows, cols[wall])
    rhs.local[:, ~wall] = fetch(a_pe, rows, cols[~wall] - nd_w)
    return linalg.cholesky_solve(a_pp, rhs)


def split_a_pwe(a_pwe: DistMatrix, nd_w: int) -> tuple[DistMatrix, DistMatrix]:
    """Wall block a_pwe[:, :nd_w] and boundary block a_pwe[:, nd_w:] as separate matrices."""
    npot_p, ncol = a_pwe.shape
    NB = a_pwe.desc.MB if hasattr(a_pwe, "desc") else DEFAULT_NB
    wall = create_block_cyclic(npot_p, nd_w, NB, NB)
    bnd = create_block_cyclic(npot_p, ncol - nd_w, NB, NB)
    r, c = wall.index_sets()
    wall.local[...] = fetch(a_pwe, r, c)
    r, c = bnd.index_sets()
    bnd.local[...] = fetch(a_pwe, r, c + nd_w)
    return wall, bnd


def compute_products(a_ep, a_ew, a_wp, a_ww, a_pwe):
    """(a_ee, a_ew', a_we, M_ww) from the two column blocks of a_pwe."""
    nd_w = a_ww.shape[0]
    pwe_w, pwe_e = split_a_pwe(a_pwe, nd_w)
    return _products(a_ep, a_ew, a_wp, a_ww, pwe_w, pwe_e)


def _like(A: DistMatrix, M: int, N: int) -> DistMatrix:
    NB = A.desc.MB if hasattr(A, "desc") else DEFAULT_NB
    return create_block_cyclic(M, N, NB, NB)


def _products(a_ep, a_ew, a_wp, a_ww, pwe_w, pwe_e):
    nd_bez = a_ep.shape[0]
    nd_w = a_ww.shape[0]
    a_ee = linalg.dist_gemm(1.0, a_ep, pwe_e, 0.0, _like(a_ww, nd_bez, nd_bez))
    a_ew2 = linalg.dist_gemm(-1.0, a_ep, pwe_w, 1.0, a_ew)
    a_we = linalg.dist_gemm(1.0, a_wp, pwe_e, 0.0, _like(a_ww, nd_w, nd_bez))
    m_ww = linalg.dist_gemm(-1.0, a_wp, pwe_w, 1.0, a_ww)
    return a_ee, a_ew2, a_we, m_ww


def compute_response(gamma, S_ww, a_ew, a_we):
    """a_ye = (S^T a_we) / gamma row-wise, a_ey = a_ew S, d_ee = a_ey a_ye."""
    nd_w = S_ww.shape[0]
    nd_bez = a_we.shape[1]
    s_t = linalg.dist_transpose(S_ww)
    a_ye = linalg.row_scale(linalg.dist_gemm(1.0, s_t, a_we, 0.0, _like(S_ww, nd_w, nd_bez)), gamma)
    a_ey = linalg.dist_gemm(1.0, a_ew, S_ww, 0.0, _like(S_ww, nd_bez, nd_w))
    d_ee = linalg.dist_gemm(1.0, a_ey, a_ye, 0.0, _like(S_ww, nd_bez, nd_bez))
    return a_ye, a_ey, d_ee


def _symmetrize(A: DistMatrix) -> DistMatrix:
    t = linalg.dist_transpose(A)
    return A.with_local(0.5 * (A.local + t.local))


def solve_wall_response(cfg: SolverConfig) -> ResponseSet:
    """Collective: assemble, reduce and diagonalize the wall problem; return the responses."""
    ctx = world()
    if ctx.grid is None or ctx.grid.size != ctx.nranks:
        ctx.grid = ProcessGrid.create(ctx.nranks, ctx.rank)
    NB = cfg.NB
    wall = generate_torus_mesh(cfg.n_wu, cfg.n_wv, WALL_R0, WALL_A)
    plasma = generate_torus_mesh(cfg.n_pu, cfg.n_pv, WALL_R0, PLASMA_A)
    kern = InverseMultiquadric(cfg.h)
    nw, ne = wall.npot, cfg.nd_bez
    clock = _StageClock()

    def pairwise(a, b):
        out = create_block_cyclic(a.npot, b.npot, NB, NB)
        return assemble_pairwise(a, b, kern, True, out)

    a_pp = clock.run("matrix_pp", lambda: _ridge(pairwise(plasma, plasma), cfg.ridge))
    clock.keep(a_pp=a_pp)
    a_wp = clock.run("matrix_wp", pairwise, wall, plasma)
    clock.keep(a_wp=a_wp)
    a_ww = clock.run("matrix_ww", pairwise, wall, wall)
    clock.keep(a_ww=a_ww)
    b_rw = clock.run("matrix_rw", assemble_resistance, wall, cfg.eta, NB)
    clock.keep(b_rw=b_rw)
    a_pe = clock.run("matrix_pe", assemble_harmonic, plasma, cfg.n_harm, cfg.N_bnd, NB)
    clock.keep(a_pe=a_pe)
    a_ep = clock.run("matrix_ep", linalg.dist_transpose, a_pe)
    clock.keep(a_ep=a_ep)
    a_ew = clock.run(
        "matrix_ew", lambda: linalg.dist_transpose(assemble_harmonic(wall, cfg.n_harm, cfg.N_bnd, NB))
    )
    clock.keep(a_ew=a_ew)

    a_pwe = clock.run("cholesky_solver", build_a_pwe, a_pp, a_wp, a_pe)
    clock.keep(a_pwe=a_pwe)
    pwe_w, pwe_e = clock.run("a_pwe_s_computing", split_a_pwe, a_pwe, nw)
    clock.drop("a_pwe", "a_pp", "a_pe")
    clock.keep(pwe_w=pwe_w, pwe_e=pwe_e)

    a_ee = clock.run("a_ee_computing", linalg.dist_gemm, 1.0, a_ep, pwe_e, 0.0, _like(a_ww, ne, ne))
    a_ew = clock.run("a_ew_computing", linalg.dist_gemm, -1.0, a_ep, pwe_w, 1.0, a_ew)
    a_we = clock.run("a_we_computing", linalg.dist_gemm, 1.0, a_wp, pwe_e, 0.0, _like(a_ww, nw, ne))
    clock.keep(a_ee=a_ee, a_ew=a_ew, a_we=a_we)
    m_ww = clock.run(
        "matrix_multiplication",
        lambda: _ridge(_symmetrize(linalg.dist_gemm(-1.0, a_wp, pwe_w, 1.0, a_ww)), cfg.ridge),
    )
    clock.drop("a_ww", "a_wp", "pwe_w", "pwe_e", "a_ep")
    clock.keep(m_ww=m_ww)

    eig = clock.run("simil_trafo", linalg.generalized_eig, m_ww, b_rw)
    gamma, S = eig.gamma, eig.S
    clock.keep(S=S)
    if not np.all(np.isfinite(gamma)):
        raise PipelineError("simil_trafo", "non-finite eigenvalues")
    zero = np.flatnonzero(gamma == 0)
    if zero.size:
        raise PipelineError("a_je_computing", f"zero eigenvalue for mode {int(zero[0]) + 1}")

    s_t = linalg.dist_transpose(S)
    a_ye = clock.run(
        "a_je_computing",
        lambda: linalg.row_scale(linalg.dist_gemm(1.0, s_t, a_we, 0.0, _like(S, nw, ne)), gamma),
    )
    a_ey = clock.run("a_ey_computing", linalg.dist_gemm, 1.0, a_ew, S, 0.0, _like(S, ne, nw))
    d_ee = clock.run("d_ee_computing", linalg.dist_gemm, 1.0, a_ey, a_ye, 0.0, _like(S, ne, ne))
    clock.keep(a_ye=a_ye, a_ey=a_ey, d_ee=d_ee)
    s_inv = clock.run("s_ww_inversion", linalg.invert, S)
    clock.keep(s_inv=s_inv)
    return ResponseSet(gamma, a_ye, a_ey, d_ee, s_inv, S_ww=S, report=clock.records)


def update_response(a_ee: DistMatrix, a_ey: DistMatrix, response_m_a: DistMatrix) -> DistMatrix:
    """response_m_e = a_ee + a_ey @ response_m_a, replicated on every rank."""
    M, N = a_ee.shape
    out = create_replicated(M, N)
    rows, cols = out.index_sets()
    out.local[...] = fetch(a_ee, rows, cols)
    return linalg.dist_gemm(1.0, a_ey, response_m_a, 1.0, out)


# -- memory prediction --------------------------------------------------------


@dataclass
class MemoryPrediction:
    total_bytes: int
    per_rank_bytes: int  # max over ranks
    rank_bytes: list[int]
    table: list[tuple[str, int, int, int]]  # (name, M, N, bytes)


def pipeline_matrices(cfg: SolverConfig) -> list[tuple[str, int, int]]:
    """Persistent matrices of the solver chain and their global dims."""
    nw, npp, ne = cfg.npot_w, cfg.npot_p, cfg.nd_bez
    return [
        ("a_pp", npp, npp),
        ("a_wp", nw, npp),
        ("a_ww", nw, nw),
        ("b_rw", nw, nw),
        ("a_pe", npp, ne),
        ("a_ep", ne, npp),
        ("a_ew", ne, nw),
        ("a_pwe", npp, nw + ne),
        ("a_ee", ne, ne),
        ("a_we", nw, ne),
        ("s_ww", nw, nw),
        ("s_ww_inv", nw, nw),
        ("a_ye", nw, ne),
        ("a_ey", ne, nw),
        ("d_ee", ne, ne),
        ("gamma", nw, 1),
    ]


def predict_memory(
    cfg: SolverConfig | None,
    P: int,
    matrices: list[tuple[str, int, int]] | None = None,
    NB: int | None = None,
    grid_shape: tuple[int, int] | None = None,
) -> MemoryPrediction:
    """Bytes held by the listed matrices in total and on each of P ranks (block-cyclic)."""
    if matrices is None:
        if cfg is None:
            raise ValueError("need a config or an explicit matrix list")
        matrices = pipeline_matrices(cfg)
    NB = NB or (cfg.NB if cfg is not None else DEFAULT_NB)
    p_r, p_c = grid_shape or default_grid_shape(P)
    grid = ProcessGrid(p_r, p_c)
    rank_bytes = [0] * P
    table = []
    total = 0
    for name, M, N in matrices:
        nbytes = 8 * M * N
        table.append((name, M, N, nbytes))
        total += nbytes
        desc = BlockCyclicDesc(M, N, NB, NB, grid)
        for r in range(P):
            m_loc, n_loc = local_extent(desc, *grid.coords(r))
            rank_bytes[r] += 8 * m_loc * n_loc
    return MemoryPrediction(total, max(rank_bytes), rank_bytes, table)

"""Synthetic torus meshes and matrix-free pairwise assembly.

The assembly loop never holds the triangle-by-triangle kernel matrix.  Each
rank first filters the (triangle, corner) pairs whose potential rows and
columns it owns, then evaluates the kernel only on the triangles touched by
those corners, in row tiles, and scatters the edge-weighted contributions
straight into its block-cyclic tile.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .comm import world
from .dmat import BlockCyclicMatrix, create_block_cyclic

TILE = 128


@dataclass(frozen=True)
class TriMesh:
    """Triangulated closed surface.

    ``ipot`` holds 0-based potential indices, so the matrix row of corner
    ``(i, k)`` is ``ipot[i, k] + 1`` in 1-based terms.
    """

    vertices: np.ndarray  # (nv, 3)
    tri2vert: np.ndarray  # (ntri, 3)
    ipot: np.ndarray  # (ntri, 3)
    edge: np.ndarray  # (ntri, 3, 3) edge vector opposite each corner
    centroid: np.ndarray  # (ntri, 3)
    area: np.ndarray  # (ntri,)
    npot: int
    theta: np.ndarray  # poloidal angle per potential
    phi: np.ndarray  # toroidal angle per potential

    @property
    def ntri(self) -> int:
        return len(self.tri2vert)


def generate_torus_mesh(n_u: int, n_v: int, R0: float = 3.0, a: float = 1.0) -> TriMesh:
    """Periodic (n_u toroidal x n_v poloidal) quad grid, two triangles per quad."""
    if n_u < 1 or n_v < 1:
        raise ValueError(f"mesh resolution must be >= 1, got n_u={n_u}, n_v={n_v}")
    if not (0 < a < R0):
        raise ValueError(f"need 0 < minor radius < major radius, got a={a}, R0={R0}")
    iu, iv = np.meshgrid(np.arange(n_u), np.arange(n_v), indexing="ij")
    phi = 2 * np.pi * iu.ravel() / n_u
    theta = 2 * np.pi * iv.ravel() / n_v
    R = R0 + a * np.cos(theta)
    vertices = np.column_stack([R * np.cos(phi), R * np.sin(phi), a * np.sin(theta)])

    def vid(u, v):
        return (u % n_u) * n_v + (v % n_v)

    u, v = iu.ravel(), iv.ravel()
    p00, p10, p11, p01 = vid(u, v), vid(u + 1, v), vid(u + 1, v + 1), vid(u, v + 1)
    tri = np.empty((2 * n_u * n_v, 3), dtype=np.int64)
    tri[0::2] = np.column_stack([p00, p10, p11])
    tri[1::2] = np.column_stack([p00, p11, p01])

    return mesh_from_triangles(vertices, tri, theta=theta, phi=phi)


def mesh_from_triangles(vertices, tri2vert, theta=None, phi=None) -> TriMesh:
    """Mesh with one potential per vertex from explicit coordinates."""
    vertices = np.asarray(vertices, dtype=float)
    tri = np.asarray(tri2vert, dtype=np.int64)
    xyz = vertices[tri]
    edge = np.roll(xyz, -2, axis=1) - np.roll(xyz, -1, axis=1)
    cross = np.cross(xyz[:, 1] - xyz[:, 0], xyz[:, 2] - xyz[:, 0])
    nv = len(vertices)
    return TriMesh(
        vertices=vertices,
        tri2vert=tri,
        ipot=tri.copy(),
        edge=edge,
        centroid=xyz.mean(axis=1),
        area=0.5 * np.linalg.norm(cross, axis=1),
        npot=nv,
        theta=np.zeros(nv) if theta is None else np.asarray(theta, dtype=float),
        phi=np.zeros(nv) if phi is None else np.asarray(phi, dtype=float),
    )


def write_mesh(mesh: TriMesh, path) -> None:
    """Plain-text dump: vertex block then 1-based triangle block."""
    with open(path, "w") as fh:
        fh.write(f"# vertices {len(mesh.vertices)}\n")
        np.savetxt(fh, mesh.vertices, fmt="%.17g")
        fh.write(f"# triangles {mesh.ntri}\n")
        np.savetxt(fh, mesh.tri2vert + 1, fmt="%d")


# -- kernels ----------------------------------------------------------------


class PairKernel:
    """Scalar interaction between triangle ``i`` of one mesh and ``i1`` of another.

    Subclasses override :meth:`__call__`; overriding :meth:`block` with a
    vectorised version is optional.
    """

    symmetric = False

    def __call__(self, mesh_a: TriMesh, i: int, mesh_b: TriMesh, i1: int) -> float:
        raise NotImplementedError

    def block(self, mesh_a, I, mesh_b, I1) -> np.ndarray:
        return np.array([[self(mesh_a, i, mesh_b, i1) for i1 in I1] for i in I], dtype=float).reshape(
            len(I), len(I1)
        )


def induct_kernel_surrogate(mesh_a, i, mesh_b, i1, h) -> float:
    """Inverse multiquadric of the centroid distance: 1 / sqrt(|c_i - c_i1|^2 + h^2)."""
    if h <= 0:
        raise ValueError(f"regularization length must be positive, got {h}")
    d = mesh_a.centroid[i] - mesh_b.centroid[i1]
    return 1.0 / np.sqrt(d @ d + h * h)


class InverseMultiquadric(PairKernel):
    symmetric = True

    def __init__(self, h: float):
        if h <= 0:
            raise ValueError(f"regularization length must be positive, got {h}")
        self.h = h

    def __call__(self, mesh_a, i, mesh_b, i1):
        return induct_kernel_surrogate(mesh_a, i, mesh_b, i1, self.h)

    def block(self, mesh_a, I, mesh_b, I1):
        ca = mesh_a.centroid[np.asarray(I)]
        cb = mesh_b.centroid[np.asarray(I1)]
        d2 = (
            (ca * ca).sum(1)[:, None]
            + (cb * cb).sum(1)[None, :]
            - 2.0 * ca @ cb.T
        )
        np.maximum(d2, 0.0, out=d2)
        return 1.0 / np.sqrt(d2 + self.h * self.h)


# -- assembly ---------------------------------------------------------------


def _owned_corners(ipot: np.ndarray, owned: np.ndarray, npot: int):
    """(triangle, corner, local index) of corners whose potential is owned, in (i, k) order."""
    where = np.full(npot, -1, dtype=np.int64)
    where[owned] = np.arange(len(owned))
    loc = where[ipot]  # (ntri, 3)
    tri_idx, corner = np.nonzero(loc >= 0)
    return tri_idx, corner, loc[tri_idx, corner]


def assemble_pairwise(
    mesh_a: TriMesh,
    mesh_b: TriMesh,
    kernel: PairKernel,
    edge_weighted: bool,
    out: BlockCyclicMatrix,
) -> BlockCyclicMatrix:
    """Accumulate the pairwise kernel into ``out`` (in place; also returned).

    ``out[j, j1] += 0.5 * (e_A(i,k) . e_B(i1,k1)) * (k(A,i,B,i1) + k(B,i1,A,i))``
    over every corner pair mapping to potentials (j, j1); without edge
    weighting the dot product is replaced by 1.
    """
    if out.shape != (mesh_a.npot, mesh_b.npot):
        raise ValueError(
            f"output is {out.shape[0]}x{out.shape[1]}, meshes need {mesh_a.npot}x{mesh_b.npot}"
        )
    ctx = world()
    rows, cols = out.index_sets()
    ti, ki, li = _owned_corners(mesh_a.ipot, rows, mesh_a.npot)
    tj, kj, lj = _owned_corners(mesh_b.ipot, cols, mesh_b.npot)
    if ti.size == 0 or tj.size == 0:
        return out

    tri_c, inv_c = np.unique(tj, return_inverse=True)
    ecol = mesh_b.edge[tj, kj]  # (ncorner_c, 3)
    col_order = np.argsort(lj, kind="stable")
    col_lj = lj[col_order]
    col_starts = np.flatnonzero(np.r_[True, col_lj[1:] != col_lj[:-1]])
    col_targets = col_lj[col_starts]

    tri_r = np.unique(ti)
    evals = 0
    for t0 in range(0, len(tri_r), TILE):
        tile = tri_r[t0 : t0 + TILE]
        ksum = kernel.block(mesh_a, tile, mesh_b, tri_c) + kernel.block(mesh_b, tri_c, mesh_a, tile).T
        evals += 2 * ksum.size
        sel = (ti >= tile[0]) & (ti <= tile[-1])
        pos_r = np.searchsorted(tile, ti[sel])
        w = 0.5 * ksum[pos_r][:, inv_c]
        if edge_weighted:
            w *= mesh_a.edge[ti[sel], ki[sel]] @ ecol.T
        w = np.add.reduceat(w[:, col_order], col_starts, axis=1)
        r_loc = li[sel]
        r_order = np.argsort(r_loc, kind="stable")
        r_sorted = r_loc[r_order]
        r_starts = np.flatnonzero(np.r_[True, r_sorted[1:] != r_sorted[:-1]])
        w = np.add.reduceat(w[r_order], r_starts, axis=0)
        out.local[np.ix_(r_sorted[r_starts], col_targets)] += w
    ctx.stats["kernel_evals"] += evals
    ctx.stats["kernel_tri_pairs"] += len(tri_r) * len(tri_c)
    return out


def assemble_pairwise_dense_oracle(mesh_a, mesh_b, kernel, edge_weighted=True) -> np.ndarray:
    """Reference: materialise the full triangle-pair matrix, then run the corner loop."""
    dima = kernel.block(mesh_a, np.arange(mesh_a.ntri), mesh_b, np.arange(mesh_b.ntri))
    dima2 = kernel.block(mesh_b, np.arange(mesh_b.ntri), mesh_a, np.arange(mesh_a.ntri))
    out = np.zeros((mesh_a.npot, mesh_b.npot))
    for i in range(mesh_a.ntri):
        for k in range(3):
            j = mesh_a.ipot[i, k]
            for i1 in range(mesh_b.ntri):
                s = dima[i, i1] + dima2[i1, i]
                for k1 in range(3):
                    j1 = mesh_b.ipot[i1, k1]
                    wgt = mesh_a.edge[i, k] @ mesh_b.edge[i1, k1] if edge_weighted else 1.0
                    out[j, j1] += 0.5 * wgt * s
    return out


def harmonic_columns(n_harm: int, N_bnd: int) -> int:
    return 2 * n_harm * N_bnd


def assemble_harmonic(mesh: TriMesh, n_harm: int, N_bnd: int, NB: int = 64) -> BlockCyclicMatrix:
    """npot x (2 n_harm N_bnd) surrogate boundary coupling.

    Column ``2*((m-1)*N_bnd + b) + {0, 1}`` holds ``cos(m theta)`` / ``sin(m theta)``
    weighted by ``cos(b phi)`` for harmonic m = 1..n_harm and boundary element
    b = 0..N_bnd-1.
    """
    if n_harm < 1 or N_bnd < 1:
        raise ValueError(f"n_harm and N_bnd must be >= 1, got {n_harm}, {N_bnd}")
    out = create_block_cyclic(mesh.npot, harmonic_columns(n_harm, N_bnd), NB, NB)
    rows, cols = out.index_sets()
    m = cols // (2 * N_bnd) + 1
    b = (cols // 2) % N_bnd
    arg = m[None, :] * mesh.theta[rows][:, None]
    wave = np.where(cols % 2 == 0, np.cos(arg), np.sin(arg))
    out.local[...] = wave * np.cos(b[None, :] * mesh.phi[rows][:, None])
    return out


def assemble_resistance(mesh: TriMesh, eta, NB: int = 64) -> BlockCyclicMatrix:
    """Lumped P1 mass-matrix surrogate ``sum_i eta_i * area_i * (1 + delta_kk1) / 12``."""
    eta = np.broadcast_to(np.asarray(eta, dtype=float), (mesh.ntri,))
    if np.any(eta <= 0):
        raise ValueError("resistivity must be positive on every triangle")
    out = create_block_cyclic(mesh.npot, mesh.npot, NB, NB)
    rows, cols = out.index_sets()
    rmap = np.full(mesh.npot, -1, dtype=np.int64)
    rmap[rows] = np.arange(len(rows))
    cmap = np.full(mesh.npot, -1, dtype=np.int64)
    cmap[cols] = np.arange(len(cols))
    scale = eta * mesh.area / 12.0
    for k in range(3):
        for k1 in range(3):
            r = rmap[mesh.ipot[:, k]]
            c = cmap[mesh.ipot[:, k1]]
            ok = (r >= 0) & (c >= 0)
            np.add.at(out.local, (r[ok], c[ok]), scale[ok] * (2.0 if k == k1 else 1.0))
    return out

import numpy as np
import pytest

from wallresp import linalg
from wallresp.assemble import (
    InverseMultiquadric,
    PairKernel,
    assemble_harmonic,
    assemble_pairwise,
    assemble_pairwise_dense_oracle,
    assemble_resistance,
    generate_torus_mesh,
    harmonic_columns,
    induct_kernel_surrogate,
    mesh_from_triangles,
    write_mesh,
)
from wallresp.dmat import allgather_dense, create_block_cyclic, gather_to_root
from wallresp.grid import ProcessGrid

from oracles import pairwise_loop


class Skewed(PairKernel):
    """Deliberately non-symmetric kernel (no vectorised block)."""

    def __call__(self, ma, i, mb, i1):
        d = ma.centroid[i] - mb.centroid[i1]
        return 1.0 / (1.0 + d @ d) + 0.3 * ma.centroid[i][0] - 0.1 * mb.centroid[i1][2]


def assemble_dense(ma, mb, kern, edge_weighted=True, NB=4):
    out = create_block_cyclic(ma.npot, mb.npot, NB, NB)
    return allgather_dense(assemble_pairwise(ma, mb, kern, edge_weighted, out))


# -- meshes -------------------------------------------------------------------


def test_mesh_counts():
    assert generate_torus_mesh(1, 1).ntri == 2
    m = generate_torus_mesh(8, 4)
    assert (m.ntri, m.npot) == (64, 32)


def test_production_triangle_count():
    assert generate_torus_mesh(500, 500).ntri == 500_000


@pytest.mark.parametrize("nu,nv", [(2, 3), (5, 4), (8, 8)])
def test_mesh_invariants(nu, nv):
    m = generate_torus_mesh(nu, nv)
    assert np.array_equal(np.unique(m.ipot), np.arange(m.npot))
    assert np.allclose(m.edge.sum(axis=1), 0.0, atol=1e-14)
    assert np.all(np.isfinite(m.centroid))
    assert m.theta.shape == (m.npot,)
    # edge k is opposite corner k
    v = m.vertices[m.tri2vert]
    assert np.allclose(m.edge[:, 0], v[:, 2] - v[:, 1])


def test_mesh_deterministic():
    a, b = generate_torus_mesh(6, 5), generate_torus_mesh(6, 5)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.ipot, b.ipot)


@pytest.mark.parametrize("args", [(0, 3), (3, 0)])
def test_mesh_bad_resolution(args):
    with pytest.raises(ValueError):
        generate_torus_mesh(*args)


@pytest.mark.parametrize("R0,a", [(3.0, 3.0), (3.0, 0.0), (1.0, 2.0)])
def test_mesh_bad_radii(R0, a):
    with pytest.raises(ValueError):
        generate_torus_mesh(4, 4, R0, a)


def test_write_mesh(tmp_path):
    m = generate_torus_mesh(2, 3)
    p = tmp_path / "m.txt"
    write_mesh(m, p)
    text = p.read_text().splitlines()
    assert text[0] == "# vertices 6"
    assert text[7] == "# triangles 12"
    assert min(int(x) for line in text[8:] for x in line.split()) == 1


# -- kernel -------------------------------------------------------------------


def _two_points(p, q):
    return mesh_from_triangles(np.array([p, p, p, q, q, q], dtype=float), [[0, 1, 2], [3, 4, 5]])


def test_kernel_values():
    m = _two_points((0, 0, 0), (3, 4, 0))
    assert induct_kernel_surrogate(m, 0, m, 0, 0.5) == pytest.approx(2.0)
    assert induct_kernel_surrogate(m, 0, m, 1, 1e-9) == pytest.approx(0.2, rel=1e-12)
    assert induct_kernel_surrogate(m, 0, m, 1, 0.1) == induct_kernel_surrogate(m, 1, m, 0, 0.1)
    with pytest.raises(ValueError):
        induct_kernel_surrogate(m, 0, m, 1, 0.0)


def test_vectorised_kernel_matches_scalar(rng):
    ma, mb = generate_torus_mesh(3, 4), generate_torus_mesh(2, 5, a=0.6)
    k = InverseMultiquadric(0.2)
    blk = k.block(ma, np.arange(ma.ntri), mb, np.arange(mb.ntri))
    ref = [[k(ma, i, mb, j) for j in range(mb.ntri)] for i in range(ma.ntri)]
    assert np.allclose(blk, ref, rtol=1e-13, atol=0)


# -- pairwise assembly --------------------------------------------------------


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_matches_pairwise_loop(n):
    m = generate_torus_mesh(n, n)
    kern = InverseMultiquadric(0.1)
    ref = pairwise_loop(m, m, kern)
    assert linalg.rel_diff(assemble_dense(m, m, kern), ref) <= 1e-13
    assert linalg.rel_diff(assemble_pairwise_dense_oracle(m, m, kern), ref) <= 1e-13


@pytest.mark.parametrize("edge_weighted", [True, False])
def test_asymmetric_kernel_two_meshes(edge_weighted):
    ma, mb = generate_torus_mesh(3, 2), generate_torus_mesh(2, 4, a=0.6)
    ref = pairwise_loop(ma, mb, Skewed(), edge_weighted)
    got = assemble_dense(ma, mb, Skewed(), edge_weighted, NB=3)
    assert linalg.rel_diff(got, ref) <= 1e-13


def test_symmetric_output():
    m = generate_torus_mesh(5, 4)
    a = assemble_dense(m, m, InverseMultiquadric(0.1))
    assert np.max(np.abs(a - a.T)) <= 1e-13 * np.max(np.abs(a))


def test_psd_structure():
    m = generate_torus_mesh(6, 5)
    a = assemble_dense(m, m, InverseMultiquadric(0.3))
    assert np.linalg.eigvalsh(a).min() >= -1e-10 * np.abs(a).max()


def test_dimension_mismatch():
    m = generate_torus_mesh(2, 2)
    out = create_block_cyclic(m.npot + 1, m.npot, 2, 2, ProcessGrid(1, 1))
    with pytest.raises(ValueError):
        assemble_pairwise(m, m, InverseMultiquadric(0.1), True, out)


@pytest.mark.parametrize("P", [2, 4, 6])
def test_rank_independence(spmd, P):
    ma, mb = generate_torus_mesh(6, 5), generate_torus_mesh(4, 4, a=0.6)
    kern = InverseMultiquadric(0.1)
    ref = assemble_dense(ma, mb, kern, NB=3)

    def prog(ctx):
        out = create_block_cyclic(ma.npot, mb.npot, 3, 3)
        return gather_to_root(assemble_pairwise(ma, mb, kern, True, out))

    assert linalg.rel_diff(spmd(P, prog)[0], ref) <= 1e-10


def test_work_is_local(spmd):
    m = generate_torus_mesh(8, 8)
    kern = InverseMultiquadric(0.1)

    def prog(ctx):
        out = create_block_cyclic(m.npot, m.npot, 4, 4)
        assemble_pairwise(m, m, kern, True, out)
        rows, cols = out.index_sets()
        t_rows = np.isin(m.ipot, rows).any(axis=1).sum()
        t_cols = np.isin(m.ipot, cols).any(axis=1).sum()
        return ctx.stats["kernel_tri_pairs"], int(t_rows * t_cols), ctx.stats["kernel_evals"]

    res = spmd(4, prog)
    for pairs, expect, evals in res:
        assert pairs == expect
        assert evals == 2 * pairs
        assert pairs < m.ntri * m.ntri


# -- harmonic and resistance matrices ----------------------------------------


def test_harmonic_smallest():
    m = generate_torus_mesh(1, 1)
    h = assemble_harmonic(m, 1, 1).local
    assert h.shape == (1, 2)
    th = m.theta[0]
    assert np.allclose(h, [[np.cos(th), np.sin(th)]])


def test_harmonic_columns():
    assert harmonic_columns(11, 3) == 66
    m = generate_torus_mesh(4, 4)
    assert assemble_harmonic(m, 11, 1).local.shape == (16, 22)


def test_harmonic_orthogonality():
    m = generate_torus_mesh(1, 16)
    h = allgather_dense(assemble_harmonic(m, 3, 1))
    g = h.T @ h
    assert np.allclose(g - np.diag(np.diag(g)), 0.0, atol=1e-12)
    assert np.all(np.isfinite(h))


def test_resistance_single_triangle():
    m = mesh_from_triangles([[0, 0, 0], [1, 0, 0], [0, 2, 0]], [[0, 1, 2]])
    assert m.area[0] == pytest.approx(1.0)
    b = assemble_resistance(m, 1.0).local
    expect = np.full((3, 3), 1 / 12) + np.eye(3) / 12
    assert np.allclose(b, expect, rtol=1e-15)
    assert np.allclose(assemble_resistance(m, 2.5).local, 2.5 * expect)


def test_resistance_spd(spmd):
    m = generate_torus_mesh(4, 4)

    def prog(ctx):
        b = assemble_resistance(m, 1.0, NB=3)
        linalg.cholesky_factor(b)
        return gather_to_root(b)

    b = spmd(4, prog)[0]
    assert np.allclose(b, b.T)
    assert np.linalg.eigvalsh(b).min() > 0


def test_resistance_rejects_bad_eta():
    with pytest.raises(ValueError):
        assemble_resistance(generate_torus_mesh(2, 2), -1.0)

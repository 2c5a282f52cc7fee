import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wallresp import linalg
from wallresp.dmat import (
    allgather_dense,
    create_block_cyclic,
    create_layout,
    from_global,
    gather_to_root,
)
from wallresp.grid import ProcessGrid
from wallresp.linalg import (
    NotPositiveDefiniteError,
    SingularMatrixError,
    ZeroDivisorError,
)
from wallresp.pipeline import update_response

KINDS = ("bc", "row", "col", "rep")


def serial_bc(dense, NB=2):
    dense = np.asarray(dense, dtype=float)
    return from_global(dense, create_block_cyclic(*dense.shape, NB, NB, ProcessGrid(1, 1)))


def spd(rng, n, shift=1.0):
    x = rng.standard_normal((n, n))
    return x @ x.T / n + shift * np.eye(n)


# -- gemm -----------------------------------------------------------------------


def test_gemm_2x2():
    C = linalg.dist_gemm(1.0, serial_bc([[1, 2], [3, 4]], 1), serial_bc([[5, 6], [7, 8]], 1), 0.0, serial_bc(np.zeros((2, 2))))
    assert np.array_equal(C.local, [[19, 22], [43, 50]])


def test_gemm_identity(spmd, rng):
    B, C0 = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))

    def prog(ctx):
        out = []
        for k in KINDS:
            I = from_global(np.eye(6), create_layout(k, 6, 6, NB=4))
            Bd = from_global(B, create_layout("col", 6, 5))
            C = from_global(C0, create_layout("bc", 6, 5, NB=2))
            out.append(allgather_dense(linalg.dist_gemm(2.0, I, Bd, -1.0, C)))
        return out

    for got in spmd(4, prog)[0]:
        assert np.allclose(got, 2 * B - C0, rtol=0, atol=1e-14)


def test_gemm_shape_error():
    with pytest.raises(ValueError, match=r"\(2, 3\)"):
        linalg.dist_gemm(1.0, serial_bc(np.ones((2, 3))), serial_bc(np.ones((2, 3))), 0.0, serial_bc(np.ones((2, 3))))


def test_gemm_all_layouts(spmd, rng):
    A, B, C0 = rng.standard_normal((13, 9)), rng.standard_normal((9, 11)), rng.standard_normal((13, 11))
    ref = 0.7 * A @ B + 0.3 * C0

    def prog(ctx):
        worst = 0.0
        for ka, kb, kc in itertools.product(KINDS, repeat=3):
            Ad = from_global(A, create_layout(ka, 13, 9, NB=2))
            Bd = from_global(B, create_layout(kb, 9, 11, NB=3))
            Cd = from_global(C0, create_layout(kc, 13, 11, NB=4))
            got = allgather_dense(linalg.dist_gemm(0.7, Ad, Bd, 0.3, Cd))
            worst = max(worst, linalg.rel_diff(got, ref))
        return worst

    assert max(spmd(4, prog)) <= 1e-12


def test_update_response_mixed_layouts(spmd, rng):
    a_ee, a_ey, m_a = rng.standard_normal((6, 6)), rng.standard_normal((6, 8)), rng.standard_normal((8, 6))

    def prog(ctx):
        r = update_response(
            from_global(a_ee, create_layout("row", 6, 6)),
            from_global(a_ey, create_layout("row", 6, 8)),
            from_global(m_a, create_layout("col", 8, 6)),
        )
        return r.kind, r.local

    for kind, local in spmd(3, prog):
        assert kind == "rep"
        assert linalg.rel_diff(local, a_ee + a_ey @ m_a) <= 1e-12


# -- transpose / row scaling ---------------------------------------------------


def test_transpose_fig(spmd):
    a = np.array([[10 * i + j for j in range(1, 10)] for i in range(1, 10)], dtype=float)

    def prog(ctx):
        g = ProcessGrid.create(6, ctx.rank, (2, 3))
        A = from_global(a, create_block_cyclic(9, 9, 2, 2, g))
        T = linalg.dist_transpose(A)
        TT = linalg.dist_transpose(T)
        return gather_to_root(T), gather_to_root(TT), T.desc.shape

    t, tt, shape = spmd(6, prog)[0]
    assert np.array_equal(t, a.T)
    assert np.array_equal(tt, a)


@pytest.mark.parametrize("kind", KINDS)
def test_transpose_layouts(spmd, rng, kind):
    a = rng.standard_normal((5, 7))

    def prog(ctx):
        T = linalg.dist_transpose(from_global(a, create_layout(kind, 5, 7, NB=2)))
        return T.shape, allgather_dense(T)

    shape, t = spmd(4, prog)[0]
    assert shape == (7, 5) and np.array_equal(t, a.T)


def test_transpose_symmetric_exact(rng):
    s = rng.standard_normal((6, 6))
    s = s + s.T
    assert np.array_equal(linalg.dist_transpose(serial_bc(s)).local, s)


def test_row_scale():
    assert np.array_equal(linalg.row_scale(serial_bc([[2.0], [9.0]]), [2, 3]).local, [[1], [3]])
    A = serial_bc(np.arange(6.0).reshape(3, 2))
    assert np.array_equal(linalg.row_scale(A, np.ones(3)).local, A.local)
    with pytest.raises(ZeroDivisorError, match="row 2"):
        linalg.row_scale(A, [1.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        linalg.row_scale(A, [1.0, 2.0])


def test_row_scale_distributed(spmd, rng):
    a, d = rng.standard_normal((9, 4)), rng.uniform(1, 2, 9)

    def prog(ctx):
        return gather_to_root(linalg.row_scale(from_global(a, create_layout("bc", 9, 4, NB=2)), d))

    assert np.array_equal(spmd(4, prog)[0], a / d[:, None])


# -- Cholesky ------------------------------------------------------------------


def test_cholesky_2x2():
    X = linalg.cholesky_solve(serial_bc([[4, 2], [2, 3]], 1), serial_bc([[2], [1]], 1))
    assert np.allclose(X.local, [[0.5], [0.0]], atol=1e-15)


def test_cholesky_identity(rng):
    b = rng.standard_normal((5, 3))
    assert np.allclose(linalg.cholesky_solve(serial_bc(np.eye(5)), serial_bc(b)).local, b)


@pytest.mark.parametrize("NB", [1, 2, 4, 7, 64])
@pytest.mark.parametrize("P", [1, 4, 6])
def test_cholesky_random(spmd, rng, NB, P):
    a, b = spd(rng, 20), rng.standard_normal((20, 3))
    ref = np.linalg.solve(a, b)
    lref = np.linalg.cholesky(a)

    def prog(ctx):
        A = from_global(a, create_layout("bc", 20, 20, NB=NB))
        B = from_global(b, create_layout("bc", 20, 3, NB=NB))
        return gather_to_root(linalg.cholesky_solve(A, B)), gather_to_root(linalg.cholesky_factor(A))

    x, l = spmd(P, prog)[0]
    assert linalg.rel_diff(x, ref) <= 1e-10
    assert np.linalg.norm(a @ x - b) <= 1e-10 * np.linalg.norm(b)
    assert linalg.rel_diff(l, lref) <= 1e-12


def test_cholesky_not_spd(spmd):
    a = np.diag([1.0, 2.0, -1.0, 4.0])

    def prog(ctx):
        linalg.cholesky_factor(from_global(a, create_layout("bc", 4, 4, NB=1)))

    with pytest.raises(NotPositiveDefiniteError) as info:
        spmd(4, prog)
    assert info.value.pivot == 3


@pytest.mark.parametrize("lower,trans,unit", list(itertools.product([True, False], repeat=3)))
def test_triangular_solve(spmd, rng, lower, trans, unit):
    t = rng.standard_normal((11, 11)) + 5 * np.eye(11)
    b = rng.standard_normal((11, 4))
    tri = np.tril(t) if lower else np.triu(t)
    if unit:
        np.fill_diagonal(tri, 1.0)
    op = tri.T if trans else tri

    def prog(ctx):
        T = from_global(t, create_layout("bc", 11, 11, NB=3))
        B = from_global(b, create_layout("bc", 11, 4, NB=3))
        return gather_to_root(linalg.triangular_solve(T, B, lower=lower, trans=trans, unit=unit))

    x = spmd(4, prog)[0]
    assert np.linalg.norm(op @ x - b) <= 1e-12 * np.linalg.norm(b) * np.linalg.cond(op)


# -- LU / inverse --------------------------------------------------------------


def test_invert_small():
    assert np.array_equal(linalg.invert(serial_bc(np.eye(3))).local, np.eye(3))
    assert np.allclose(linalg.invert(serial_bc(np.diag([2.0, 4.0]))).local, np.diag([0.5, 0.25]), rtol=1e-15)


@pytest.mark.parametrize("NB", [1, 2, 4, 7, 64])
@pytest.mark.parametrize("P", [1, 2, 4])
def test_invert_random(spmd, rng, NB, P):
    s = rng.standard_normal((20, 20)) + 4 * np.eye(20)

    def prog(ctx):
        return gather_to_root(linalg.invert(from_global(s, create_layout("bc", 20, 20, NB=NB))))

    inv = spmd(P, prog)[0]
    assert np.max(np.abs(s @ inv - np.eye(20))) <= 1e-10
    assert linalg.rel_diff(inv, np.linalg.inv(s)) <= 1e-10


def test_lu_needs_pivoting():
    a = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 3.0], [4.0, 5.0, 0.0]])
    LU, perm = linalg.lu_factor(serial_bc(a, 2))
    lu = LU.local
    L = np.tril(lu, -1) + np.eye(3)
    U = np.triu(lu)
    assert np.allclose(L @ U, a[perm])
    assert np.allclose(linalg.invert(serial_bc(a, 2)).local @ a, np.eye(3))


def test_invert_singular(spmd):
    a = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [1.0, 0.0, 1.0]])

    def prog(ctx):
        linalg.invert(from_global(a, create_layout("bc", 3, 3, NB=1)))

    with pytest.raises(SingularMatrixError) as info:
        spmd(2, prog)
    assert info.value.pivot == 3


# -- generalized eigenproblem --------------------------------------------------


def test_eig_diagonal():
    r = linalg.generalized_eig(serial_bc(np.diag([2.0, 3.0])), serial_bc(np.eye(2)))
    assert np.allclose(r.gamma, [2, 3])
    assert np.allclose(np.abs(r.S.local), np.eye(2))
    r = linalg.generalized_eig(serial_bc(2 * np.eye(2)), serial_bc(np.diag([1.0, 2.0])))
    assert np.allclose(r.gamma, [1, 2])


def test_eig_b_not_spd():
    with pytest.raises(NotPositiveDefiniteError):
        linalg.generalized_eig(serial_bc(np.eye(2)), serial_bc(np.diag([1.0, -1.0])))


def test_eig_b_not_spd_all_ranks(spmd):
    def prog(ctx):
        linalg.generalized_eig(
            from_global(np.eye(4), create_layout("bc", 4, 4, NB=1)),
            from_global(np.diag([1.0, 1.0, 0.0, 1.0]), create_layout("bc", 4, 4, NB=1)),
        )

    with pytest.raises(NotPositiveDefiniteError):
        spmd(4, prog)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 24), seed=st.integers(0, 2**31))
def test_eig_contract(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n))
    a = a + a.T
    b = spd(rng, n, shift=0.5)
    r = linalg.generalized_eig(serial_bc(a, 4), serial_bc(b, 4))
    resid, orth = linalg.eig_errors(a, b, r.gamma, r.S.local)
    assert resid <= 1e-8 and orth <= 1e-8
    assert np.all(np.diff(r.gamma) >= 0)


def test_eig_rank_invariance(spmd, rng):
    n = 18
    a = rng.standard_normal((n, n))
    a = a + a.T
    # a doubly degenerate pair forces the projector comparison
    w, v = np.linalg.eigh(a)
    w[3] = w[4]
    a = (v * w) @ v.T
    a = 0.5 * (a + a.T)
    b = np.eye(n)

    def prog(ctx):
        r = linalg.generalized_eig(
            from_global(a, create_layout("bc", n, n, NB=4)), from_global(b, create_layout("bc", n, n, NB=4))
        )
        return r.gamma, gather_to_root(r.S)

    g1, s1 = spmd(1, prog)[0]
    g4, s4 = spmd(4, prog)[0]
    assert linalg.rel_diff(g4, g1) <= 1e-10
    assert linalg.eigvec_mismatch(s4, s1, g1) <= 1e-10
    assert any(len(c) == 2 for c in linalg.eigen_clusters(g1))


def test_eigvec_mismatch_modulo_sign_and_rotation():
    S = np.linalg.qr(np.random.default_rng(1).standard_normal((5, 5)))[0]
    gamma = np.array([1.0, 2.0, 2.0, 3.0, 4.0])
    c, s = np.cos(0.4), np.sin(0.4)
    R = np.eye(5)
    R[1:3, 1:3] = [[c, -s], [s, c]]
    S2 = (S @ R) * np.array([-1, 1, 1, -1, 1])
    assert linalg.eigvec_mismatch(S2, S, gamma) <= 1e-14
    S3 = S.copy()
    S3[:, 0] = S[:, 3]
    assert linalg.eigvec_mismatch(S3, S, gamma) > 0.1


def test_canonical_signs():
    S = np.array([[1.0, -3.0], [-2.0, 1.0]])
    assert np.array_equal(linalg.canonical_signs(S), [[-1.0, 3.0], [2.0, -1.0]])

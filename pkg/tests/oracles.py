"""Literal loop-form reference implementations used by the tests.

They are deliberately naive: plain Python loops over gathered dense
matrices, with no shared code path with the library.
"""

import numpy as np


def pairwise_loop(ma, mb, kern, edge_weighted=True):
    """Corner loop over a fully materialised triangle-pair table."""
    dima = np.array([[kern(ma, i, mb, i1) for i1 in range(mb.ntri)] for i in range(ma.ntri)])
    dima2 = np.array([[kern(mb, i1, ma, i) for i in range(ma.ntri)] for i1 in range(mb.ntri)])
    out = np.zeros((ma.npot, mb.npot))
    for i in range(ma.ntri):
        for k in range(3):
            j = ma.ipot[i, k]
            for i1 in range(mb.ntri):
                for k1 in range(3):
                    j1 = mb.ipot[i1, k1]
                    if edge_weighted:
                        ea, eb = ma.edge[i, k], mb.edge[i1, k1]
                        w = ea[0] * eb[0] + ea[1] * eb[1] + ea[2] * eb[2]
                    else:
                        w = 1.0
                    out[j, j1] += 0.5 * w * (dima[i, i1] + dima2[i1, i])
    return out


def product_loops(a_ep, a_ew, a_wp, a_ww, a_pwe):
    """Triple loops for a_ee, a_ew', a_we and the effective wall matrix."""
    nd_bez, npot_p = a_ep.shape
    nd_w = a_ww.shape[0]
    a_ee = np.zeros((nd_bez, nd_bez))
    a_ew = np.array(a_ew, dtype=float)
    a_we = np.zeros((nd_w, nd_bez))
    m_ww = np.array(a_ww, dtype=float)
    for i in range(nd_bez):
        for k in range(nd_bez):
            for j in range(npot_p):
                a_ee[i, k] = a_ee[i, k] + a_ep[i, j] * a_pwe[j, k + nd_w]
    for i in range(nd_bez):
        for k in range(nd_w):
            for j in range(npot_p):
                a_ew[i, k] = a_ew[i, k] - a_ep[i, j] * a_pwe[j, k]
    for i in range(nd_w):
        for k in range(nd_bez):
            for j in range(npot_p):
                a_we[i, k] = a_we[i, k] + a_wp[i, j] * a_pwe[j, k + nd_w]
    for i in range(nd_w):
        for k in range(nd_w):
            for j in range(npot_p):
                m_ww[i, k] = m_ww[i, k] - a_wp[i, j] * a_pwe[j, k]
    return a_ee, a_ew, a_we, m_ww


def response_loops(gamma, S_ww, a_ew, a_we):
    """a_je, a_ey and d_ee exactly as the triple loops write them, gamma division included."""
    nd_w = S_ww.shape[1]
    nd_bez = a_we.shape[1]
    a_je = np.zeros((nd_w, nd_bez))
    for i in range(nd_w):
        for k in range(nd_bez):
            for j in range(S_ww.shape[0]):
                a_je[i, k] = a_je[i, k] + S_ww[j, i] * a_we[j, k]
    for i in range(nd_w):
        for k in range(nd_bez):
            a_je[i, k] = a_je[i, k] / gamma[i]
    a_ey = np.zeros((nd_bez, nd_w))
    for i in range(nd_bez):
        for k in range(nd_w):
            for j in range(S_ww.shape[0]):
                a_ey[i, k] = a_ey[i, k] + a_ew[i, j] * S_ww[j, k]
    d_ee = np.zeros((nd_bez, nd_bez))
    for i in range(nd_bez):
        for k in range(nd_bez):
            for j in range(nd_w):
                d_ee[i, k] = d_ee[i, k] + a_ey[i, j] * a_je[j, k]
    return a_je, a_ey, d_ee


def mode_aligned_diff(run, ref, rtol=1e-9, cond_cut=1e-6):
    """Compare a_ye, a_ey and s_ww_inv of two solver runs mode by mode.

    Each eigenmode is defined only up to sign (and, inside a degenerate
    cluster, up to rotation), so a_ye rows, a_ey columns and s_ww_inv rows
    are compared after aligning signs with the reference; degenerate
    clusters are compared through rotation-invariant products.

    Modes with gamma_k <= cond_cut * max|gamma| are kept apart: their a_ye
    row is divided by a ridge-sized eigenvalue, so its rounding error is
    amplified by max|gamma| / gamma_k.  Returns ``(worst, weak)`` where
    ``worst`` is the largest relative difference over everything else and
    ``weak`` lists ``(k, diff, bound)`` for the a_ye rows of those modes,
    with ``bound = sqrt(n) * eps * max|gamma| / gamma_k``.
    """
    from wallresp.linalg import eigen_clusters

    gamma = ref["gamma"]
    n = gamma.size
    gmax = np.max(np.abs(gamma))
    worst, weak = 0.0, []
    S, S0 = run["S_ww"], ref["S_ww"]
    scale = {k: np.max(np.abs(ref[k])) for k in ("a_ye", "a_ey", "s_ww_inv")}

    def rel(got, want, sc):
        return float(np.max(np.abs(got - want))) / sc

    for grp in eigen_clusters(gamma, rtol):
        if grp.size == 1:
            k = grp[0]
            s = 1.0 if S[:, k] @ S0[:, k] >= 0 else -1.0
            worst = max(worst, rel(s * run["a_ey"][:, k], ref["a_ey"][:, k], scale["a_ey"]))
            worst = max(worst, rel(s * run["s_ww_inv"][k], ref["s_ww_inv"][k], scale["s_ww_inv"]))
            d = rel(s * run["a_ye"][k], ref["a_ye"][k], scale["a_ye"])
            if abs(gamma[k]) <= cond_cut * gmax:
                weak.append((int(k), d, np.sqrt(n) * np.finfo(float).eps * gmax / abs(gamma[k])))
            else:
                worst = max(worst, d)
        else:
            pe = run["a_ey"][:, grp] @ run["a_ye"][grp]
            pe0 = ref["a_ey"][:, grp] @ ref["a_ye"][grp]
            worst = max(worst, rel(pe, pe0, scale["a_ey"] * scale["a_ye"]))
            worst = max(worst, rel(S[:, grp] @ run["s_ww_inv"][grp], S0[:, grp] @ ref["s_ww_inv"][grp], 1.0))
    return worst, weak

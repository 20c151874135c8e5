"""Shared oracles for the unit and acceptance suites.

Everything here is deliberately independent of the production code paths it
checks: dense operator assembly, closed forms, finite differences, and smooth
seeded random fields that every refinement level can represent.
"""

import math

import numpy as np
import scipy.sparse.linalg as spla

from patoed import assemble, build_mesh
from patoed.fracwave import (
    FracParams,
    ObservationSeries,
    SolverContext,
    TimeGrid,
    apply_W,
    apply_Wstar,
    source_loads,
)
from patoed.grid_fem import m_dot

from conftest import make_stack, reference_design


def smooth_random_field(mesh, rng):
    """Random low-order trig polynomial on the mesh nodes."""
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    a = np.zeros(len(x))
    for kx in range(1, 4):
        for ky in range(1, 4):
            a += rng.standard_normal() * np.sin(kx * np.pi * (x + 1) / 2) \
                 * np.sin(ky * np.pi * (y + 1) / 2)
    return a


def smooth_random_obs(mesh, grid, rng):
    """Random band-limited series on the observation loop."""
    s = np.arange(len(mesh.obs_nodes)) / len(mesh.obs_nodes)
    t = grid.times / grid.T
    g = np.zeros((len(t), len(s)))
    for m in range(1, 4):
        for l in range(3):
            g += rng.standard_normal() * np.outer(np.sin(m * np.pi * t),
                                                  np.cos(2 * np.pi * l * s))
            g += rng.standard_normal() * np.outer(np.cos(m * np.pi * t),
                                                  np.sin(2 * np.pi * (l + 1) * s))
    return ObservationSeries(g, grid)


def adjoint_mismatch(nx, nt, alpha=0.3, seed=0):
    """Relative adjoint identity defect for seeded smooth (a, g)."""
    mesh, mat, ctx = make_stack(nx, nt, alpha=alpha)
    rng = np.random.default_rng(seed)
    a = smooth_random_field(mesh, rng)
    g = smooth_random_obs(mesh, ctx.grid, rng)
    design = reference_design()
    Wa = apply_W(ctx, a, design)
    Wsg = apply_Wstar(ctx, g, design)
    lhs = ctx.obs_dot(Wa, g)
    rhs = m_dot(mat.M, a, Wsg)
    return abs(lhs - rhs) / (ctx.obs_norm(Wa) * ctx.obs_norm(g))


def manufactured_error(nx, nt, alpha=0.5, b=0.5, c=2.0, T=1.0):
    """Final-time relative error against u = t^2 sin(pi x) sin(pi y).

    The matching source comes from substituting u into the damped equation:
    f = (2/c^2 + 2 pi^2 t^2 + 4 pi^2 b t^(2-alpha)/Gamma(3-alpha)) sin sin.
    """
    mesh = build_mesh(nx)
    mat = assemble(mesh, 1.0, 1.0, nt, T)
    params = FracParams(alpha=alpha, b=b, c=c)
    grid = TimeGrid.build(T, nt, alpha)
    ctx = SolverContext(mesh, mat, params, grid)
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    phi = np.sin(np.pi * x) * np.sin(np.pi * y)
    t = grid.times
    gt = (2.0 / c**2 + 2 * np.pi**2 * t**2
          + 4 * np.pi**2 * b * t ** (2 - alpha) / math.gamma(3 - alpha))
    _, U, _ = ctx.run_newmark(source_loads(ctx, phi, gt), store_full=True)
    u_exact = T**2 * phi[ctx.free]
    return np.linalg.norm(U[-1] - u_exact) / np.linalg.norm(u_exact)


def dense_operator_parts(stack, Wfull):
    """Dense representations used by trace and MAP oracles.

    Returns (WsW, M_lu) with WsW the coefficient-space matrix of W* W built
    from the stacked forward columns and the exact quadrature weights.
    """
    mesh, matrices, ctx = stack
    sw = matrices.simpson_w
    Bo = ctx.B_obs
    GtOG = np.einsum("tpn,tpq,tqm->nm", Wfull, sw[:, None, None] * Bo[None], Wfull)
    M_lu = spla.splu(matrices.M.tocsc())
    return M_lu.solve(GtOG), M_lu


def dense_prior_inverse(prior, n):
    """Column-by-column matrix representation of the prior precision."""
    cols = [prior.apply_inv(np.eye(n)[:, j]) for j in range(n)]
    return np.column_stack(cols)


def dense_map_solution(stack, Wfull, prior, p_obs, sigma2):
    """Direct solve of the dense normal equations (the MAP oracle)."""
    mesh, matrices, ctx = stack
    WsW, M_lu = dense_operator_parts(stack, Wfull)
    n = matrices.n
    Ginv = dense_prior_inverse(prior, n)
    sw = matrices.simpson_w
    weighted = sw[:, None] * (p_obs.values @ ctx.B_obs)
    rhs = (1.0 / sigma2) * M_lu.solve(np.einsum("tpn,tp->n", Wfull, weighted))
    rhs = rhs + Ginv @ prior.mean
    return np.linalg.solve((1.0 / sigma2) * WsW + Ginv, rhs)


def random_m_orthonormal_basis(M, n, seed):
    """Full M-orthonormal basis from a seeded random matrix (two-pass QR)."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    for _ in range(2):
        import scipy.linalg as sla

        R = sla.cholesky(A.T @ (M @ A), lower=False)
        A = sla.solve_triangular(R, A.T, trans="T").T
    return A

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from patoed import build_mesh, assemble
from patoed.cli import DEFAULT_SHAPES, build_phantom
from patoed.fracwave import (
    FracParams,
    IntensityDesign,
    SolverContext,
    TimeGrid,
    apply_W,
)

OMEGA = 100.0 * np.pi
T_FINAL = 0.2


def make_stack(nx, nt, alpha=0.3, gamma=1.0, delta=8.0, c=300.0, r0=1e-4, T=T_FINAL):
    """Mesh + matrices + solver context for one configuration."""
    mesh = build_mesh(nx)
    matrices = assemble(mesh, gamma, delta, nt, T)
    params = FracParams.from_attenuation(alpha, c, r0)
    grid = TimeGrid.build(T, nt, alpha)
    ctx = SolverContext(mesh, matrices, params, grid)
    return mesh, matrices, ctx


def reference_design(I=100.0, K=5, T=T_FINAL):
    d = np.zeros(K)
    d[0] = 1.0
    return IntensityDesign(I=I, d=d, omega=OMEGA, T=T)


@pytest.fixture(scope="session")
def stack10():
    """nx=10, nt=100 stack shared by the dense-oracle tests."""
    return make_stack(10, 100)


@pytest.fixture(scope="session")
def dense_forward10(stack10):
    """Columns of W at nx=10 for the reference design: 121 forward solves.

    Returns (Wfull, WsW, design) with Wfull[t, p, j] the trace of the j-th
    unit coefficient vector and WsW the matrix representation of W* W in the
    mass-weighted geometry.
    """
    mesh, matrices, ctx = stack10
    design = reference_design()
    n = matrices.n
    cols = []
    for j in range(n):
        ej = np.zeros(n)
        ej[j] = 1.0
        cols.append(apply_W(ctx, ej, design).values)
    Wfull = np.stack(cols, axis=-1)
    sw = matrices.simpson_w
    Bo = ctx.B_obs
    GtOG = np.einsum("tpn,tpq,tqm->nm", Wfull, sw[:, None, None] * Bo[None], Wfull)
    M_lu = spla.splu(matrices.M.tocsc())
    WsW = M_lu.solve(GtOG)
    return Wfull, WsW, design


@pytest.fixture(scope="session")
def phantom10(stack10):
    mesh, _, _ = stack10
    return build_phantom(mesh, DEFAULT_SHAPES)

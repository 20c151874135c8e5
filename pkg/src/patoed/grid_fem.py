"""Structured P1 finite elements on the square domain [-1, 1]^2.

Builds the triangulation, the observation curve (boundary of the 0.8-square),
and every matrix the solvers consume: mass, Laplacian stiffness (full and with
Dirichlet rows eliminated), the prior operator matrix delta*K + gamma*M, the
1-D boundary mass matrix on the observation curve, and composite Simpson
weights for the time quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

OBS_HALF_WIDTH = 0.8  # observation square is the boundary of [-0.8, 0.8]^2


class MeshError(ValueError):
    """Raised for mesh resolutions that cannot align the observation curve."""


@dataclass(frozen=True)
class Mesh:
    """Uniform right-triangle mesh of [-1, 1]^2 with the observation loop."""

    nx: int
    nodes: np.ndarray          # (n, 2) node coordinates
    triangles: np.ndarray      # (2*nx*nx, 3) CCW vertex indices
    boundary_nodes: np.ndarray
    obs_nodes: np.ndarray      # nodes on the 0.8-square, CCW order
    obs_segments: np.ndarray   # (n_seg, 2) endpoint node indices along the loop
    obs_lengths: np.ndarray    # (n_seg,) segment lengths

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def h(self) -> float:
        return 2.0 / self.nx

    def node_index(self, i: int, j: int) -> int:
        return j * (self.nx + 1) + i


@dataclass(frozen=True)
class FemMatrices:
    """Assembled sparse matrices plus the Simpson time weights.

    ``K_lap`` is the Laplacian stiffness restricted to the free (non-Dirichlet)
    nodes used by the PDE solve; ``K_lap_full`` and ``M`` act on the full node
    set, which is what the prior algebra needs.
    """

    M: sp.csr_matrix
    M_free: sp.csr_matrix
    K_lap: sp.csr_matrix
    K_lap_full: sp.csr_matrix
    K_prior: sp.csr_matrix
    B: sp.csr_matrix
    simpson_w: np.ndarray
    free_nodes: np.ndarray
    gamma: float
    delta: float
    T: float
    nt: int

    @property
    def n(self) -> int:
        return self.M.shape[0]


def build_mesh(nx: int) -> Mesh:
    """Triangulate [-1, 1]^2 with ``nx`` cells per axis.

    ``nx`` must be a multiple of 10 so the grid lines hit +/-0.8 and the
    observation loop coincides with mesh edges.
    """
    if nx < 4:
        raise MeshError(f"nx must be >= 4, got {nx}")
    if nx % 10 != 0:
        raise MeshError(
            f"nx must be divisible by 10 so the observation square at "
            f"+/-{OBS_HALF_WIDTH} aligns with grid lines, got {nx}"
        )

    coords = np.linspace(-1.0, 1.0, nx + 1)
    X, Y = np.meshgrid(coords, coords, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    # two CCW triangles per cell, diagonal from lower-left to upper-right
    i, j = np.meshgrid(np.arange(nx), np.arange(nx), indexing="xy")
    v00 = (j * (nx + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + (nx + 1)
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.vstack([lower, upper])

    ii = np.arange(nx + 1)
    I, J = np.meshgrid(ii, ii, indexing="xy")
    on_boundary = (I == 0) | (I == nx) | (J == 0) | (J == nx)
    boundary_nodes = np.flatnonzero(on_boundary.ravel())

    obs_nodes, obs_segments = _obs_loop(nx)
    h = 2.0 / nx
    obs_lengths = np.full(len(obs_segments), h)

    return Mesh(
        nx=nx,
        nodes=nodes,
        triangles=triangles,
        boundary_nodes=boundary_nodes,
        obs_nodes=obs_nodes,
        obs_segments=np.asarray(obs_segments),
        obs_lengths=obs_lengths,
    )


def _obs_loop(nx: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Node indices along the 0.8-square, walked CCW from its lower-left corner."""
    k0 = nx // 10          # grid index of -0.8
    k1 = nx - k0           # grid index of +0.8

    def idx(i: int, j: int) -> int:
        return j * (nx + 1) + i

    path: list[int] = []
    for i in range(k0, k1):
        path.append(idx(i, k0))
    for j in range(k0, k1):
        path.append(idx(k1, j))
    for i in range(k1, k0, -1):
        path.append(idx(i, k1))
    for j in range(k1, k0, -1):
        path.append(idx(k0, j))

    segments = [(path[s], path[(s + 1) % len(path)]) for s in range(len(path))]
    return np.asarray(path), segments


def assemble(mesh: Mesh, gamma: float, delta: float, nt: int, T: float) -> FemMatrices:
    """Assemble all FE matrices and the Simpson weights.

    ``K_prior = delta * K_lap_full + gamma * M`` on the full node set;
    Dirichlet elimination only affects the PDE-solve matrices.
    """
    if gamma <= 0 or delta <= 0:
        raise ValueError("gamma and delta must be positive")
    if T <= 0:
        raise ValueError("T must be positive")
    if nt < 2 or nt % 2 != 0:
        raise ValueError(f"nt must be even and >= 2 for Simpson weights, got {nt}")

    n = mesh.n_nodes
    K_full, M = _assemble_p1(mesh)
    B = _assemble_obs_mass(mesh)
    K_prior = _symmetrize(delta * K_full + gamma * M)

    free = np.setdiff1d(np.arange(n), mesh.boundary_nodes)
    K_free = K_full[np.ix_(free, free)].tocsr()
    M_free = M[np.ix_(free, free)].tocsr()

    return FemMatrices(
        M=M,
        M_free=M_free,
        K_lap=K_free,
        K_lap_full=K_full,
        K_prior=K_prior,
        B=B,
        simpson_w=simpson_weights(nt, T),
        free_nodes=free,
        gamma=gamma,
        delta=delta,
        T=T,
        nt=nt,
    )


def _assemble_p1(mesh: Mesh) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Vectorized P1 stiffness and mass assembly over all triangles."""
    tri = mesh.triangles
    xy = mesh.nodes[tri]                      # (ne, 3, 2)
    x, y = xy[:, :, 0], xy[:, :, 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area = 0.5 * (x[:, 0] * b[:, 0] + x[:, 1] * b[:, 1] + x[:, 2] * b[:, 2])
    if np.any(area <= 0):
        raise MeshError("triangulation produced non-positive signed areas")

    k_loc = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :])
    k_loc /= (4.0 * area)[:, None, None]
    m_pattern = (np.ones((3, 3)) + np.eye(3)) / 12.0
    m_loc = area[:, None, None] * m_pattern

    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    n = mesh.n_nodes
    K = sp.coo_matrix((k_loc.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    M = sp.coo_matrix((m_loc.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return _symmetrize(K), _symmetrize(M)


def _assemble_obs_mass(mesh: Mesh) -> sp.csr_matrix:
    """1-D P1 mass matrix of the observation loop, on the full node set."""
    seg = mesh.obs_segments
    h = mesh.obs_lengths
    local = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    vals = h[:, None, None] * local
    rows = np.repeat(seg, 2, axis=1).ravel()
    cols = np.tile(seg, (1, 2)).ravel()
    n = mesh.n_nodes
    B = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return _symmetrize(B)


def _symmetrize(A: sp.spmatrix) -> sp.csr_matrix:
    return (0.5 * (A + A.T)).tocsr()


def simpson_weights(nt: int, T: float) -> np.ndarray:
    """Composite Simpson weights on nt+1 uniform points over [0, T]; nt even."""
    if nt % 2 != 0 or nt < 2:
        raise ValueError("composite Simpson needs an even number of intervals")
    dt = T / nt
    w = np.full(nt + 1, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return w * (dt / 3.0)


def m_dot(M: sp.spmatrix, a: np.ndarray, b: np.ndarray) -> float:
    """Mass-weighted inner product discretizing L2(Omega)."""
    return float(a @ (M @ b))


def m_norm(M: sp.spmatrix, a: np.ndarray) -> float:
    return float(np.sqrt(max(m_dot(M, a, a), 0.0)))


def export_triplets(A: sp.spmatrix, path) -> None:
    """Dump a sparse matrix as ``row col value`` lines, 0-based indices."""
    coo = sp.coo_matrix(A)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r} {c} {v:.17g}\n")


def load_triplets(path, shape: tuple[int, int]) -> sp.csr_matrix:
    """Read a matrix written by :func:`export_triplets`."""
    data = np.loadtxt(path, ndmin=2)
    if data.size == 0:
        return sp.csr_matrix(shape)
    rows = data[:, 0].astype(int)
    cols = data[:, 1].astype(int)
    return sp.coo_matrix((data[:, 2], (rows, cols)), shape=shape).tocsr()

"""Time stepping for the fractionally damped wave equation.

The model is  c^-2 p_tt - Lap p - b * D_t^alpha Lap p = a(x) i'(t)  with
homogeneous Dirichlet data and zero initial conditions.  The Caputo derivative
is discretized with the L1 convolution quadrature and fused into an implicit
average-acceleration Newmark step, so one sparse factorization serves every
step.  The same engine, fed with a time-flipped boundary load, solves the
adjoint problem, which yields the observation map W (absorption -> pressure
trace on the observation loop) and its adjoint W*.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid_fem import FemMatrices, Mesh

NEWMARK_BETA = 0.25
NEWMARK_GAMMA = 0.5


class SolverError(RuntimeError):
    """Raised when the time stepper produces non-finite state."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class FracParams:
    """Physical parameters: fractional order, damping, sound speed."""

    alpha: float
    b: float
    c: float
    r0: float | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.c <= 0:
            raise ValueError("sound speed c must be positive")
        if self.b < 0:
            raise ValueError("damping coefficient b must be nonnegative")

    @classmethod
    def from_attenuation(cls, alpha: float, c: float, r0: float) -> "FracParams":
        """Derive the damping coefficient from the attenuation scale r0."""
        b = (-2.0 * c * r0) / math.cos(math.pi * (alpha + 1.0) / 2.0)
        return cls(alpha=alpha, b=b, c=c, r0=r0)


def caputo_weights(alpha: float, dt: float, nt: int) -> np.ndarray:
    """L1 quadrature weights for the Caputo derivative of order alpha.

    w_j = dt^-alpha / Gamma(2 - alpha) * ((j+1)^(1-alpha) - j^(1-alpha));
    the derivative at t_m is approximated by
    sum_j w_j (u^(m-j) - u^(m-j-1)).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if dt <= 0:
        raise ValueError("dt must be positive")
    j = np.arange(nt, dtype=float)
    return dt ** (-alpha) / math.gamma(2.0 - alpha) * ((j + 1.0) ** (1.0 - alpha) - j ** (1.0 - alpha))


@dataclass(frozen=True)
class TimeGrid:
    T: float
    nt: int
    caputo_w: np.ndarray

    @classmethod
    def build(cls, T: float, nt: int, alpha: float) -> "TimeGrid":
        if nt % 2 != 0 or nt < 2:
            raise ValueError("nt must be even and >= 2")
        return cls(T=T, nt=nt, caputo_w=caputo_weights(alpha, T / nt, nt))

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt + 1)


@dataclass(frozen=True)
class IntensityDesign:
    """Band-limited illumination i(t) = I * (1 + sum_k d_k sin(k w t))."""

    I: float
    d: np.ndarray
    omega: float
    T: float

    def __post_init__(self):
        object.__setattr__(self, "d", np.atleast_1d(np.asarray(self.d, dtype=float)))
        if self.I <= 0:
            raise ValueError("amplitude I must be positive")

    @property
    def K(self) -> int:
        return len(self.d)

    def value(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        acc = np.ones_like(t)
        for k, dk in enumerate(self.d, start=1):
            if dk != 0.0:
                acc = acc + dk * np.sin(k * self.omega * t)
        return self.I * acc

    def derivative(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        acc = np.zeros_like(t)
        for k, dk in enumerate(self.d, start=1):
            if dk != 0.0:
                acc = acc + dk * k * self.omega * np.cos(k * self.omega * t)
        return self.I * acc

    def with_amplitude(self, I: float) -> "IntensityDesign":
        return IntensityDesign(I=I, d=self.d.copy(), omega=self.omega, T=self.T)


def harmonic_design(k: int, omega: float, T: float) -> IntensityDesign:
    """Unit-amplitude single-mode design; its derivative is k*omega*cos(k*omega*t)."""
    d = np.zeros(k)
    d[k - 1] = 1.0
    return IntensityDesign(I=1.0, d=d, omega=omega, T=T)


@dataclass
class ObservationSeries:
    """Pressure traces on the observation loop: values[j, p] = p(t_j, x_p)."""

    values: np.ndarray              # (nt+1, n_obs)
    grid: TimeGrid

    def copy(self) -> "ObservationSeries":
        return ObservationSeries(values=self.values.copy(), grid=self.grid)

    def __add__(self, other: "ObservationSeries") -> "ObservationSeries":
        return ObservationSeries(values=self.values + other.values, grid=self.grid)

    def __sub__(self, other: "ObservationSeries") -> "ObservationSeries":
        return ObservationSeries(values=self.values - other.values, grid=self.grid)

    def __mul__(self, s: float) -> "ObservationSeries":
        return ObservationSeries(values=self.values * s, grid=self.grid)

    __rmul__ = __mul__


class SolverContext:
    """Immutable bundle of factorized operators for repeated solves.

    Builds the constant Newmark system matrix
    S = c^-2 M + beta dt^2 (1 + b w0) K on the free nodes and factorizes it
    once; safe for concurrent read-only use.
    """

    def __init__(self, mesh: Mesh, matrices: FemMatrices, params: FracParams,
                 grid: TimeGrid, newmark_beta: float = NEWMARK_BETA,
                 newmark_gamma: float = NEWMARK_GAMMA):
        if grid.nt != matrices.nt or grid.T != matrices.T:
            raise ValueError("time grid does not match the assembled Simpson weights")
        self.mesh = mesh
        self.matrices = matrices
        self.params = params
        self.grid = grid
        self.beta = newmark_beta
        self.gamma_n = newmark_gamma

        free = matrices.free_nodes
        self.free = free
        self.n_free = len(free)
        # positions of the observation nodes inside the free-node vector
        free_pos = np.full(matrices.n, -1, dtype=int)
        free_pos[free] = np.arange(len(free))
        self.obs_pos = free_pos[mesh.obs_nodes]
        if np.any(self.obs_pos < 0):
            raise ValueError("observation nodes must be interior (non-Dirichlet)")

        self.B_obs = matrices.B[np.ix_(mesh.obs_nodes, mesh.obs_nodes)].toarray()

        dt = grid.dt
        w0 = grid.caputo_w[0]
        c2i = 1.0 / params.c ** 2
        S = c2i * matrices.M_free + self.beta * dt * dt * (1.0 + params.b * w0) * matrices.K_lap
        self._S_lu = spla.splu(S.tocsc())
        self._M_lu = spla.splu(matrices.M_free.tocsc())
        self.K_free = matrices.K_lap

    # -- low-level engine ---------------------------------------------------

    def run_newmark(self, loads: np.ndarray, store_full: bool = False):
        """March the damped wave equation under a per-step load.

        ``loads`` has shape (nt+1, n_free): the FE load vector at every time
        node.  Returns observation values (nt+1, n_obs) and, when
        ``store_full``, the displacement and velocity trajectories on the
        free nodes.
        """
        nt = self.grid.nt
        dt = self.grid.dt
        beta, gamma_n = self.beta, self.gamma_n
        cw = self.grid.caputo_w
        w0 = cw[0]
        b = self.params.b
        c2 = self.params.c ** 2
        K = self.K_free
        nf = self.n_free

        u = np.zeros(nf)
        v = np.zeros(nf)
        acc = c2 * self._M_lu.solve(loads[0])

        damped = b > 0.0
        DU = np.zeros((nt, nf)) if damped else None
        obs = np.zeros((nt + 1, len(self.obs_pos)))
        U = V = None
        if store_full:
            U = np.zeros((nt + 1, nf))
            V = np.zeros((nt + 1, nf))
            V[0] = v

        dt2 = dt * dt
        for m in range(nt):
            u_pred = u + dt * v + dt2 * (0.5 - beta) * acc
            rhs = loads[m + 1] - K @ u_pred
            if damped:
                hist = w0 * (u_pred - u)
                if m >= 1:
                    hist = hist + cw[1:m + 1][::-1] @ DU[:m]
                rhs -= b * (K @ hist)
            acc_new = self._S_lu.solve(rhs)
            u_new = u_pred + beta * dt2 * acc_new
            if not np.all(np.isfinite(u_new)):
                raise SolverError(f"non-finite state at time step {m + 1}", step=m + 1)
            v = v + dt * ((1.0 - gamma_n) * acc + gamma_n * acc_new)
            if damped:
                DU[m] = u_new - u
            u = u_new
            acc = acc_new
            obs[m + 1] = u[self.obs_pos]
            if store_full:
                U[m + 1] = u
                V[m + 1] = v

        if store_full:
            return obs, U, V
        return obs

    def run_newmark_transpose(self, seeds: np.ndarray) -> np.ndarray:
        """Exact transpose of the loads -> displacements map of ``run_newmark``.

        ``seeds[m]`` is the adjoint of the displacement output at step m on
        the free nodes; the reverse sweep returns the adjoint of the loads,
        shape (nt+1, n_free).  Used where bitwise-symmetric normal equations
        are required (the continuous adjoint solve only matches the forward
        map up to discretization error).
        """
        nt = self.grid.nt
        dt = self.grid.dt
        beta, gamma_n = self.beta, self.gamma_n
        cw = self.grid.caputo_w
        w0 = cw[0]
        b = self.params.b
        damped = b > 0.0
        K = self.K_free
        nf = self.n_free
        dt2 = dt * dt
        q_c = dt2 * (0.5 - beta)
        s_c = beta * dt2

        Ubar = seeds.copy()
        Vbar = np.zeros((nt + 1, nf))
        Abar = np.zeros((nt + 1, nf))
        Lbar = np.zeros((nt + 1, nf))

        for m in range(nt - 1, -1, -1):
            # v_{m+1} = v_m + dt(1-gamma) acc_m + dt gamma acc_{m+1}
            vb = Vbar[m + 1]
            Vbar[m] += vb
            Abar[m] += dt * (1.0 - gamma_n) * vb
            Abar[m + 1] += dt * gamma_n * vb
            # u_{m+1} = u_pred + s acc_{m+1}
            ub = Ubar[m + 1]
            pbar = ub.copy()
            Abar[m + 1] += s_c * ub
            # acc_{m+1} = S^-1 rhs, S symmetric
            rbar = self._S_lu.solve(Abar[m + 1])
            # rhs = L^{m+1} - K u_pred - b K (w0 (u_pred - u_m) + hist)
            Lbar[m + 1] += rbar
            Krbar = K @ rbar
            pbar -= Krbar
            if damped:
                hbar = -b * Krbar
                pbar += w0 * hbar
                Ubar[m] -= w0 * hbar
                if m >= 1:
                    # hist = sum_k w_{m-k} (u_{k+1} - u_k), k = 0..m-1
                    wf = cw[1:m + 1][::-1]
                    Ubar[1:m + 1] += wf[:, None] * hbar
                    Ubar[0:m] -= wf[:, None] * hbar
            # u_pred = u_m + dt v_m + q acc_m
            Ubar[m] += pbar
            Vbar[m] += dt * pbar
            Abar[m] += q_c * pbar

        # acc_0 = c^2 M^-1 L^0, M symmetric
        Lbar[0] += self.params.c ** 2 * self._M_lu.solve(Abar[0])
        return Lbar

    # -- field/observation algebra -------------------------------------------

    def scatter(self, u_free: np.ndarray) -> np.ndarray:
        """Embed a free-node vector into the full node set (zeros on Dirichlet)."""
        full = np.zeros(u_free.shape[:-1] + (self.matrices.n,))
        full[..., self.free] = u_free
        return full

    def obs_dot(self, g: ObservationSeries, h: ObservationSeries) -> float:
        """Simpson/B-weighted inner product on L2(0,T; L2(Sigma))."""
        sw = self.matrices.simpson_w
        Bh = h.values @ self.B_obs
        return float(np.sum(sw[:, None] * g.values * Bh))

    def obs_norm(self, g: ObservationSeries) -> float:
        return float(np.sqrt(max(self.obs_dot(g, g), 0.0)))

    def energy(self, U: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Discrete energy 0.5 c^-2 v'Mv + 0.5 u'Ku per stored step."""
        c2i = 1.0 / self.params.c ** 2
        MV = (self.matrices.M_free @ V.T).T
        KU = (self.K_free @ U.T).T
        return 0.5 * c2i * np.sum(V * MV, axis=1) + 0.5 * np.sum(U * KU, axis=1)


def source_loads(ctx: SolverContext, nodal_source: np.ndarray,
                 time_profile: np.ndarray) -> np.ndarray:
    """Loads for a separable source f(t, x) = time_profile(t) * s(x)."""
    Ms = (ctx.matrices.M @ nodal_source)[ctx.free]
    return np.outer(time_profile, Ms)


def solve_forward(ctx: SolverContext, a: np.ndarray, design: IntensityDesign,
                  store_full: bool = False):
    """Solve the forward problem with source a(x) i'(t); observe on the loop."""
    iprime = design.derivative(ctx.grid.times)
    loads = source_loads(ctx, a, iprime)
    out = ctx.run_newmark(loads, store_full=store_full)
    if store_full:
        obs, U, V = out
        return ObservationSeries(values=obs, grid=ctx.grid), U, V
    return ObservationSeries(values=out, grid=ctx.grid)


def solve_adjoint(ctx: SolverContext, g: ObservationSeries) -> np.ndarray:
    """Adjoint trajectory q on the free nodes, q[j] = q(t_j, .).

    Runs the forward engine for the time-flipped state with load
    v -> -int_Sigma g(T-t) v dS and flips the result back, so the terminal
    conditions q(T) = q_t(T) = 0 hold by construction.
    """
    if g.grid.nt != ctx.grid.nt:
        raise ValueError("observation series grid does not match the context")
    flipped = g.values[::-1]
    loads = np.zeros((ctx.grid.nt + 1, ctx.n_free))
    loads[:, ctx.obs_pos] = -(flipped @ ctx.B_obs)
    _, Ubar, _ = ctx.run_newmark(loads, store_full=True)
    return Ubar[::-1].copy()


def apply_W(ctx: SolverContext, a: np.ndarray, design: IntensityDesign) -> ObservationSeries:
    """Observation map: absorption density -> pressure trace on the loop."""
    return solve_forward(ctx, a, design)


def apply_Wstar(ctx: SolverContext, g: ObservationSeries,
                design: IntensityDesign) -> np.ndarray:
    """Adjoint of the observation map in the B-weighted / mass-weighted pair.

    W* g = -int_0^T q(t, .) i'(t) dt with q the adjoint state driven by the
    negated data trace; the two signs together make <W a, g> = <a, W* g>.
    """
    q = solve_adjoint(ctx, g)
    sw = ctx.matrices.simpson_w
    iprime = design.derivative(ctx.grid.times)
    field_free = -(sw * iprime) @ q
    return ctx.scatter(field_free)


def apply_Wstar_transpose(ctx: SolverContext, g: ObservationSeries,
                          design: IntensityDesign) -> np.ndarray:
    """Exact discrete transpose of :func:`apply_W` in the weighted inner products.

    Satisfies <W a, g>_obs = <a, W^T g>_M to rounding, which matrix-free
    normal-equation solvers need; :func:`apply_Wstar` realizes the same
    operator through the adjoint PDE instead and matches only up to
    discretization error.
    """
    sw = ctx.matrices.simpson_w
    seeds = np.zeros((ctx.grid.nt + 1, ctx.n_free))
    seeds[:, ctx.obs_pos] = sw[:, None] * (g.values @ ctx.B_obs)
    Lbar = ctx.run_newmark_transpose(seeds)
    iprime = design.derivative(ctx.grid.times)
    return ctx.scatter(iprime @ Lbar)


def smooth_observations(g: ObservationSeries, passes: int = 1) -> ObservationSeries:
    """Single-pass moving-average temporal filter for raw external data.

    Off by default everywhere: W* is only ever applied to outputs of W (plus
    additive noise), which are already smooth enough.
    """
    vals = g.values.copy()
    for _ in range(passes):
        padded = np.vstack([vals[:1], vals, vals[-1:]])
        vals = (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0
    return ObservationSeries(values=vals, grid=g.grid)

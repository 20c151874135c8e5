"""Projected A-optimality: reduced trace formula, gradient, design optimizer.

The design criterion is the mass-weighted trace of the posterior covariance
projected onto the leading prior eigenmodes.  With the band-limited ansatz
i(t) = I (1 + sum_k d_k sin(k w t)) the projected misfit Hessian decomposes
into K x K blocks of pairwise observation inner products of single-frequency
solves, so the criterion and its exact gradient reduce to N x N algebra that
can be re-evaluated during optimization without further PDE solves.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from .fracwave import (
    IntensityDesign,
    ObservationSeries,
    SolverContext,
    harmonic_design,
    solve_forward,
)
from .grid_fem import simpson_weights
from .priors import ProjectionBasis


class GramManifestError(RuntimeError):
    """Persisted Gram data is inconsistent with its manifest."""


class InfeasibleDesignError(ValueError):
    """Starting design violates the admissible set."""


@dataclass
class MisfitGram:
    """Pairwise observation inner products of single-frequency basis solves.

    ``blocks[k, l][j, m] = <W_{psi_{k+1}} e_j, W_{psi_{l+1}} e_m>_obs`` where
    psi_k(t) = sin(k w t) at unit amplitude.  The noise level and the design
    amplitude are kept out and applied by the evaluation routines.
    """

    blocks: np.ndarray            # (K, K, N, N)
    lam: np.ndarray               # (N,) prior eigenvalues, nonincreasing
    full_trace: float
    omega: float
    T: float
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.blocks.shape[0]

    @property
    def N(self) -> int:
        return self.blocks.shape[2]


def precompute_gram(ctx: SolverContext, basis: ProjectionBasis, K: int,
                    omega: float, workers: int = 1) -> MisfitGram:
    """Run the K*N single-frequency forward solves and form all blocks.

    The solves are independent; ``workers > 1`` runs them on a thread pool
    with per-thread factorizations, leaving the results bitwise identical to
    the sequential schedule.
    """
    if K < 1:
        raise ValueError("need at least one active frequency")
    if basis.N < 1:
        raise ValueError("projection basis must contain at least one mode")

    N = basis.N
    nt = ctx.grid.nt
    n_obs = len(ctx.obs_pos)
    T = ctx.grid.T
    designs = [harmonic_design(k, omega, T) for k in range(1, K + 1)]
    store = np.zeros((K, N, nt + 1, n_obs))

    if workers <= 1:
        for k in range(K):
            for j in range(N):
                store[k, j] = _gram_solve(ctx, basis.E[:, j], designs[k], k, j)
    else:
        import threading

        local = threading.local()

        def task(kj):
            k, j = kj
            if not hasattr(local, "ctx"):
                local.ctx = SolverContext(ctx.mesh, ctx.matrices, ctx.params, ctx.grid,
                                          newmark_beta=ctx.beta, newmark_gamma=ctx.gamma_n)
            return k, j, _gram_solve(local.ctx, basis.E[:, j], designs[k], k, j)

        tasks = [(k, j) for k in range(K) for j in range(N)]
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            for k, j, obs in pool.map(task, tasks):
                store[k, j] = obs

    sw = ctx.matrices.simpson_w
    flat = store.reshape(K, N, -1)
    blocks = np.zeros((K, K, N, N))
    for l in range(K):
        weighted = (sw[:, None] * (store[l] @ ctx.B_obs)).reshape(N, -1)
        for k in range(l, K):
            blocks[k, l] = flat[k] @ weighted.T
    for k in range(K):
        blocks[k, k] = 0.5 * (blocks[k, k] + blocks[k, k].T)
        for l in range(k):
            blocks[l, k] = blocks[k, l].T

    meta = {
        "nx": ctx.mesh.nx,
        "nt": nt,
        "alpha": ctx.params.alpha,
        "b": ctx.params.b,
        "c": ctx.params.c,
    }
    return MisfitGram(blocks=blocks, lam=basis.lam.copy(), full_trace=basis.full_trace,
                      omega=omega, T=T, meta=meta)


def _gram_solve(ctx, e_j, design, k, j):
    try:
        return solve_forward(ctx, e_j, design).values
    except Exception as exc:
        raise RuntimeError(f"gram solve failed at frequency k={k + 1}, mode j={j}") from exc


def reduced_hessian(gram: MisfitGram, d: np.ndarray, I: float, sigma2: float) -> np.ndarray:
    """sigma^-2 I^2 sum_{k,l} d_k d_l blocks[k,l], the N x N misfit Hessian."""
    d = np.asarray(d, dtype=float)
    if len(d) != gram.K:
        raise ValueError(f"design has {len(d)} coefficients, gram stores {gram.K}")
    H = np.tensordot(np.outer(d, d), gram.blocks, axes=([0, 1], [0, 1]))
    return (I * I / sigma2) * H


def phi_n(gram: MisfitGram, d: np.ndarray, I: float, sigma2: float) -> float:
    """Projected A-optimality value: tr[(H + diag(1/lam))^-1] + tail."""
    H = reduced_hessian(gram, d, I, sigma2)
    S = _posterior_head(H, gram.lam)
    tail = gram.full_trace - float(gram.lam.sum())
    return float(np.trace(S)) + tail


def grad_phi_n(gram: MisfitGram, d: np.ndarray, I: float, sigma2: float) -> np.ndarray:
    """Exact gradient of phi_n in the design coefficients."""
    d = np.asarray(d, dtype=float)
    H = reduced_hessian(gram, d, I, sigma2)
    S = _posterior_head(H, gram.lam)
    S2 = S @ S
    scale = I * I / sigma2
    g = np.zeros(gram.K)
    for k in range(gram.K):
        Tk = np.tensordot(d, gram.blocks[k] + gram.blocks[:, k].transpose(0, 2, 1),
                          axes=(0, 0))
        g[k] = -scale * float(np.sum(S2 * Tk))
    return g


def _posterior_head(H: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """(H + diag(1/lam))^-1 via Cholesky; H is PSD and lam > 0, so SPD holds."""
    A = H + np.diag(1.0 / lam)
    try:
        ch = sla.cho_factor(A, lower=True)
    except sla.LinAlgError as exc:
        raise AssertionError(
            "posterior head matrix lost positive definiteness; "
            "prior eigenvalues must be positive"
        ) from exc
    return sla.cho_solve(ch, np.eye(len(lam)))


def trace_block_schur(H_head: np.ndarray, prior_tilde: np.ndarray) -> float:
    """Posterior trace for an arbitrary M-orthonormal basis via block inversion.

    ``prior_tilde`` is the full n x n representation of the prior precision in
    the chosen basis, partitioned at N = H_head.shape[0]; the head/tail
    coupling is eliminated with a Schur complement, so only the N x N block
    changes when the design does.
    """
    N = H_head.shape[0]
    n = prior_tilde.shape[0]
    A = prior_tilde[:N, :N]
    D = prior_tilde[N:, N:]
    if N == n:
        L = H_head + A
        Lch = sla.cho_factor(L, lower=True)
        return float(np.trace(sla.cho_solve(Lch, np.eye(N))))
    Bb = prior_tilde[:N, N:]
    Dch = sla.cho_factor(D, lower=True)
    DinvBt = sla.cho_solve(Dch, Bb.T)          # D^-1 B^T
    L = H_head + A - Bb @ DinvBt
    Lch = sla.cho_factor(L, lower=True)
    Linv = sla.cho_solve(Lch, np.eye(N))
    Dinv = sla.cho_solve(Dch, np.eye(n - N))
    X = DinvBt.T                               # B D^-1
    tr_coupling = float(np.sum(Linv * (X @ X.T)))
    return float(np.trace(Linv)) + float(np.trace(Dinv)) + tr_coupling


# -- admissible set -----------------------------------------------------------


def _h1_gram(omega: float, T: float, K: int, refine: int = 10) -> np.ndarray:
    """(K+1) x (K+1) H1(0,T) Gram of (1, sin(w t), ..., sin(K w t)).

    Computed with composite Simpson on a ``refine``-times oversampled grid,
    fine enough to resolve every active frequency to ~1e-9 relative.
    """
    cycles = max(1, int(np.ceil(K * omega * T / (2.0 * np.pi))))
    base = max(200, 32 * cycles)
    npts = refine * base
    if npts % 2 == 1:
        npts += 1
    t = np.linspace(0.0, T, npts + 1)
    w = simpson_weights(npts, T)
    F = np.empty((K + 1, npts + 1))
    G = np.empty((K + 1, npts + 1))
    F[0] = 1.0
    G[0] = 0.0
    for k in range(1, K + 1):
        F[k] = np.sin(k * omega * t)
        G[k] = k * omega * np.cos(k * omega * t)
    return (F * w) @ F.T + (G * w) @ G.T


def h1_norm_intensity(design: IntensityDesign, refine: int = 10) -> float:
    """H1(0,T) norm of the intensity, sqrt(int i^2 + i'^2 dt)."""
    Q = _h1_gram(design.omega, design.T, design.K, refine)
    coeff = np.concatenate([[1.0], design.d])
    return design.I * float(np.sqrt(coeff @ Q @ coeff))


def project_l1_ball(v: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Euclidean projection onto {|d|_1 <= radius}: sort-threshold on |v|."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    v = np.asarray(v, dtype=float)
    if np.abs(v).sum() <= radius:
        return v.copy()
    mag = np.sort(np.abs(v))[::-1]
    cum = np.cumsum(mag) - radius
    rho = np.nonzero(mag > cum / np.arange(1, len(v) + 1))[0][-1]
    theta = cum[rho] / (rho + 1.0)
    return np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)


@dataclass
class DesignConstraints:
    """Admissible set: |d|_1 <= l1_bound and |i(I, d)|_H1 <= h1_bound."""

    omega: float
    T: float
    K: int
    l1_bound: float = 1.0
    h1_bound: float = 0.0
    amplitude_rule: str = "initial"    # or "worst_case"

    def __post_init__(self):
        self._Q = _h1_gram(self.omega, self.T, self.K)

    @classmethod
    def from_initial(cls, design: IntensityDesign, K: int | None = None,
                     factor: float = 4.0, **kw) -> "DesignConstraints":
        K = design.K if K is None else K
        bound = factor * h1_norm_intensity(design)
        return cls(omega=design.omega, T=design.T, K=K, h1_bound=bound, **kw)

    def h1_norm(self, d: np.ndarray, I: float) -> float:
        coeff = np.concatenate([[1.0], np.asarray(d, dtype=float)])
        return I * float(np.sqrt(coeff @ self._Q @ coeff))

    def unit_h1(self, d: np.ndarray) -> float:
        return self.h1_norm(d, 1.0)

    def max_amplitude(self, d0: np.ndarray) -> float:
        """Largest feasible amplitude under the chosen rule."""
        if self.amplitude_rule == "worst_case":
            worst = max(self.unit_h1(_unit(self.K, k)) for k in range(self.K))
            return self.h1_bound / worst
        return self.h1_bound / self.unit_h1(d0)

    def feasible(self, d: np.ndarray, I: float, tol: float = 1e-9) -> bool:
        return (np.abs(d).sum() <= self.l1_bound + tol
                and self.h1_norm(d, I) <= self.h1_bound * (1.0 + tol))

    def project(self, d: np.ndarray, I: float) -> np.ndarray:
        """Dykstra projection onto the l1 ball intersected with the H1 ball."""
        x = np.asarray(d, dtype=float).copy()
        p = np.zeros_like(x)
        q = np.zeros_like(x)
        for _ in range(500):
            y = project_l1_ball(x + p, self.l1_bound)
            p = x + p - y
            x_new = self._project_h1(y + q, I)
            q = y + q - x_new
            if np.linalg.norm(x_new - x) <= 1e-13 and np.abs(y - x_new).max() <= 1e-12:
                x = x_new
                break
            x = x_new
        return x

    def _project_h1(self, y: np.ndarray, I: float) -> np.ndarray:
        """Euclidean projection onto the ellipsoid |i(I, d)|_H1 <= h1_bound."""
        r2 = (self.h1_bound / I) ** 2
        Q = self._Q
        A = Q[1:, 1:]
        b = Q[1:, 0]
        c = Q[0, 0]

        def q_of(x):
            return float(x @ A @ x + 2.0 * b @ x + c)

        if q_of(y) <= r2:
            return y.copy()
        evals, V = np.linalg.eigh(A)
        yh = V.T @ y
        bh = V.T @ b
        qmin = c - float(bh @ (bh / evals))
        if qmin >= r2:
            raise InfeasibleDesignError("H1 ball too tight: no band-limited design fits")

        def surplus(nu):
            xh = (yh - nu * bh) / (1.0 + nu * evals)
            return float(xh @ (evals * xh) + 2.0 * bh @ xh + c) - r2

        hi = 1.0
        while surplus(hi) > 0.0:
            hi *= 4.0
            if hi > 1e18:  # pragma: no cover - qmin < r2 guarantees a root
                raise RuntimeError("ellipsoid projection failed to bracket")
        nu = brentq(surplus, 0.0, hi, xtol=1e-15, rtol=1e-14)
        return V @ ((yh - nu * bh) / (1.0 + nu * evals))


def _unit(K: int, k: int) -> np.ndarray:
    e = np.zeros(K)
    e[k] = 1.0
    return e


# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerOptions:
    step0: float = 1.0
    shrink: float = 0.5
    armijo: float = 1e-4
    tol: float = 1e-6
    maxit: int = 500
    max_backtracks: int = 60
    step_max: float = 1e12          # cap for the Barzilai-Borwein trial step


@dataclass
class DesignResult:
    d_opt: np.ndarray
    I_opt: float
    phi_opt: float
    history: list       # rows (iteration, phi, |d|_1, step)
    converged: bool
    line_search_failed: bool = False


def optimize_design(gram: MisfitGram, constraints: DesignConstraints,
                    d0: np.ndarray, sigma2: float,
                    opts: OptimizerOptions | None = None) -> DesignResult:
    """Projected gradient descent with Armijo backtracking over the designs.

    The amplitude is fixed up front at the largest feasible value (the
    criterion is monotone decreasing in it), then only the coefficient vector
    moves, staying inside the l1 and H1 balls via Dykstra projection.  Trial
    steps after the first use the Barzilai-Borwein scaling, so the method
    adapts to the (tiny) curvature of the trace functional; Armijo keeps
    every accepted step a sufficient decrease.
    """
    opts = opts or OptimizerOptions()
    d0 = np.asarray(d0, dtype=float)
    if len(d0) != gram.K:
        raise InfeasibleDesignError(f"expected {gram.K} coefficients, got {len(d0)}")
    if np.abs(d0).sum() > constraints.l1_bound + 1e-12:
        raise InfeasibleDesignError("initial design violates the l1 bound")

    I_opt = constraints.max_amplitude(d0)
    x = constraints.project(d0, I_opt)
    f = phi_n(gram, x, I_opt, sigma2)
    g = grad_phi_n(gram, x, I_opt, sigma2)
    history = [(0, f, float(np.abs(x).sum()), 0.0)]
    converged = False
    ls_failed = False
    step_trial = opts.step0

    for it in range(1, opts.maxit + 1):
        pg = x - constraints.project(x - g, I_opt)
        if np.linalg.norm(pg) <= opts.tol:
            converged = True
            break

        step = step_trial
        accepted = False
        for _ in range(opts.max_backtracks):
            y = constraints.project(x - step * g, I_opt)
            fy = phi_n(gram, y, I_opt, sigma2)
            if fy <= f + opts.armijo * float(g @ (y - x)):
                accepted = True
                break
            step *= opts.shrink
        if not accepted:
            ls_failed = True
            break

        g_new = grad_phi_n(gram, y, I_opt, sigma2)
        dx = y - x
        dg = g_new - g
        curv = float(dx @ dg)
        if curv > 0.0:
            step_trial = min(float(dx @ dx) / curv, opts.step_max)
        else:
            step_trial = min(step * 4.0, opts.step_max)
        x, f, g = y, fy, g_new
        history.append((it, f, float(np.abs(x).sum()), step))

    return DesignResult(d_opt=x, I_opt=I_opt, phi_opt=f, history=history,
                        converged=converged, line_search_failed=ls_failed)


# -- persistence --------------------------------------------------------------


def save_gram(gram: MisfitGram, outdir: str) -> str:
    """Persist the Gram tensor as one CSV per block plus a manifest."""
    os.makedirs(outdir, exist_ok=True)
    block_files = []
    sha = hashlib.sha256()
    for k in range(gram.K):
        for l in range(gram.K):
            name = f"gram_block_{k + 1}_{l + 1}.csv"
            path = os.path.join(outdir, name)
            _write_matrix_csv(path, gram.blocks[k, l])
            block_files.append(name)
            with open(path, "rb") as fh:
                sha.update(fh.read())
    eig_name = "eigenvalues.csv"
    with open(os.path.join(outdir, eig_name), "w") as fh:
        fh.write("index,lambda\n")
        for i, lam in enumerate(gram.lam):
            fh.write(f"{i},{lam:.17g}\n")
    with open(os.path.join(outdir, eig_name), "rb") as fh:
        sha.update(fh.read())
    manifest = {
        "K": gram.K,
        "N": gram.N,
        "omega": gram.omega,
        "T": gram.T,
        "full_trace": gram.full_trace,
        "blocks": block_files,
        "eigenvalues": eig_name,
        "checksum": sha.hexdigest(),
        **{k: gram.meta.get(k) for k in ("nx", "nt", "alpha", "b", "c")},
    }
    manifest_path = os.path.join(outdir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_gram(manifest_path: str) -> MisfitGram:
    """Load a persisted Gram tensor, verifying the manifest checksum."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    root = os.path.dirname(manifest_path)
    K, N = manifest["K"], manifest["N"]
    sha = hashlib.sha256()
    blocks = np.zeros((K, K, N, N))
    names = iter(manifest["blocks"])
    for k in range(K):
        for l in range(K):
            path = os.path.join(root, next(names))
            blocks[k, l] = np.loadtxt(path, delimiter=",", ndmin=2)
            with open(path, "rb") as fh:
                sha.update(fh.read())
    eig_path = os.path.join(root, manifest["eigenvalues"])
    lam = np.loadtxt(eig_path, delimiter=",", skiprows=1, ndmin=2)[:, 1]
    with open(eig_path, "rb") as fh:
        sha.update(fh.read())
    if sha.hexdigest() != manifest["checksum"]:
        raise GramManifestError("gram files do not match the manifest checksum")
    meta = {k: manifest.get(k) for k in ("nx", "nt", "alpha", "b", "c")}
    return MisfitGram(blocks=blocks, lam=lam, full_trace=manifest["full_trace"],
                      omega=manifest["omega"], T=manifest["T"], meta=meta)


def _write_matrix_csv(path: str, A: np.ndarray) -> None:
    with open(path, "w") as fh:
        for row in np.atleast_2d(A):
            fh.write(",".join(f"{v:.17g}" for v in row))
            fh.write("\n")

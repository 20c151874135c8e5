"""Gaussian prior covariances, their inverses, and mass-orthonormal eigenbases.

Two covariance families:

* squared-elliptic ("bi-Laplacian"): Gamma = (K^-1 M)^2 with
  K = delta * stiffness + gamma * mass, a smoothing trace-class prior;
* Ornstein-Uhlenbeck: dense exponential-distance covariance
  C_ij = eta^2 exp(-|x_i - x_j| / ell), edge-preserving in practice.

All operator calculus is done in the mass-weighted inner product; every prior
exposes apply / apply_inv / eigenbasis / sample with M-orthonormal modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla
from scipy.spatial.distance import cdist

from .grid_fem import FemMatrices, Mesh

DENSE_EIG_CUTOFF = 1300  # below this many nodes, take the full dense spectrum


class PriorFactorizationError(RuntimeError):
    """Covariance factorization failed (matrix not numerically SPD)."""


@dataclass(frozen=True)
class ProjectionBasis:
    """Leading M-orthonormal eigenpairs of a prior covariance.

    ``E[:, j]`` is the eigenvector for ``lam[j]``; ``lam`` is sorted
    nonincreasing and ``full_trace`` is the trace of the whole covariance
    (all n eigenvalues, not just the stored head).
    """

    E: np.ndarray
    lam: np.ndarray
    full_trace: float

    @property
    def N(self) -> int:
        return self.E.shape[1]

    def head_trace(self) -> float:
        return float(self.lam.sum())

    def tail_trace(self) -> float:
        return self.full_trace - self.head_trace()


def _fix_signs(E: np.ndarray) -> np.ndarray:
    """Deterministic eigenvector orientation: largest-|entry| component positive."""
    idx = np.argmax(np.abs(E), axis=0)
    signs = np.sign(E[idx, np.arange(E.shape[1])])
    signs[signs == 0] = 1.0
    return E * signs


class BiLaplacianPrior:
    """Covariance (K^-1 M)^2 in the FE geometry, K = delta*K_lap + gamma*M."""

    kind = "bilaplacian"

    def __init__(self, matrices: FemMatrices, mean: np.ndarray | None = None):
        self.matrices = matrices
        self.gamma = matrices.gamma
        self.delta = matrices.delta
        n = matrices.n
        self.n = n
        self.mean = np.zeros(n) if mean is None else np.asarray(mean, dtype=float)
        self._K_lu = spla.splu(matrices.K_prior.tocsc())
        self._M_lu = spla.splu(matrices.M.tocsc())
        self._full_trace: float | None = None
        self._dense_spectrum: tuple[np.ndarray, np.ndarray] | None = None

    def apply(self, a: np.ndarray) -> np.ndarray:
        """Gamma a = K^-1 M K^-1 M a (two sparse K-solves)."""
        return self._K_lu.solve(self.matrices.M @ self._K_lu.solve(self.matrices.M @ a))

    def apply_inv(self, a: np.ndarray) -> np.ndarray:
        """Gamma^-1 a = M^-1 K M^-1 K a (two sparse M-solves)."""
        return self._M_lu.solve(self.matrices.K_prior @ self._M_lu.solve(self.matrices.K_prior @ a))

    def _dense_pencil(self) -> tuple[np.ndarray, np.ndarray]:
        if self._dense_spectrum is None:
            K = self.matrices.K_prior.toarray()
            M = self.matrices.M.toarray()
            mu, X = sla.eigh(K, M)          # ascending mu, M-orthonormal X
            self._dense_spectrum = (mu, X)
        return self._dense_spectrum

    def eigenbasis(self, N: int) -> ProjectionBasis:
        """Leading N modes: generalized pencil K x = mu M x, lam = mu^-2."""
        if not 1 <= N <= self.n:
            raise ValueError(f"rank N must lie in [1, {self.n}], got {N}")
        if self.n <= DENSE_EIG_CUTOFF:
            mu, X = self._dense_pencil()
            head_mu, head_X = mu[:N], X[:, :N]
        else:
            mu, X = spla.eigsh(self.matrices.K_prior, k=N, M=self.matrices.M,
                               sigma=0.0, which="LM")
            order = np.argsort(mu, kind="stable")
            head_mu, head_X = mu[order], X[:, order]
        lam = head_mu ** (-2.0)
        return ProjectionBasis(E=_fix_signs(head_X), lam=lam, full_trace=self.trace())

    def trace(self) -> float:
        """Trace of the covariance: sum of mu_j^-2 over the whole pencil."""
        if self._full_trace is None:
            if self.n <= DENSE_EIG_CUTOFF:
                mu, _ = self._dense_pencil()
                self._full_trace = float(np.sum(mu ** (-2.0)))
            else:
                # tr (K^-1 M)^2 = sum_ij X_ij X_ji with X = K^-1 M
                X = self._K_lu.solve(self.matrices.M.toarray())
                self._full_trace = float(np.sum(X * X.T))
        return self._full_trace

    def sample(self, basis: ProjectionBasis, seed: int) -> np.ndarray:
        return _sample_from_basis(self.mean, basis, seed)


class OrnsteinUhlenbeckPrior:
    """Exponential-distance covariance on the node lattice.

    The raw matrix C is symmetric in the Euclidean sense; the operator used
    here is its M^1/2-conjugation M^-1/2 C M^1/2, which is M-symmetric, keeps
    the spectrum (and hence the trace n*eta^2) of C, and turns the orthonormal
    eigenvectors of C into M-orthonormal ones.
    """

    kind = "ornstein-uhlenbeck"

    def __init__(self, mesh: Mesh, matrices: FemMatrices, eta: float, ell: float,
                 mean: np.ndarray | None = None):
        if eta <= 0 or ell <= 0:
            raise ValueError("eta and ell must be positive")
        self.matrices = matrices
        self.eta = eta
        self.ell = ell
        n = matrices.n
        self.n = n
        self.mean = np.zeros(n) if mean is None else np.asarray(mean, dtype=float)

        dist = cdist(mesh.nodes, mesh.nodes)
        self.C = eta * eta * np.exp(-dist / ell)
        try:
            self._C_cho = sla.cho_factor(self.C, lower=True)
        except sla.LinAlgError as exc:  # pragma: no cover - eta, ell > 0 keep C SPD
            raise PriorFactorizationError(f"covariance factorization failed: {exc}") from exc

        s, Q = sla.eigh(matrices.M.toarray())
        self._M_sqrt = _sym(Q @ (np.sqrt(s)[:, None] * Q.T))
        self._M_isqrt = _sym(Q @ ((1.0 / np.sqrt(s))[:, None] * Q.T))
        self._spectrum: tuple[np.ndarray, np.ndarray] | None = None

    def apply(self, a: np.ndarray) -> np.ndarray:
        return self._M_isqrt @ (self.C @ (self._M_sqrt @ a))

    def apply_inv(self, a: np.ndarray) -> np.ndarray:
        return self._M_isqrt @ sla.cho_solve(self._C_cho, self._M_sqrt @ a)

    def _eig(self) -> tuple[np.ndarray, np.ndarray]:
        if self._spectrum is None:
            lam, Z = sla.eigh(self.C)       # ascending
            self._spectrum = (lam[::-1].copy(), Z[:, ::-1].copy())
        return self._spectrum

    def eigenbasis(self, N: int) -> ProjectionBasis:
        if not 1 <= N <= self.n:
            raise ValueError(f"rank N must lie in [1, {self.n}], got {N}")
        lam, Z = self._eig()
        E = self._M_isqrt @ Z[:, :N]
        return ProjectionBasis(E=_fix_signs(E), lam=lam[:N].copy(), full_trace=self.trace())

    def trace(self) -> float:
        return float(np.trace(self.C))

    def sample(self, basis: ProjectionBasis, seed: int) -> np.ndarray:
        return _sample_from_basis(self.mean, basis, seed)


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def _sample_from_basis(mean: np.ndarray, basis: ProjectionBasis, seed: int) -> np.ndarray:
    """Karhunen-Loeve draw mean + sum_j sqrt(lam_j) xi_j e_j, xi ~ N(0, I)."""
    if basis.N < 1:
        raise ValueError("sampling needs an eigenbasis with at least one mode")
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(basis.N)
    return mean + basis.E @ (np.sqrt(basis.lam) * xi)


def project_operator_rep(op_rep: np.ndarray, E: np.ndarray, M) -> np.ndarray:
    """Matrix of an operator in an M-orthonormal basis: [ (Op e_j, e_k)_M ]_{kj}."""
    G = E.T @ (M @ (op_rep @ E))
    return _sym(G)

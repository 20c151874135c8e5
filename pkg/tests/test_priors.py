import numpy as np
import pytest
from numpy.testing import assert_allclose

import patoed.priors as priors_mod
from patoed import assemble, build_mesh
from patoed.grid_fem import m_dot
from patoed.priors import (
    BiLaplacianPrior,
    OrnsteinUhlenbeckPrior,
    ProjectionBasis,
    _sample_from_basis,
)


@pytest.fixture(scope="module")
def fem10():
    mesh = build_mesh(10)
    return mesh, assemble(mesh, 1.0, 8.0, 10, 0.2)


@pytest.fixture(scope="module")
def bilap(fem10):
    _, mat = fem10
    return BiLaplacianPrior(mat)


@pytest.fixture(scope="module")
def ou(fem10):
    mesh, mat = fem10
    return OrnsteinUhlenbeckPrior(mesh, mat, eta=0.1, ell=0.1)


def test_roundtrip_inverse_pair(fem10, bilap, ou):
    _, mat = fem10
    rng = np.random.default_rng(0)
    a = rng.standard_normal(mat.n)
    for prior in (bilap, ou):
        back = prior.apply(prior.apply_inv(a))
        assert np.linalg.norm(back - a) <= 1e-8 * np.linalg.norm(a)


def test_bilaplacian_inverse_on_constants(fem10, bilap):
    # stiffness annihilates constants, so Gamma^-1 1 = gamma^2 1 = 1
    _, mat = fem10
    one = np.ones(mat.n)
    assert_allclose(bilap.apply_inv(one), one, rtol=1e-8)


def test_ou_diagonal_is_variance(ou):
    assert_allclose(np.diag(ou.C), 0.01, rtol=1e-14)


def test_ou_rows_decay_with_distance(fem10, ou):
    mesh, _ = fem10
    for i in (0, 60, 120):
        dist = np.linalg.norm(mesh.nodes - mesh.nodes[i], axis=1)
        order = np.argsort(dist, kind="stable")
        vals = ou.C[i, order]
        assert np.all(vals > 0)
        assert np.all(np.diff(vals) <= 1e-15)


def test_m_orthonormal_eigenbasis(fem10, bilap, ou):
    _, mat = fem10
    for prior in (bilap, ou):
        basis = prior.eigenbasis(12)
        G = basis.E.T @ (mat.M @ basis.E)
        assert np.abs(G - np.eye(12)).max() <= 1e-10
        assert np.all(np.diff(basis.lam) <= 1e-14)
        assert np.all(basis.lam > 0)
        assert basis.full_trace >= basis.lam.sum() - 1e-12


def test_full_spectrum_sums_to_trace(fem10, bilap, ou):
    _, mat = fem10
    for prior in (bilap, ou):
        basis = prior.eigenbasis(mat.n)
        assert_allclose(basis.lam.sum(), prior.trace(), rtol=1e-6)


def test_bilaplacian_top_mode_is_constant(bilap):
    basis = bilap.eigenbasis(1)
    assert_allclose(basis.lam[0], 1.0, rtol=1e-9)
    e1 = basis.E[:, 0]
    assert np.abs(e1 - e1.mean()).max() <= 1e-8 * np.abs(e1.mean())


def test_ou_trace_is_n_eta_squared(fem10, ou):
    _, mat = fem10
    assert_allclose(ou.trace(), mat.n * 0.01, rtol=1e-14)


def test_prior_inverse_is_m_symmetric(fem10, bilap, ou):
    _, mat = fem10
    rng = np.random.default_rng(1)
    for prior in (bilap, ou):
        u, v = rng.standard_normal(mat.n), rng.standard_normal(mat.n)
        s1 = m_dot(mat.M, prior.apply_inv(u), v)
        s2 = m_dot(mat.M, u, prior.apply_inv(v))
        assert abs(s1 - s2) <= 1e-9 * abs(s1)


def test_eigenvalue_decay_rate():
    mesh = build_mesh(20)
    mat = assemble(mesh, 1.0, 8.0, 10, 0.2)
    basis = BiLaplacianPrior(mat).eigenbasis(100)
    j = np.arange(1, 101)
    m = j >= 10
    slope = np.polyfit(np.log(j[m]), np.log(basis.lam[m]), 1)[0]
    assert slope <= -1.5


def test_sampling_is_deterministic(bilap):
    basis = bilap.eigenbasis(8)
    d1 = bilap.sample(basis, seed=11)
    d2 = bilap.sample(basis, seed=11)
    assert np.array_equal(d1, d2)
    d3 = bilap.sample(basis, seed=12)
    assert not np.array_equal(d1, d3)


def test_sampling_rejects_empty_basis(bilap):
    with pytest.raises(ValueError):
        bilap.eigenbasis(0)
    empty = ProjectionBasis(E=np.zeros((121, 0)), lam=np.zeros(0), full_trace=1.0)
    with pytest.raises(ValueError):
        _sample_from_basis(np.zeros(121), empty, seed=0)


def test_karhunen_loeve_coefficient_variance(fem10, bilap):
    _, mat = fem10
    basis = bilap.eigenbasis(6)
    coefs = [
        m_dot(mat.M, bilap.sample(basis, seed=1000 + s) - bilap.mean, basis.E[:, 0])
        for s in range(1000)
    ]
    assert abs(np.var(coefs) - basis.lam[0]) <= 0.15 * basis.lam[0]


def test_sparse_eigen_path_matches_dense(fem10, monkeypatch):
    mesh, mat = fem10
    dense_basis = BiLaplacianPrior(mat).eigenbasis(10)
    dense_trace = BiLaplacianPrior(mat).trace()
    monkeypatch.setattr(priors_mod, "DENSE_EIG_CUTOFF", 50)
    sparse_prior = BiLaplacianPrior(mat)
    sparse_basis = sparse_prior.eigenbasis(10)
    assert_allclose(sparse_basis.lam, dense_basis.lam, rtol=1e-8)
    assert_allclose(sparse_prior.trace(), dense_trace, rtol=1e-8)
    # eigenvectors agree up to sign on the non-degenerate first mode
    inner = m_dot(mat.M, sparse_basis.E[:, 0], dense_basis.E[:, 0])
    assert_allclose(abs(inner), 1.0, rtol=1e-8)


def test_ou_requires_positive_hyperparameters(fem10):
    mesh, mat = fem10
    with pytest.raises(ValueError):
        OrnsteinUhlenbeckPrior(mesh, mat, eta=-0.1, ell=0.1)
    with pytest.raises(ValueError):
        OrnsteinUhlenbeckPrior(mesh, mat, eta=0.1, ell=0.0)

import numpy as np
import pytest
from numpy.testing import assert_allclose

from patoed.grid_fem import (
    MeshError,
    assemble,
    build_mesh,
    export_triplets,
    load_triplets,
    m_dot,
    simpson_weights,
)


def test_node_count_matches_paper_resolution():
    assert build_mesh(50).n_nodes == 2601


def test_node_count_small():
    assert build_mesh(10).n_nodes == 121


def test_rejects_bad_resolutions():
    with pytest.raises(MeshError):
        build_mesh(7)
    with pytest.raises(MeshError):
        build_mesh(2)
    with pytest.raises(MeshError):
        build_mesh(14)


def test_obs_nodes_enumeration_oracle():
    # independent oracle: scan every node for max(|x|, |y|) == 0.8
    mesh = build_mesh(10)
    expected = {
        i for i, (x, y) in enumerate(mesh.nodes)
        if abs(max(abs(x), abs(y)) - 0.8) < 1e-12
    }
    assert set(mesh.obs_nodes) == expected
    assert len(mesh.obs_nodes) > 0


def test_obs_loop_is_closed():
    mesh = build_mesh(20)
    # each observation node appears in exactly two segments
    counts = {}
    for a, b in mesh.obs_segments:
        counts[a] = counts.get(a, 0) + 1
        counts[b] = counts.get(b, 0) + 1
    assert set(counts) == set(mesh.obs_nodes)
    assert all(c == 2 for c in counts.values())
    assert_allclose(mesh.obs_lengths.sum(), 6.4, rtol=1e-14)


def test_positive_triangle_areas():
    mesh = build_mesh(10)
    xy = mesh.nodes[mesh.triangles]
    areas = 0.5 * (
        (xy[:, 1, 0] - xy[:, 0, 0]) * (xy[:, 2, 1] - xy[:, 0, 1])
        - (xy[:, 2, 0] - xy[:, 0, 0]) * (xy[:, 1, 1] - xy[:, 0, 1])
    )
    assert np.all(areas > 0)


def test_boundary_disjoint_from_free_set():
    mesh = build_mesh(10)
    mat = assemble(mesh, 1.0, 8.0, 10, 0.2)
    assert len(np.intersect1d(mat.free_nodes, mesh.boundary_nodes)) == 0
    assert len(mat.free_nodes) + len(mesh.boundary_nodes) == mesh.n_nodes


@pytest.fixture(scope="module")
def mat20():
    mesh = build_mesh(20)
    return mesh, assemble(mesh, 1.0, 8.0, 100, 0.2)


def test_mass_integrates_domain(mat20):
    _, mat = mat20
    one = np.ones(mat.n)
    assert_allclose(one @ (mat.M @ one), 4.0, rtol=1e-13)


def test_stiffness_annihilates_constants(mat20):
    _, mat = mat20
    one = np.ones(mat.n)
    assert abs(one @ (mat.K_lap_full @ one)) < 1e-12


def test_stiffness_exact_on_linears(mat20):
    mesh, mat = mat20
    u = mesh.nodes[:, 0]
    assert_allclose(u @ (mat.K_lap_full @ u), 4.0, atol=1e-12)


def test_boundary_mass_measures_loop(mat20):
    _, mat = mat20
    one = np.ones(mat.n)
    assert_allclose(one @ (mat.B @ one), 6.4, rtol=1e-13)
    assert_allclose(mat.B.sum(), 6.4, rtol=1e-13)


def test_structural_symmetry(mat20):
    _, mat = mat20
    rng = np.random.default_rng(0)
    for A in (mat.M, mat.K_lap_full, mat.K_prior, mat.B):
        assert (A - A.T).nnz == 0
        u, v = rng.standard_normal(mat.n), rng.standard_normal(mat.n)
        assert abs((A @ u) @ v - (A @ v) @ u) < 1e-9 * max(1.0, abs((A @ u) @ v))


def test_mass_positive_definite(mat20):
    _, mat = mat20
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.standard_normal(mat.n)
        assert m_dot(mat.M, x, x) > 0


def test_prior_matrix_combination(mat20):
    _, mat = mat20
    diff = mat.K_prior - (8.0 * mat.K_lap_full + 1.0 * mat.M)
    assert abs(diff).max() < 1e-13


def test_simpson_weights_basic():
    w = simpson_weights(100, 0.2)
    assert len(w) == 101
    assert np.all(w > 0)
    assert_allclose(w.sum(), 0.2, rtol=1e-14)


def test_simpson_exact_on_quadratics():
    T = 0.2
    for nt in (10, 50, 100):
        w = simpson_weights(nt, T)
        t = np.linspace(0, T, nt + 1)
        assert_allclose(w @ t**2, T**3 / 3.0, rtol=1e-12)


def test_simpson_rejects_odd():
    with pytest.raises(ValueError):
        simpson_weights(5, 1.0)


def test_assemble_validates_inputs():
    mesh = build_mesh(10)
    with pytest.raises(ValueError):
        assemble(mesh, -1.0, 8.0, 10, 0.2)
    with pytest.raises(ValueError):
        assemble(mesh, 1.0, 8.0, 11, 0.2)
    with pytest.raises(ValueError):
        assemble(mesh, 1.0, 8.0, 10, -0.2)


def test_triplet_roundtrip(tmp_path):
    mesh = build_mesh(10)
    mat = assemble(mesh, 1.0, 8.0, 10, 0.2)
    path = tmp_path / "mass.txt"
    export_triplets(mat.M, path)
    back = load_triplets(path, mat.M.shape)
    assert abs(mat.M - back).max() < 1e-16

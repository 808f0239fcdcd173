import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pbfplan import STAINLESS_316L, Environment, Material, assemble_dynamics, build_voxel_grid, graph_laplacian
from pbfplan.transcription import StepOperator

from conftest import ALPHA, HEAT_CAPACITY, L_VOXEL, PAIR_DECAY_RATE, box, make_system

domains = arrays(bool, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))).filter(np.any)


def test_single_voxel_areas():
    mesh = build_voxel_grid(box(1, 1, 1), L_VOXEL)
    assert mesh.n == 1 and mesh.n_edges == 0
    assert mesh.baseplate_area[0] == pytest.approx(4e-8)
    assert mesh.exposed_area[0] == pytest.approx(5 * 4e-8)


def test_pair_areas():
    mesh = build_voxel_grid(box(2, 1, 1), L_VOXEL)
    assert mesh.n == 2 and mesh.n_edges == 1
    np.testing.assert_allclose(mesh.exposed_area, 4 * L_VOXEL**2)
    np.testing.assert_allclose(mesh.baseplate_area, L_VOXEL**2)


def test_demonstration_grid_size():
    assert build_voxel_grid(box(24, 22, 4), L_VOXEL).n == 2112


def test_empty_domain_rejected():
    with pytest.raises(ValueError, match="empty domain"):
        build_voxel_grid(np.zeros((2, 2, 2), bool), L_VOXEL)


def test_overhang_bottom_face_is_exposed():
    dom = np.zeros((2, 1, 2), bool)
    dom[0, 0, :] = True
    dom[1, 0, 1] = True  # hangs over empty space
    mesh = build_voxel_grid(dom, L_VOXEL)
    over = mesh.index[1, 0, 1]
    assert mesh.baseplate_area[over] == 0
    # +x, +y, -y, top and the uncovered bottom face
    assert mesh.exposed_area[over] == pytest.approx(5 * L_VOXEL**2)


@pytest.mark.parametrize(
    "domain, expected",
    [
        (box(1, 1, 1), np.zeros((1, 1))),
        (box(2, 1, 1), np.array([[1.0, -1.0], [-1.0, 1.0]])),
    ],
)
def test_small_laplacians(domain, expected):
    L = graph_laplacian(build_voxel_grid(domain, L_VOXEL)).toarray()
    np.testing.assert_array_equal(L, expected)


def test_path3_spectrum():
    L = graph_laplacian(build_voxel_grid(box(3, 1, 1), L_VOXEL)).toarray()
    np.testing.assert_array_equal(L.sum(axis=1), 0)
    # dense eigendecomposition of the 3-path Laplacian: {0, 1, 3}
    np.testing.assert_allclose(np.linalg.eigvalsh(L), [0.0, 1.0, 3.0], atol=1e-12)


@given(domains, st.integers(0, 2**31 - 1))
def test_laplacian_properties(domain, seed):
    mesh = build_voxel_grid(domain, L_VOXEL)
    L = graph_laplacian(mesh)
    assert np.all(L @ np.ones(mesh.n) == 0)
    assert abs(L - L.T).max() == 0
    x = np.random.default_rng(seed).normal(size=(100, mesh.n))
    assert np.all(np.einsum("ij,ij->i", x, (L @ x.T).T) >= -1e-12)
    assert np.bincount(mesh.edges.ravel(), minlength=mesh.n).max(initial=0) <= 6


@given(domains)
def test_dynamics_structure(domain):
    mesh = build_voxel_grid(domain, L_VOXEL)
    dyn = assemble_dynamics(mesh, STAINLESS_316L, Environment(10.0, 300.0, 700.0))
    A = dyn.A.tocoo()
    off = A.row != A.col
    assert np.all(A.data[off] >= 0)
    assert dyn.A.nnz == mesh.n + 2 * mesh.n_edges
    rows = np.asarray(dyn.A.sum(axis=1)).ravel()
    assert np.all(rows <= 1e-9)
    interior = (mesh.exposed_area == 0) & (mesh.baseplate_area == 0)
    np.testing.assert_allclose(rows[interior], 0.0, atol=1e-9)
    # adjacent pairs only
    pairs = {tuple(e) for e in mesh.edges}
    assert all((min(i, j), max(i, j)) in pairs for i, j in zip(A.row[off], A.col[off]))


def test_insulated_single_voxel_is_static():
    mesh, dyn, _ = make_system(box(1, 1, 1), h=0.0, baseplate=False)
    assert dyn.A.toarray() == pytest.approx(np.zeros((1, 1)))
    assert dyn.e == pytest.approx([0.0])
    op = StepOperator(dyn, None, 1e-3)
    assert op.step(np.array([812.0])) == pytest.approx([812.0])


def test_material_constants():
    assert STAINLESS_316L.diffusivity == pytest.approx(ALPHA, rel=1e-14)
    assert STAINLESS_316L.heat_capacity(L_VOXEL) == pytest.approx(HEAT_CAPACITY, rel=1e-14)
    assert HEAT_CAPACITY == pytest.approx(4.187e-5, rel=1e-3)


def test_pair_decay_rate():
    mesh, dyn, _ = make_system(box(2, 1, 1), h=0.0, baseplate=False)
    # the difference mode of the pair is an eigenvector with eigenvalue -2 alpha / l^2
    w = np.linalg.eigvalsh(dyn.A.toarray())
    assert w.min() == pytest.approx(-PAIR_DECAY_RATE, rel=1e-12)
    assert PAIR_DECAY_RATE == pytest.approx(297.1, abs=0.05)


def test_nonpositive_material_rejected():
    with pytest.raises(ValueError):
        Material(0.0, 7269.0, 720.0)
    with pytest.raises(ValueError):
        Environment(-1.0, 300.0, 700.0)


def test_energy_conserved_when_insulated(rng):
    mesh, dyn, _ = make_system(box(3, 3, 2), h=0.0, baseplate=False)
    T = 500 + 400 * rng.random(mesh.n)
    e0 = dyn.heat_capacity * T.sum()
    op = StepOperator(dyn, None, 1e-3)
    for _ in range(1000):  # 1 s
        T = op.step(T)
    assert abs(dyn.heat_capacity * T.sum() - e0) / e0 <= 1e-9


def test_relaxes_to_fixed_point(rng):
    mesh, dyn, _ = make_system(box(3, 2, 2), h=50.0)
    Tstar = dyn.fixed_point()
    np.testing.assert_allclose(dyn.A @ Tstar + dyn.e, 0, atol=1e-6)
    T = 300 + 1000 * rng.random(mesh.n)
    op = StepOperator(dyn, None, 1e-3)
    res = []
    for _ in range(300):
        T = op.step(T)
        res.append(np.linalg.norm(dyn.A @ T + dyn.e))
    assert np.all(np.diff(res) <= 1e-9 * res[0])
    assert res[-1] < 1e-3 * res[0]


def test_laplacian_sparse_type():
    L = graph_laplacian(build_voxel_grid(box(2, 2, 2), L_VOXEL))
    assert sp.issparse(L) and L.shape == (8, 8)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csahomog.csa import (CSABackend, Centroid, CentroidRegistry, StrainPoint,
                          approximate_coefficients, approximate_microstructure, blend_weights,
                          classify, cover_uncovered, kmeans, polar_decompose,
                          relative_deformation, rotate2, rotate4, strain_coordinates,
                          strain_tensor)
from csahomog.micro import CoefficientSet, MicroState, StepInfo, micro_step

small = st.floats(-0.3, 0.3, allow_nan=False)
mat2 = st.tuples(small, small, small, small).map(lambda t: np.array(t).reshape(2, 2))


def rotation(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


@settings(max_examples=80, deadline=None)
@given(mat2)
def test_polar_decomposition(H):
    F = np.eye(2) + H
    if np.linalg.det(F) < 0.2:
        return
    R, U = polar_decompose(F)
    np.testing.assert_allclose(R @ U, F, atol=1e-12)
    np.testing.assert_allclose(R.T @ R, np.eye(2), atol=1e-12)
    assert np.linalg.det(R) > 0
    np.testing.assert_allclose(U, U.T, atol=1e-13)
    assert np.linalg.eigvalsh(U).min() > 0


def test_polar_rejects_reflection():
    with pytest.raises(ValueError):
        polar_decompose(np.diag([1.0, -1.0]))


@pytest.mark.parametrize("metric", ["plain", "tensor"])
def test_strain_coordinates_roundtrip(metric):
    U = np.array([[1.02, 0.003], [0.003, 0.99]])
    e = strain_coordinates(U, metric)
    np.testing.assert_allclose(strain_tensor(e, metric), U - np.eye(2), atol=1e-16)
    if metric == "tensor":
        assert np.linalg.norm(e) == pytest.approx(np.linalg.norm(U - np.eye(2)))


def test_relative_deformation_vanishes_at_center():
    e = strain_tensor(np.array([0.01, -0.003, 0.002]))
    assert np.abs(relative_deformation(e, e)).max() < 1e-15
    g = relative_deformation(e, np.zeros((2, 2)))
    np.testing.assert_allclose(g, e, atol=1e-16)


def _registry(centers, rho=0.01):
    reg = CentroidRegistry(rho)
    for j, c in enumerate(centers):
        coeffs = CoefficientSet(np.full((2, 2, 2, 2), float(j)), np.full((2, 2), float(j)),
                                np.zeros((3, 2, 2, 2, 2)), np.zeros((3, 2, 2)))
        reg.append(Centroid(j, np.asarray(c, float), None, coeffs, -1, StepInfo()))
    return reg


def test_classification_is_strict():
    reg = _registry([[0, 0, 0], [0.02, 0, 0]])
    pts = np.array([[0.01, 0, 0], [0.005, 0, 0], [0.0, 0.0, 0.0], [0.05, 0, 0]])
    sets, unc = classify(pts, reg)
    assert sets[0].tolist() == []
    assert sets[1].tolist() == [0]
    assert sets[2].tolist() == [0]
    assert unc.tolist() == [0, 3]


def test_blend_weights_normalized_and_quadratic():
    reg = _registry([[0, 0, 0], [0.01, 0, 0]], rho=0.01)
    w = blend_weights(np.array([0.004, 0, 0]), [0, 1], reg)
    assert w.sum() == pytest.approx(1.0)
    assert w[0] / w[1] == pytest.approx((0.006 / 0.004) ** 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.floats(1e-4, 0.05), st.integers(0, 5))
def test_cover_every_point_within_rho(n, rho, seed):
    E = np.random.default_rng(seed).uniform(-0.02, 0.02, (n, 3))
    C = cover_uncovered(E, rho, seed)
    d = np.linalg.norm(E[:, None] - C[None], axis=-1).min(axis=1)
    assert np.all(d < rho)
    assert len(C) <= len(np.unique(E, axis=0))


def test_cover_finds_minimal_k_for_separated_clusters():
    rng = np.random.default_rng(0)
    E = np.concatenate([rng.normal(0, 1e-4, (20, 3)), rng.normal(0.01, 1e-4, (15, 3))])
    C = cover_uncovered(E, 0.002, 0)
    assert len(C) == 2


def test_cover_is_deterministic():
    E = np.random.default_rng(5).uniform(-0.01, 0.01, (40, 3))
    a = cover_uncovered(E, 0.004, 7)
    b = cover_uncovered(E, 0.004, 7)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.diff(a[:, 0]) >= 0)


def test_kmeans_single_cluster_is_mean():
    E = np.random.default_rng(1).normal(size=(10, 3))
    c, lab = kmeans(E, 1, np.random.default_rng(0))
    np.testing.assert_allclose(c[0], E.mean(axis=0))
    assert np.all(lab == 0)


def test_registry_validates_radius():
    with pytest.raises(ValueError):
        CentroidRegistry(0.0)


@pytest.fixture(scope="module")
def grown(small_problem):
    be = CSABackend(small_problem, rho=0.004, seed=3)
    F = np.array([np.eye(2), np.diag([1.006, 0.998]), np.array([[1.0, 0.004], [0.004, 1.0]])])
    field = be.get_coefficients(F)
    return be, F, field


def test_backend_creates_centroids_for_uncovered_points(grown):
    be, F, field = grown
    assert field.n_new == len(be.registry) >= 2
    e = strain_coordinates(polar_decompose(F)[1])
    sets, unc = classify(e, be.registry)
    assert len(unc) == 0
    assert be.get_coefficients(F).n_new == 0


def test_backend_undeformed_qps_share_coefficients(small_problem):
    be = CSABackend(small_problem, rho=0.01)
    field = be.get_coefficients(np.broadcast_to(np.eye(2), (5, 2, 2)).copy())
    assert len(be.registry) == 1
    assert np.all(field.A == field.A[0]) and np.all(field.S == 0)


def test_approximation_exact_at_centroid(grown, small_problem):
    be, _, _ = grown
    c = be.registry.centroids[-1]
    U = np.eye(2) + strain_tensor(c.center)
    ref, _, _ = micro_step(small_problem, small_problem.initial_state(), U - np.eye(2),
                           sensitivities=False)
    R = rotation(0.3)
    approx = approximate_coefficients(StrainPoint(c.center, R), be.registry, [c.id])
    np.testing.assert_allclose(approx.S, rotate2(R, ref.S), atol=1e-7 * np.abs(ref.S).max())
    np.testing.assert_allclose(approx.A, rotate4(R, ref.A), atol=1e-7 * np.abs(ref.A).max())


def test_first_order_extrapolation_accuracy(grown, small_problem):
    be, _, _ = grown
    c = be.registry.centroids[0]
    for h in (2e-3, 1e-3):
        e = np.array([h, -0.5 * h, 0.3 * h])
        U = np.eye(2) + strain_tensor(e)
        ref, _, _ = micro_step(small_problem, small_problem.initial_state(), U - np.eye(2),
                               sensitivities=False)
        ap = approximate_coefficients(StrainPoint(e, np.eye(2)), be.registry, [0])
        err = np.abs(ap.S - ref.S).max() / np.abs(ref.S).max()
        assert err < 50 * h  # second-order remainder relative to a first-order signal
        errs = err if h == 2e-3 else (errs, err)
    assert errs[1] < 0.6 * errs[0]


def test_reconstructed_microstructure_at_center(grown):
    be, _, _ = grown
    c = be.registry.centroids[1]
    y = approximate_microstructure(StrainPoint(c.center, np.eye(2)), be.registry, [c.id])
    np.testing.assert_allclose(y, c.state.y, atol=1e-12)


def test_centroid_table_lists_every_centroid(grown):
    be, _, _ = grown
    lines = be.registry.table().splitlines()
    assert lines[0].startswith("# id e11 e22 e12")
    assert len(lines) == len(be.registry) + 1

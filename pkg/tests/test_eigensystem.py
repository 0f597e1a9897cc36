import numpy as np
import pytest

from microstack.eigensystem import (
    BoundarySpec,
    build_eigensystem,
    cache_clear,
    characteristic,
    gauss_nodes,
)


MODES = 16
NODES = 128


def test_inert_walls_give_the_cosine_spectrum():
    es = build_eigensystem(BoundarySpec(), MODES, NODES)
    assert es.is_fourier
    expected = (np.arange(MODES) * np.pi) ** 2
    np.testing.assert_allclose(es.eigenvalues, expected, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("bottom, top", [(2.0, 0.0), (0.5, 3.0), (1e-3, 1e-3)])
def test_robin_wavenumbers_solve_the_characteristic_equation(bottom, top):
    es = build_eigensystem(BoundarySpec(bottom, top), MODES, NODES)
    mu = es.wavenumbers
    assert np.all(mu > 0)
    assert np.all(np.diff(es.eigenvalues) > 0)
    residual = characteristic(mu, bottom, top)
    assert np.max(np.abs(residual)) < 1e-8 * max(1.0, float(mu.max()))


def test_eigenfunctions_are_orthonormal():
    es = build_eigensystem(BoundarySpec(1.5, 0.7), MODES, NODES)
    y, w = gauss_nodes(NODES)
    basis = es.eigenfunctions(y)
    np.testing.assert_allclose(basis.T @ (w[:, None] * basis), np.eye(MODES), atol=1e-8)


def test_production_at_both_walls_gives_a_growing_mode():
    es = build_eigensystem(BoundarySpec(-1.0, -1.0), MODES, NODES)
    assert es.wavenumbers[0] < 0
    assert es.eigenvalues[0] < 0
    assert np.all(np.diff(es.eigenvalues) > 0)


def test_drift_between_inert_walls_keeps_a_steady_mode():
    es = build_eigensystem(BoundarySpec(0.0, 0.0, drift=1.0), MODES, NODES)
    assert not es.is_fourier
    assert es.shift == pytest.approx(0.25)
    assert abs(es.eigenvalues[0]) < 1e-9
    assert np.all(es.eigenvalues[1:] > 0)


def test_systems_are_cached_on_boundary_data():
    spec = BoundarySpec(0.3, 0.2)
    first = build_eigensystem(spec, MODES, NODES)
    assert build_eigensystem(BoundarySpec(0.3 + 1e-13, 0.2), MODES, NODES) is first
    cache_clear()
    assert build_eigensystem(spec, MODES, NODES) is not first


def test_gauss_nodes_integrate_polynomials_on_unit_interval():
    y, w = gauss_nodes(8)
    assert w.sum() == pytest.approx(1.0)
    assert float(w @ y ** 3) == pytest.approx(0.25)
    assert np.all((y > 0) & (y < 1))

import numpy as np
import pytest

from field_ops import (Grid, ScalarField, VectorField, compose_maps, gaussian_smooth, gradient, interpolate,
                       jacobian, resample)
from run_utils import InvalidParameter


def _ramp(grid, fn):
    x = grid.coordinates()
    return ScalarField(grid, fn(*x))


def test_grid_spacing_and_validation():
    grid = Grid((5, 9))
    assert grid.spacing == (0.25, 0.125)
    assert grid.cell_volume == pytest.approx(0.25 * 0.125)
    assert grid.scaled(0.5).dims == (4, 4)
    for dims in [(3, 8), (8,), (4, 4, 4, 4)]:
        with pytest.raises(InvalidParameter):
            Grid(dims)


def test_fields_check_shape_and_finiteness():
    grid = Grid((4, 4))
    with pytest.raises(InvalidParameter):
        ScalarField(grid, np.zeros((4, 5)))
    with pytest.raises(InvalidParameter):
        VectorField(grid, np.zeros((4, 4)))
    with pytest.raises(InvalidParameter):
        ScalarField(grid, np.full((4, 4), np.nan))
    f = ScalarField(grid, np.zeros((4, 4)))
    with pytest.raises(ValueError):
        f.values[0, 0] = 1.0


# smoothing

def test_smoothing_keeps_constants():
    grid = Grid((12, 16))
    f = VectorField(grid, np.full((2, 12, 16), 3.5))
    np.testing.assert_allclose(gaussian_smooth(f, 0.2).values, 3.5, rtol=0, atol=1e-12)


def test_smoothing_with_zero_sigma_is_identity(rng):
    f = ScalarField(Grid((8, 8)), rng.normal(size=(8, 8)))
    assert gaussian_smooth(f, 0.0) is f


def test_negative_sigma_is_rejected():
    with pytest.raises(InvalidParameter):
        gaussian_smooth(ScalarField(Grid((8, 8)), np.zeros((8, 8))), -0.1)


def test_smoothed_impulse_matches_direct_periodic_convolution():
    n, sigma = 16, 0.1
    grid = Grid((n, n))
    h = grid.spacing[0]
    impulse = np.zeros((n, n))
    impulse[5, 9] = 1.0

    j = np.arange(n)
    axis = sum(np.exp(-((j + m * n) * h) ** 2 / (2 * sigma ** 2)) for m in range(-4, 5))
    kernel = np.outer(axis, axis)
    kernel /= kernel.sum()
    expected = np.empty((n, n))
    for a in range(n):
        for b in range(n):
            expected[a, b] = kernel[(a - 5) % n, (b - 9) % n]

    out = gaussian_smooth(ScalarField(grid, impulse), sigma).values
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-10)


def test_smoothing_preserves_the_mean(rng):
    f = ScalarField(Grid((20, 24)), rng.normal(size=(20, 24)))
    assert gaussian_smooth(f, 0.07).values.mean() == pytest.approx(f.values.mean(), abs=1e-12)


def test_smoothing_semigroup(rng):
    f = ScalarField(Grid((32, 32)), rng.normal(size=(32, 32)))
    twice = gaussian_smooth(gaussian_smooth(f, 0.08), 0.06).values
    once = gaussian_smooth(f, 0.1).values
    assert np.max(np.abs(twice - once)) <= 1e-8 * np.max(np.abs(once))


# derivatives

def test_gradient_of_linear_field():
    grid = Grid((9, 7))
    g = gradient(_ramp(grid, lambda x, y: x)).values
    np.testing.assert_allclose(g[0], 1.0, atol=1e-12)
    np.testing.assert_allclose(g[1], 0.0, atol=1e-12)


def test_gradient_of_constant_is_zero():
    g = gradient(ScalarField(Grid((6, 6)), np.full((6, 6), 2.0))).values
    assert not np.any(g)


def test_central_difference_of_quadratic_is_exact():
    grid = Grid((9, 9))
    g = gradient(_ramp(grid, lambda x, y: x ** 2)).values
    assert grid.coordinates()[0][4, 4] == 0.5
    assert g[0][4, 4] == pytest.approx(1.0, abs=1e-12)


def test_jacobian_of_identity_affine_and_translation():
    grid = Grid((8, 10))
    x = grid.coordinates()
    eye = np.eye(2).reshape(2, 2, 1, 1)

    np.testing.assert_allclose(jacobian(VectorField.identity(grid)), np.broadcast_to(eye, (2, 2, 8, 10)), atol=1e-12)
    np.testing.assert_allclose(jacobian(VectorField(grid, x + np.reshape([0.1, -0.2], (2, 1, 1)))),
                               np.broadcast_to(eye, (2, 2, 8, 10)), atol=1e-12)

    a = np.array([[1.5, -0.3], [0.2, 0.8]])
    affine = VectorField(grid, np.einsum("ab,b...->a...", a, x))
    np.testing.assert_allclose(jacobian(affine)[:, :, 1:-1, 1:-1],
                               np.broadcast_to(a.reshape(2, 2, 1, 1), (2, 2, 6, 8)), atol=1e-12)


# interpolation

def test_interpolation_at_nodes_is_exact(rng):
    grid = Grid((7, 9))
    f = VectorField(grid, rng.normal(size=(2, 7, 9)))
    np.testing.assert_array_equal(interpolate(f, grid.coordinates()), f.values)


def test_interpolation_at_midpoint_is_the_mean(rng):
    grid = Grid((5, 5))
    f = ScalarField(grid, np.broadcast_to(rng.normal(size=(5, 1)), (5, 5)))
    value = interpolate(f, np.array([[0.375], [0.6]]))
    assert value[0] == pytest.approx(0.5 * (f.values[1, 0] + f.values[2, 0]), abs=1e-14)


def test_interpolation_reproduces_affine_fields(rng):
    grid = Grid((11, 13))
    f = _ramp(grid, lambda x, y: 3 * x + 2 * y)
    points = rng.uniform(0, 1, size=(2, 200))
    np.testing.assert_allclose(interpolate(f, points), 3 * points[0] + 2 * points[1], rtol=0, atol=1e-12)


def test_interpolation_clamps_outside_the_domain():
    grid = Grid((6, 6))
    f = _ramp(grid, lambda x, y: 3 * x + 2 * y)
    values = interpolate(f, np.array([[-0.5, 1.7, 0.5], [2.0, 0.25, -3.0]]))
    np.testing.assert_allclose(values, [2.0, 3.5, 1.5], atol=1e-12)


# resampling and composition

def test_resample_to_same_grid_is_identity(rng):
    f = ScalarField(Grid((9, 9)), rng.normal(size=(9, 9)))
    np.testing.assert_array_equal(resample(f, f.grid).values, f.values)


def test_resample_keeps_constants():
    f = VectorField(Grid((9, 12)), np.full((2, 9, 12), -1.25))
    np.testing.assert_allclose(resample(f, Grid((17, 5))).values, -1.25, atol=1e-14)


def test_resample_down_and_up_on_a_ramp():
    fine = Grid((33, 33))
    f = _ramp(fine, lambda x, y: 0.5 * x - 2 * y + 1)
    back = resample(resample(f, Grid((17, 17))), fine)
    assert np.max(np.abs(back.values - f.values)) < 1e-12


def test_compose_with_identity(rng):
    grid = Grid((8, 8))
    phi = VectorField(grid, grid.coordinates() + 0.01 * rng.normal(size=(2, 8, 8)))
    identity = VectorField.identity(grid)
    np.testing.assert_allclose(compose_maps(phi, identity).values, phi.values, atol=1e-14)
    np.testing.assert_allclose(compose_maps(identity, phi).values, np.clip(phi.values, 0, 1), atol=1e-14)


def test_three_dimensional_fields(rng):
    grid = Grid((5, 6, 7))
    f = ScalarField(grid, rng.normal(size=grid.dims))
    assert gradient(f).values.shape == (3, 5, 6, 7)
    assert gaussian_smooth(f, 0.1).values.mean() == pytest.approx(f.values.mean(), abs=1e-12)
    np.testing.assert_array_equal(interpolate(f, grid.coordinates()), f.values)

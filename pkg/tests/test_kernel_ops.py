import numpy as np
import pytest

import kernel_ops
from field_ops import Grid, ScalarField, VectorField, gaussian_smooth, smooth_values
from kernel_ops import LocalWeights, MultiGaussianSpec
from run_utils import InvalidParameter

SPEC = MultiGaussianSpec()


def _momentum(rng, n=16):
    grid = Grid((n, n))
    return VectorField(grid, rng.normal(size=(2, n, n)))


def _random_simplex(rng, n, dims, floor=0.0):
    raw = rng.dirichlet(np.ones(n), size=dims)
    return np.moveaxis(floor + (1 - n * floor) * raw, -1, 0)


def test_default_setpoint_is_proportional_to_the_variances():
    var = np.square([0.01, 0.05, 0.1, 0.2])
    np.testing.assert_allclose(SPEC.setpoint, var / var.sum(), rtol=1e-15)
    assert SPEC.n == 4


@pytest.mark.parametrize("kwargs, kind", [
    ({"sigmas": (0.1, 0.05)}, "invalid-spec"),
    ({"sigmas": (0.0, 0.1)}, "invalid-spec"),
    ({"sigmas": (0.05, 0.1), "setpoint_weights": (0.6, 0.5)}, "invalid-weights"),
    ({"sigmas": (0.05, 0.1), "setpoint_weights": (1.2, -0.2)}, "invalid-weights"),
    ({"sigmas": (0.05, 0.1), "setpoint_weights": (1.0,)}, "invalid-spec"),
    ({"omt_power": 0.5}, "invalid-spec"),
    ({"preweight_floor": 0.25}, "invalid-spec"),
])
def test_spec_validation(kwargs, kind):
    with pytest.raises(InvalidParameter) as info:
        MultiGaussianSpec(**kwargs)
    assert info.value.kind == kind


# global smoothing

def test_single_component_mixture_is_plain_smoothing(rng):
    m = _momentum(rng)
    spec = SPEC.with_setpoint((1.0, 0.0, 0.0, 0.0))
    v = kernel_ops.multi_gaussian_smooth(m, spec)
    assert np.max(np.abs(v.values - gaussian_smooth(m, 0.01).values)) < 1e-12


def test_mixture_keeps_constants():
    m = VectorField(Grid((10, 10)), np.full((2, 10, 10), 0.7))
    np.testing.assert_allclose(kernel_ops.multi_gaussian_smooth(m, SPEC).values, 0.7, atol=1e-12)


def test_mixture_is_the_weighted_sum_of_smoothings(rng):
    m = _momentum(rng)
    expected = sum(w * gaussian_smooth(m, s).values for w, s in zip(SPEC.setpoint_weights, SPEC.sigmas))
    assert np.max(np.abs(kernel_ops.multi_gaussian_smooth(m, SPEC).values - expected)) < 1e-12


# localized smoothing

def test_localized_smoothing_with_constant_weights_reduces_to_the_mixture(rng):
    grid = Grid((16, 16))
    for _ in range(50):
        m = VectorField(grid, rng.normal(size=(2, 16, 16)))
        c = rng.dirichlet(np.ones(4))
        lw = kernel_ops.constant_local_weights(SPEC, grid, c)
        localized = kernel_ops.localized_smooth(m, lw, SPEC).values
        mixture = kernel_ops.multi_gaussian_smooth_values(m.values, SPEC, grid.spacing, c)
        assert np.max(np.abs(localized - mixture)) < 1e-10


def test_localized_smoothing_with_setpoint_weights_matches_global_smoothing(rng):
    m = _momentum(rng)
    lw = kernel_ops.constant_local_weights(SPEC, m.grid)
    np.testing.assert_allclose(kernel_ops.localized_smooth(m, lw, SPEC).values,
                               kernel_ops.multi_gaussian_smooth(m, SPEC).values, rtol=0, atol=1e-10)


def test_localized_smoothing_with_one_active_component(rng):
    m = _momentum(rng)
    lw = kernel_ops.constant_local_weights(SPEC, m.grid, (0.0, 0.0, 1.0, 0.0))
    np.testing.assert_allclose(kernel_ops.localized_smooth(m, lw, SPEC).values, gaussian_smooth(m, 0.1).values,
                               rtol=0, atol=1e-12)


def test_localized_smoothing_is_symmetric_and_positive(rng):
    grid = Grid((16, 16))
    w = _random_simplex(rng, 4, grid.dims)
    m1, m2 = rng.normal(size=(2, 2, 16, 16))
    apply = lambda m: kernel_ops.localized_smooth_values(m, w, SPEC, grid.spacing)
    lhs = np.sum(apply(m1) * m2)
    rhs = np.sum(m1 * apply(m2))
    assert lhs == pytest.approx(rhs, rel=1e-10)
    assert np.sum(m1 * apply(m1)) >= 0
    assert np.sum(m2 * apply(m2)) >= 0


def test_localized_smoothing_is_linear(rng):
    grid = Grid((12, 12))
    w = _random_simplex(rng, 4, grid.dims)
    m1, m2 = rng.normal(size=(2, 2, 12, 12))
    apply = lambda m: kernel_ops.localized_smooth_values(m, w, SPEC, grid.spacing)
    np.testing.assert_allclose(apply(2 * m1 - 3 * m2), 2 * apply(m1) - 3 * apply(m2), atol=1e-12)


def test_localized_smoothing_rejects_negative_weights(rng):
    grid = Grid((8, 8))
    w = np.full((4, 8, 8), 0.25)
    w[1, 3, 3] = -0.01
    with pytest.raises(InvalidParameter) as info:
        kernel_ops.localized_smooth_values(rng.normal(size=(2, 8, 8)), w, SPEC, grid.spacing)
    assert info.value.kind == "invalid-weights"


def test_localized_smoothing_needs_matching_grids(rng):
    m = _momentum(rng, 8)
    with pytest.raises(InvalidParameter):
        kernel_ops.localized_smooth(m, kernel_ops.constant_local_weights(SPEC, Grid((9, 9))), SPEC)


# local weights

def test_make_local_weights_stays_on_the_simplex(rng):
    grid = Grid((16, 16))
    pre = _random_simplex(rng, 4, grid.dims, floor=SPEC.preweight_floor)
    lw = kernel_ops.make_local_weights(pre, SPEC, grid)
    np.testing.assert_allclose(lw.weights.sum(axis=0), 1.0, atol=1e-9)
    assert lw.weights.min() >= SPEC.preweight_floor / (1 + 4 * SPEC.preweight_floor)
    assert len(lw.weight_fields()) == 4


def test_make_local_weights_of_a_constant_setpoint():
    grid = Grid((8, 8))
    pre = kernel_ops.constant_local_weights(SPEC, grid).preweights
    lw = kernel_ops.make_local_weights(pre, SPEC, grid)
    np.testing.assert_allclose(lw.weights, pre, atol=1e-12)


def test_make_local_weights_checks_the_preweights():
    grid = Grid((8, 8))
    pre = np.full((4, 8, 8), 0.25)
    pre[0, 0, 0] = 0.0
    pre[1, 0, 0] = 0.5
    with pytest.raises(InvalidParameter):
        kernel_ops.make_local_weights(pre, SPEC, grid)


# inner products

def test_inner_product_of_orthogonal_fields_is_zero(rng):
    a = rng.normal(size=(8, 8))
    m = np.stack([a, np.zeros((8, 8))])
    v = np.stack([np.zeros((8, 8)), a])
    assert kernel_ops.metric_inner_product(m, v, 0.1) == 0.0


def test_inner_product_of_unit_fields_is_the_dimension():
    n = 16
    ones = np.ones((2, n, n))
    assert kernel_ops.metric_inner_product(ones, ones, 1.0 / n ** 2) == pytest.approx(2.0, rel=1e-14)


def test_spatial_and_fourier_norms_agree(rng):
    grid = Grid((32, 32))
    for sigma in (0.1, 0.2):
        m = VectorField(grid, rng.normal(size=(2, 32, 32)))
        spatial = kernel_ops.metric_inner_product(m, gaussian_smooth(m, sigma), grid.cell_volume)
        fourier = kernel_ops.fourier_metric_norm(m, sigma, grid.spacing)
        assert spatial == pytest.approx(fourier, rel=1e-8)


# OMT

def test_omt_endpoints():
    assert float(kernel_ops.omt_standardized(np.array([0.0, 0.0, 0.0, 1.0]), SPEC)) == 0.0
    assert float(kernel_ops.omt_standardized(np.array([1.0, 0.0, 0.0, 0.0]), SPEC)) == pytest.approx(1.0, abs=1e-14)


def test_omt_of_uniform_weights():
    value = float(kernel_ops.omt_standardized(np.full(4, 0.25), SPEC))
    expected = (np.log(20) + np.log(4) + np.log(2)) / (4 * np.log(20))
    assert value == pytest.approx(expected, rel=1e-14)


def test_omt_power_two():
    spec = MultiGaussianSpec(omt_power=2.0)
    value = float(kernel_ops.omt_penalty(np.array([0.5, 0.5, 0.0, 0.0]), spec))
    assert value == pytest.approx(0.5 * np.log(20) ** 2 + 0.5 * np.log(4) ** 2, rel=1e-14)


def test_omt_standardized_lies_in_unit_interval(rng):
    w = rng.dirichlet(np.ones(4), size=100_000).T
    values = kernel_ops.omt_standardized(w, SPEC)
    assert values.min() >= 0.0
    assert values.max() <= 1.0 + 1e-12


@pytest.mark.parametrize("sigmas", [(0.1,), (0.1, 0.1), (0.05, 0.05, 0.05)])
def test_spec_needs_distinct_extreme_sigmas(sigmas):
    with pytest.raises(InvalidParameter) as info:
        MultiGaussianSpec(sigmas=sigmas, setpoint_weights=(1.0 / len(sigmas),) * len(sigmas))
    assert info.value.kind == "invalid-spec"


def test_omt_rejects_non_simplex_weights():
    with pytest.raises(InvalidParameter):
        kernel_ops.omt_penalty(np.array([0.5, 0.5, 0.5, 0.0]), SPEC)


def test_omt_field_penalty_integrates_the_node_values():
    grid = Grid((8, 8))
    lw = kernel_ops.constant_local_weights(SPEC, grid)
    per_node = float(kernel_ops.omt_standardized(SPEC.setpoint, SPEC))
    value = float(kernel_ops.omt_field_penalty(lw, SPEC, grid.cell_volume))
    assert value == pytest.approx(per_node * 64 * grid.cell_volume, rel=1e-12)


# edge indicator

def test_edge_indicator_of_constant_image_is_one():
    image = ScalarField(Grid((8, 8)), np.full((8, 8), 0.4))
    np.testing.assert_array_equal(kernel_ops.edge_indicator(image, 10.0).values, 1.0)


def test_edge_indicator_decreases_with_alpha(rng):
    grid = Grid((12, 12))
    image = ScalarField(grid, np.asarray(smooth_values(rng.uniform(size=grid.dims), sigma=0.1, spacing=grid.spacing)))
    low = kernel_ops.edge_indicator(image, 1.0).values
    high = kernel_ops.edge_indicator(image, 10.0).values
    assert np.all(high <= low)
    assert np.all((high > 0) & (low <= 1))


def test_edge_indicator_of_unit_ramp():
    grid = Grid((9, 9))
    image = ScalarField(grid, grid.coordinates()[0])
    gamma = kernel_ops.edge_indicator(image, 1.0).values
    np.testing.assert_allclose(gamma[1:-1, 1:-1], 0.5, atol=1e-12)


def test_edge_indicator_needs_positive_alpha():
    with pytest.raises(InvalidParameter):
        kernel_ops.edge_indicator(ScalarField(Grid((4, 4)), np.zeros((4, 4))), 0.0)


# spatial penalties

def _weights(grid, preweights):
    return LocalWeights(grid, preweights, preweights)


def test_tv_of_constant_preweights_is_only_the_smoothing_floor():
    grid = Grid((16, 16))
    lw = kernel_ops.constant_local_weights(SPEC, grid)
    value = float(kernel_ops.tv_penalty(lw, np.ones(grid.dims), grid.cell_volume))
    assert 0 < value < 1e-5


def test_tv_is_homogeneous_in_gamma(rng):
    grid = Grid((12, 12))
    lw = _weights(grid, _random_simplex(rng, 4, grid.dims))
    gamma = rng.uniform(0.2, 1.0, size=grid.dims)
    for coupling in ("channel", "pointwise"):
        single = float(kernel_ops.tv_penalty(lw, gamma, grid.cell_volume, coupling=coupling))
        double = float(kernel_ops.tv_penalty(lw, 2 * gamma, grid.cell_volume, coupling=coupling))
        assert double == pytest.approx(2 * single, rel=1e-12)


def test_tv_of_a_step_is_its_perimeter():
    grid = Grid((32, 32))
    step = np.zeros((1, 32, 32))
    step[0, 16:, :] = 1.0
    value = float(kernel_ops.tv_penalty(_weights(grid, step), np.ones(grid.dims), grid.cell_volume))
    assert value == pytest.approx(1.0, rel=0.1)


def test_tv_couplings_agree_for_a_single_channel(rng):
    grid = Grid((10, 10))
    lw = _weights(grid, rng.uniform(size=(1, 10, 10)))
    gamma = rng.uniform(0.5, 1.0, size=grid.dims)
    channel = float(kernel_ops.tv_penalty(lw, gamma, grid.cell_volume, coupling="channel"))
    pointwise = float(kernel_ops.tv_penalty(lw, gamma, grid.cell_volume, coupling="pointwise"))
    assert channel == pytest.approx(pointwise, rel=1e-12)


def test_tv_rejects_unknown_coupling():
    grid = Grid((8, 8))
    with pytest.raises(InvalidParameter):
        kernel_ops.tv_penalty(kernel_ops.constant_local_weights(SPEC, grid), np.ones((8, 8)), 0.1, coupling="l1")


def test_h1_penalty():
    grid = Grid((9, 9))
    assert float(kernel_ops.h1_penalty(kernel_ops.constant_local_weights(SPEC, grid), np.ones((9, 9)), 0.1)) == 0.0
    ramp = grid.coordinates()[0][None]
    value = float(kernel_ops.h1_penalty(_weights(grid, ramp), np.full((9, 9), 0.5), grid.cell_volume))
    assert value == pytest.approx(0.5 * 81 * grid.cell_volume, rel=1e-12)

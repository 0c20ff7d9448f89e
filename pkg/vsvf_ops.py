"""
vsvf_ops.py: Stationary-velocity registration model and its energy

The velocity v = K m is constant in time. The inverse map solves

    d/dt phi_inv + (D phi_inv) v = 0,   phi_inv(0) = id

on [0, 1] with classical fourth order Runge-Kutta, and the source image is
warped as I0 o phi_inv(1). Maps are computed on a (usually half resolution)
computation grid and upsampled before the image is warped.

Energy terms (stage ``global`` has only the first two):
    reg          reg_weight * <m, v>
    sim          (1 - NCC(I0 o phi_inv, I1)) / ncc_sigma^2
    omt          omt_weight * integral of the standardized OMT cost of w(x)
    tv           tv_weight * edge-weighted TV (or H1) penalty of the pre-weights
    input_range  softmax input range penalty of the regressor
    weight_decay regressor weight decay
"""

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

import autodiff_ops as ad
import kernel_ops
import regressor_ops
from field_ops import (Grid, ScalarField, VectorField, gradient_values, interpolate_values,
                       jacobian, resample_values, smooth_values)
from run_utils import STREAM_GRADCHECK, DivergenceError, InvalidParameter

logger = logging.getLogger(__name__)

STAGES = ("global", "local")
TERMS = ("reg", "sim", "omt", "tv", "input_range", "weight_decay")


@dataclass(frozen=True)
class VsvfConfig:
    reg_weight: float = 1.0
    omt_weight: float = 50.0
    tv_weight: float = 0.1
    rk4_steps: int = 20
    downsample_factor: float = 0.5
    similarity: str = "ncc"
    ncc_sigma: float = 0.1
    lncc_sigma: float = 0.05
    edge_alpha: float = 10.0
    tv_epsilon: float = 1e-6
    weight_penalty: str = "tv"
    tv_coupling: str = "channel"

    def __post_init__(self):
        if self.rk4_steps < 1:
            raise InvalidParameter(f"rk4_steps must be >= 1, got {self.rk4_steps}")
        if not 0 < self.downsample_factor <= 1:
            raise InvalidParameter(f"downsample_factor must be in (0, 1], got {self.downsample_factor}")
        if min(self.reg_weight, self.omt_weight, self.tv_weight) < 0:
            raise InvalidParameter("energy weights must be nonnegative")
        if self.ncc_sigma <= 0 or self.lncc_sigma <= 0 or self.edge_alpha <= 0 or self.tv_epsilon <= 0:
            raise InvalidParameter("ncc_sigma, lncc_sigma, edge_alpha and tv_epsilon must be positive")
        if self.similarity not in ("ncc", "lncc"):
            raise InvalidParameter(f"unknown similarity {self.similarity!r}")
        if self.weight_penalty not in ("tv", "h1"):
            raise InvalidParameter(f"unknown weight penalty {self.weight_penalty!r}")
        if self.tv_coupling not in ("channel", "pointwise"):
            raise InvalidParameter(f"unknown TV coupling {self.tv_coupling!r}")


@dataclass
class RegistrationTask:
    """One source/target pair with everything precomputed on the computation grid."""
    task_id: object
    source: ScalarField
    target: ScalarField
    grid: Grid
    source_low: np.ndarray
    gamma: np.ndarray
    momentum: np.ndarray
    velocity: np.ndarray = None


def make_task(source, target, config, task_id=0, momentum=None):
    if source.grid != target.grid:
        raise InvalidParameter(f"source {source.grid.dims} and target {target.grid.dims} differ in size")
    grid = source.grid if config.downsample_factor == 1 else source.grid.scaled(config.downsample_factor)
    source_low = np.asarray(resample_values(source.values, source.grid, grid))
    gamma = kernel_ops.edge_indicator_values(source_low, config.edge_alpha, grid.spacing)
    if momentum is None:
        momentum = np.zeros((grid.ndim,) + grid.dims)
    momentum = np.array(momentum, dtype=np.float64)
    if momentum.shape != (grid.ndim,) + grid.dims:
        raise InvalidParameter(f"momentum of shape {momentum.shape} does not fit grid {grid.dims}")
    return RegistrationTask(task_id, source, target, grid, source_low, gamma, momentum)


@dataclass
class EnergyBreakdown:
    total: float
    reg: float
    sim: float
    omt: float = 0.0
    tv: float = 0.0
    input_range: float = 0.0
    weight_decay: float = 0.0

    def as_row(self):
        return {"total": self.total, **{t: getattr(self, t) for t in TERMS}}


# advection

def _advection_rhs(phi, v, spacing):
    jac = gradient_values(phi, spacing=spacing)
    return -np.einsum("ab...,b...->a...", jac, v)


def _advection_rhs_vjp(g, phi, v, spacing):
    jac = gradient_values(phi, spacing=spacing)
    v_bar = -np.einsum("a...,ab...->b...", g, jac)
    jac_bar = -np.einsum("a...,b...->ab...", g, v)
    (phi_bar,) = gradient_values.vjp(jac_bar, None, phi, spacing=spacing)
    return phi_bar, v_bar


def _rk4_stages(phi, v, dt, spacing):
    k1 = _advection_rhs(phi, v, spacing)
    y2 = phi + 0.5 * dt * k1
    k2 = _advection_rhs(y2, v, spacing)
    y3 = phi + 0.5 * dt * k2
    k3 = _advection_rhs(y3, v, spacing)
    y4 = phi + dt * k3
    k4 = _advection_rhs(y4, v, spacing)
    return (phi, y2, y3, y4), (k1, k2, k3, k4)


@ad.primitive
def rk4_step(phi, v, *, dt, spacing):
    """One RK4 step of the inverse-map transport equation."""
    _, (k1, k2, k3, k4) = _rk4_stages(phi, v, dt, spacing)
    return phi + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@rk4_step.defvjp
def _rk4_step_vjp(g, ans, phi, v, *, dt, spacing):
    (y1, y2, y3, y4), _ = _rk4_stages(phi, v, dt, spacing)
    phi_bar = np.array(g, dtype=np.float64)
    v_bar = np.zeros_like(v)

    y4_bar, dv = _advection_rhs_vjp(dt / 6.0 * g, y4, v, spacing)
    phi_bar += y4_bar
    v_bar += dv
    y3_bar, dv = _advection_rhs_vjp(dt / 3.0 * g + dt * y4_bar, y3, v, spacing)
    phi_bar += y3_bar
    v_bar += dv
    y2_bar, dv = _advection_rhs_vjp(dt / 3.0 * g + 0.5 * dt * y3_bar, y2, v, spacing)
    phi_bar += y2_bar
    v_bar += dv
    y1_bar, dv = _advection_rhs_vjp(dt / 6.0 * g + 0.5 * dt * y2_bar, y1, v, spacing)
    phi_bar += y1_bar
    v_bar += dv
    return phi_bar, v_bar


def advect_inverse_map_values(v, steps, grid):
    if steps < 1:
        raise InvalidParameter(f"RK4 needs at least one step, got {steps}")
    phi = grid.coordinates()
    dt = 1.0 / steps
    for step in range(steps):
        phi = rk4_step(phi, v, dt=dt, spacing=grid.spacing)
        if not np.all(np.isfinite(ad.value_of(phi))):
            raise DivergenceError("inverse map advection produced non-finite values", step=step + 1)
    return phi


def advect_inverse_map(v, steps):
    """Integrate the inverse map of a stationary velocity field from the identity over unit time."""
    return VectorField(v.grid, advect_inverse_map_values(v.values, steps, v.grid))


# warping and similarity

def warp(image, phi_inv):
    """Sample ``image`` at ``phi_inv``, upsampling the map to the image grid first."""
    phi = resample_values(phi_inv.values, phi_inv.grid, image.grid)
    return ScalarField(image.grid, interpolate_values(image.values, phi, spacing=image.grid.spacing))


def _zero_variance(values):
    return float(np.var(ad.value_of(values))) <= 1e-24


def ncc_values(a, b, diagnostics=None):
    """Global zero-mean normalized cross-correlation; 0 (with a flag) for constant inputs."""
    if _zero_variance(a) or _zero_variance(b):
        logger.warning("NCC of a constant image; treating the correlation as 0")
        if diagnostics is not None:
            diagnostics.append("ncc-zero-variance")
        return 0.0
    a0 = a - ad.mean(a)
    b0 = b - ad.mean(b)
    return ad.sum(a0 * b0) / ad.sqrt(ad.sum(a0 * a0) * ad.sum(b0 * b0))


def lncc_values(a, b, sigma, spacing, epsilon=1e-10):
    """Mean Gaussian-windowed local NCC."""
    def local_mean(x):
        return smooth_values(x, sigma=sigma, spacing=spacing)

    mu_a, mu_b = local_mean(a), local_mean(b)
    cov = local_mean(a * b) - mu_a * mu_b
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    return ad.mean(cov / ad.sqrt(var_a * var_b + epsilon))


def ncc_similarity(a, b, sigma_weight, diagnostics=None):
    """(1 - NCC(A, B)) / sigma_weight^2 for two ScalarFields on one grid."""
    if a.grid != b.grid:
        raise InvalidParameter("similarity needs both images on the same grid")
    return float((1.0 - ncc_values(a.values, b.values, diagnostics)) / sigma_weight ** 2)


def similarity_values(warped, target, config, spacing, diagnostics=None):
    if config.similarity == "lncc":
        ncc = lncc_values(warped, target, config.lncc_sigma, spacing)
    else:
        ncc = ncc_values(warped, target, diagnostics)
    return (1.0 - ncc) / config.ncc_sigma ** 2


# energy

@dataclass
class EnergyEvaluation:
    """Energy terms of one task as tape values (or arrays), plus what produced them."""
    terms: dict
    total: object
    phi_inv: object
    local_weights: kernel_ops.LocalWeights
    diagnostics: list = field(default_factory=list)

    def breakdown(self):
        values = {name: float(ad.value_of(t)) for name, t in self.terms.items()}
        return EnergyBreakdown(total=float(ad.value_of(self.total)), **values)


def total_energy(task, momentum, theta, spec, config, regressor_config, stage):
    """Registration energy of ``task`` at ``momentum``.

    ``momentum`` and the tensors of ``theta`` may be tape values. ``theta``
    is unused in the global stage.
    """
    if stage not in STAGES:
        raise InvalidParameter(f"stage must be one of {STAGES}, got {stage!r}")
    grid = task.grid
    spacing = grid.spacing
    cell = grid.cell_volume
    diagnostics = []
    terms = {}

    if stage == "global":
        lw = kernel_ops.constant_local_weights(spec, grid)
        v = kernel_ops.multi_gaussian_smooth_values(momentum, spec, spacing)
    else:
        out = regressor_ops.forward(task.source_low, momentum, theta, spec, regressor_config, cell)
        diagnostics.extend(out.diagnostics)
        lw = kernel_ops.make_local_weights(out.preweights, spec, grid)
        v = kernel_ops.localized_smooth_values(momentum, lw.weights, spec, spacing)

    terms["reg"] = kernel_ops.metric_inner_product(momentum, v, cell) * config.reg_weight
    phi = advect_inverse_map_values(v, config.rk4_steps, grid)
    full = task.source.grid
    warped = interpolate_values(task.source.values, resample_values(phi, grid, full), spacing=full.spacing)
    terms["sim"] = similarity_values(warped, task.target.values, config, full.spacing, diagnostics)

    if stage == "local":
        terms["omt"] = kernel_ops.omt_field_penalty(lw, spec, cell) * config.omt_weight
        if config.weight_penalty == "h1":
            penalty = kernel_ops.h1_penalty(lw, task.gamma, cell)
        else:
            penalty = kernel_ops.tv_penalty(lw, task.gamma, cell, config.tv_epsilon, config.tv_coupling)
        terms["tv"] = penalty * config.tv_weight
        terms["input_range"] = out.input_penalty
        terms["weight_decay"] = regressor_ops.weight_decay_penalty(theta, regressor_config)

    total = None
    for name in TERMS:
        if name in terms:
            total = terms[name] if total is None else total + terms[name]
    return EnergyEvaluation(terms, total, phi, lw, diagnostics)


def energy_and_gradients(task, momentum, theta, spec, config, regressor_config, stage, theta_grad=True):
    """Evaluate the energy on a fresh tape and differentiate it.

    Returns ``(evaluation, grad_momentum, grad_theta)``; ``grad_theta`` is a
    list in parameter order, or None when not requested or in the global stage.
    """
    tape = ad.Tape()
    m = tape.leaf(momentum, name="momentum")
    theta_on_tape = theta
    want_theta = stage == "local" and theta_grad
    if want_theta:
        theta_on_tape = theta.map(lambda name, t: tape.leaf(t, name=name))
    evaluation = total_energy(task, m, theta_on_tape, spec, config, regressor_config, stage)
    if not np.isfinite(float(ad.value_of(evaluation.total))):
        raise DivergenceError(f"non-finite energy for task {task.task_id}")
    grads = tape.backward(evaluation.total)
    evaluation = _detach(evaluation)
    return evaluation, grads[0], (grads[1:] if want_theta else None)


def _detach(evaluation):
    lw = evaluation.local_weights
    return EnergyEvaluation(
        terms=evaluation.terms,
        total=evaluation.total,
        phi_inv=np.asarray(ad.value_of(evaluation.phi_inv)),
        local_weights=kernel_ops.LocalWeights(lw.grid, np.asarray(ad.value_of(lw.preweights)),
                                              np.asarray(ad.value_of(lw.weights))),
        diagnostics=evaluation.diagnostics,
    )


# map statistics

def jacobian_determinants(phi_inv):
    jac = jacobian(phi_inv)
    d = phi_inv.grid.ndim
    matrices = np.moveaxis(jac.reshape((d, d, -1)), -1, 0)
    return np.linalg.det(matrices).reshape(phi_inv.grid.dims)


def jacobian_determinant_stats(phi_inv, mask=None):
    """Summary statistics of det(D phi_inv) over ``mask`` (default: every node)."""
    det = jacobian_determinants(phi_inv)
    values = det.ravel() if mask is None else det[np.asarray(mask, dtype=bool)]
    if values.size == 0:
        raise InvalidParameter("Jacobian statistics over an empty mask")
    p1, p5, p50, p95, p99 = np.percentile(values, [1, 5, 50, 95, 99])
    return {
        "mean": float(values.mean()), "std": float(values.std()),
        "p1": float(p1), "p5": float(p5), "p50": float(p50), "p95": float(p95), "p99": float(p99),
        "min": float(values.min()),
    }


# finite-difference suite

def _random_instance(size, seed, spec, regressor_config):
    rng = np.random.default_rng([seed, STREAM_GRADCHECK, 0])
    grid = Grid((size, size))
    smooth = lambda x: np.asarray(smooth_values(x, sigma=0.1, spacing=grid.spacing))
    source = ScalarField(grid, smooth(rng.uniform(size=grid.dims)) + 0.1 * rng.uniform(size=grid.dims))
    target = ScalarField(grid, smooth(rng.uniform(size=grid.dims)) + 0.1 * rng.uniform(size=grid.dims))
    momentum = rng.normal(scale=0.5, size=(2,) + grid.dims)
    theta = regressor_ops.init_params(regressor_config, spec.n, 2, rng)
    return source, target, momentum, theta


def _flatten(theta):
    return np.concatenate([np.ravel(ad.value_of(t)) for t in theta.tensors()])


def _unflatten(flat, template):
    tensors, pos = [], 0
    for t in template.tensors():
        shape = np.shape(t)
        size = int(np.prod(shape))
        tensors.append(ad.reshape(flat[pos:pos + size], shape=shape))
        pos += size
    return regressor_ops.RegressorParams.from_tensors(tensors)


def _theta_candidates(theta):
    """Flat indices of every parameter except the convolution biases, which batch-norm annihilates."""
    keep, pos = [], 0
    for name, t in zip(regressor_ops.TENSOR_NAMES, theta.tensors()):
        size = np.size(t)
        if name not in ("conv1_bias", "conv2_bias"):
            keep.append(np.arange(pos, pos + size))
        pos += size
    return np.concatenate(keep)


def gradient_check_suite(size=8, seed=0, spec=None, config=None, regressor_config=None,
                         h=1e-5, samples=50):
    """Finite-difference check of every energy term and the total.

    Momentum gradients are checked in both stages, regressor gradients in the
    local stage. Returns rows ``(wrt, stage, term, max_rel_error)``.
    """
    spec = spec or kernel_ops.MultiGaussianSpec()
    config = config or VsvfConfig()
    config = dataclasses.replace(config, downsample_factor=1.0)
    regressor_config = regressor_config or regressor_ops.RegressorConfig()
    source, target, momentum, theta = _random_instance(size, seed, spec, regressor_config)
    task = make_task(source, target, config)

    def term_of(evaluation, term):
        return evaluation.total if term == "total" else evaluation.terms[term]

    rows = []
    for stage in STAGES:
        names = ("reg", "sim") if stage == "global" else TERMS
        for term in names + ("total",):
            loss = lambda m, term=term, stage=stage: term_of(
                total_energy(task, m, theta, spec, config, regressor_config, stage), term)
            err = ad.finite_difference_check(loss, momentum, h=h, samples=samples, seed=seed)
            logger.debug("momentum %s %s: %.3e", stage, term, err)
            rows.append(("momentum", stage, term, err))

    flat = _flatten(theta)
    candidates = _theta_candidates(theta)
    for term in TERMS + ("total",):
        loss = lambda x, term=term: term_of(
            total_energy(task, momentum, _unflatten(x, theta), spec, config, regressor_config, "local"), term)
        err = ad.finite_difference_check(loss, flat, h=h, samples=samples, seed=seed, candidates=candidates)
        logger.debug("theta local %s: %.3e", term, err)
        rows.append(("theta", "local", term, err))
    return rows

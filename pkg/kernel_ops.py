"""
kernel_ops.py: Multi-Gaussian regularization for vector momentum registration

The smoothing kernel that turns a momentum field m into a velocity field v is
a convex combination of Gaussians with increasing standard deviations. With
spatially varying weights w_i(x) the kernel is applied in the symmetric form

    v(x) = sum_i sqrt(w_i(x)) * [G_i * (sqrt(w_i) m)](x)

which keeps the operator self-adjoint and positive semi-definite. The weights
come from pre-weights (the regressor output) by a small Gaussian smoothing,
flooring and per-node renormalisation.

Penalties on the weights:
    - omt: pushes mass toward the widest Gaussian
    - tv / h1: edge-weighted spatial regularity of the pre-weights

Every function accepts raw numpy arrays or tape values for the array
arguments, so the same code serves plain evaluation and differentiation.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

import autodiff_ops as ad
from field_ops import ScalarField, VectorField, gradient_values, smooth_values
from run_utils import InvalidParameter

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-9


@dataclass(frozen=True)
class MultiGaussianSpec:
    sigmas: tuple = (0.01, 0.05, 0.1, 0.2)
    setpoint_weights: tuple = None
    omt_power: float = 1.0
    preweight_smoothing_sigma: float = 0.02
    preweight_floor: float = 1e-3

    def __post_init__(self):
        sigmas = tuple(float(s) for s in self.sigmas)
        if len(sigmas) < 2 or sigmas[0] >= sigmas[-1]:
            raise InvalidParameter(f"at least two Gaussians with sigma_0 < sigma_max are required, got {sigmas}",
                                   "invalid-spec")
        if sigmas[0] <= 0 or any(b < a for a, b in zip(sigmas, sigmas[1:])):
            raise InvalidParameter(f"sigmas must be positive and ascending, got {sigmas}", "invalid-spec")
        object.__setattr__(self, "sigmas", sigmas)

        if self.setpoint_weights is None:
            var = np.square(sigmas)
            weights = tuple(float(x) for x in var / var.sum())
        else:
            weights = tuple(float(x) for x in self.setpoint_weights)
        if len(weights) != len(sigmas):
            raise InvalidParameter(f"{len(weights)} setpoint weights for {len(sigmas)} sigmas", "invalid-spec")
        if min(weights) < 0 or abs(sum(weights) - 1.0) > 1e-12:
            raise InvalidParameter(f"setpoint weights must be nonnegative and sum to 1, got {weights}",
                                   "invalid-weights")
        object.__setattr__(self, "setpoint_weights", weights)

        if self.omt_power < 1:
            raise InvalidParameter(f"omt_power must be >= 1, got {self.omt_power}", "invalid-spec")
        if self.preweight_smoothing_sigma < 0:
            raise InvalidParameter("preweight_smoothing_sigma must be nonnegative", "invalid-spec")
        if not 0 <= self.preweight_floor * len(sigmas) < 1:
            raise InvalidParameter(f"preweight_floor {self.preweight_floor} leaves no simplex for "
                                   f"{len(sigmas)} weights", "invalid-spec")

    @property
    def n(self):
        return len(self.sigmas)

    @property
    def setpoint(self):
        return np.array(self.setpoint_weights)

    def with_setpoint(self, weights):
        return MultiGaussianSpec(self.sigmas, tuple(weights), self.omt_power,
                                 self.preweight_smoothing_sigma, self.preweight_floor)


@dataclass
class LocalWeights:
    """Pre-weights and smoothed weights, each of shape ``(N, *grid.dims)``."""
    grid: object
    preweights: object
    weights: object
    diagnostics: list = field(default_factory=list)

    def weight_fields(self):
        return [ScalarField(self.grid, w) for w in ad.value_of(self.weights)]


def _values(x):
    return x.values if isinstance(x, (ScalarField, VectorField)) else x


def _check_simplex(w, axis=0, floor=0.0):
    w = np.asarray(w)
    if np.any(w < floor - SIMPLEX_TOLERANCE):
        raise InvalidParameter(f"weights below {floor} (min {w.min():.3g})", "invalid-weights")
    err = np.max(np.abs(w.sum(axis=axis) - 1.0))
    if err > SIMPLEX_TOLERANCE:
        raise InvalidParameter(f"weights do not sum to 1 (max deviation {err:.3g})", "invalid-weights")


def _channel_shape(n, d):
    return (n,) + (1,) * d


# smoothing

def multi_gaussian_smooth_values(m, spec, spacing, weights=None):
    """Sum of the N Gaussian smoothings of ``m``, weighted by constants (default: the setpoint)."""
    weights = spec.setpoint if weights is None else np.asarray(weights, dtype=np.float64)
    v = None
    for w_i, sigma in zip(weights, spec.sigmas):
        if w_i == 0:
            continue
        term = smooth_values(m, sigma=sigma, spacing=spacing) * float(w_i)
        v = term if v is None else v + term
    return v


def multi_gaussian_smooth(m, spec):
    return m.with_values(multi_gaussian_smooth_values(m.values, spec, m.grid.spacing))


def localized_smooth_values(m, weights, spec, spacing):
    if not isinstance(weights, ad.Var) and np.any(np.asarray(weights) < 0):
        raise InvalidParameter("localized smoothing needs nonnegative weights", "invalid-weights")
    root = ad.sqrt(weights)
    v = None
    for i, sigma in enumerate(spec.sigmas):
        r = root[i]
        term = r * smooth_values(r * m, sigma=sigma, spacing=spacing)
        v = term if v is None else v + term
    return v


def localized_smooth(m, lw, spec):
    """Spatially varying multi-Gaussian smoothing of a momentum field."""
    if lw.grid != m.grid:
        raise InvalidParameter(f"weights on {lw.grid.dims} but momentum on {m.grid.dims}")
    return VectorField(m.grid, localized_smooth_values(m.values, ad.value_of(lw.weights), spec, m.grid.spacing))


# local weights

def make_local_weights(preweights, spec, grid, check=True):
    """Smooth, floor and renormalise simplex pre-weights into kernel weights."""
    if check and not isinstance(preweights, ad.Var):
        _check_simplex(preweights, floor=spec.preweight_floor)
    w = smooth_values(preweights, sigma=spec.preweight_smoothing_sigma, spacing=grid.spacing)
    w = ad.clip(w, lo=spec.preweight_floor)
    w = w / ad.sum(w, axis=0, keepdims=True)
    return LocalWeights(grid, preweights, w)


def constant_local_weights(spec, grid, weights=None):
    """LocalWeights equal to ``weights`` (default: the setpoint) at every node."""
    c = spec.setpoint if weights is None else np.asarray(weights, dtype=np.float64)
    values = np.broadcast_to(c.reshape(_channel_shape(spec.n, grid.ndim)), (spec.n,) + grid.dims).copy()
    return LocalWeights(grid, values, values.copy())


# inner products

def metric_inner_product(m, v, cell_volume):
    """Discrete L2 pairing sum(m . v) * cell volume."""
    return ad.sum(_values(m) * _values(v)) * cell_volume


def fourier_metric_norm(m, sigma, spacing):
    """<m, G_sigma * m> evaluated in the Fourier domain with the continuous Gaussian transfer function.

    Agrees with the spatial pairing of a periodically smoothed field up to the
    aliasing of the sampled kernel, which is negligible once sigma spans a few
    grid cells.
    """
    m = np.asarray(_values(m), dtype=np.float64)
    d = len(spacing)
    dims = m.shape[-d:]
    axes = tuple(range(-d, 0))
    freq2 = np.zeros(dims)
    for k, (n, h) in enumerate(zip(dims, spacing)):
        shape = [1] * d
        shape[k] = n
        freq2 = freq2 + (scipy.fft.fftfreq(n, d=h) ** 2).reshape(shape)
    transfer = np.exp(-2.0 * np.pi ** 2 * sigma ** 2 * freq2)
    power = np.abs(scipy.fft.fftn(m, axes=axes)) ** 2
    return float(np.prod(spacing)) / float(np.prod(dims)) * float(np.sum(power * transfer))


# optimal mass transport penalty

def _omt_coefficients(spec):
    sigmas = np.array(spec.sigmas)
    return np.abs(np.log(sigmas[-1] / sigmas)) ** spec.omt_power


def omt_penalty(weights, spec):
    """Transport cost of moving weight mass to the widest Gaussian; weights on axis 0."""
    if not isinstance(weights, ad.Var):
        _check_simplex(weights)
    coeff = _omt_coefficients(spec).reshape(_channel_shape(spec.n, np.ndim(ad.value_of(weights)) - 1))
    return ad.sum(weights * coeff, axis=0)


def omt_standardized(weights, spec):
    """OMT penalty scaled to [0, 1]."""
    scale = abs(np.log(spec.sigmas[-1] / spec.sigmas[0])) ** spec.omt_power
    return omt_penalty(weights, spec) / scale


def omt_field_penalty(lw, spec, cell_volume):
    return ad.sum(omt_standardized(lw.weights, spec)) * cell_volume


# edge-weighted spatial penalties on the pre-weights

def edge_indicator_values(image, alpha, spacing):
    if alpha <= 0:
        raise InvalidParameter(f"edge indicator alpha must be positive, got {alpha}")
    grad = gradient_values(np.asarray(image, dtype=np.float64), spacing=spacing)
    return 1.0 / (1.0 + alpha * np.sqrt(np.sum(grad ** 2, axis=0)))


def edge_indicator(image, alpha):
    """gamma = 1 / (1 + alpha |grad I|), in (0, 1]."""
    return ScalarField(image.grid, edge_indicator_values(image.values, alpha, image.grid.spacing))


def _squared_gradient_norms(lw):
    grad = gradient_values(lw.preweights, spacing=lw.grid.spacing)
    return ad.sum(grad * grad, axis=1)


def tv_penalty(lw, gamma, cell_volume, epsilon=1e-6, coupling="channel"):
    """Edge-weighted total variation of the pre-weights.

    ``channel`` couples the per-channel integrals T_i in an l2 sense,
    ``pointwise`` couples the channel gradients at each node before integrating.
    """
    gamma = _values(gamma)
    sq = _squared_gradient_norms(lw)
    d = lw.grid.ndim
    if coupling == "channel":
        norms = ad.sqrt(sq + epsilon ** 2)
        totals = ad.sum(norms * gamma, axis=tuple(range(1, d + 1))) * cell_volume
        return ad.sqrt(ad.sum(totals * totals))
    if coupling == "pointwise":
        return ad.sum(ad.sqrt(ad.sum(sq, axis=0) + epsilon ** 2) * gamma) * cell_volume
    raise InvalidParameter(f"unknown TV coupling {coupling!r}")


def h1_penalty(lw, gamma, cell_volume):
    """Edge-weighted squared gradient norm of the pre-weights, summed over channels."""
    return ad.sum(_squared_gradient_norms(lw) * _values(gamma)) * cell_volume

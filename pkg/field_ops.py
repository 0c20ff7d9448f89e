"""
field_ops.py: Regular-grid fields over [0,1]^d and the numerical operations on them

Fields store their samples with the spatial axes last: a ScalarField holds an
array of shape ``dims``, a VectorField an array of shape ``(d, *dims)`` whose
first axis indexes the component. Node ``i`` along axis ``k`` sits at
``i * spacing[k]`` with ``spacing[k] = 1 / (dims[k] - 1)``.

Boundary handling:
    - Gaussian smoothing is a circular convolution (periodic)
    - derivatives use one-sided differences on the border nodes
    - interpolation clamps query coordinates to [0,1]^d

The ``*_values`` functions are tape primitives working on raw arrays (or tape
values) and a ``spacing`` tuple; the field-level functions wrap them.
"""

import functools
import itertools
import logging
from dataclasses import dataclass

import numpy as np
import scipy.fft

import autodiff_ops as ad
from run_utils import InvalidParameter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid:
    dims: tuple

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) not in (2, 3):
            raise InvalidParameter(f"only 2D and 3D grids are supported, got dims {dims}")
        if min(dims) < 4:
            raise InvalidParameter(f"every grid axis needs at least 4 nodes, got dims {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def ndim(self):
        return len(self.dims)

    @property
    def spacing(self):
        return tuple(1.0 / (n - 1) for n in self.dims)

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def coordinates(self):
        """Node coordinates as an array of shape ``(d, *dims)`` (the identity map)."""
        axes = [np.linspace(0.0, 1.0, n) for n in self.dims]
        return np.stack(np.meshgrid(*axes, indexing="ij"))

    def scaled(self, factor):
        """Grid covering the same domain with ``factor`` times as many nodes per axis."""
        return Grid(tuple(max(4, int(round(n * factor))) for n in self.dims))


class _Field:
    components = 0

    def __init__(self, grid, values):
        values = np.array(values, dtype=np.float64)
        expected = grid.dims if self.components == 0 else (grid.ndim,) + grid.dims
        if values.shape != expected:
            raise InvalidParameter(f"{type(self).__name__} on {grid.dims} needs shape {expected}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidParameter(f"{type(self).__name__} values must be finite")
        values.flags.writeable = False
        self.grid = grid
        self.values = values

    def with_values(self, values):
        return type(self)(self.grid, values)

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.grid.dims})"


class ScalarField(_Field):
    components = 0


class VectorField(_Field):
    components = 1

    @classmethod
    def identity(cls, grid):
        return cls(grid, grid.coordinates())


# Gaussian smoothing

@functools.lru_cache(maxsize=64)
def _axis_kernel_spectrum(n, h, sigma):
    """DFT of the periodised, sampled, unit-sum Gaussian along one axis."""
    j = np.arange(n)
    images = int(np.ceil(8.0 * sigma / (n * h))) + 1
    kernel = np.zeros(n)
    for m in range(-images, images + 1):
        kernel += np.exp(-((j + m * n) * h) ** 2 / (2.0 * sigma ** 2))
    kernel /= kernel.sum()
    spectrum = scipy.fft.fft(kernel).real
    spectrum.flags.writeable = False
    return spectrum


def gaussian_spectrum(dims, spacing, sigma):
    """Separable kernel spectrum broadcastable against an array with spatial shape ``dims``."""
    d = len(dims)
    out = np.ones(dims)
    for k, (n, h) in enumerate(zip(dims, spacing)):
        shape = [1] * d
        shape[k] = n
        out = out * _axis_kernel_spectrum(n, h, sigma).reshape(shape)
    return out


@ad.primitive
def smooth_values(values, *, sigma, spacing):
    if sigma == 0:
        return np.array(values, dtype=np.float64)
    d = len(spacing)
    axes = tuple(range(-d, 0))
    spectrum = gaussian_spectrum(np.shape(values)[-d:], spacing, sigma)
    return scipy.fft.ifftn(scipy.fft.fftn(values, axes=axes) * spectrum, axes=axes).real


@smooth_values.defvjp
def _smooth_values_vjp(g, ans, values, *, sigma, spacing):
    # symmetric kernel: the operator is self-adjoint
    return (smooth_values(g, sigma=sigma, spacing=spacing),)


def gaussian_smooth(f, sigma):
    """Circular convolution of every component of ``f`` with a unit-mass Gaussian."""
    if sigma < 0:
        raise InvalidParameter(f"smoothing sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return f
    return f.with_values(smooth_values(f.values, sigma=float(sigma), spacing=f.grid.spacing))


# derivatives

def _diff_axis(f, axis, h):
    """Central differences inside, one-sided on the two border nodes."""
    f = np.moveaxis(f, axis, -1)
    out = np.empty_like(f)
    out[..., 1:-1] = (f[..., 2:] - f[..., :-2]) / (2.0 * h)
    out[..., 0] = (f[..., 1] - f[..., 0]) / h
    out[..., -1] = (f[..., -1] - f[..., -2]) / h
    return np.moveaxis(out, -1, axis)


def _diff_axis_adjoint(g, axis, h):
    g = np.moveaxis(g, axis, -1)
    out = np.zeros_like(g)
    out[..., 2:] += g[..., 1:-1] / (2.0 * h)
    out[..., :-2] -= g[..., 1:-1] / (2.0 * h)
    out[..., 1] += g[..., 0] / h
    out[..., 0] -= g[..., 0] / h
    out[..., -1] += g[..., -1] / h
    out[..., -2] -= g[..., -1] / h
    return np.moveaxis(out, -1, axis)


@ad.primitive
def gradient_values(values, *, spacing):
    """Spatial gradient; output shape ``(*lead, d, *dims)``."""
    d = len(spacing)
    values = np.asarray(values, dtype=np.float64)
    return np.stack([_diff_axis(values, values.ndim - d + k, h) for k, h in enumerate(spacing)],
                    axis=values.ndim - d)


@gradient_values.defvjp
def _gradient_values_vjp(g, ans, values, *, spacing):
    d = len(spacing)
    nd = np.ndim(values)
    out = np.zeros(np.shape(values))
    for k, h in enumerate(spacing):
        out += _diff_axis_adjoint(np.take(g, k, axis=nd - d), nd - d + k, h)
    return (out,)


def gradient(f):
    """Gradient of a ScalarField as a VectorField."""
    return VectorField(f.grid, gradient_values(f.values, spacing=f.grid.spacing))


def jacobian(phi):
    """Per-node Jacobian ``J[a, b] = d phi_a / d x_b`` of a VectorField, shape ``(d, d, *dims)``."""
    return gradient_values(phi.values, spacing=phi.grid.spacing)


# interpolation

def _corner_weights(points, dims, spacing):
    """Lower corner indices, fractional offsets and in-domain masks per axis."""
    lower, frac, inside = [], [], []
    for k, (n, h) in enumerate(zip(dims, spacing)):
        x = points[k]
        inside.append((x >= 0.0) & (x <= 1.0))
        u = np.clip(x, 0.0, 1.0) * (n - 1)
        # snap round-off so that queries at grid nodes reproduce node values exactly
        nearest = np.rint(u)
        u = np.where(np.abs(u - nearest) <= 1e-12 * n, nearest, u)
        i = np.clip(np.floor(u), 0, n - 2).astype(np.intp)
        lower.append(i)
        frac.append(u - i)
    return lower, frac, inside


def _corners(d):
    return itertools.product((0, 1), repeat=d)


@ad.primitive
def interpolate_values(values, points, *, spacing):
    """Multilinear interpolation of ``values`` (spatial axes last) at ``points`` (shape ``(d, *q)``).

    Returns an array of shape ``(*lead, *q)``.
    """
    d = len(spacing)
    values = np.asarray(values, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    dims = values.shape[-d:]
    lower, frac, _ = _corner_weights(points, dims, spacing)
    out = np.zeros(values.shape[:-d] + points.shape[1:])
    for corner in _corners(d):
        idx = tuple(lower[k] + corner[k] for k in range(d))
        w = np.ones(points.shape[1:])
        for k in range(d):
            w = w * (frac[k] if corner[k] else 1.0 - frac[k])
        out += values[(Ellipsis,) + idx] * w
    return out


@interpolate_values.defvjp
def _interpolate_values_vjp(g, ans, values, points, *, spacing):
    d = len(spacing)
    values = np.asarray(values, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    dims = values.shape[-d:]
    lead = values.shape[:-d]
    lower, frac, inside = _corner_weights(points, dims, spacing)

    g_flat = np.reshape(g, (-1,) + points.shape[1:])
    values_flat = np.reshape(values, (-1,) + dims)
    values_bar = np.zeros_like(values_flat)
    points_bar = np.zeros_like(points)
    for corner in _corners(d):
        idx = tuple(lower[k] + corner[k] for k in range(d))
        w = np.ones(points.shape[1:])
        for k in range(d):
            w = w * (frac[k] if corner[k] else 1.0 - frac[k])
        flat_idx = np.ravel_multi_index(idx, dims).ravel()
        corner_values = values_flat[(slice(None),) + idx]
        for c in range(values_flat.shape[0]):
            values_bar[c] += np.bincount(flat_idx, weights=(g_flat[c] * w).ravel(),
                                         minlength=int(np.prod(dims))).reshape(dims)
        weighted = np.sum(g_flat * corner_values, axis=0)
        for k in range(d):
            dw = np.ones(points.shape[1:])
            for j in range(d):
                if j == k:
                    dw = dw * (1.0 if corner[j] else -1.0)
                else:
                    dw = dw * (frac[j] if corner[j] else 1.0 - frac[j])
            points_bar[k] += weighted * dw / spacing[k]
    points_bar *= np.stack(inside)
    return values_bar.reshape(lead + dims), points_bar


def interpolate(f, points):
    """Sample ``f`` at ``points`` (coordinates along the first axis); clamps to [0,1]^d."""
    return interpolate_values(f.values, np.asarray(points, dtype=np.float64), spacing=f.grid.spacing)


def resample_values(values, source, target):
    """Multilinear resampling of ``values`` from grid ``source`` to grid ``target``."""
    if source == target:
        return values
    return interpolate_values(values, target.coordinates(), spacing=source.spacing)


def resample(f, target):
    """Down/upsample a field to another grid over the same domain."""
    return type(f)(target, resample_values(f.values, f.grid, target))


def compose_maps(outer, inner):
    """Coordinate map ``outer o inner`` on the grid of ``inner``."""
    return VectorField(inner.grid, interpolate_values(outer.values, inner.values, spacing=outer.grid.spacing))

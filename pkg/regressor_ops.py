"""
regressor_ops.py: The learned local regressor

A two-layer convolutional network maps the source image (optionally stacked
with the current momentum) to pre-weights on the probability simplex:

    conv(c_in, n1) -> batch-norm -> leaky ReLU -> conv(n1, N) -> batch-norm
        -> weighted linear softmax around the setpoint

Convolutions are periodic cross-correlations with odd filter size. Batch-norm
statistics are taken over the spatial positions of the current input, per
channel, with no running averages, in training and at test time alike.

Parameter file layout (``theta.bin``):
    line 1: ``MREG1``
    line 2: space separated ``key=value`` hyperparameters
    rest:   little-endian float64 tensors in TENSOR_NAMES order
"""

import logging
from dataclasses import dataclass, field, fields

import numpy as np

import autodiff_ops as ad
from run_utils import DataIOError, InvalidParameter

logger = logging.getLogger(__name__)

MAGIC = b"MREG1"

TENSOR_NAMES = (
    "conv1_weight", "conv1_bias", "bn1_scale", "bn1_offset",
    "conv2_weight", "conv2_bias", "bn2_scale", "bn2_offset",
)


@dataclass(frozen=True)
class RegressorConfig:
    hidden_channels: int = 20
    kernel_size: int = 5
    negative_slope: float = 0.2
    bn_epsilon: float = 1e-5
    use_momentum: bool = False
    bn2_init_scale: float = 0.025
    weight_decay: float = 1e-5

    def __post_init__(self):
        if self.hidden_channels < 1:
            raise InvalidParameter(f"hidden_channels must be >= 1, got {self.hidden_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidParameter(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.bn_epsilon <= 0:
            raise InvalidParameter("bn_epsilon must be positive")
        if self.negative_slope < 0 or self.weight_decay < 0:
            raise InvalidParameter("negative_slope and weight_decay must be nonnegative")

    def in_channels(self, ndim):
        return ndim + 1 if self.use_momentum else 1


@dataclass
class RegressorParams:
    conv1_weight: object
    conv1_bias: object
    bn1_scale: object
    bn1_offset: object
    conv2_weight: object
    conv2_bias: object
    bn2_scale: object
    bn2_offset: object

    def tensors(self):
        return [getattr(self, name) for name in TENSOR_NAMES]

    @classmethod
    def from_tensors(cls, tensors):
        return cls(*tensors)

    def map(self, fn):
        """New params with ``fn(name, tensor)`` applied to every tensor (e.g. to put them on a tape)."""
        return RegressorParams(**{name: fn(name, getattr(self, name)) for name in TENSOR_NAMES})

    def copy(self):
        return self.map(lambda name, t: np.array(ad.value_of(t), dtype=np.float64))

    @property
    def ndim(self):
        return np.ndim(ad.value_of(self.conv1_weight)) - 2

    @property
    def n_weights(self):
        return np.shape(ad.value_of(self.conv2_bias))[0]


@dataclass
class SimplexOutput:
    preweights: object
    input_penalty: object
    diagnostics: list = field(default_factory=list)


def _shapes(config, n_weights, ndim):
    k = (config.kernel_size,) * ndim
    n1 = config.hidden_channels
    return {
        "conv1_weight": (n1, config.in_channels(ndim)) + k,
        "conv1_bias": (n1,),
        "bn1_scale": (n1,),
        "bn1_offset": (n1,),
        "conv2_weight": (n_weights, n1) + k,
        "conv2_bias": (n_weights,),
        "bn2_scale": (n_weights,),
        "bn2_offset": (n_weights,),
    }


def init_params(config, n_weights, ndim, rng):
    """Uniform fan-in filters, zero biases and offsets, unit bn1 scale, small bn2 scale."""
    shapes = _shapes(config, n_weights, ndim)

    def filters(shape):
        bound = np.sqrt(6.0 / int(np.prod(shape[1:])))
        return rng.uniform(-bound, bound, size=shape)

    return RegressorParams(
        conv1_weight=filters(shapes["conv1_weight"]),
        conv1_bias=np.zeros(shapes["conv1_bias"]),
        bn1_scale=np.ones(shapes["bn1_scale"]),
        bn1_offset=np.zeros(shapes["bn1_offset"]),
        conv2_weight=filters(shapes["conv2_weight"]),
        conv2_bias=np.zeros(shapes["conv2_bias"]),
        bn2_scale=np.full(shapes["bn2_scale"], config.bn2_init_scale),
        bn2_offset=np.zeros(shapes["bn2_offset"]),
    )


def zero_params(config, n_weights, ndim):
    """Parameters whose network output is zero everywhere."""
    return RegressorParams(**{name: np.zeros(shape) for name, shape in _shapes(config, n_weights, ndim).items()})


# periodic convolution

def _offsets(kernel_shape):
    radius = np.array(kernel_shape) // 2
    for idx in np.ndindex(*kernel_shape):
        yield idx, tuple(int(o) for o in np.array(idx) - radius)


def _spatial_axes(ndim):
    return tuple(range(1, ndim + 1))


@ad.primitive
def conv_values(x, weight, bias):
    """Periodic cross-correlation: out[o, p] = sum_{c,off} W[o, c, off] x[c, p + off] + b[o]."""
    x = np.asarray(x, dtype=np.float64)
    ndim = x.ndim - 1
    axes = _spatial_axes(ndim)
    out = np.zeros((weight.shape[0],) + x.shape[1:])
    for idx, off in _offsets(weight.shape[2:]):
        shifted = np.roll(x, shift=tuple(-o for o in off), axis=axes)
        out += np.tensordot(weight[(slice(None), slice(None)) + idx], shifted, axes=(1, 0))
    return out + np.reshape(bias, (-1,) + (1,) * ndim)


@conv_values.defvjp
def _conv_values_vjp(g, ans, x, weight, bias):
    x = np.asarray(x, dtype=np.float64)
    ndim = x.ndim - 1
    axes = _spatial_axes(ndim)
    x_bar = np.zeros_like(x)
    w_bar = np.zeros_like(weight)
    for idx, off in _offsets(weight.shape[2:]):
        w = weight[(slice(None), slice(None)) + idx]
        x_bar += np.roll(np.tensordot(w, g, axes=(0, 0)), shift=off, axis=axes)
        shifted = np.roll(x, shift=tuple(-o for o in off), axis=axes)
        w_bar[(slice(None), slice(None)) + idx] = np.tensordot(g, shifted, axes=(axes, axes))
    return x_bar, w_bar, np.sum(g, axis=axes)


def _batch_norm(y, scale, offset, epsilon, ndim):
    axes = _spatial_axes(ndim)
    shape = (-1,) + (1,) * ndim
    centered = y - ad.mean(y, axis=axes, keepdims=True)
    var = ad.mean(centered * centered, axis=axes, keepdims=True)
    normed = centered / ad.sqrt(var + epsilon)
    return normed * ad.reshape(scale, shape=shape) + ad.reshape(offset, shape=shape)


# simplex output

def _softmax_parts(z, setpoint):
    w = np.reshape(setpoint, (-1,) + (1,) * (np.ndim(z) - 1))
    a = w + z - np.mean(z, axis=0, keepdims=True)
    c = np.clip(a, 0.0, 1.0)
    s = np.sum(c, axis=0, keepdims=True)
    return w, a, c, s


@ad.primitive
def weighted_linear_softmax(z, *, setpoint):
    """Simplex projection linear around ``setpoint``; channels on axis 0.

    Nodes where every clamped entry is zero fall back to the setpoint.
    """
    w, a, c, s = _softmax_parts(np.asarray(z, dtype=np.float64), setpoint)
    degenerate = s <= 0
    out = c / np.where(degenerate, 1.0, s)
    return np.where(degenerate, np.broadcast_to(w, out.shape), out)


@weighted_linear_softmax.defvjp
def _weighted_linear_softmax_vjp(g, ans, z, *, setpoint):
    w, a, c, s = _softmax_parts(np.asarray(z, dtype=np.float64), setpoint)
    degenerate = s <= 0
    s = np.where(degenerate, 1.0, s)
    c_bar = g / s - np.sum(g * c, axis=0, keepdims=True) / s ** 2
    a_bar = c_bar * ((a >= 0.0) & (a <= 1.0))
    z_bar = a_bar - np.mean(a_bar, axis=0, keepdims=True)
    return (np.where(degenerate, 0.0, z_bar),)


def softmax_fallback_count(z, setpoint):
    _, _, _, s = _softmax_parts(np.asarray(ad.value_of(z)), setpoint)
    return int(np.count_nonzero(s <= 0))


def floored_setpoint(setpoint, floor):
    """Setpoint of the unfloored softmax so that floor + (1 - N floor) * result hits ``setpoint``."""
    setpoint = np.asarray(setpoint, dtype=np.float64)
    shifted = np.clip((setpoint - floor) / (1.0 - setpoint.size * floor), 0.0, None)
    return tuple(float(x) for x in shifted / shifted.sum())


def input_range_penalty(z, setpoint, floor, cell_volume):
    """Squared distance of the softmax inputs from [floor, 1], integrated over the domain."""
    if floor <= 0:
        raise InvalidParameter(f"input range floor must be positive, got {floor}")
    w = np.reshape(np.asarray(setpoint, dtype=np.float64), (-1,) + (1,) * (np.ndim(ad.value_of(z)) - 1))
    a = z - ad.mean(z, axis=0, keepdims=True) + w
    excess = a - ad.clip(a, lo=floor, hi=1.0)
    return ad.sum(excess * excess) * cell_volume


def forward(image, momentum, theta, spec, config, cell_volume):
    """Pre-weights for ``image`` (and ``momentum`` when the config asks for it).

    ``image`` has shape ``dims`` and ``momentum`` ``(d, *dims)``; either may be
    a tape value, as may the tensors of ``theta``.
    """
    ndim = np.ndim(ad.value_of(image))
    x = ad.reshape(image, shape=(1,) + np.shape(ad.value_of(image)))
    if config.use_momentum:
        if momentum is None:
            raise InvalidParameter("the regressor is configured to read the momentum but none was given")
        x = ad.concatenate(x, momentum, axis=0)
    if np.shape(ad.value_of(theta.conv1_weight))[1] != np.shape(ad.value_of(x))[0]:
        raise InvalidParameter("regressor parameters do not match the input channels")

    y = conv_values(x, theta.conv1_weight, theta.conv1_bias)
    y = _batch_norm(y, theta.bn1_scale, theta.bn1_offset, config.bn_epsilon, ndim)
    y = ad.leaky_relu(y, slope=config.negative_slope)
    y = conv_values(y, theta.conv2_weight, theta.conv2_bias)
    z = _batch_norm(y, theta.bn2_scale, theta.bn2_offset, config.bn_epsilon, ndim)

    diagnostics = []
    shifted = floored_setpoint(spec.setpoint, spec.preweight_floor)
    fallback = softmax_fallback_count(z, shifted)
    if fallback:
        logger.warning("weighted linear softmax fell back to the setpoint at %d nodes", fallback)
        diagnostics.append(f"softmax-fallback:{fallback}")
    scale = 1.0 - spec.n * spec.preweight_floor
    preweights = weighted_linear_softmax(z, setpoint=shifted) * scale + spec.preweight_floor
    penalty = input_range_penalty(z, spec.setpoint, spec.preweight_floor, cell_volume)
    return SimplexOutput(preweights, penalty, diagnostics)


def weight_decay_penalty(theta, config):
    """Weight decay on the convolution filters only."""
    total = ad.sum(theta.conv1_weight * theta.conv1_weight) + ad.sum(theta.conv2_weight * theta.conv2_weight)
    return total * config.weight_decay


# persistence

def _header(config, theta):
    values = {f.name: getattr(config, f.name) for f in fields(config)}
    values.update(ndim=theta.ndim, n_weights=theta.n_weights)
    return " ".join(f"{k}={v}" for k, v in values.items())


def _parse_header(line, path):
    try:
        items = dict(item.split("=", 1) for item in line.split())
        ndim = int(items.pop("ndim"))
        n_weights = int(items.pop("n_weights"))
        types = {f.name: f.type for f in fields(RegressorConfig)}
        kwargs = {}
        for key, raw in items.items():
            kind = types[key]
            kwargs[key] = (raw == "True") if kind is bool else kind(raw)
        return RegressorConfig(**kwargs), n_weights, ndim
    except (KeyError, ValueError, TypeError) as e:
        raise DataIOError(f"{path}: malformed regressor header: {e}") from e


def save_params(path, theta, config):
    try:
        with open(path, "wb") as f:
            f.write(MAGIC + b"\n")
            f.write(_header(config, theta).encode("ascii") + b"\n")
            for t in theta.tensors():
                f.write(np.ascontiguousarray(ad.value_of(t), dtype="<f8").tobytes())
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}") from e


def load_params(path):
    """Read a parameter file; returns ``(RegressorParams, RegressorConfig)``."""
    try:
        with open(path, "rb") as f:
            magic = f.readline().rstrip(b"\n")
            header = f.readline().decode("ascii", errors="replace")
            payload = f.read()
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}") from e
    if magic != MAGIC:
        raise DataIOError(f"{path}: not a regressor parameter file (bad magic {magic[:8]!r})")
    config, n_weights, ndim = _parse_header(header, path)
    shapes = _shapes(config, n_weights, ndim)
    expected = sum(int(np.prod(shapes[name])) for name in TENSOR_NAMES) * 8
    if len(payload) != expected:
        raise DataIOError(f"{path}: expected {expected} bytes of parameters, found {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    tensors, pos = [], 0
    for name in TENSOR_NAMES:
        size = int(np.prod(shapes[name]))
        tensors.append(flat[pos:pos + size].reshape(shapes[name]))
        pos += size
    return RegressorParams.from_tensors(tensors), config

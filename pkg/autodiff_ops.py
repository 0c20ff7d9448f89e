"""
autodiff_ops.py: Reverse-mode differentiation over coarse-grained array operations

A ``Tape`` records every primitive applied to a tape value (``Var``). Each
primitive is a plain numpy function plus a hand-written vector-Jacobian
product registered with ``defvjp``; ``Tape.backward`` replays the records in
reverse order and accumulates gradients into the leaves.

Primitives called without any tape value among their positional arguments
just evaluate the numpy function, so the same energy code runs with or
without a tape (the finite-difference checker relies on this).

Conventions:
    - positional arguments are arrays (tape values or constants)
    - keyword arguments are static parameters and are never differentiated
    - a vjp has the signature ``vjp(g, ans, *values, **params)`` and returns
      one cotangent (or None) per positional argument

Functions:
    primitive: Register a numpy function as a tape primitive
    backward: Run the reverse pass of a tape
    finite_difference_check: Compare tape gradients with central differences
"""

import functools
import logging

import numpy as np

from run_utils import InvalidParameter, StaleTapeError

logger = logging.getLogger(__name__)

PRIMITIVES = {}

ROUNDOFF_MARGIN = 1e5
KINK_RTOL = 1e-5


class Primitive:
    def __init__(self, fn):
        self.fn = fn
        self.name = f"{fn.__module__}.{fn.__name__}"
        self.vjp = None
        functools.update_wrapper(self, fn)

    def defvjp(self, vjp):
        self.vjp = vjp
        return vjp

    def __call__(self, *args, **params):
        tape = _find_tape(args)
        values = [a.value if isinstance(a, Var) else a for a in args]
        out = self.fn(*values, **params)
        if tape is None:
            return out
        return tape.record(self, args, values, params, out)

    def __repr__(self):
        return f"<primitive {self.name}>"


def primitive(fn):
    """Decorator turning ``fn`` into a recorded primitive."""
    p = Primitive(fn)
    if p.name in PRIMITIVES:
        raise InvalidParameter(f"primitive {p.name} registered twice")
    PRIMITIVES[p.name] = p
    return p


def _find_tape(args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            a.tape._check_live()
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise InvalidParameter("values from different tapes cannot be mixed")
    return tape


class Var:
    """A value recorded on a tape."""

    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, value, tape, index, name=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name
        self.grad = None

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    size = property(lambda self: self.value.size)

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __pow__(self, exponent):
        return power(self, exponent=float(exponent))

    def __getitem__(self, index):
        return getitem(self, index=index)


class _Record:
    __slots__ = ("primitive", "args", "values", "params", "out")

    def __init__(self, prim, args, values, params, out):
        self.primitive = prim
        self.args = args
        self.values = values
        self.params = params
        self.out = out


class Tape:
    """Ordered record of primitive applications; single use."""

    def __init__(self):
        self._records = []
        self._leaves = []
        self.consumed = False

    def __len__(self):
        return len(self._records)

    def _check_live(self):
        if self.consumed:
            raise StaleTapeError("tape already consumed by a backward pass")

    def leaf(self, value, name=None):
        """Register a differentiable input; its ``grad`` is filled by backward."""
        self._check_live()
        value = np.array(value, dtype=np.float64)
        var = Var(value, self, len(self._records), name)
        var.grad = np.zeros_like(value)
        self._records.append(None)
        self._leaves.append(var)
        return var

    def record(self, prim, args, values, params, out):
        self._check_live()
        if prim.vjp is None:
            raise InvalidParameter(f"primitive {prim.name} has no adjoint")
        out = np.asarray(out, dtype=np.float64)
        self._records.append(_Record(prim, args, values, params, out))
        return Var(out, self, len(self._records) - 1)

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into every leaf; returns the leaf gradients."""
        self._check_live()
        if not isinstance(loss, Var):
            # a constant loss does not depend on any leaf
            if np.size(loss) != 1:
                raise InvalidParameter(f"loss must be a scalar, got shape {np.shape(loss)}")
            self.consumed = True
            return [leaf.grad for leaf in self._leaves]
        if loss.tape is not self:
            raise InvalidParameter("loss must be a value recorded on this tape")
        if loss.value.size != 1:
            raise InvalidParameter(f"loss must be a scalar, got shape {loss.value.shape}")

        cotangents = {loss.index: np.ones_like(loss.value)}
        leaves = {leaf.index: leaf for leaf in self._leaves}
        for index in range(loss.index, -1, -1):
            g = cotangents.pop(index, None)
            if g is None:
                continue
            rec = self._records[index]
            if rec is None:
                leaf = leaves[index]
                leaf.grad = leaf.grad + g
                continue
            grads = rec.primitive.vjp(g, rec.out, *rec.values, **rec.params)
            for arg, ga in zip(rec.args, grads):
                if ga is None or not isinstance(arg, Var):
                    continue
                ga = unbroadcast(np.asarray(ga, dtype=np.float64), arg.value.shape)
                if arg.index in cotangents:
                    cotangents[arg.index] = cotangents[arg.index] + ga
                else:
                    cotangents[arg.index] = ga

        self.consumed = True
        return [leaf.grad for leaf in self._leaves]


def backward(tape, loss):
    return tape.backward(loss)


def value_of(x):
    """The numpy value behind a tape value, or ``x`` itself."""
    return x.value if isinstance(x, Var) else x


def unbroadcast(g, shape):
    """Sum a broadcast cotangent back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# elementwise and structural primitives

@primitive
def add(x, y):
    return np.add(x, y)


@add.defvjp
def _add_vjp(g, ans, x, y):
    return g, g


@primitive
def subtract(x, y):
    return np.subtract(x, y)


@subtract.defvjp
def _subtract_vjp(g, ans, x, y):
    return g, -g


@primitive
def multiply(x, y):
    return np.multiply(x, y)


@multiply.defvjp
def _multiply_vjp(g, ans, x, y):
    return g * y, g * x


@primitive
def divide(x, y):
    return np.divide(x, y)


@divide.defvjp
def _divide_vjp(g, ans, x, y):
    return g / y, -g * ans / y


@primitive
def negative(x):
    return np.negative(x)


@negative.defvjp
def _negative_vjp(g, ans, x):
    return (-g,)


@primitive
def power(x, *, exponent):
    return np.power(x, exponent)


@power.defvjp
def _power_vjp(g, ans, x, *, exponent):
    return (g * exponent * np.power(x, exponent - 1.0),)


@primitive
def sqrt(x):
    return np.sqrt(x)


@sqrt.defvjp
def _sqrt_vjp(g, ans, x):
    return (g * 0.5 / ans,)


@primitive
def clip(x, *, lo=None, hi=None):
    return np.clip(x, lo, hi)


@clip.defvjp
def _clip_vjp(g, ans, x, *, lo=None, hi=None):
    # interior-branch derivative (1) at the clamp boundaries
    mask = np.ones(np.shape(x), dtype=bool)
    if lo is not None:
        mask &= x >= lo
    if hi is not None:
        mask &= x <= hi
    return (g * mask,)


@primitive
def leaky_relu(x, *, slope):
    return np.where(x > 0, x, slope * x)


@leaky_relu.defvjp
def _leaky_relu_vjp(g, ans, x, *, slope):
    # negative-side slope at the kink
    return (np.where(x > 0, g, slope * g),)


@primitive
def sum(x, *, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims)


@sum.defvjp
def _sum_vjp(g, ans, x, *, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, np.shape(x)),)


@primitive
def mean(x, *, axis=None, keepdims=False):
    return np.mean(x, axis=axis, keepdims=keepdims)


@mean.defvjp
def _mean_vjp(g, ans, x, *, axis=None, keepdims=False):
    count = np.size(x) // max(np.size(ans), 1)
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, np.shape(x)) / count,)


@primitive
def reshape(x, *, shape):
    return np.reshape(x, shape)


@reshape.defvjp
def _reshape_vjp(g, ans, x, *, shape):
    return (np.reshape(g, np.shape(x)),)


@primitive
def getitem(x, *, index):
    return np.asarray(x)[index]


@getitem.defvjp
def _getitem_vjp(g, ans, x, *, index):
    out = np.zeros(np.shape(x))
    np.add.at(out, index, g)
    return (out,)


@primitive
def concatenate(*xs, axis=0):
    return np.concatenate(xs, axis=axis)


@concatenate.defvjp
def _concatenate_vjp(g, ans, *xs, axis=0):
    bounds = np.cumsum([np.shape(x)[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


@primitive
def stack(*xs, axis=0):
    return np.stack(xs, axis=axis)


@stack.defvjp
def _stack_vjp(g, ans, *xs, axis=0):
    return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))


def finite_difference_check(lossfn, leaf, h=1e-5, samples=50, seed=0, candidates=None):
    """Max relative error between tape and central-difference gradients.

    ``lossfn`` maps an array (or tape value) shaped like ``leaf`` to a scalar.
    The error per sampled coordinate is |fd - ad| / max(|fd|, |ad|, floor),
    where the floor is ROUNDOFF_MARGIN times the round-off noise of the
    difference quotient (and at least 1e-12), so derivatives that vanish
    structurally are compared against that noise level.
    Coordinates are drawn from the flat indices ``candidates`` (default: all).
    A coordinate whose quotients at ``h`` and ``h/2`` disagree beyond
    KINK_RTOL straddles a kink of a piecewise-smooth primitive and is
    replaced by the next candidate. Running out of candidates before
    min(samples, len(candidates)) coordinates are checked returns inf.
    """
    if h <= 0:
        raise InvalidParameter(f"finite-difference step must be positive, got {h}")
    leaf = np.array(leaf, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(leaf)
    (ad,) = tape.backward(lossfn(x))

    def quotient(idx, step):
        plus = leaf.copy()
        plus[idx] += step
        minus = leaf.copy()
        minus[idx] -= step
        f_plus, f_minus = float(lossfn(plus)), float(lossfn(minus))
        noise = np.finfo(np.float64).eps * max(abs(f_plus), abs(f_minus)) / step
        return (f_plus - f_minus) / (2.0 * step), noise

    rng = np.random.default_rng(seed)
    candidates = np.arange(leaf.size) if candidates is None else np.asarray(candidates)
    order = rng.permutation(candidates)
    worst, checked, skipped = 0.0, 0, 0
    for flat in order:
        if checked >= samples:
            break
        idx = np.unravel_index(flat, leaf.shape)
        fd, noise = quotient(idx, h)
        half, half_noise = quotient(idx, 0.5 * h)
        a = float(ad[idx])
        if abs(fd - half) > KINK_RTOL * max(abs(fd), abs(a)) + 10.0 * half_noise:
            skipped += 1
            continue
        checked += 1
        err = abs(fd - a) / max(abs(fd), abs(a), ROUNDOFF_MARGIN * noise, 1e-12)
        if err > worst:
            logger.debug("coordinate %s: fd=%.6e ad=%.6e rel=%.2e", idx, fd, a, err)
        worst = max(worst, err)
    if skipped:
        logger.debug("skipped %d coordinate(s) next to a kink", skipped)
    required = min(samples, order.size)
    if checked < required:
        logger.warning("only %d of %d coordinates could be checked", checked, required)
        return float("inf")
    return worst

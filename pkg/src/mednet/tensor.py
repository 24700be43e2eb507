"""Dense tensor primitives and the seeded random stream.

Everything downstream (layers, graph, training) is built on the small set of
operations here.  Tensors are plain numpy arrays of rank <= 4 in float32 or
float64, activations laid out N x H x W x C and conv kernels Kh x Kw x Cin x
Cout, always row-major.  Two contracts hold for every operation:

* no implicit broadcasting -- tensor/tensor operands must have equal shapes
  (scalars are the only exception), so shape bugs fail loudly;
* no silent NaN/Inf -- a non-finite result raises ``NonFiniteError``.
"""

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class Rng:
    """Deterministic random stream; the generator algorithm is frozen to PCG64.

    A given seed names the same stream on every run and platform.  ``child``
    derives an independent, reproducible substream from integer keys, so
    components (per-layer init, per-sample noise) can be re-seeded in any
    order without disturbing each other.
    """

    algorithm = "PCG64"

    def __init__(self, seed, _path=()):
        self.seed = int(seed)
        self._path = tuple(int(k) for k in _path)
        entropy = [self.seed, *self._path]
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, *keys):
        """Substream addressed by ``keys``, independent of draws made so far."""
        return Rng(self.seed, _path=self._path + tuple(keys))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self._path}, algorithm={self.algorithm})"


def as_rng(rng_or_seed):
    """Coerce an ``Rng`` or integer seed to an ``Rng``."""
    if isinstance(rng_or_seed, Rng):
        return rng_or_seed
    return Rng(int(rng_or_seed))


def _check_tensor(t, what="operand"):
    if not isinstance(t, np.ndarray):
        raise ShapeError(f"{what} must be a numpy array, got {type(t).__name__}")
    if t.dtype not in FLOAT_DTYPES:
        raise ShapeError(f"{what} must be float32 or float64, got {t.dtype}")
    if t.ndim > 4:
        raise ShapeError(f"{what} has rank {t.ndim}; ranks above 4 are unsupported")
    return t


def check_finite(t, what="result"):
    """Raise ``NonFiniteError`` if ``t`` contains NaN or Inf; return ``t``."""
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


def _binary_args(a, b, op):
    _check_tensor(a, f"{op}: left operand")
    if np.isscalar(b) or (isinstance(b, np.ndarray) and b.ndim == 0):
        return a, a.dtype.type(b)
    _check_tensor(b, f"{op}: right operand")
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no implicit broadcasting)")
    return a, b


def add(a, b):
    a, b = _binary_args(a, b, "add")
    with np.errstate(over="ignore", invalid="ignore"):
        return check_finite(a + b, "add result")


def sub(a, b):
    a, b = _binary_args(a, b, "sub")
    with np.errstate(over="ignore", invalid="ignore"):
        return check_finite(a - b, "sub result")


def mul(a, b):
    a, b = _binary_args(a, b, "mul")
    with np.errstate(over="ignore", invalid="ignore"):
        return check_finite(a * b, "mul result")


def max_with_scalar(a, s):
    """Elementwise max(a, s) for scalar ``s``; the ReLU kernel."""
    _check_tensor(a, "max_with_scalar operand")
    if not np.isscalar(s):
        raise ShapeError("max_with_scalar threshold must be a scalar")
    return check_finite(np.maximum(a, a.dtype.type(s)), "max_with_scalar result")


def scale(a, s):
    """Multiply by a scalar."""
    _check_tensor(a, "scale operand")
    if not np.isscalar(s):
        raise ShapeError("scale factor must be a scalar")
    with np.errstate(over="ignore", invalid="ignore"):
        return check_finite(a * a.dtype.type(s), "scale result")


ELEMENTWISE_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "max-with-scalar": max_with_scalar,
    "scale": scale,
}


def elementwise(op, a, b):
    """Dispatch to one of the named elementwise operations."""
    if op not in ELEMENTWISE_OPS:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(ELEMENTWISE_OPS)}")
    return ELEMENTWISE_OPS[op](a, b)


def matmul(a, b):
    """Matrix product of a (M x K) with b (K x N), fixed reduction order.

    Accumulation visits k = 0..K-1 in sequence for every output element, so
    the result is bit-identical to a naive triple loop and reproducible
    across runs.  Intended for moderate K (fully-connected layers, test
    oracles); convolution lowering uses its own GEMM path.
    """
    _check_tensor(a, "matmul: left operand")
    _check_tensor(b, "matmul: right operand")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires rank-2 operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(k):
        # one multiply + one add rounding per element, in ascending-k order
        out += a[:, i : i + 1] * b[i : i + 1, :]
    return check_finite(out, "matmul result")


def reduce(op, t, axes):
    """Reduce ``t`` with sum/mean/max over ``axes``; reduced dims are removed."""
    _check_tensor(t, "reduce operand")
    axes = tuple(int(ax) for ax in axes)
    for ax in axes:
        if ax < 0 or ax >= t.ndim:
            raise ShapeError(f"reduce axis {ax} invalid for rank-{t.ndim} tensor")
    if len(set(axes)) != len(axes):
        raise ShapeError(f"reduce axes contain duplicates: {axes}")
    if op == "sum":
        out = np.sum(t, axis=axes)
    elif op == "mean":
        count = 1
        for ax in axes:
            count *= t.shape[ax]
        out = np.sum(t, axis=axes) / t.dtype.type(count)
    elif op == "max":
        out = np.max(t, axis=axes)
    else:
        raise ValueError(f"unknown reduce op {op!r}; expected sum, mean or max")
    return check_finite(np.asarray(out, dtype=t.dtype), "reduce result")


def pad2d(t, top, bottom, left, right, value=0.0):
    """Pad the spatial dims of an N x H x W x C tensor with a constant."""
    _check_tensor(t, "pad2d operand")
    if t.ndim != 4:
        raise ShapeError(f"pad2d requires a rank-4 tensor, got rank {t.ndim}")
    for name, amount in (("top", top), ("bottom", bottom), ("left", left), ("right", right)):
        if int(amount) != amount or amount < 0:
            raise ShapeError(f"pad2d {name} amount must be a non-negative integer, got {amount}")
    if top == bottom == left == right == 0:
        return t
    return np.pad(
        t,
        ((0, 0), (int(top), int(bottom)), (int(left), int(right)), (0, 0)),
        mode="constant",
        constant_values=t.dtype.type(value),
    )

"""Minimal reverse-mode differentiation over numpy arrays.

Only the operators the CoDATS networks and losses need are provided. A
:class:`Tape` records every operation whose inputs are on it; :func:`backward`
walks the records in reverse and returns gradients for the watched
parameters.

Precision defaults to float32. :func:`verification` switches to float64 and
turns on non-finite checks after every operation.
"""

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "Tape", "BatchNormState", "NonFiniteError",
    "precision", "verification", "get_dtype", "set_precision",
    "matmul", "add", "mul", "total", "scale", "add_bias", "conv1d_same", "relu", "batchnorm1d",
    "global_avg_pool", "dropout", "softmax", "softmax_xent", "grl", "take",
    "mean_over_batch", "kl_true_vs_pred", "backward", "grad_check",
]

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_check_finite = False

KL_FLOOR = 1e-6


class NonFiniteError(FloatingPointError):
    pass


def get_dtype():
    return _dtype


def set_precision(name):
    global _dtype
    try:
        _dtype = _PRECISIONS[str(name)]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; use float32 or float64") from None


@contextmanager
def precision(name, check_finite=None):
    global _dtype, _check_finite
    saved = _dtype, _check_finite
    set_precision(name)
    if check_finite is not None:
        _check_finite = bool(check_finite)
    try:
        yield
    finally:
        _dtype, _check_finite = saved


def verification():
    """64-bit arithmetic with non-finite detection after every op."""
    return precision("float64", check_finite=True)


class Tensor:
    """A dense array, optionally attached to a tape node."""

    __slots__ = ("values", "tape", "node")

    def __init__(self, values, tape=None, node=None):
        self.values = values
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.values.shape

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.values.shape}{tag})"


@dataclass
class _Record:
    parents: tuple
    backward: object  # g -> tuple of parent grads (None where not needed)


class Tape:
    """Ordered operation records; node ids are record indices."""

    def __init__(self):
        self.records = []
        self.params = {}
        self.shapes = {}

    def _push(self, parents, backward):
        self.records.append(_Record(tuple(parents), backward))
        return len(self.records) - 1

    def watch(self, name, values):
        """Register a parameter array as a differentiable leaf."""
        if name in self.params:
            raise KeyError(f"parameter {name!r} already watched")
        node = self._push((), None)
        self.params[name] = node
        self.shapes[name] = np.shape(values)
        return Tensor(values, self, node)

    def __len__(self):
        return len(self.records)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-3

    @classmethod
    def fresh(cls, channels, momentum=0.99, eps=1e-3, dtype=None):
        dtype = dtype or _dtype
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), momentum, eps)

    def copy(self):
        return BatchNormState(self.mean.copy(), self.var.copy(), self.momentum, self.eps)


def _values(x):
    return x.values if isinstance(x, Tensor) else np.asarray(x)


def _tracked(x):
    return isinstance(x, Tensor) and x.tape is not None


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = x.tape
    return tape


def _emit(values, inputs, backward):
    """Wrap an op result, recording it when any input is on a tape."""
    if _check_finite and not np.all(np.isfinite(values)):
        raise NonFiniteError("operation produced a non-finite value")
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(values)
    parents = tuple(x.node if isinstance(x, Tensor) and x.tape is tape else None for x in inputs)
    node = tape._push(parents, backward)
    return Tensor(values, tape, node)


# ---------------------------------------------------------------- operators


def matmul(a, b):
    av, bv = _values(a), _values(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    need_a, need_b = _tracked(a), _tracked(b)

    def back(g):
        return (g @ bv.T if need_a else None), (av.T @ g if need_b else None)

    return _emit(av @ bv, (a, b), back)


def add(a, b):
    av, bv = _values(a), _values(b)
    if av.shape != bv.shape:
        raise ValueError(f"add shape mismatch {av.shape} + {bv.shape}")
    return _emit(av + bv, (a, b), lambda g: (g, g))


def mul(a, b):
    """Elementwise product of equal-shape operands."""
    av, bv = _values(a), _values(b)
    if av.shape != bv.shape:
        raise ValueError(f"mul shape mismatch {av.shape} * {bv.shape}")
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def total(x):
    """Sum of all entries as a scalar."""
    xv = _values(x)
    return _emit(np.asarray(xv.sum(), dtype=xv.dtype), (x,), lambda g: (np.full(xv.shape, g, xv.dtype),))


def scale(x, c):
    xv = _values(x)
    c = float(c)
    return _emit(xv * c, (x,), lambda g: (g * c,))


def add_bias(x, b):
    """x (..., N) plus a bias vector of length N."""
    xv, bv = _values(x), _values(b)
    if bv.ndim != 1 or xv.shape[-1] != bv.shape[0]:
        raise ValueError(f"bias shape {bv.shape} does not fit {xv.shape}")
    axes = tuple(range(xv.ndim - 1))

    def back(g):
        return g, g.sum(axis=axes)

    return _emit(xv + bv, (x, b), back)


def conv1d_same(x, w):
    """Stride-1 cross-correlation with same zero padding, no bias.

    x is (B, H, K_in) and w is (k, K_in, F); pads floor((k-1)/2) on the left
    and the rest on the right.
    """
    xv, wv = _values(x), _values(w)
    if xv.ndim != 3 or wv.ndim != 3:
        raise ValueError("conv1d_same expects x (B,H,K) and w (k,K,F)")
    if xv.shape[2] != wv.shape[1]:
        raise ValueError(f"channel mismatch: input has {xv.shape[2]}, kernel expects {wv.shape[1]}")
    out, cols = kernels.conv1d_forward(xv, wv)
    need_x = _tracked(x)

    def back(g):
        return kernels.conv1d_backward(g, xv.shape, wv, cols, need_x)

    return _emit(out, (x, w), back)


def relu(x):
    xv = _values(x)
    mask = xv > 0
    return _emit(xv * mask, (x,), lambda g: (g * mask,))


def batchnorm1d(x, gamma, beta, state, mode="train"):
    """Per-channel normalization over all leading axes of x (..., C)."""
    xv, gv, bv = _values(x), _values(gamma), _values(beta)
    shape = xv.shape
    c = shape[-1]
    if gv.shape != (c,) or bv.shape != (c,):
        raise ValueError("gamma/beta must match the channel count")
    flat = xv.reshape(-1, c)
    if mode == "train":
        if flat.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs at least 2 values per channel")
        y, xhat, inv_std, mean, var = kernels.batchnorm_train_forward(flat, gv, bv, state.eps)
        m = state.momentum
        state.mean = (m * state.mean + (1 - m) * mean).astype(state.mean.dtype)
        state.var = (m * state.var + (1 - m) * var).astype(state.var.dtype)

        def back(g):
            gx, ggamma, gbeta = kernels.batchnorm_train_backward(g.reshape(-1, c), xhat, inv_std, gv)
            return gx.reshape(shape), ggamma, gbeta

    elif mode == "inference":
        denom = state.var + state.eps
        if np.any(denom <= 0):
            raise FloatingPointError("batchnorm variance plus epsilon is not positive")
        inv_std = (1.0 / np.sqrt(denom)).astype(xv.dtype)
        xhat = (flat - state.mean) * inv_std
        y = xhat * gv + bv

        def back(g):
            g2 = g.reshape(-1, c)
            return (g2 * (gv * inv_std)).reshape(shape), np.sum(g2 * xhat, axis=0), g2.sum(axis=0)

    else:
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    return _emit(y.reshape(shape), (x, gamma, beta), back)


def global_avg_pool(x):
    xv = _values(x)
    if xv.ndim != 3 or xv.shape[1] < 1:
        raise ValueError("global_avg_pool expects (B, H, C) with H >= 1")
    h = xv.shape[1]

    def back(g):
        return (np.broadcast_to(g[:, None, :], xv.shape) / h,)

    return _emit(xv.mean(axis=1), (x,), back)


def dropout(x, rate, rng=None, mode="train"):
    """Inverted dropout; the mask is drawn elementwise in row-major order."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    xv = _values(x)
    if mode == "inference" or rate == 0:
        return _emit(xv, (x,), lambda g: (g,))
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    keep = rng.random(xv.shape) >= rate
    mult = keep.astype(xv.dtype) / xv.dtype.type(1 - rate)
    return _emit(xv * mult, (x,), lambda g: (g * mult,))


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True), z


def softmax(logits):
    zv = _values(logits)
    p, _ = _softmax_rows(zv)

    def back(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return _emit(p, (logits,), back)


def softmax_xent(logits, labels, return_probs=False):
    """Batch-mean cross entropy of softmax(logits) against integer labels."""
    zv = _values(logits)
    labels = np.asarray(labels)
    if zv.ndim != 2 or zv.shape[1] < 2:
        raise ValueError("softmax_xent expects (B, L) logits with L >= 2")
    if labels.shape != (zv.shape[0],):
        raise ValueError("one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= zv.shape[1]):
        raise ValueError("label out of range")
    p, shifted = _softmax_rows(zv)
    rows = np.arange(zv.shape[0])
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = np.asarray(np.mean(logsum - shifted[rows, labels]), dtype=zv.dtype)
    b = zv.shape[0]

    def back(g):
        d = p.copy()
        d[rows, labels] -= 1
        return (d * (g / b),)

    out = _emit(loss, (logits,), back)
    return (out, p) if return_probs else out


def grl(x, lam):
    """Gradient reversal: identity forward, gradient times -lam backward."""
    if lam < 0:
        raise ValueError(f"GRL lambda must be non-negative, got {lam}")
    xv = _values(x)
    neg = -float(lam)
    return _emit(xv, (x,), lambda g: (g * neg,))


def take(x, rows):
    """Select rows of x along the first axis."""
    xv = _values(x)
    rows = np.asarray(rows, dtype=np.intp)

    def back(g):
        out = np.zeros_like(xv)
        np.add.at(out, rows, g)
        return (out,)

    return _emit(xv[rows], (x,), back)


def mean_over_batch(x):
    xv = _values(x)
    if xv.shape[0] < 1:
        raise ValueError("mean_over_batch needs at least one row")
    b = xv.shape[0]
    return _emit(xv.mean(axis=0), (x,), lambda g: (np.broadcast_to(g / b, xv.shape).copy(),))


def kl_true_vs_pred(p_true, q):
    """KL(p_true || q) with q clamped to [1e-6, 1]; differentiable in q only."""
    p = np.asarray(p_true, dtype=np.float64)
    qv = _values(q)
    if p.ndim != 1 or p.shape != qv.shape:
        raise ValueError("p_true and q must be vectors of equal length")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("p_true is not a probability distribution")
    p = p.astype(qv.dtype)
    qc = np.clip(qv, KL_FLOOR, 1.0)
    pos = p > 0
    terms = np.zeros_like(qc)
    terms[pos] = p[pos] * np.log(p[pos] / qc[pos])
    inside = (qv >= KL_FLOOR) & (qv <= 1.0)

    def back(g):
        return (np.where(inside, -p / qc, 0).astype(qv.dtype) * g,)

    return _emit(np.asarray(terms.sum(), dtype=qv.dtype), (q,), back)


# ------------------------------------------------------------ differentiation


def backward(loss, tape=None):
    """Gradients of a scalar loss for every parameter watched on the tape."""
    tape = tape if tape is not None else loss.tape
    if loss.values.size != 1 or loss.values.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    if tape is None or loss.tape is not tape or loss.node is None:
        raise ValueError("loss is not on the tape")
    grads = {loss.node: np.ones_like(loss.values)}
    records = tape.records
    for node in range(loss.node, -1, -1):
        g = grads.get(node)
        rec = records[node]
        if g is None or rec.backward is None:
            continue
        del grads[node]
        for parent, pg in zip(rec.parents, rec.backward(g)):
            if parent is None or pg is None:
                continue
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    out = {}
    for name, node in tape.params.items():
        gv = grads.get(node)
        out[name] = np.zeros(tape.shapes[name], dtype=loss.values.dtype) if gv is None else np.asarray(gv)
    return out


def _bind(params, tape):
    if hasattr(params, "bind"):
        return params.bind(tape)
    return {k: tape.watch(k, v) for k, v in params.items()}


def grad_check(f, params, eps=1e-5, max_coords=None, rng=None, reference=None):
    """Max relative error between tape gradients and central differences.

    ``f`` maps a parameter mapping (tensors or plain arrays) to a scalar. All
    parameter arrays must be float64. ``max_coords`` caps the number of
    coordinates probed per parameter (chosen with ``rng``).

    The tape gradient of a reversal layer is not the derivative of ``f``. For
    such graphs pass ``reference(params, name)``, the scalar whose central
    difference in parameter ``name`` is the expected gradient.
    """
    names = list(params.keys())
    for k in names:
        if params[k].dtype != np.float64:
            raise ValueError(f"grad_check needs float64 parameters; {k!r} is {params[k].dtype}")
    tape = Tape()
    loss = f(_bind(params, tape))
    if not isinstance(loss, Tensor) or loss.values.size != 1:
        raise ValueError("f must return a scalar Tensor")
    analytic = backward(loss, tape)
    rng = rng if rng is not None else np.random.default_rng(0)

    def value(k):
        out = f(params) if reference is None else reference(params, k)
        v = out.values if isinstance(out, Tensor) else np.asarray(out)
        if v.size != 1:
            raise ValueError("f must return a scalar")
        return float(v)

    worst = 0.0
    for k in names:
        arr = params[k]
        if not arr.flags.c_contiguous:
            raise ValueError(f"parameter {k!r} must be C-contiguous")
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        ga = analytic[k].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value(k)
            flat[i] = orig - eps
            fm = value(k)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(ga[i])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst

"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every trainable quantity in this package lives in a `Parameter`. Forward
passes record primitive ops onto an explicit `Tape`; `Tape.backward` replays
the recording in reverse and returns gradients keyed by tensor identity.
Tensors are immutable once created and every public op checks its result for
non-finite values, so a NaN surfaces at the op that produced it.
"""

from __future__ import annotations

import hashlib
import threading

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327
_MASK64 = (1 << 64) - 1

finite_checks = True

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense float64 array, optionally tracked for gradients."""

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64, order="C")
        if finite_checks and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @staticmethod
    def _wrap(arr, requires_grad):
        out = object.__new__(Tensor)
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.c_contiguous:
            # ascontiguousarray would promote 0-d to 1-d, so only call when needed
            arr = np.ascontiguousarray(arr)
        if finite_checks and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in op result")
        if arr.flags.owndata:
            arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("divide by a Tensor is not a primitive; use mul with a reciprocal")
        return scale(self, 1.0 / float(other))

    def matmul(self, other):
        return matmul(self, other)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def log_softmax(self, axis=-1):
        return log_softmax(self, axis)

    def gelu(self):
        return gelu(self)

    def tanh(self):
        return tanh(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Recording of one forward pass; single-threaded, innermost tape wins."""

    def __init__(self):
        self._nodes = []
        self._outputs = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def _record(self, out, inputs, backward):
        self._nodes.append((out, inputs, backward))
        self._outputs.add(id(out))

    def backward(self, loss):
        """Reverse sweep from a scalar recorded on this tape."""
        if not isinstance(loss, Tensor) or loss.data.shape != ():
            raise ValueError("loss must be a scalar tensor")
        if id(loss) not in self._outputs:
            raise ValueError("loss is not on this tape")
        grads = {id(loss): np.ones((), dtype=np.float64)}
        for out, inputs, backward in reversed(self._nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                acc = grads.get(id(inp))
                grads[id(inp)] = gi if acc is None else acc + gi
        return Gradients(grads)


class Gradients:
    """Gradient lookup keyed by tensor identity; accepts Parameters too."""

    def __init__(self, grads):
        self._grads = grads

    @staticmethod
    def _key(t):
        if isinstance(t, Parameter):
            t = t.value
        return id(t)

    def get(self, t):
        return self._grads.get(self._key(t))

    def __getitem__(self, t):
        g = self.get(t)
        if g is None:
            raise KeyError("no gradient recorded for this tensor")
        return g

    def __contains__(self, t):
        return self._key(t) in self._grads


def _make(out_data, inputs, backward):
    rg = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, rg)
    tape = _active_tape()
    if tape is not None and rg:
        tape._record(out, inputs, backward)
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives ----------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(a.data * b.data, (a, b), backward)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(a.data * c, (a,), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs 2-D or batched operands")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of zero tensors")
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack of zero tensors")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def gather_rows(a, indices):
    """Select rows a[indices]; backward scatter-adds into the source."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError("row index out of range")

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return _make(a.data[idx], (a,), backward)


def _softmax_np(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a, axis=-1):
    a = as_tensor(a)
    y = _softmax_np(a.data, axis)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (a,), backward)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    ls = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(ls) * np.sum(g, axis=axis, keepdims=True),)

    return _make(ls, (a,), backward)


def gelu(a):
    """Exact erf-form GELU."""
    a = as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        dens = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi + x * dens),)

    return _make(x * phi, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _make(y, (a,), backward)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy() / count,)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy() / count,)

    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        dxhat = g * gain.data
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


# -- derived public ops --------------------------------------------------


def softmax_stable(v, axis=-1):
    """Max-shifted softmax on a plain array; returns numpy, sums to 1."""
    arr = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty logits")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite logits")
    return _softmax_np(arr, axis)


def cross_entropy(logits, gold, mask=None):
    """Mean negative log-likelihood (natural log) over unmasked positions."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError("logits must be (positions, classes)")
    n, c = logits.shape
    gold = np.asarray(gold, dtype=np.int64)
    if gold.shape != (n,):
        raise ValueError("gold labels must align with logits rows")
    if gold.size and (gold.min() < 0 or gold.max() >= c):
        raise ValueError("label id out of range")
    if mask is None:
        mask = np.ones(n, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n,):
            raise ValueError("mask must align with logits rows")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("no supervised positions")
    pick = np.zeros((n, c), dtype=np.float64)
    pick[np.arange(n), gold] = mask
    ls = log_softmax(logits, -1)
    return scale(tsum(mul(ls, Tensor(pick))), -1.0 / count)


# -- parameters and RNG --------------------------------------------------


class Parameter:
    """Named model tensor; optimizers leave it bit-identical when frozen."""

    def __init__(self, name, value, trainable=True):
        self.name = str(name)
        self._trainable = bool(trainable)
        self.value = value

    @property
    def value(self):
        return self._value

    @value.setter
    def value(self, v):
        t = as_tensor(v)
        t.requires_grad = self._trainable
        self._value = t

    @property
    def trainable(self):
        return self._trainable

    @trainable.setter
    def trainable(self, flag):
        self._trainable = bool(flag)
        self._value.requires_grad = self._trainable

    @property
    def shape(self):
        return self._value.data.shape

    def __repr__(self):
        state = "trainable" if self._trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.shape}, {state})"


class Rng:
    """Deterministic counter-based RNG; same seed gives same draws anywhere.

    Built on Philox. Child streams are derived by hashing the parent stream id
    with a tag, so substream layout does not depend on draw order.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, tag):
        h = hashlib.blake2b(f"{self.stream}:{tag}".encode(), digest_size=8)
        return Rng(self.seed, int.from_bytes(h.digest(), "little"))

    def normal(self, shape=None, std=1.0, mean=0.0):
        return self._gen.normal(mean, std, size=shape)

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self._gen.uniform(low, high, size=shape)

    def random(self, shape=None):
        return self._gen.random(size=shape)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def shuffled(self, seq):
        seq = list(seq)
        return [seq[i] for i in self._gen.permutation(len(seq))]

    def sample(self, seq, k):
        seq = list(seq)
        if k > len(seq):
            raise ValueError("sample larger than population")
        return [seq[i] for i in self._gen.permutation(len(seq))[:k]]


# -- gradient checking helpers ------------------------------------------


def fd_gradient(f, x, eps=1e-5):
    """Central finite-difference gradient of scalar f with respect to x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2.0 * eps)
        it.iternext()
    return g


def max_rel_err(a, b, floor=1e-6):
    """Largest elementwise |a-b| / max(floor, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0

"""Minimal reverse-mode autodiff over numpy arrays.

Every op builds a node holding its output and a closure mapping the output
gradient to the input gradients. ``backward`` walks the graph recorded under
a scalar loss, so each forward pass owns its graph and nothing is global:
independent graphs on disjoint parameter stores can run in separate threads.

Image tensors use NHWC layout; convolution weights are ``(kh, kw, cin, cout)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf as _erf

CHECKPOINT_MAGIC = "forgeaug-params"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the Tensor

    def __init__(self, data, parents=(), backward=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    return Tensor(data, parents=parents, backward=backward)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / out,))


def square(x):
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def tabs(x):
    x = as_tensor(x)
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x):
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def silu(x):
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)
    return _node(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def softplus(x):
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return _node(out, (x,), lambda g: (g * _stable_sigmoid(x.data),))


def erf(x):
    x = as_tensor(x)
    return _node(_erf(x.data), (x,),
                 lambda g: (g * (2.0 / np.sqrt(np.pi)) * np.exp(-x.data * x.data),))


def _stable_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ------------------------------------------------------------------ reductions

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def global_avg_pool(x):
    """NHWC -> NC."""
    return mean(x, axis=(1, 2))


# --------------------------------------------------------------------- shaping

def reshape(x, shape):
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, idx):
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(x.data[idx], (x,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------- linear maps

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def _same_padding(k):
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def conv_output_size(size, k, stride, padding="same"):
    if padding == "same":
        return (size - 1) // stride + 1
    return (size - k) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding="same"):
    """2-D cross-correlation, NHWC input, ``(kh, kw, cin, cout)`` weight.

    ``padding="same"`` zero-pads so the output has ``ceil(H / stride)`` rows;
    ``"valid"`` uses no padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and 4-D weight, got {x.shape} and {weight.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    n, h, w, c = x.shape
    kh, kw, cin, cout = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if padding == "same":
        pads = ((0, 0), _same_padding(kh), _same_padding(kw), (0, 0))
    elif padding == "valid":
        pads = ((0, 0),) * 4
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, pads) if padding == "same" else x.data
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d input {x.shape} too small for kernel {weight.shape}")
    # (n, ho, wo, c, kh, kw) -> rows ordered (c, kh, kw)
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = windows.reshape(n * ho * wo, c * kh * kw)
    w2d = weight.data.transpose(2, 0, 1, 3).reshape(c * kh * kw, cout)
    out = (cols @ w2d).reshape(n, ho, wo, cout)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        g2d = g.reshape(-1, cout)
        gw = (cols.T @ g2d).reshape(c, kh, kw, cout).transpose(1, 2, 0, 3)
        gcols = (g2d @ w2d.T).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gcols[..., i, j]
        gx = gxp[:, pads[1][0]:pads[1][0] + h, pads[2][0]:pads[2][0] + w, :]
        grads = (gx, gw)
        if bias is not None:
            grads += (g2d.sum(axis=0),)
        return grads

    return _node(out, parents, backward)


# -------------------------------------------------------------- distributions

def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _node(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def softmax(x, axis=-1):
    """Softmax; returns a Tensor for Tensor input and an ndarray otherwise."""
    if not isinstance(x, Tensor):
        z = np.asarray(x, dtype=np.float64)
        z = np.exp(z - z.max(axis=axis, keepdims=True))
        return z / z.sum(axis=axis, keepdims=True)
    return exp(log_softmax(x, axis=axis))


def l2_normalize(x, axis=-1, eps=0.0):
    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norms <= eps):
        raise ValueError("cannot L2-normalize a zero-norm vector")
    return div(x, sqrt(tsum(square(x), axis=axis, keepdims=True)))


# ------------------------------------------------------------------- backward

def _topological_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, params=None):
    """Backpropagate a scalar ``loss`` and write ``.grad`` on leaf tensors.

    Every tensor in ``params`` receives a gradient; those not reachable from
    ``loss`` get zeros.
    """
    if not isinstance(loss, Tensor) or (loss._backward is None and not loss.requires_grad):
        raise RuntimeError("backward called without a recorded forward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params.values():
            p.grad = np.zeros_like(p.data)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ----------------------------------------------------------------- parameters

class ParamStore(dict):
    """Named leaf tensors; insertion order is the canonical flat order."""

    def add(self, name, value):
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        self[name] = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        return self[name]

    def zero_grad(self):
        for p in self.values():
            p.grad = None

    def n_params(self):
        return int(sum(p.data.size for p in self.values()))

    def flat(self):
        return np.concatenate([p.data.ravel() for p in self.values()]) if self else np.zeros(0)

    def flat_grad(self):
        return np.concatenate([
            (np.zeros(p.data.size) if p.grad is None else p.grad.ravel()) for p in self.values()
        ]) if self else np.zeros(0)

    def set_flat(self, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.n_params():
            raise ShapeError(f"flat vector has {vector.size} entries, store holds {self.n_params()}")
        offset = 0
        for p in self.values():
            p.data = vector[offset:offset + p.data.size].reshape(p.data.shape).copy()
            offset += p.data.size

    def copy(self):
        out = ParamStore()
        for name, p in self.items():
            out.add(name, p.data.copy())
        return out

    def state(self):
        return {name: p.data.copy() for name, p in self.items()}


def save_params(path, params, meta=None):
    """Write a versioned JSON checkpoint: name -> shape + row-major values."""
    doc = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(p.data.shape), "values": p.data.ravel().tolist()}
            for name, p in params.items()
        },
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(ParamStore, meta)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a parameter checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: missing checkpoint magic header")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    store = ParamStore()
    for name, entry in doc["params"].items():
        values = np.asarray(entry["values"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if values.size != int(np.prod(shape)):
            raise ShapeError(f"{path}: parameter {name!r} has {values.size} values for shape {shape}")
        store.add(name, values.reshape(shape))
    return store, doc.get("meta", {})


# ------------------------------------------------------------------ optimizer

@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state, sign=-1):
    """One Adam update; ``sign=-1`` descends the gradient, ``+1`` ascends it."""
    if sign not in (-1, 1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    for name, p in params.items():
        if p.grad is None:
            raise RuntimeError(f"parameter {name!r} has no gradient")
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data + sign * state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# ------------------------------------------------------------------- networks

def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class ConvBackbone:
    """Stack of 3x3 stride-2 conv + SiLU blocks.

    With ``linear_output`` the last block skips its SiLU, so pooled features
    are signed rather than confined to the positive orthant.
    """

    def __init__(self, in_channels, channels, kernel=3, stride=2, linear_output=False):
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.kernel = kernel
        self.stride = stride
        self.linear_output = linear_output

    @property
    def reduction(self):
        return self.stride ** len(self.channels)

    def init(self, params, prefix, rng):
        cin = self.in_channels
        for i, cout in enumerate(self.channels):
            fan_in = self.kernel * self.kernel * cin
            params.add(f"{prefix}.conv{i}.w", he_normal(rng, (self.kernel, self.kernel, cin, cout), fan_in))
            params.add(f"{prefix}.conv{i}.b", np.zeros(cout))
            cin = cout

    def __call__(self, params, prefix, x):
        last = len(self.channels) - 1
        for i in range(len(self.channels)):
            x = conv2d(x, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"], stride=self.stride)
            if i < last or not self.linear_output:
                x = silu(x)
        return x

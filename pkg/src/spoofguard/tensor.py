"""A small dense-tensor library with reverse-mode automatic differentiation.

Only the operations the Raw-Res2Net model needs are provided. Every op builds
a node whose ``_backward`` closure maps the output gradient to one gradient
per parent. Node ids come from a global counter, so a parent always has a
smaller id than its consumer and sorting by id yields a topological order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidInputError, ParseError, ShapeError

_ids = itertools.count()

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grads = {self._id: np.asarray(grad, dtype=DTYPE)}
        for node in graph_nodes(self)[::-1]:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def graph_nodes(root: Tensor) -> list[Tensor]:
    """All nodes reachable from ``root`` that require grad, in topological order."""
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen[node._id] = node
        stack.extend(node._parents)
    return [seen[k] for k in sorted(seen)]


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    parents = tuple(parents)
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.3) -> Tensor:
    mask = x.data >= 0
    scale = np.where(mask, 1.0, slope)
    return _node(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


# --- shape / reduction -------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(y, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    y = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(1, np.asarray(y).size)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _node(y, (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def index(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate in backward."""

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, key, g)
        return (out,)

    return _node(x.data[key], (x,), backward, "index")


def take(x: Tensor, indices) -> Tensor:
    """Select entries of a 1-D tensor (used for per-sample loss selection)."""
    indices = np.asarray(indices, dtype=np.int64)
    if x.ndim != 1:
        raise ShapeError(f"take expects a 1-D tensor, got shape {x.shape}")
    return index(x, indices)


def concat(tensors, axis=0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors, axis=0) -> Tensor:
    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def split(x: Tensor, sizes, axis=1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not sum to dimension {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        key = [slice(None)] * x.ndim
        key[axis] = slice(start, start + s)
        out.append(index(x, tuple(key)))
        start += s
    return out


# --- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w + b for x of shape (batch, in) and w of shape (in, out)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias {b.shape} does not match output width {w.shape[1]}")
    y = x.data @ w.data
    if b is None:
        return _node(y, (x, w), lambda g: (g @ w.data.T, x.data.T @ g), "affine")
    y = y + b.data
    return _node(y, (x, w, b), lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)), "affine")


# --- convolution / pooling ---------------------------------------------------

_CHUNK_ELEMS = 1 << 23  # bound on im2col temporaries (64 MB of doubles)


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (batch, in_ch, time) with (out_ch, in_ch, k)."""
    if x.ndim != 3 or kernels.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D input and kernels, got {x.shape} and {kernels.shape}")
    batch, in_ch, time = x.shape
    out_ch, k_in, k = kernels.shape
    if k_in != in_ch:
        raise ShapeError(f"conv1d: input has {in_ch} channels but kernels expect {k_in}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv1d: stride must be >= 1 and padding >= 0")
    if time + 2 * padding < k:
        raise ShapeError(f"conv1d: padded time {time + 2 * padding} shorter than kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    t_out = (time + 2 * padding - k) // stride + 1
    w = kernels.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :t_out]
    step = max(1, _CHUNK_ELEMS // max(1, batch * in_ch * k))

    y = np.empty((batch, out_ch, t_out))
    for s in range(0, t_out, step):
        e = min(t_out, s + step)
        y[:, :, s:e] = np.einsum("bctk,ock->bot", windows[:, :, s:e], w, optimize=True)

    def backward(g):
        gw = np.zeros_like(w)
        for s in range(0, t_out, step):
            e = min(t_out, s + step)
            gw += np.einsum("bot,bctk->ock", g[:, :, s:e], windows[:, :, s:e], optimize=True)
        gxp = np.zeros_like(xp)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            gxp[:, :, j:j + span:stride] += np.einsum("oc,bot->bct", w[:, :, j], g)
        gx = gxp[:, :, padding:padding + time] if padding else gxp
        return gx, gw

    return _node(y, (x, kernels), backward, "conv1d")


def conv_out_len(time, k, stride=1, padding=0):
    return (time + 2 * padding - k) // stride + 1


def maxpool1d(x: Tensor, window: int = 3) -> Tensor:
    """Non-overlapping max pooling over the last axis; remainder is dropped."""
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d expects (batch, ch, time), got {x.shape}")
    batch, ch, time = x.shape
    if time < window:
        raise ShapeError(f"maxpool1d: time {time} shorter than window {window}")
    t_out = time // window
    blocks = x.data[:, :, :t_out * window].reshape(batch, ch, t_out, window)
    arg = blocks.argmax(axis=3)  # first index on ties
    y = np.take_along_axis(blocks, arg[..., None], axis=3)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=3)
        gx = np.zeros_like(x.data)
        gx[:, :, :t_out * window] = gb.reshape(batch, ch, t_out * window)
        return (gx,)

    return _node(y, (x,), backward, "maxpool1d")


# --- normalisation -----------------------------------------------------------

@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels, momentum=0.1, eps=1e-5):
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel batch norm over (batch, time) for x of shape (batch, ch, time)."""
    if x.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm1d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    eps = state.eps
    g_ = gamma.data[None, :, None]
    if train:
        if x.shape[0] < 2:
            raise InvalidInputError("batchnorm1d in train mode needs batch >= 2")
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        n = x.shape[0] * x.shape[2]
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var * n / max(1, n - 1)
    else:
        mu, var, n = state.running_mean, state.running_var, None
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None]) * inv[None, :, None]
    y = xhat * g_ + beta.data[None, :, None]

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2))
        gb = g.sum(axis=(0, 2))
        gxhat = g * g_
        if train:
            gx = (inv[None, :, None] / n) * (
                n * gxhat
                - gxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2), keepdims=True))
        else:
            gx = gxhat * inv[None, :, None]
        return gx, gg, gb

    return _node(y, (x, gamma, beta), backward, "batchnorm1d")


# --- losses ------------------------------------------------------------------

def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Per-sample cross-entropy, -log softmax(logits)[label]; not reduced."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_xent: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]
                        or not np.issubdtype(labels.dtype, np.integer)):
        raise InvalidInputError(f"labels must be integers in [0, {logits.shape[1]})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.size)
    loss = lse - z[rows, labels]
    probs = np.exp(z - lse[:, None])

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * g[:, None],)

    return _node(loss, (logits,), backward, "softmax_xent")


# --- recurrent ---------------------------------------------------------------

def gru_forward(x: Tensor, params: dict, h0: Tensor | None = None):
    """Run a GRU over x of shape (batch, time, in).

    ``params`` holds ``w_ih`` (in, 3H), ``w_hh`` (H, 3H), ``b_ih`` and ``b_hh``
    (3H,), gate blocks ordered reset, update, candidate. Returns
    ``(outputs (batch, time, H), h_last)``.
    """
    w_ih, w_hh, b_ih, b_hh = params["w_ih"], params["w_hh"], params["b_ih"], params["b_hh"]
    if x.ndim != 3:
        raise ShapeError(f"gru_forward expects (batch, time, in), got {x.shape}")
    batch, time, n_in = x.shape
    hidden = w_hh.shape[0]
    if w_ih.shape != (n_in, 3 * hidden) or w_hh.shape != (hidden, 3 * hidden):
        raise ShapeError(f"GRU weights {w_ih.shape}/{w_hh.shape} inconsistent with input {n_in}, hidden {hidden}")
    if b_ih.shape != (3 * hidden,) or b_hh.shape != (3 * hidden,):
        raise ShapeError("GRU biases must have shape (3*hidden,)")
    h = h0 if h0 is not None else Tensor(np.zeros((batch, hidden)))
    if h.shape != (batch, hidden):
        raise ShapeError(f"h0 shape {h.shape} != {(batch, hidden)}")
    gx_all = reshape(affine(reshape(x, (batch * time, n_in)), w_ih, b_ih), (batch, time, 3 * hidden))
    H = hidden
    outputs = []
    for t in range(time):
        gx = gx_all[:, t, :]
        gh = affine(h, w_hh, b_hh)
        r = sigmoid(gx[:, :H] + gh[:, :H])
        z = sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
        n = tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
        h = n + z * (h - n)
        outputs.append(h)
    return stack(outputs, axis=1), h


def init_gru(rng, n_in, hidden):
    bound = 1.0 / np.sqrt(hidden)
    return {
        "w_ih": rng.uniform(-bound, bound, size=(n_in, 3 * hidden)),
        "w_hh": rng.uniform(-bound, bound, size=(hidden, 3 * hidden)),
        "b_ih": rng.uniform(-bound, bound, size=3 * hidden),
        "b_hh": rng.uniform(-bound, bound, size=3 * hidden),
    }


# --- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidInputError("Adam betas must lie in (0, 1)")


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """Bias-corrected Adam update, applied in place to ``params[name].data``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# --- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def grad_check(f: Callable[[], Tensor], params: dict, tolerance: float = 1e-4, h: float = 1e-5) -> GradCheckReport:
    """Compare backprop against central differences for every parameter entry.

    ``f`` rebuilds the graph from the current ``params`` and returns a scalar.
    """
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar output, got shape {out.shape}")
    out.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in params.items()}
    worst = (0.0, "", (), 0.0, 0.0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - num) / (abs(a) + abs(num) + 1e-12)
            if rel > worst[0] or not worst[1]:
                worst = (rel, name, np.unravel_index(i, p.shape), a, num)
    return GradCheckReport(worst[0], worst[1], tuple(int(j) for j in worst[2]), worst[3], worst[4], tolerance)


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = "SPOOFGUARD-CHECKPOINT v1"


def save_checkpoint(path, arrays: dict, header: dict | None = None):
    """Text header (config lines + tensor manifest) followed by float64 LE buffers."""
    lines = [CHECKPOINT_MAGIC]
    for k, v in (header or {}).items():
        lines.append(f"config {k}={v}")
    for name, arr in arrays.items():
        shape = ",".join(str(d) for d in np.shape(arr))
        lines.append(f"tensor {name} {shape}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    blob = open(path, "rb").read()
    header, arrays, manifest = {}, {}, []
    pos = 0
    lineno = 0
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise ParseError(f"{path}: truncated checkpoint header")
        line = blob[pos:nl].decode("utf-8")
        pos = nl + 1
        lineno += 1
        if lineno == 1:
            if line != CHECKPOINT_MAGIC:
                raise ParseError(f"{path}: not a checkpoint (header {line!r})", 1)
            continue
        if line == "end":
            break
        kind, _, rest = line.partition(" ")
        if kind == "config":
            k, _, v = rest.partition("=")
            header[k] = v
        elif kind == "tensor":
            name, _, shape = rest.rpartition(" ")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            manifest.append((name, dims))
        else:
            raise ParseError(f"{path}: unknown header entry {line!r}", lineno)
    for name, dims in manifest:
        count = int(np.prod(dims)) if dims else 1
        if pos + 8 * count > len(blob):
            raise ParseError(f"{path}: truncated data for {name}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
        pos += 8 * count
    return arrays, header

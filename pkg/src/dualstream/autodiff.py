"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every neural component in the codec is built from the primitives here. The
design is a plain tape: each op returns a `Tensor` holding its forward value,
links to its parents and a closure that scatters the incoming gradient back
to them. `backward()` walks the recorded graph once, in reverse topological
order. Ops called on tensors that do not require gradients skip recording
entirely, so inference pays nothing for the machinery.

All math is double precision; gradients are validated against central finite
differences by `grad_check`.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, DimensionError, NumericError, TruncatedStreamError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class Tensor:
    """A node of the recorded computation graph.

    `data` is treated as immutable once the tensor participates in a graph;
    ops never write into their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, op="detach")

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data, op, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, op, tuple(parents) if req else (), backward if req else None)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _toposort(root: Tensor) -> list:
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor, check_finite: bool = False) -> None:
    """Reverse-mode sweep from a scalar loss; visits each node exactly once."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.grad is None or node._backward is None:
            continue
        if check_finite and not np.all(np.isfinite(node.grad)):
            raise NumericError(f"non-finite gradient at node '{node.op}'")
        node._backward(node.grad)
    if check_finite:
        for node in order:
            if node.grad is not None and not np.all(np.isfinite(node.grad)):
                raise NumericError(f"non-finite gradient at node '{node.op}'")


# ---------------------------------------------------------------------------
# elementwise / shape ops
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, "mul", (a, b), bw)


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity; blocks the gradient (straight-through building block)."""
    return Tensor(a.data, requires_grad=False, op="stop_gradient")


def straight_through(y: Tensor, q) -> Tensor:
    """Forward the quantized value `q` exactly; route the gradient to `y` as identity."""
    y = _as_tensor(y)
    q = _as_tensor(q)
    if y.data.shape != q.data.shape:
        raise DimensionError(f"straight_through shapes differ: {y.data.shape} vs {q.data.shape}")

    def bw(g):
        _accum(y, g)

    return _make(q.data, "straight_through", (y,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), "reshape", (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), "transpose", (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(a.data.sum(), "sum", (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size

    def bw(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _make(a.data.mean(), "mean", (a,), bw)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def bw(g):
        _accum(a, g * (a.data > 0.0))

    return _make(out, "relu", (a,), bw)


def gelu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        _accum(a, g * (phi + a.data * pdf))

    return _make(a.data * phi, "gelu", (a,), bw)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, "tanh", (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, "sigmoid", (a,), bw)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out)

    return _make(out, "exp", (a,), bw)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), "log", (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for 2-D operands, batched ND @ ND with equal leading dims,
    or ND @ 2-D (shared right operand, e.g. a weight matrix)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    if b.data.ndim == 2:
        def bw(g):
            _accum(a, g @ b.data.T)
            ga = a.data.reshape(-1, a.data.shape[-1])
            _accum(b, ga.T @ g.reshape(-1, g.shape[-1]))
    else:
        if a.data.shape[:-2] != b.data.shape[:-2]:
            raise DimensionError(f"matmul batch dims differ: {a.data.shape} @ {b.data.shape}")

        def bw(g):
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, "matmul", (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with w of shape (in, out)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (g - gm - xhat * gxm))

    return _make(xhat, "layer_norm", (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _make(out, "softmax", (x,), bw)


def cross_entropy_from_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood (natural log) of integer targets under
    a softmax over the last axis of (N, V) logits."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise DimensionError(
            f"cross_entropy expects (N,V) logits and (N,) targets, got {logits.data.shape} and {targets.shape}")
    n = logits.data.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    probs = e / se
    nll = np.log(se[:, 0]) - z[np.arange(n), targets]

    def bw(g):
        d = probs.copy()
        d[np.arange(n), targets] -= 1.0
        _accum(logits, d * (g / n))

    return _make(nll.mean(), "cross_entropy", (logits,), bw)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"l1_loss shapes differ: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        s = np.sign(diff) * (g / n)
        _accum(a, s)
        _accum(b, -s)

    return _make(np.abs(diff).mean(), "l1_loss", (a, b), bw)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mse_loss shapes differ: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        s = diff * (2.0 * g / n)
        _accum(a, s)
        _accum(b, -s)

    return _make((diff * diff).mean(), "mse_loss", (a, b), bw)


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------

def _conv_out_hw(h, w, kh, kw, stride, pad):
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def _colstack(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(B,C,H,W) -> (kh*kw, B*OH*OW, C) patch stack.

    One contiguous slab per kernel tap keeps both the gather writes and the
    per-tap GEMMs on contiguous memory; materializing the interleaved im2col
    matrix instead costs several times more in cache misses.
    """
    b, c, h, w = x.shape
    if pad:
        xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
        xp[:, :, pad:pad + h, pad:pad + w] = x
        x = xp
    hh, ww = x.shape[2], x.shape[3]
    oh = (hh - kh) // stride + 1
    ow = (ww - kw) // stride + 1
    xcl = np.ascontiguousarray(x.transpose(0, 2, 3, 1))  # (B,H,W,C)
    if kh == 1 and kw == 1 and stride == 1:
        return xcl.reshape(1, b * oh * ow, c)
    col = np.empty((kh * kw, b, oh, ow, c))
    for ki in range(kh):
        for kj in range(kw):
            col[ki * kw + kj] = xcl[:, ki:ki + stride * (oh - 1) + 1:stride,
                                    kj:kj + stride * (ow - 1) + 1:stride, :]
    return col.reshape(kh * kw, b * oh * ow, c)


def _kernel_taps(k: np.ndarray) -> np.ndarray:
    """(OC,C,KH,KW) -> (kh*kw, C, OC) matching the patch-stack layout."""
    oc, c, kh, kw = k.shape
    return np.ascontiguousarray(k.transpose(2, 3, 1, 0)).reshape(kh * kw, c, oc)


def _conv_forward(x: np.ndarray, k: np.ndarray, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    oc, ic, kh, kw = k.shape
    oh, ow = _conv_out_hw(h, w, kh, kw, stride, pad)
    col = _colstack(x, kh, kw, stride, pad)
    taps = _kernel_taps(k)
    out = col[0] @ taps[0]
    for t in range(1, kh * kw):
        out += col[t] @ taps[t]
    return np.ascontiguousarray(out.reshape(b, oh, ow, oc).transpose(0, 3, 1, 2))


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation: x (B,C,H,W) with kernel k (OC,C,KH,KW)."""
    x, k = _as_tensor(x), _as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise DimensionError(f"conv2d needs rank-4 input and kernel, got {x.data.shape} and {k.data.shape}")
    if x.data.shape[1] != k.data.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.data.shape} vs kernel {k.data.shape}")
    if stride < 1:
        raise ConfigurationError(f"conv2d stride must be >= 1, got {stride}")
    b, c, h, w = x.data.shape
    oc, _, kh, kw = k.data.shape
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(f"conv2d kernel {k.data.shape} larger than padded input {x.data.shape}")
    out = _conv_forward(x.data, k.data, stride, pad)

    def bw(g):
        oh, ow = g.shape[2], g.shape[3]
        if k.requires_grad:
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, oc)
            col = _colstack(x.data, kh, kw, stride, pad)  # recomputed: trades time for memory
            dk = np.empty((kh * kw, c, oc))
            for t in range(kh * kw):
                dk[t] = col[t].T @ gmat
            dk = dk.reshape(kh, kw, c, oc).transpose(3, 2, 0, 1)
            _accum(k, np.ascontiguousarray(dk))
        if x.requires_grad:
            # dx is a stride-1 correlation of the dilated upstream gradient
            # with the spatially flipped, channel-transposed kernel.
            if stride > 1:
                gd = np.zeros((b, oc, (oh - 1) * stride + 1, (ow - 1) * stride + 1))
                gd[:, :, ::stride, ::stride] = g
            else:
                gd = g
            kt = np.ascontiguousarray(k.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            dx = _conv_forward(gp, kt, 1, 0)[:, :, pad:pad + h, pad:pad + w]
            dh, dw = dx.shape[2], dx.shape[3]
            if dh != h or dw != w:  # input columns the strided window never reached
                dx = np.pad(dx, ((0, 0), (0, 0), (0, h - dh), (0, w - dw)))
            _accum(x, dx)

    return _make(out, "conv2d", (x, k), bw)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"upsample_nearest needs rank-4 input, got {x.data.shape}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        b, c, oh, ow = g.shape
        gr = g.reshape(b, c, oh // factor, factor, ow // factor, factor)
        _accum(x, gr.sum(axis=(3, 5)))

    return _make(out, "upsample_nearest", (x,), bw)


def upsample_conv(x: Tensor, k: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor x`factor` upsample followed by a size-preserving conv."""
    if factor != 2:
        raise ConfigurationError(f"upsample_conv supports factor 2 only, got {factor}")
    k = _as_tensor(k)
    kh = k.data.shape[2]
    if kh % 2 == 0 or kh != k.data.shape[3]:
        raise ConfigurationError(f"upsample_conv needs an odd square kernel, got {k.data.shape}")
    return conv2d(upsample_nearest(x, factor), k, stride=1, pad=kh // 2)


def nearest_resize(x: Tensor, out_hw) -> Tensor:
    """Nearest-neighbor resize of the spatial axes of a (B,C,H,W) tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"nearest_resize needs rank-4 input, got {x.data.shape}")
    th, tw = out_hw
    b, c, h, w = x.data.shape
    ri = (np.arange(th) * h) // th
    ci = (np.arange(tw) * w) // tw
    out = x.data[:, :, ri][:, :, :, ci]

    def bw(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), slice(None), ri[:, None], ci[None, :]), g)
        _accum(x, dx)

    return _make(out, "nearest_resize", (x,), bw)


# ---------------------------------------------------------------------------
# indexed access
# ---------------------------------------------------------------------------

def gather_rows(table: Tensor, idx) -> Tensor:
    """Embedding lookup: rows of a (V, W) table selected by integer idx (N,)."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _make(table.data[idx], "gather_rows", (table,), bw)


def row_scatter(base: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy of `base` (N, W) with rows at `idx` replaced by `rows` (K, W)."""
    base, rows = _as_tensor(base), _as_tensor(rows)
    idx = np.asarray(idx, dtype=np.int64)
    out = base.data.copy()
    out[idx] = rows.data

    def bw(g):
        gb = g.copy()
        gb[idx] = 0.0
        _accum(base, gb)
        _accum(rows, g[idx])

    return _make(out, "row_scatter", (base, rows), bw)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention on (batch, tokens, width)."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    for name, t in (("q", q), ("k", k), ("v", v)):
        if t.data.ndim != 3:
            raise DimensionError(f"attention {name} must be rank 3, got {t.data.shape}")
    bq, tq, width = q.data.shape
    bk, tk, wk = k.data.shape
    if k.data.shape != v.data.shape or bq != bk or wk != width:
        raise DimensionError(f"attention shape mismatch: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}")
    if width % heads != 0:
        raise ConfigurationError(f"width {width} not divisible by heads {heads}")
    hw = width // heads

    def split(t, tn):
        return transpose(reshape(t, (bq, tn, heads, hw)), (0, 2, 1, 3))  # (B,h,T,hw)

    qh, kh_, vh = split(q, tq), split(k, tk), split(v, tk)
    scores = mul(matmul(qh, transpose(kh_, (0, 1, 3, 2))), 1.0 / np.sqrt(hw))
    attn = softmax(scores, axis=-1)
    out = matmul(attn, vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (bq, tq, width))


# ---------------------------------------------------------------------------
# parameters, optimizer, gradient checking
# ---------------------------------------------------------------------------

class Graph:
    """Registry of named trainable tensors plus their gradient buffers.

    One Graph backs one model; the recorded op nodes hang off the loss tensor
    and are swept by `backward`. Training code mutates parameters only through
    `Adam.step`, so the single-writer rule is easy to audit.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def parameter(self, name: str, init: np.ndarray) -> Tensor:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(init, dtype=np.float64), requires_grad=True, op=f"param:{name}")
        self.params[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        for name, p in self.params.items():
            p.requires_grad = bool(predicate(name))

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.params.items() if p.requires_grad]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            if n not in self.params:
                raise ConfigurationError(f"unknown parameter {n!r} in checkpoint")
            if self.params[n].data.shape != arr.shape:
                raise DimensionError(
                    f"checkpoint shape {arr.shape} != parameter shape {self.params[n].data.shape} for {n!r}")
            self.params[n].data = np.array(arr, dtype=np.float64)

    def digest(self, prefix: str = "") -> str:
        """SHA-256 over the raw bytes of all parameters under `prefix`."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def check_finite(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.data)):
                raise NumericError(f"parameter {name!r} became non-finite")


class Adam:
    """Adam with bias correction; beta=(0.9, 0.999), eps=1e-8 by default."""

    def __init__(self, graph: Graph, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 select: Callable[[str], bool] | None = None):
        self.graph = graph
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.select = select
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.graph.params.items():
            if self.select is not None and not self.select(name):
                continue
            if not p.requires_grad or p.grad is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * (p.grad * p.grad)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def grad_check(build: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Compare recorded gradients against central finite differences.

    `build(*inputs)` must return a scalar loss and be re-runnable. Returns
    max over all input components of |analytic - fd| / max(1, |fd|).
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ConfigurationError("grad_check requires double-precision inputs")
        t.grad = None
        t.requires_grad = True
    loss = build(*inputs)
    backward(loss, check_finite=True)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = build(*inputs).item()
            flat[i] = orig - eps
            dn = build(*inputs).item()
            flat[i] = orig
            fd = (up - dn) / (2.0 * eps)
            worst = max(worst, abs(aflat[i] - fd) / max(1.0, abs(fd)))
    return worst


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
#
# Little-endian binary, per-parameter records:
#   magic "DSWT", version u8,
#   u32 parameter count, then for each (sorted by name):
#     u16 name length, name bytes (utf-8), u8 rank, u32 x rank dims,
#     float64 raw data.

CHECKPOINT_MAGIC = b"DSWT"
CHECKPOINT_VERSION = 1


def save_params(path, params: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<BI", CHECKPOINT_VERSION, len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        blob += arr.tobytes(order="C") if arr.dtype.byteorder != ">" else arr.byteswap().tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise TruncatedStreamError(f"checkpoint truncated at byte {off}")
        out = blob[off:off + n]
        off += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise ConfigurationError("not a parameter checkpoint (bad magic)")
    version, count = struct.unpack("<BI", take(5))
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).copy()
        params[name] = arr
    if off != len(blob):
        raise ConfigurationError("trailing bytes after checkpoint payload")
    return params

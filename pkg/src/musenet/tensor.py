"""Dense-tensor numerical core with reverse-mode automatic differentiation.

Covers exactly the operations the retrieval model needs: convolution,
linear, relu, pooling, nearest upsampling, dropout, softmax cross-entropy,
plus the elementwise/structural helpers the normalization layers are
composed from. Training runs in float32; gradient checks run in float64
(finite differences are unreliable in single precision).
"""

from __future__ import annotations

import contextlib
from enum import Enum

import numpy as np

from .errors import ConfigurationError, InputError, NumericalError, UsageError


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


class LrGroup(Enum):
    BASE = "base"
    BOOSTED = "boosted"


# When False (inside no_grad()), ops do not record the graph.
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. for evaluation forward passes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def blas_single_thread():
    """Limit BLAS pools to one thread: the model's GEMMs are small enough
    that fan-out overhead dominates any parallel gain."""
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1, user_api="blas")
    except ImportError:
        return contextlib.nullcontext()


class Tensor:
    """A dense array plus the autodiff bookkeeping to reach it.

    Tensors are treated as immutable once produced by an op; only the
    optimizer mutates Parameter data in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def backward(self):
        backward(self)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter:
    """Trainable value with SGD momentum buffer and learning-rate group."""

    __slots__ = ("value", "momentum", "lr_group", "name")

    def __init__(self, data, lr_group: LrGroup = LrGroup.BASE, name: str = ""):
        self.value = Tensor(data, requires_grad=True)
        self.value.grad = np.zeros_like(self.value.data)
        self.momentum = np.zeros_like(self.value.data)
        self.lr_group = lr_group
        self.name = name

    @property
    def data(self):
        return self.value.data

    @property
    def grad(self):
        return self.value.grad

    def __repr__(self):
        return f"Parameter({self.name or '?'}, shape={self.value.data.shape}, group={self.lr_group.value})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Parameter):
        return x.value
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # sum() propagates NaN/Inf; one reduction is far cheaper than isfinite().all()
    if not np.isfinite(arr.sum()):
        raise NumericalError(f"{op} produced non-finite values")


def _node(data: np.ndarray, op: str, parents, grad_fn) -> Tensor:
    """Wrap an op result, recording parents/grad_fn when grads are needed."""
    _check_finite(data, op)
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Extract conv patches of a padded NCHW input as a (C*kh*kw, N*ho*wo) matrix."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, n, ho, wo),
        strides=(sc, sh, sw, sn, stride * sh, stride * sw),
        writeable=False,
    )
    return np.ascontiguousarray(patches).reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, n: int, c: int, hp: int, wp: int,
            kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add a column matrix back onto the padded input grid."""
    gx = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols6[:, i, j].transpose(1, 0, 2, 3))
    return gx


def _conv2d_1x1(x, kernel, bias, stride, n, c, h, w, k):
    """Pointwise fast path: a batched channel mixing, no patch extraction."""
    xv = x.data if stride == 1 else np.ascontiguousarray(x.data[:, :, ::stride, ::stride])
    ho, wo = xv.shape[2], xv.shape[3]
    w2 = kernel.data.reshape(k, c)
    out = np.matmul(w2, xv.reshape(n, c, ho * wo)).reshape(n, k, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, k, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def grad_fn(go):
        go3 = go.reshape(n, k, ho * wo)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = np.matmul(go3, xv.reshape(n, c, ho * wo).transpose(0, 2, 1)
                           ).sum(axis=0).reshape(kernel.data.shape)
        if x.requires_grad:
            gxs = np.matmul(w2.T, go3).reshape(n, c, ho, wo)
            if stride == 1:
                gx = gxs
            else:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = gxs
        if bias is not None and bias.requires_grad:
            gb = go.sum(axis=(0, 2, 3))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _node(out, "conv2d", parents, grad_fn)


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an N×C×H×W input with a K×C×kh×kw kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    bias = _as_tensor(bias) if bias is not None else None
    xv, kv = x.data, kernel.data
    if xv.ndim != 4 or kv.ndim != 4:
        raise ConfigurationError(
            f"conv2d expects 4-D input and kernel, got {xv.shape} and {kv.shape}")
    n, c, h, w = xv.shape
    k, ck, kh, kw = kv.shape
    if ck != c:
        raise ConfigurationError(
            f"conv2d channel mismatch: input has {c}, kernel expects {ck}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ConfigurationError(
            f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None and bias.data.shape != (k,):
        raise ConfigurationError(
            f"conv2d bias shape {bias.data.shape} != ({k},)")
    if kh == 1 and kw == 1 and padding == 0:
        return _conv2d_1x1(x, kernel, bias, stride, n, c, h, w, k)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = kv.reshape(k, c * kh * kw)
    out = (w2 @ cols).reshape(k, n, ho * wo).transpose(1, 0, 2).reshape(n, k, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, k, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def grad_fn(go):
        go2 = np.ascontiguousarray(go.transpose(1, 0, 2, 3)).reshape(k, n * ho * wo)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (go2 @ cols.T).reshape(kv.shape)
        if x.requires_grad:
            gcols = w2.T @ go2
            gxp = _col2im(gcols, n, c, hp, wp, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = go.sum(axis=(0, 2, 3))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _node(out, "conv2d", parents, grad_fn)


def linear(x, weight, bias) -> Tensor:
    """Affine map: (N×D) @ (D×M) + (M,)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    xv, wv, bv = x.data, weight.data, bias.data
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ConfigurationError(
            f"linear dim mismatch: input {xv.shape}, weight {wv.shape}")
    if bv.shape != (wv.shape[1],):
        raise ConfigurationError(f"linear bias shape {bv.shape} != ({wv.shape[1]},)")
    out = xv @ wv + bv

    def grad_fn(go):
        gx = go @ wv.T if x.requires_grad else None
        gw = xv.T @ go if weight.requires_grad else None
        gb = go.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _node(out, "linear", (x, weight, bias), grad_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0  # subgradient 0 at exactly 0
    out = np.maximum(x.data, x.data.dtype.type(0))

    def grad_fn(go):
        return (go * mask,)

    return _node(out, "relu", (x,), grad_fn)


def global_avg_pool(x) -> Tensor:
    """Spatial mean of an N×C×H×W tensor, giving N×C."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ConfigurationError(f"global_avg_pool expects 4-D input, got {x.data.shape}")
    _, _, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def grad_fn(go):
        g = np.broadcast_to(go[:, :, None, None] / (h * w), x.data.shape)
        return (g,)

    return _node(out, "global_avg_pool", (x,), grad_fn)


def max_pool(x, window: int, stride: int) -> Tensor:
    """Windowed spatial maxima; gradient routes to the first argmax per window."""
    x = _as_tensor(x)
    xv = x.data
    if xv.ndim != 4:
        raise ConfigurationError(f"max_pool expects 4-D input, got {xv.shape}")
    n, c, h, w = xv.shape
    if window > h or window > w:
        raise ConfigurationError(f"max_pool window {window} exceeds input {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    sn, sc, sh, sw = xv.strides
    patches = np.lib.stride_tricks.as_strided(
        xv,
        shape=(n, c, ho, wo, window, window),
        strides=(sn, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    )
    flat = np.ascontiguousarray(patches).reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def grad_fn(go):
        gx = np.zeros_like(xv)
        ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=True)
        iy = hi * stride + arg // window
        ix = wi * stride + arg % window
        np.add.at(gx, (ni, ci, iy, ix), go)
        return (gx,)

    return _node(out, "max_pool", (x,), grad_fn)


def upsample_nearest(x, factor: int) -> Tensor:
    """Replicate each spatial value into a factor×factor block."""
    x = _as_tensor(x)
    if factor < 1 or int(factor) != factor:
        raise ConfigurationError(f"upsample factor must be a positive integer, got {factor}")
    if x.data.ndim != 4:
        raise ConfigurationError(f"upsample_nearest expects 4-D input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def grad_fn(go):
        g = go.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        return (g,)

    return _node(out, "upsample_nearest", (x,), grad_fn)


def dropout(x, rate: float, mode: Mode, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: identity in Eval, zero/rescale in Train."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode is Mode.EVAL or rate == 0.0:
        def grad_fn(go):
            return (go,)
        return _node(x.data, "dropout", (x,), grad_fn)

    keep = rng.random(x.data.shape) >= rate
    scale_mask = keep.astype(x.data.dtype) / x.data.dtype.type(1.0 - rate)
    out = x.data * scale_mask

    def grad_fn(go):
        return (go * scale_mask,)

    return _node(out, "dropout", (x,), grad_fn)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax at the label index, max-stabilized."""
    logits = _as_tensor(logits)
    lv = logits.data
    if lv.ndim != 2:
        raise ConfigurationError(f"softmax_cross_entropy expects 2-D logits, got {lv.shape}")
    n, c = lv.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InputError(f"labels length {labels.shape} does not match batch {n}")
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        i = int(np.argmax(bad))
        raise InputError(f"label {labels[i]} out of range [0,{c}) at sample {i}")

    z = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=lv.dtype)

    def grad_fn(go):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (go / n),)

    return _node(loss, "softmax_cross_entropy", (logits,), grad_fn)


# ---------------------------------------------------------------------------
# elementwise / structural helpers used to compose the normalization layers


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ConfigurationError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def grad_fn(go):
        return (go if a.requires_grad else None, go if b.requires_grad else None)

    return _node(a.data + b.data, "add", (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ConfigurationError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")

    def grad_fn(go):
        ga = go * b.data if a.requires_grad else None
        gb = go * a.data if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, "mul", (a, b), grad_fn)


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    cv = x.data.dtype.type(c)

    def grad_fn(go):
        return (go * cv,)

    return _node(x.data * cv, "scale", (x,), grad_fn)


def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def grad_fn(go):
        return (np.broadcast_to(go, x.data.shape),)

    return _node(out, "sum", (x,), grad_fn)


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4 or not 0 <= start < stop <= x.data.shape[1]:
        raise ConfigurationError(
            f"slice_channels [{start}:{stop}] invalid for shape {x.data.shape}")
    out = x.data[:, start:stop].copy()

    def grad_fn(go):
        g = np.zeros_like(x.data)
        g[:, start:stop] = go
        return (g,)

    return _node(out, "slice_channels", (x,), grad_fn)


def concat_channels(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 4 or a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ConfigurationError(
            f"concat_channels shape mismatch: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]

    def grad_fn(go):
        ga = go[:, :ca] if a.requires_grad else None
        gb = go[:, ca:] if b.requires_grad else None
        return ga, gb

    return _node(np.concatenate([a.data, b.data], axis=1), "concat_channels", (a, b), grad_fn)


# ---------------------------------------------------------------------------
# reverse pass and optimizer


def _toposort(root: Tensor) -> list:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every reachable requires_grad tensor.

    Repeated calls without zeroing add up, per the accumulation contract.
    """
    if not isinstance(loss, Tensor):
        loss = _as_tensor(loss)
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    order = _toposort(loss)
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
        node.grad += g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = local.get(id(parent))
            local[id(parent)] = pg if prev is None else prev + pg


def sgd_step(params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """SGD with momentum and decoupled-from-nothing classic L2 weight decay.

    g <- grad + wd*value; buf <- m*buf + g; value <- value - lr*buf; grads zeroed.
    """
    for p in params:
        g = p.value.grad
        _check_finite(g, f"gradient of {p.name or 'parameter'}")
        if weight_decay:
            g = g + weight_decay * p.value.data
        p.momentum *= momentum
        p.momentum += g
        p.value.data -= lr * p.momentum
        p.value.grad[...] = 0.0

"""Dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy float buffers (float32 for training, float64
for oracle-mode gradient checks).  Operations executed while a Tape is
active record backward closures in forward execution order; ``backward``
replays them in exact reverse and accumulates gradients on every tensor
that requires them.  Convolution is expressed as pad -> im2col -> matmul
so it shares the verified matmul gradient path.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ContractError, DimensionError, NumericError, StateError

DEFAULT_DTYPE = np.float32

_ACTIVE_TAPE: "Tape | None" = None

# large negative finite value used for attention masking; exp() underflows
# to exactly 0 after max-subtraction, avoiding inf-arithmetic edge cases
MASK_VALUE = -1e9


class Tensor:
    """A dense n-dimensional array participating in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are promoted to constants
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False)


class Tape:
    """Ordered record of operations; backward replays it in exact reverse."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise StateError("a tape is already recording; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        backward(loss)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def _record(out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._tape = tape
        tape._records.append((out, parents, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate gradients of every requiring tensor reachable from ``loss``.

    The tape that recorded ``loss`` is consumed: a second backward through
    it raises.
    """
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not recorded on a tape (no gradient graph)")
    if tape._consumed:
        raise ContractError("tape already consumed by a previous backward()")
    if loss.size != 1:
        raise ContractError(f"backward() requires a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, parents, backward_fn in reversed(tape._records):
        if out.grad is None:
            continue
        grads = backward_fn(out.grad)
        for parent, g in zip(parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
            else:
                parent.grad += g
    tape._records.clear()
    tape._consumed = True


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out = Tensor(a.data ** p)

    def bwd(g):
        return (g * p * a.data ** (p - 1),)

    return _record(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))
    return _record(out, (a,), lambda g: (g * 0.5 / out.data,))


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    return _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU in the tanh approximation (the variant recorded in configs)."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * grad,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tensor_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        if not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _record(out, (a,), bwd)


def tensor_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=False),)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = Tensor(a.data.transpose(axes))

    def bwd(g):
        if axes is None:
            return (g.transpose(),)
        inverse = np.argsort(axes)
        return (g.transpose(inverse),)

    return _record(out, (a,), bwd)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(tensors), bwd)


def getitem(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), bwd)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Pick one row per batch element: a[B,T,D], rows[B] -> [B,D]."""
    rows = np.asarray(rows)
    batch = np.arange(a.shape[0])
    out = Tensor(a.data[batch, rows])

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[batch, rows] = g
        return (ga,)

    return _record(out, (a,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup with scatter-add backward: table[V,D], ids[...] -> [...,D]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(
            f"token id out of range: max id {int(ids.max())} vs table rows {table.shape[0]}"
        )
    out = Tensor(table.data[ids])

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(out, (table,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# normalizations and softmax
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Row-stable softmax over the last axis."""
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine extent mismatch: x last axis {d}, gamma {gamma.shape}, beta {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def bwd(g):
        gbeta = g.reshape(-1, d).sum(axis=0)
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bwd)


class BatchNormState:
    """Running statistics buffer for one batch-norm layer."""

    __slots__ = ("running_mean", "running_var", "count")

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.count = 0

    @property
    def populated(self) -> bool:
        return self.count > 0


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of [B,C,H,W] over the (B,H,W) axes."""
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects [B,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm channel mismatch: x has {c} channels, gamma {gamma.shape}")
    gview = gamma.data.reshape(1, c, 1, 1)
    bview = beta.data.reshape(1, c, 1, 1)
    if training:
        axes = (0, 2, 3)
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        n = x.data.size // c
        state.running_mean[:] = (1 - momentum) * state.running_mean + momentum * mu.reshape(-1)
        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        state.running_var[:] = (1 - momentum) * state.running_var + momentum * unbiased
        state.count += 1
        out = Tensor(gview * xhat + bview)

        def bwd(g):
            gbeta = g.sum(axis=axes)
            ggamma = (g * xhat).sum(axis=axes)
            gx_hat = g * gview
            gx = inv * (
                gx_hat
                - gx_hat.mean(axis=axes, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True)
            )
            return gx, ggamma, gbeta

        return _record(out, (x, gamma, beta), bwd)

    if not state.populated:
        raise StateError("batch_norm eval mode requires populated running statistics")
    mu = state.running_mean.reshape(1, c, 1, 1)
    inv = 1.0 / np.sqrt(state.running_var.reshape(1, c, 1, 1) + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gview * xhat + bview)

    def bwd_eval(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = g * gview * inv
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bwd_eval)


# ---------------------------------------------------------------------------
# convolution via pad -> im2col -> matmul
# ---------------------------------------------------------------------------

def pad2d(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    widths = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    out = Tensor(np.pad(x.data, widths))

    def bwd(g):
        return (g[:, :, padding:-padding, padding:-padding],)

    return _record(out, (x,), bwd)


def im2col(x: Tensor, kh: int, kw: int, stride: int) -> Tensor:
    """Extract sliding kernel windows: [B,C,H,W] -> [B,C,kh*kw,L].

    L enumerates output positions row-major; the input must already be
    padded.
    """
    b, c, h, w = x.shape
    if kh > h or kw > w:
        raise DimensionError(f"kernel ({kh},{kw}) larger than padded input ({h},{w})")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [B,C,oh,ow,kh,kw]
    cols = windows.reshape(b, c, oh * ow, kh * kw).transpose(0, 1, 3, 2)
    out = Tensor(np.ascontiguousarray(cols))

    def bwd(g):
        gx = np.zeros_like(x.data)
        g = g.transpose(0, 1, 3, 2).reshape(b, c, oh, ow, kh, kw)
        for ki in range(kh):
            for kj in range(kw):
                gx[:, :, ki : ki + oh * stride : stride, kj : kj + ow * stride : stride] += g[
                    :, :, :, :, ki, kj
                ]
        return (gx,)

    return _record(out, (x,), bwd)


def conv_output_size(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-d convolution: x[B,C,H,W], weight[O,C/g,kh,kw] -> [B,O,H',W'].

    groups == C gives a depthwise convolution.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d tensors, got x {x.shape}, weight {weight.shape}")
    b, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups != 0 or o % groups != 0:
        raise ConfigError(f"channels not divisible by groups: C={c}, O={o}, groups={groups}")
    if cg != c // groups:
        raise DimensionError(
            f"weight expects {cg} channels per group but input provides {c // groups}"
        )
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(
            f"kernel ({kh},{kw}) does not fit padded input ({h + 2 * padding},{w + 2 * padding})"
        )
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)

    cols = im2col(pad2d(x, padding), kh, kw, stride)  # [B,C,K,L]
    cols = reshape(cols, (b, groups, (c // groups) * kh * kw, oh * ow))
    wmat = reshape(weight, (groups, o // groups, (c // groups) * kh * kw))
    out = matmul(wmat, cols)  # [B,g,O/g,L]
    out = reshape(out, (b, o, oh, ow))
    if bias is not None:
        out = add(out, reshape(bias, (1, o, 1, 1)))
    return out


def avg_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Mean over sliding windows; built from im2col so the gradient is shared."""
    b, c, h, w = x.shape
    oh = conv_output_size(h, kernel, stride, padding)
    ow = conv_output_size(w, kernel, stride, padding)
    cols = im2col(pad2d(x, padding), kernel, kernel, stride)
    pooled = tensor_mean(cols, axis=2)
    return reshape(pooled, (b, c, oh, ow))


# ---------------------------------------------------------------------------
# convenience composites
# ---------------------------------------------------------------------------

def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = sqrt(tensor_sum(mul(x, x), axis=axis, keepdims=True))
    return div(x, norm)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

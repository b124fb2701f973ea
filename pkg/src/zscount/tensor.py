"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` over numpy arrays and a ``backward`` returning one gradient per
input.  Calling ``Function.apply`` records the operation on the output
tensor; :func:`backward` replays the recorded graph in reverse topological
order.

Broadcasting is deliberately narrow: the only implicit broadcast is adding a
bias whose shape equals the trailing dimensions of the other operand.  Any
other shape mix must go through :meth:`Tensor.broadcast_to`.
"""

from __future__ import annotations

import contextlib
from typing import Any, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation is called outside its documented domain."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Function:
    """Base class for differentiable operations."""

    name = "function"

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=track, _ctx=fn if track else None)


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation.

    ``data`` is treated as immutable once created; only ``grad`` changes
    after construction (the gradient-check harness is the one exception and
    restores whatever it perturbs).
    """

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, _ctx: Function | None = None):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data.astype(DTYPE, copy=False)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx = _ctx

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return Add.apply(self, other)
        return AddScalar.apply(self, value=float(other))

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return Sub.apply(self, other)
        return AddScalar.apply(self, value=-float(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return AddScalar.apply(Neg.apply(self), value=float(other))

    def __mul__(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return Mul.apply(self, other)
        return MulScalar.apply(self, value=float(other))

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        if isinstance(other, Tensor):
            return Div.apply(self, other)
        return MulScalar.apply(self, value=1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __pow__(self, exponent: float) -> "Tensor":
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return MatMul.apply(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return GetItem.apply(self, index=index)

    # -- methods ----------------------------------------------------------
    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    def broadcast_to(self, shape: Sequence[int]) -> "Tensor":
        return BroadcastTo.apply(self, shape=tuple(shape))

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)


def tensor(data: Any, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def parameter(data: Any) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def _shape_str(*shapes: tuple[int, ...]) -> str:
    return " and ".join(str(tuple(s)) for s in shapes)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _bias_compatible(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


class Add(Function):
    name = "add"

    def forward(self, a, b):
        if a.shape != b.shape and not (_bias_compatible(a.shape, b.shape) or _bias_compatible(b.shape, a.shape)):
            raise ShapeError(f"add: incompatible shapes {_shape_str(a.shape, b.shape)}")
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        sa, sb = self.shapes
        return _reduce_to(grad, sa), _reduce_to(grad, sb)


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        if a.shape != b.shape and not (_bias_compatible(a.shape, b.shape) or _bias_compatible(b.shape, a.shape)):
            raise ShapeError(f"sub: incompatible shapes {_shape_str(a.shape, b.shape)}")
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        sa, sb = self.shapes
        return _reduce_to(grad, sa), -_reduce_to(grad, sb)


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes must match, got {_shape_str(a.shape, b.shape)}")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    name = "div"

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"div: shapes must match, got {_shape_str(a.shape, b.shape)}")
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class AddScalar(Function):
    name = "add_scalar"

    def forward(self, a, value):
        return a + value

    def backward(self, grad):
        return (grad,)


class MulScalar(Function):
    name = "mul_scalar"

    def forward(self, a, value):
        self.value = value
        return a * value

    def backward(self, grad):
        return (grad * self.value,)


class Pow(Function):
    name = "pow"

    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return a**exponent

    def backward(self, grad):
        return (grad * self.exponent * self.a ** (self.exponent - 1.0),)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise ContractError("log: input must be strictly positive")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, a):
        if np.any(a < 0):
            raise ContractError("sqrt: input must be nonnegative")
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad / (2.0 * self.out),)


class GELU(Function):
    """tanh approximation of the Gaussian error linear unit."""

    name = "gelu"
    _C = np.sqrt(2.0 / np.pi)

    def forward(self, a):
        self.a = a
        a2 = a * a
        self.t = np.tanh(a * (self._C + self._C * 0.044715 * a2))
        self.a2 = a2
        return 0.5 * a * (1.0 + self.t)

    def backward(self, grad):
        a, t = self.a, self.t
        dt = (1.0 - t * t) * (self._C + self._C * 3 * 0.044715 * self.a2)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * dt),)


class Softplus(Function):
    name = "softplus"

    def forward(self, a):
        self.a = a
        return np.logaddexp(0.0, a)

    def backward(self, grad):
        return (grad * (0.5 * (1.0 + np.tanh(0.5 * self.a))),)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


class Sum(Function):
    name = "sum"

    def forward(self, a, axis, keepdims):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims), dtype=DTYPE)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a, axes):
        self.axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class BroadcastTo(Function):
    name = "broadcast_to"

    def forward(self, a, shape):
        try:
            out = np.broadcast_to(a, shape)
        except ValueError as exc:
            raise ShapeError(f"broadcast_to: cannot broadcast {_shape_str(a.shape, shape)}") from exc
        self.shape = a.shape
        return out.copy()

    def backward(self, grad):
        shape = self.shape
        lead = grad.ndim - len(shape)
        g = grad.sum(axis=tuple(range(lead))) if lead else grad
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)


class GetItem(Function):
    name = "getitem"

    def forward(self, a, index):
        self.shape, self.index = a.shape, index
        return np.array(a[index], dtype=DTYPE)

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=DTYPE)
        idx = self.index if isinstance(self.index, tuple) else (self.index,)
        if all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in idx):
            out[self.index] += grad
        else:
            np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis):
        ref = arrays[0].shape
        ax = axis % len(ref)
        for arr in arrays[1:]:
            if arr.ndim != len(ref) or any(arr.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
                raise ShapeError(f"concat: incompatible shapes {_shape_str(ref, arr.shape)} along axis {axis}")
        self.axis = ax
        self.splits = np.cumsum([arr.shape[ax] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=ax)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------


class MatMul(Function):
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""

    name = "matmul"

    def forward(self, a, b):
        ok = a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2]
        if ok and b.ndim > 2:
            ok = a.shape[:-2] == b.shape[:-2]
        if not ok:
            raise ShapeError(f"matmul: dimension mismatch between {_shape_str(a.shape, b.shape)}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        a, b = self.a, self.b
        ga = grad @ np.swapaxes(b, -1, -2)
        if b.ndim == 2:
            k, n = b.shape
            gb = a.reshape(-1, k).T @ grad.reshape(-1, n)
        else:
            gb = np.swapaxes(a, -1, -2) @ grad
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


class Softmax(Function):
    name = "softmax"

    def forward(self, a, axis):
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out, self.axis = e / e.sum(axis=axis, keepdims=True), axis
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax: axis {axis} out of range for shape {x.shape}")
    return Softmax.apply(x, axis=axis)


class LayerNorm(Function):
    name = "layer_norm"

    def forward(self, x, gain, bias, eps):
        d = x.shape[-1]
        if gain.shape != (d,) or bias.shape != (d,):
            raise ShapeError(f"layer_norm: gain/bias must be ({d},), got {_shape_str(gain.shape, bias.shape)}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv
        self.gain = gain
        return self.xhat * gain + bias

    def backward(self, grad):
        xhat, inv = self.xhat, self.inv
        d = xhat.shape[-1]
        flat_g = grad.reshape(-1, d)
        ggain = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        gbias = flat_g.sum(axis=0)
        dxhat = grad * self.gain
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, ggain, gbias


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(x)


def softplus(x: Tensor) -> Tensor:
    return Softplus.apply(x)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


class Conv2d(Function):
    """Same-size cross-correlation, stride 1, optional batch dimension."""

    name = "conv2d"

    def forward(self, x, kernel, bias=None, padding=0):
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.ndim != 4 or kernel.ndim != 4:
            raise ShapeError(f"conv2d: expected (B,)C,H,W input and 4-d kernel, got {_shape_str(x.shape, kernel.shape)}")
        cout, cin, k, k2 = kernel.shape
        if k != k2:
            raise ShapeError(f"conv2d: kernel must be square, got {kernel.shape}")
        if x.shape[1] != cin:
            raise ShapeError(f"conv2d: channel mismatch between input {x.shape} and kernel {kernel.shape}")
        b, _, h, w = x.shape
        p = padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
        if k == 1:
            cols = xp.transpose(0, 2, 3, 1).reshape(-1, cin)
        else:
            win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, cin * k * k)
        k2d = kernel.reshape(cout, -1)
        out = cols @ k2d.T
        if bias is not None:
            out = out + bias
        self.cols, self.k2d = cols, k2d
        self.meta = (squeeze, b, cin, h, w, ho, wo, k, p, cout, bias is not None)
        out = np.ascontiguousarray(out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))
        return out[0] if squeeze else out

    def backward(self, grad):
        squeeze, b, cin, h, w, ho, wo, k, p, cout, has_bias = self.meta
        if squeeze:
            grad = grad[None]
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (g2.T @ self.cols).reshape(cout, cin, k, k)
        if k == 1:
            gxp = (g2 @ self.k2d).reshape(b, ho, wo, cin).transpose(0, 3, 1, 2)
        else:
            # kernel reordered so each window's grad comes out channel-last
            k_hwc = self.k2d.reshape(cout, cin, k, k).transpose(0, 2, 3, 1).reshape(cout, -1)
            gc = (g2 @ k_hwc).reshape(b, ho, wo, k, k, cin)
            acc = np.zeros((b, h + 2 * p, w + 2 * p, cin), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    acc[:, i:i + ho, j:j + wo, :] += gc[:, :, :, i, j, :]
            gxp = acc.transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        if squeeze:
            gx = gx[0]
        grads = [np.ascontiguousarray(gx), gk]
        if has_bias:
            grads.append(g2.sum(axis=0))
        return tuple(grads)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Cross-correlate ``x`` (``C×H×W`` or ``B×C×H×W``) with ``kernel``.

    ``padding`` defaults to ``(k - 1) // 2`` so the spatial size is kept.
    """
    k = kernel.shape[-1]
    if padding is None:
        if k % 2 == 0:
            raise ContractError(f"conv2d: same-padding needs an odd kernel, got k={k}")
        padding = (k - 1) // 2
    if bias is None:
        return Conv2d.apply(x, kernel, padding=padding)
    return Conv2d.apply(x, kernel, bias, padding=padding)


class Upsample2x(Function):
    name = "upsample2x"

    def forward(self, x):
        return x.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(self, grad):
        *lead, h2, w2 = grad.shape
        g = grad.reshape(*lead, h2 // 2, 2, w2 // 2, 2).sum(axis=(-3, -1))
        return (g,)


def upsample2x_nearest(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2×2 block over the last two axes."""
    return Upsample2x.apply(x)


# ---------------------------------------------------------------------------
# similarity and reductions used by the counting head and losses
# ---------------------------------------------------------------------------


class CosineRows(Function):
    """Cosine similarity between each row of ``v[B, N, d]`` and ``t[B, d]``.

    Rows (or targets) with zero norm produce 0 and pass no gradient.
    """

    name = "cosine_rows"

    def forward(self, v, t):
        if v.ndim != 3 or t.ndim != 2 or v.shape[0] != t.shape[0] or v.shape[2] != t.shape[1]:
            raise ShapeError(f"cosine: expected v[B,N,d] and t[B,d], got {_shape_str(v.shape, t.shape)}")
        nv = np.sqrt((v * v).sum(axis=-1))
        nt = np.sqrt((t * t).sum(axis=-1))
        denom = nv * nt[:, None]
        valid = denom > 0
        safe = np.where(valid, denom, 1.0)
        dots = np.einsum("bnd,bd->bn", v, t)
        s = np.where(valid, dots / safe, 0.0)
        self.v, self.t, self.nv, self.nt, self.s, self.valid, self.safe = v, t, nv, nt, s, valid, safe
        return s

    def backward(self, grad):
        v, t, s, valid = self.v, self.t, self.s, self.valid
        g = np.where(valid, grad, 0.0)
        nv2 = np.where(valid, self.nv**2, 1.0)
        nt2 = np.where(self.nt > 0, self.nt**2, 1.0)
        gv = g[..., None] * (t[:, None, :] / self.safe[..., None] - s[..., None] * v / nv2[..., None])
        gt = np.einsum("bn,bnd->bd", g / self.safe, v) - (g * s).sum(axis=1)[:, None] * t / nt2[:, None]
        return gv, gt


def cosine_rows(v: Tensor, t: Tensor) -> Tensor:
    return CosineRows.apply(v, t)


class MaskedLogSumExp(Function):
    """``log Σ_{mask} exp(x)`` along the last axis; rows need one True entry."""

    name = "masked_logsumexp"

    def forward(self, x, mask):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"masked_logsumexp: mask shape {mask.shape} != input shape {x.shape}")
        if not mask.any(axis=-1).all():
            raise ContractError("masked_logsumexp: every row needs at least one selected entry")
        m = np.where(mask, x, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(x - m), 0.0)
        z = e.sum(axis=-1, keepdims=True)
        self.weights = e / z
        return (m + np.log(z))[..., 0]

    def backward(self, grad):
        return (grad[..., None] * self.weights,)


def masked_logsumexp(x: Tensor, mask: np.ndarray) -> Tensor:
    return MaskedLogSumExp.apply(x, mask=mask)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays; zero them between
    optimisation steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not attached to any tensor that requires grad")
    tape = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._ctx.backward(g)
        for parent, pg in zip(node._ctx.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{node._ctx.name}: backward produced grad {pg.shape} for input {parent.shape}")
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

"""Minimal reverse-mode autodiff over float64 numpy arrays.

Design:

* `Tensor` owns a C-contiguous float64 ndarray plus `requires_grad` and an
  accumulated `grad` array of the same shape.
* A `Tape` is a Wengert list: every differentiable op that runs while a tape
  is active appends `(output, backward_fn)`. `Tape.backward(loss)` walks the
  list in reverse, calling each closure once; closures read `output.grad`
  and accumulate into their inputs' `.grad`.
* Tapes are per forward pass and thread-local (`with Tape() as tape:`), so
  evaluation threads never share autodiff state.
* There is no implicit broadcasting. Elementwise ops demand equal shapes;
  the only shape-extending op is the explicit bias add.

All math is float64 end to end; ops convert nothing and check everything.
"""

import math
import threading

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import DimensionError, InputError, UsageError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    """The innermost tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array with an accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class Tape:
    """Records one forward pass; replays it backwards exactly once."""

    def __init__(self):
        self._records = []
        self._used = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        top = _tape_stack().pop()
        if top is not self:
            raise UsageError("tape context exited out of order")
        return False

    def _record(self, out: Tensor, backward_fn):
        self._records.append((out, backward_fn))

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor):
        """Seed d(loss)/d(loss)=1 and accumulate grads for the whole tape."""
        if self._used:
            raise UsageError("tape already consumed by a previous backward()")
        if loss.data.size != 1:
            raise UsageError(
                f"backward() needs a scalar loss, got shape {loss.data.shape}"
            )
        if not any(out is loss for out, _ in self._records):
            raise UsageError("loss was not produced on this tape")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._records):
            if out.grad is not None:
                backward_fn()


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _emit(data, inputs, make_backward):
    """Wrap an op result; register its backward closure if a tape is live."""
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    tape = active_tape()
    if req and tape is not None:
        tape._record(out, make_backward(out))
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} differ"
        )


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def make(out):
        def backward():
            _accumulate(a, out.grad)
            _accumulate(b, out.grad)
        return backward

    return _emit(a.data + b.data, (a, b), make)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def make(out):
        def backward():
            _accumulate(a, out.grad)
            _accumulate(b, -out.grad)
        return backward

    return _emit(a.data - b.data, (a, b), make)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def make(out):
        def backward():
            _accumulate(a, out.grad * b.data)
            _accumulate(b, out.grad * a.data)
        return backward

    return _emit(a.data * b.data, (a, b), make)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def make(out):
        def backward():
            _accumulate(x, c * out.grad)
        return backward

    return _emit(c * x.data, (x,), make)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., D] + b[D]; the one sanctioned broadcast."""
    if b.data.ndim != 1 or x.data.ndim < 1 or x.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(
            f"add_bias: bias {b.data.shape} does not match last axis of {x.data.shape}"
        )

    def make(out):
        def backward():
            _accumulate(x, out.grad)
            axes = tuple(range(out.grad.ndim - 1))
            _accumulate(b, out.grad.sum(axis=axes))
        return backward

    return _emit(x.data + b.data, (x, b), make)


def tsum(x: Tensor) -> Tensor:
    def make(out):
        def backward():
            _accumulate(x, np.full_like(x.data, float(out.grad)))
        return backward

    return _emit(x.data.sum(), (x,), make)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def make(out):
        def backward():
            _accumulate(x, np.full_like(x.data, float(out.grad) / n))
        return backward

    return _emit(x.data.mean(), (x,), make)


# ------------------------------------------------------------ shape movement


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.data.size:
        raise DimensionError(f"reshape: cannot view {x.data.shape} as {shape}")

    def make(out):
        def backward():
            _accumulate(x, out.grad.reshape(x.data.shape))
        return backward

    return _emit(x.data.reshape(shape), (x,), make)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.data.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def make(out):
        def backward():
            _accumulate(x, np.ascontiguousarray(out.grad.transpose(inverse)))
        return backward

    return _emit(np.ascontiguousarray(x.data.transpose(axes)), (x,), make)


def gather_rows(x: Tensor, index) -> Tensor:
    """out[i] = x[index[i]]; backward scatter-adds, so repeated indices sum."""
    index = np.asarray(index)
    if x.data.ndim < 1:
        raise DimensionError("gather_rows: input must have a leading axis")
    if not np.issubdtype(index.dtype, np.integer) or index.ndim != 1:
        raise InputError("gather_rows: index must be a 1-D integer array")
    if index.size and (index.min() < 0 or index.max() >= x.data.shape[0]):
        raise InputError(
            f"gather_rows: index outside [0, {x.data.shape[0]}) encountered"
        )

    def make(out):
        def backward():
            gx = np.zeros_like(x.data)
            np.add.at(gx, index, out.grad)
            _accumulate(x, gx)
        return backward

    return _emit(np.ascontiguousarray(x.data[index]), (x,), make)


def repeat_pixels(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsample of x[C, H, W] by an integer factor."""
    factor = int(factor)
    if factor < 1:
        raise DimensionError(f"repeat_pixels: factor must be >= 1, got {factor}")
    if x.data.ndim != 3:
        raise DimensionError(f"repeat_pixels: expected [C, H, W], got {x.data.shape}")
    c, h, w = x.data.shape

    def make(out):
        def backward():
            g = out.grad.reshape(c, h, factor, w, factor).sum(axis=(2, 4))
            _accumulate(x, g)
        return backward

    data = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)
    return _emit(data, (x,), make)


# ------------------------------------------------------------- dense algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matmul, or a stack of them when both operands are 3-D with equal
    leading size. No other broadcasting."""
    ad, bd = a.data, b.data
    ok = (ad.ndim == 2 and bd.ndim == 2 and ad.shape[1] == bd.shape[0]) or (
        ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] == bd.shape[0]
        and ad.shape[2] == bd.shape[1]
    )
    if not ok:
        raise DimensionError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")

    def make(out):
        def backward():
            g = out.grad
            _accumulate(a, g @ bd.swapaxes(-1, -2))
            _accumulate(b, ad.swapaxes(-1, -2) @ g)
        return backward

    return _emit(ad @ bd, (a, b), make)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max subtraction)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def make(out):
        def backward():
            g = out.grad
            dot = (p * g).sum(axis=axis, keepdims=True)
            _accumulate(x, p * (g - dot))
        return backward

    return _emit(p, (x,), make)


def gelu(x: Tensor) -> Tensor:
    """Exact gelu, x * Phi(x), with the erf form (not the tanh fit)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def make(out):
        def backward():
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
            _accumulate(x, out.grad * (cdf + x.data * pdf))
        return backward

    return _emit(x.data * cdf, (x,), make)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1] if x.data.ndim else 0
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layernorm: gamma/beta must be [{d}], got {gamma.data.shape} and {beta.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std

    def make(out):
        def backward():
            g = out.grad
            axes = tuple(range(g.ndim - 1))
            _accumulate(gamma, (g * xhat).sum(axis=axes))
            _accumulate(beta, g.sum(axis=axes))
            gy = g * gamma.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv_std * (gy - m1 - xhat * m2))
        return backward

    return _emit(gamma.data * xhat + beta.data, (x, gamma, beta), make)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy between logits[..., C] and integer targets[...]."""
    targets = np.asarray(targets)
    if not np.issubdtype(targets.dtype, np.integer):
        raise InputError("cross_entropy: targets must be integers")
    if logits.data.ndim < 1 or targets.shape != logits.data.shape[:-1]:
        raise DimensionError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.data.shape}"
        )
    c = logits.data.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise InputError(f"cross_entropy: class id outside [0, {c}) encountered")

    flat = logits.data.reshape(-1, c)
    tflat = targets.reshape(-1)
    n = flat.shape[0]
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(n), tflat] - lse
    loss = -logp.mean()

    def make(out):
        def backward():
            probs = np.exp(z - lse[:, None])
            probs[np.arange(n), tflat] -= 1.0
            g = (float(out.grad) / n) * probs
            _accumulate(logits, g.reshape(logits.data.shape))
        return backward

    return _emit(np.float64(loss), (logits,), make)


# ---------------------------------------------------------------- conv2d


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of x[Cin, H, W] with w[Cout, Cin, KH, KW].

    Dispatches to the active kernels lane (compiled or numpy)."""
    stride, padding = int(stride), int(padding)
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: bad stride {stride} or padding {padding}")
    if x.data.ndim != 3 or w.data.ndim != 4 or x.data.shape[0] != w.data.shape[1]:
        raise DimensionError(
            f"conv2d: incompatible input {x.data.shape} and weight {w.data.shape}"
        )
    cout, cin, kh, kw = w.data.shape
    h, wd = x.data.shape[1], x.data.shape[2]
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{wd + 2 * padding}"
        )
    if b is not None and b.data.shape != (cout,):
        raise DimensionError(f"conv2d: bias must be [{cout}], got {b.data.shape}")

    y = kernels.conv2d_forward(x.data, w.data, stride, padding)
    if b is not None:
        y = y + b.data[:, None, None]
    inputs = (x, w) if b is None else (x, w, b)

    def make(out):
        def backward():
            g = np.ascontiguousarray(out.grad)
            if x.requires_grad:
                _accumulate(
                    x, kernels.conv2d_grad_input(g, w.data, x.data.shape, stride, padding)
                )
            if w.requires_grad:
                _accumulate(
                    w, kernels.conv2d_grad_weight(g, x.data, w.data.shape, stride, padding)
                )
            if b is not None:
                _accumulate(b, g.sum(axis=(1, 2)))
        return backward

    return _emit(y, inputs, make)


# ---------------------------------------------------------- bilinear resize


def _resize_weights(in_size: int, out_size: int) -> np.ndarray:
    """Row-stochastic [out_size, in_size] interpolation matrix.

    Half-pixel centres: source = (o + 0.5) * in/out - 0.5, clamped at the
    edges. Factor-2 downsampling lands exactly between neighbours, so it
    equals 2x2 mean pooling; in == out collapses to the identity."""
    w = np.zeros((out_size, in_size))
    ratio = in_size / out_size
    for o in range(out_size):
        src = (o + 0.5) * ratio - 0.5
        if src <= 0.0:
            w[o, 0] = 1.0
            continue
        if src >= in_size - 1:
            w[o, in_size - 1] = 1.0
            continue
        i0 = int(math.floor(src))
        t = src - i0
        w[o, i0] += 1.0 - t
        w[o, i0 + 1] += t
    return w


def bilinear_resize(x: Tensor, out_hw) -> Tensor:
    """Resize x[C, H, W] to [C, out_h, out_w] with half-pixel-centre bilinear
    interpolation. Separable: out = Ry @ x @ Rx^T per channel."""
    oh, ow = (int(v) for v in out_hw)
    if x.data.ndim != 3:
        raise DimensionError(f"bilinear_resize: expected [C, H, W], got {x.data.shape}")
    if oh < 1 or ow < 1:
        raise DimensionError(f"bilinear_resize: bad target size ({oh}, {ow})")
    c, h, w = x.data.shape
    ry = _resize_weights(h, oh)
    rx = _resize_weights(w, ow)
    data = ry @ x.data @ rx.T

    def make(out):
        def backward():
            _accumulate(x, ry.T @ out.grad @ rx)
        return backward

    return _emit(np.ascontiguousarray(data), (x,), make)


def resize_plane(plane: np.ndarray, out_hw) -> np.ndarray:
    """Non-differentiable helper: resize a bare [H, W] array."""
    oh, ow = (int(v) for v in out_hw)
    ry = _resize_weights(plane.shape[0], oh)
    rx = _resize_weights(plane.shape[1], ow)
    return ry @ plane @ rx.T

"""Dense float32 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: rank 1..4 numpy-backed tensors (scalars
are stored as shape ``(1,)``), a define-by-run graph recorded on the
output tensors themselves, and a single topological backward pass.
Arithmetic runs in 32-bit throughout; 64-bit precision is reserved for
test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K

DTYPE = np.float32

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeError",
    "GradientError",
    "NonFiniteError",
    "set_debug",
    "debug_enabled",
    "conv2d",
    "dense",
    "global_avg_pool",
    "global_max_pool",
    "channelwise_pool",
    "adaptive_avg_pool",
    "batch_norm",
    "concat",
    "relu",
    "sigmoid",
    "sqrt",
    "matmul",
    "transpose",
    "reshape",
    "tsum",
    "tmean",
    "bce_with_logits",
    "grad_check",
    "grad_check_params",
    "GradCheckResult",
]


class TensorError(Exception):
    """Base class for engine errors."""


class ShapeError(TensorError):
    """Operands have incompatible shapes; message names the offending dims."""


class GradientError(TensorError):
    """Backward-pass misuse (non-scalar loss, missing grads, ...)."""


class NonFiniteError(TensorError):
    """A NaN or Inf value was created or observed."""


_DEBUG = False


def set_debug(flag: bool) -> None:
    """Toggle post-op finiteness checks (and downstream debug asserts)."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


def _as_array(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if arr.ndim > 4:
        raise ShapeError(f"tensors support rank 0..4, got rank {arr.ndim}")
    return arr


class Tensor:
    """A dense float32 array plus optional gradient buffer.

    Values are immutable after construction except for ``grad``. Graph
    edges (``_parents``/``_backward``) exist only between an op call and
    the backward pass that consumes them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor creation rejected: data contains NaN/Inf")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...],
                backward: Callable[[np.ndarray], None] | None, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=DTYPE)
        if _DEBUG and not np.all(np.isfinite(out.data)):
            raise NonFiniteError(f"op '{op}' produced non-finite values")
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        out._op = op
        return out

    # ------------------------------------------------------------------
    # basics
    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op!r})"

    # ------------------------------------------------------------------
    # operator sugar
    # ------------------------------------------------------------------
    def __add__(self, other):
        return add(self, _promote(other))

    def __radd__(self, other):
        return add(_promote(other), self)

    def __sub__(self, other):
        return sub(self, _promote(other))

    def __rsub__(self, other):
        return sub(_promote(other), self)

    def __mul__(self, other):
        return mul(self, _promote(other))

    def __rmul__(self, other):
        return mul(_promote(other), self)

    def __neg__(self):
        return mul(self, _promote(-1.0))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    # ------------------------------------------------------------------
    # backward
    # ------------------------------------------------------------------
    def backward(self) -> None:
        """Reverse-mode pass from a scalar loss.

        Populates ``grad`` on every reachable tensor with
        ``requires_grad=True`` (accumulating across fan-out), then clears
        the recorded graph so tensors can be reused as fresh leaves.
        """
        if self.data.size != 1:
            raise GradientError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientError("backward on a tensor detached from the graph")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # consume the tape
        for node in topo:
            node._parents = ()
            node._backward = None


def _promote(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=DTYPE))


def _accumulate(t: Tensor, grad: np.ndarray, owned: bool = False) -> None:
    """Add a contribution to ``t.grad``; ``owned=True`` promises the array
    is freshly allocated and aliased nowhere else, letting the first
    contribution adopt the buffer instead of copying."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if owned and grad.dtype == DTYPE and grad.flags.writeable and grad.flags.owndata:
            t.grad = grad
        else:
            t.grad = np.array(grad, dtype=DTYPE)
    else:
        t.grad += grad.astype(DTYPE, copy=False)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ----------------------------------------------------------------------
# elementwise ops
# ----------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward(grad: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(grad, b.shape))

    return Tensor._result(out_data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward(grad: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(-grad, b.shape))

    return Tensor._result(out_data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward(grad: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(grad * b.data, a.shape), owned=True)
        _accumulate(b, _unbroadcast(grad * a.data, b.shape), owned=True)

    return Tensor._result(out_data, (a, b), backward, "mul")


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Dispatch add/mul/sub by name; broadcasting over size-1 axes."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "sub":
        return sub(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def relu(t: Tensor) -> Tensor:
    out_data = np.maximum(t.data, DTYPE(0))
    mask = t.data > 0  # subgradient at 0 is 0

    def backward(grad: np.ndarray) -> None:
        _accumulate(t, grad * mask, owned=True)

    return Tensor._result(out_data, (t,), backward, "relu")


def sigmoid(t: Tensor) -> Tensor:
    """Numerically stable logistic; output is strictly inside (0,1) until
    float32 saturation (|x| beyond roughly 17)."""
    x = t.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(grad: np.ndarray) -> None:
        _accumulate(t, grad * out_data * (1.0 - out_data), owned=True)

    return Tensor._result(out_data, (t,), backward, "sigmoid")


def sqrt(t: Tensor) -> Tensor:
    out_data = np.sqrt(t.data)

    def backward(grad: np.ndarray) -> None:
        _accumulate(t, grad * (DTYPE(0.5) / out_data), owned=True)

    return Tensor._result(out_data, (t,), backward, "sqrt")


def square(t: Tensor) -> Tensor:
    out_data = t.data * t.data

    def backward(grad: np.ndarray) -> None:
        _accumulate(t, grad * (DTYPE(2) * t.data), owned=True)

    return Tensor._result(out_data, (t,), backward, "square")


# ----------------------------------------------------------------------
# reductions / reshaping
# ----------------------------------------------------------------------

def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = t.data.sum(axis=axis, keepdims=keepdims, dtype=DTYPE)

    def backward(grad: np.ndarray) -> None:
        g = grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(t, np.broadcast_to(g, t.shape))

    return Tensor._result(np.asarray(out_data), (t,), backward, "sum")


def tmean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = t.size
    elif isinstance(axis, int):
        count = t.shape[axis]
    else:
        count = int(np.prod([t.shape[a] for a in axis]))
    return mul(tsum(t, axis=axis, keepdims=keepdims), _promote(1.0 / count))


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out_data = t.data.reshape(shape)

    def backward(grad: np.ndarray) -> None:
        _accumulate(t, grad.reshape(t.shape))

    return Tensor._result(out_data, (t,), backward, "reshape")


def transpose(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise ShapeError(f"transpose expects a rank-2 tensor, got shape {t.shape}")
    out_data = t.data.T

    def backward(grad: np.ndarray) -> None:
        _accumulate(t, grad.T)

    return Tensor._result(np.ascontiguousarray(out_data), (t,), backward, "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape[1]} vs {b.shape[0]}")
    out_data = a.data @ b.data

    def backward(grad: np.ndarray) -> None:
        _accumulate(a, grad @ b.data.T, owned=True)
        _accumulate(b, a.data.T @ grad, owned=True)

    return Tensor._result(out_data, (a, b), backward, "matmul")


def split_rows(t: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split along axis 0 into consecutive blocks; gradients scatter back
    into their slice of the parent."""
    if sum(sizes) != t.shape[0]:
        raise ShapeError(f"split_rows: sizes {list(sizes)} do not sum to leading extent {t.shape[0]}")
    outs: list[Tensor] = []
    offset = 0
    for size in sizes:
        start = offset
        stop = offset + size

        def backward(grad: np.ndarray, start=start, stop=stop) -> None:
            g = np.zeros_like(t.data)
            g[start:stop] = grad
            _accumulate(t, g, owned=True)

        # leading-axis slices of contiguous data are views; tensors are
        # immutable so sharing is safe
        outs.append(Tensor._result(t.data[start:stop], (t,), backward, "split_rows"))
        offset = stop
    return outs


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if len(tensors) == 0:
        raise ShapeError("concat of an empty list")
    first = tensors[0].shape
    for i, t in enumerate(tensors[1:], start=1):
        for ax in range(len(first)):
            if ax != axis and t.shape[ax] != first[ax]:
                raise ShapeError(
                    f"concat: tensor {i} has extent {t.shape[ax]} on axis {ax}, expected {first[ax]}"
                )
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(grad: np.ndarray) -> None:
        offset = 0
        for t, s in zip(tensors, sizes):
            index = [slice(None)] * grad.ndim
            index[axis] = slice(offset, offset + s)
            _accumulate(t, grad[tuple(index)])
            offset += s

    return Tensor._result(out_data, tuple(tensors), backward, "concat")


# ----------------------------------------------------------------------
# dense / conv / pooling
# ----------------------------------------------------------------------

def dense(inp: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map [b,n] x [m,n] + [m] -> [b,m]."""
    if inp.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"dense expects rank-2 input/weight, got {inp.shape} and {weight.shape}")
    if inp.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input features {inp.shape[1]} != weight features {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[0]},)")
    out_data = inp.data @ weight.data.T + bias.data

    def backward(grad: np.ndarray) -> None:
        _accumulate(inp, grad @ weight.data, owned=True)
        _accumulate(weight, grad.T @ inp.data, owned=True)
        _accumulate(bias, grad.sum(axis=0), owned=True)

    return Tensor._result(out_data, (inp, weight, bias), backward, "dense")


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Patch matrix [b, c*k*k, ho*wo], built by one contiguous slice copy
    per kernel offset (far faster than a generic 6-d strided reshape)."""
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    if k == 1 and stride == 1:
        return x.reshape(b, c, ho * wo), ho, wo
    cols = np.empty((b, c, k, k, ho, wo), dtype=DTYPE)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = x[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    return cols.reshape(b, c * k * k, ho * wo), ho, wo


def _col2im(gcols: np.ndarray, x_shape: tuple[int, ...], k: int, stride: int,
            padding: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add patch gradients [b, c*k*k, ho*wo] back onto the input."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    gx = np.zeros((b, c, hp, wp), dtype=DTYPE)
    cols6 = gcols.reshape(b, c, k, k, ho, wo)
    for ki in range(k):
        for kj in range(k):
            gx[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += (
                cols6[:, :, ki, kj]
            )
    if padding:
        gx = gx[:, :, padding:hp - padding, padding:wp - padding]
    return gx


def _conv_input_grad(grad_out: np.ndarray, weight: np.ndarray, stride: int,
                     padding: int, x_shape: tuple[int, ...]) -> np.ndarray:
    """Input gradient as a correlation of the (dilated) output gradient
    with the flipped kernel — one more GEMM instead of k*k scatter-adds.
    Requires padding <= k-1 (always true here); callers fall back to
    _col2im otherwise."""
    b, c_out, ho, wo = grad_out.shape
    _, c_in, k, _ = weight.shape
    h, w = x_shape[2], x_shape[3]
    if stride > 1:
        gd = np.zeros((b, c_out, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=DTYPE)
        gd[:, :, ::stride, ::stride] = grad_out
    else:
        gd = grad_out
    lead = k - 1 - padding
    rem_h = (h + 2 * padding - k) - (ho - 1) * stride
    rem_w = (w + 2 * padding - k) - (wo - 1) * stride
    gd = np.pad(gd, ((0, 0), (0, 0), (lead, lead + rem_h), (lead, lead + rem_w)))
    w_flip = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    cols, oh, ow = _im2col(gd, k, 1, 0)  # [b, c_out*k*k, h*w]
    return np.matmul(w_flip.reshape(c_in, -1)[None], cols).reshape(b, c_in, oh, ow)


def _igrad_correlation_fast(grad: np.ndarray, weight: np.ndarray, padding: int,
                            x_shape: tuple[int, ...]) -> np.ndarray:
    """Stride-1 input gradient as a correlation with the flipped kernel,
    on the compiled direct-loop kernels."""
    k = weight.shape[2]
    h, w = x_shape[2], x_shape[3]
    lead = k - 1 - padding
    rem_h = (h + 2 * padding - k) - (grad.shape[2] - 1)
    rem_w = (w + 2 * padding - k) - (grad.shape[3] - 1)
    gp = K._pad2d(grad, lead, lead + rem_h, lead, lead + rem_w)
    w_flip = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    zero_bias = np.zeros(w_flip.shape[0], dtype=DTYPE)
    if k == 3:
        return K._fwd_s1_k3(gp, w_flip, zero_bias, h, w)
    return K._fwd_s1_generic(gp, w_flip, zero_bias, h, w)


def conv2d(inp: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0,
           fused_relu: bool = False) -> Tensor:
    """2-D cross-correlation with square kernels.

    Dispatch: compiled direct-loop kernels for 3x3 (stride 1 or 2) and
    generic odd kernels at stride 1 when numba is present; the numpy
    im2col + GEMM path covers everything else (and 1x1, which already is
    a plain GEMM). ``fused_relu`` clamps the output in place and masks
    the incoming gradient, exactly like a separate relu (subgradient 0
    at 0).
    """
    if inp.ndim != 4:
        raise ShapeError(f"conv2d: input must be rank 4 [b,c,h,w], got {inp.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be [c_out,c_in,k,k], got {weight.shape}")
    b, c_in, h, w = inp.shape
    c_out, wc_in, k, _ = weight.shape
    if wc_in != c_in:
        raise ShapeError(f"conv2d: input channels {c_in} != weight input channels {wc_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    if k < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid k={k}, stride={stride}, padding={padding}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(
            f"conv2d: kernel {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )

    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    # direct kernels win on larger maps; tiny maps stay on the GEMM path
    fast_s1 = (K.HAVE_NUMBA and stride == 1 and k > 1 and padding <= k - 1
               and ho * wo >= 128)
    fast_s2 = (K.HAVE_NUMBA and stride == 2 and k == 3 and padding <= 2
               and ho * wo >= 128)

    if fast_s1 or fast_s2:
        xp = K._pad2d(inp.data, padding, padding, padding, padding) if padding else inp.data
        phases = K._phase_split(xp) if fast_s2 else None
        if fast_s2:
            out_data = K._fwd_s2_k3(phases, weight.data, bias.data, ho, wo, fused_relu)
        elif k == 3:
            out_data = K._fwd_s1_k3(xp, weight.data, bias.data, ho, wo, fused_relu)
        else:
            out_data = K._fwd_s1_generic(xp, weight.data, bias.data, ho, wo, fused_relu)

        wmat_fast = weight.data.reshape(c_out, c_in * k * k)

        def backward(grad: np.ndarray) -> None:
            if fused_relu:
                grad = grad * (out_data > 0)
            grad = np.ascontiguousarray(grad)
            if bias.requires_grad:
                _accumulate(bias, grad.sum(axis=(0, 2, 3)), owned=True)
            if weight.requires_grad:
                if fast_s2:
                    gw = K._wgrad_s2_k3(phases, grad)
                elif k == 3:
                    gw = K._wgrad_s1_k3(xp, grad)
                else:
                    gw = K._wgrad_s1_generic(xp, grad, k)
                _accumulate(weight, gw, owned=True)
            if inp.requires_grad:
                if fast_s2:
                    g2 = grad.reshape(b, c_out, ho * wo)
                    gcols = np.matmul(wmat_fast.T[None], g2)
                    _accumulate(inp, _col2im(gcols, inp.shape, k, stride, padding, ho, wo),
                                owned=True)
                else:
                    _accumulate(inp, _igrad_correlation_fast(grad, weight.data, padding, inp.shape),
                                owned=True)

        return Tensor._result(out_data, (inp, weight, bias), backward, "conv2d")

    cols, ho, wo = _im2col(inp.data, k, stride, padding)  # [b, CKK, P]
    ckk = c_in * k * k
    wmat = weight.data.reshape(c_out, ckk)
    out_data = np.matmul(wmat[None], cols).reshape(b, c_out, ho, wo)
    out_data += bias.data.reshape(1, c_out, 1, 1)
    if fused_relu:
        np.maximum(out_data, DTYPE(0), out=out_data)

    def backward(grad: np.ndarray) -> None:
        if fused_relu:
            grad = grad * (out_data > 0)
        g2 = grad.reshape(b, c_out, ho * wo)
        if bias.requires_grad:
            _accumulate(bias, grad.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(weight, gw.reshape(weight.shape))
        if inp.requires_grad:
            if stride == 1 and padding <= k - 1:
                # correlation form: one GEMM, no scatter
                _accumulate(inp, _conv_input_grad(grad, weight.data, stride, padding, inp.shape))
            else:
                gcols = np.matmul(wmat.T[None], g2)
                _accumulate(inp, _col2im(gcols, inp.shape, k, stride, padding, ho, wo))

    return Tensor._result(out_data, (inp, weight, bias), backward, "conv2d")


def global_avg_pool(inp: Tensor) -> Tensor:
    """[b,c,h,w] -> [b,c,1,1] spatial mean."""
    if inp.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be rank 4, got {inp.shape}")
    b, c, h, w = inp.shape
    out_data = inp.data.mean(axis=(2, 3), keepdims=True, dtype=DTYPE)
    scale = DTYPE(1.0 / (h * w))

    def backward(grad: np.ndarray) -> None:
        _accumulate(inp, np.broadcast_to(grad * scale, inp.shape))

    return Tensor._result(out_data, (inp,), backward, "global_avg_pool")


def global_max_pool(inp: Tensor) -> Tensor:
    """[b,c,h,w] -> [b,c,1,1] spatial max; ties route grad to the first
    row-major argmax."""
    if inp.ndim != 4:
        raise ShapeError(f"global_max_pool: input must be rank 4, got {inp.shape}")
    b, c, h, w = inp.shape
    flat = inp.data.reshape(b, c, h * w)
    idx = flat.argmax(axis=2)
    out_data = np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(b, c, 1, 1)

    def backward(grad: np.ndarray) -> None:
        g = np.zeros((b, c, h * w), dtype=DTYPE)
        np.put_along_axis(g, idx[:, :, None], grad.reshape(b, c, 1), axis=2)
        _accumulate(inp, g.reshape(inp.shape))

    return Tensor._result(out_data, (inp,), backward, "global_max_pool")


def channelwise_pool(inp: Tensor, mode: str) -> Tensor:
    """Reduce the channel axis only: [b,c,h,w] -> [b,1,h,w]."""
    if inp.ndim != 4:
        raise ShapeError(f"channelwise_pool: input must be rank 4, got {inp.shape}")
    if mode == "avg":
        out_data = inp.data.mean(axis=1, keepdims=True, dtype=DTYPE)
        scale = DTYPE(1.0 / inp.shape[1])

        def backward(grad: np.ndarray) -> None:
            _accumulate(inp, np.broadcast_to(grad * scale, inp.shape))

    elif mode == "max":
        idx = inp.data.argmax(axis=1)
        out_data = np.take_along_axis(inp.data, idx[:, None], axis=1)

        def backward(grad: np.ndarray) -> None:
            g = np.zeros_like(inp.data)
            np.put_along_axis(g, idx[:, None], grad, axis=1)
            _accumulate(inp, g)

    else:
        raise ValueError(f"channelwise_pool: mode must be 'avg' or 'max', got {mode!r}")

    return Tensor._result(out_data, (inp,), backward, f"channelwise_pool_{mode}")


def channelwise_pool_pair(inp: Tensor) -> Tensor:
    """Stacked channel-average and channel-max: [b,c,h,w] -> [b,2,h,w].

    Equivalent to concatenating channelwise_pool(avg) and
    channelwise_pool(max); fused into one pass over the channels. Max
    ties route gradient to the lowest channel index.
    """
    if inp.ndim != 4:
        raise ShapeError(f"channelwise_pool_pair: input must be rank 4, got {inp.shape}")
    b, c, h, w = inp.shape
    if K.HAVE_NUMBA:
        out_data, arg = K._chan_pool_pair(inp.data)
    else:
        avg = inp.data.mean(axis=1, keepdims=True, dtype=DTYPE)
        arg = inp.data.argmax(axis=1).astype(np.int32)
        mx = np.take_along_axis(inp.data, arg[:, None].astype(np.int64), axis=1)
        out_data = np.concatenate([avg, mx], axis=1)
    scale = DTYPE(1.0 / c)

    def backward(grad: np.ndarray) -> None:
        g = np.empty_like(inp.data)
        g[...] = grad[:, 0:1] * scale          # average spreads 1/c everywhere
        idx = arg[:, None].astype(np.int64)
        gsel = np.take_along_axis(g, idx, axis=1) + grad[:, 1:2]
        np.put_along_axis(g, idx, gsel, axis=1)  # max adds at the argmax channel
        _accumulate(inp, g, owned=True)

    return Tensor._result(out_data, (inp,), backward, "channelwise_pool_pair")


def adaptive_avg_pool(inp: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average-pool to an exact output size; windows partition as evenly as
    possible (start floor(i*h/out_h), end ceil((i+1)*h/out_h)). Downsampling
    only."""
    if inp.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool: input must be rank 4, got {inp.shape}")
    b, c, h, w = inp.shape
    if out_h > h or out_w > w:
        raise ShapeError(f"adaptive_avg_pool: upsampling {h}x{w} -> {out_h}x{out_w} is out of contract")
    if h % out_h == 0 and w % out_w == 0:
        # integer-ratio windows coincide with the floor/ceil partition
        fh, fw = h // out_h, w // out_w
        inv = DTYPE(1.0 / (fh * fw))
        blocks = inp.data.reshape(b, c, out_h, fh, out_w, fw)
        out_data = blocks.sum(axis=5, dtype=DTYPE).sum(axis=3, dtype=DTYPE) * inv

        def backward(grad: np.ndarray) -> None:
            g = np.broadcast_to((grad * inv)[:, :, :, None, :, None],
                                (b, c, out_h, fh, out_w, fw))
            _accumulate(inp, np.ascontiguousarray(g).reshape(inp.shape), owned=True)

        return Tensor._result(out_data, (inp,), backward, "adaptive_avg_pool")
    h_start = [int(np.floor(i * h / out_h)) for i in range(out_h)]
    h_end = [int(np.ceil((i + 1) * h / out_h)) for i in range(out_h)]
    w_start = [int(np.floor(j * w / out_w)) for j in range(out_w)]
    w_end = [int(np.ceil((j + 1) * w / out_w)) for j in range(out_w)]
    out_data = np.empty((b, c, out_h, out_w), dtype=DTYPE)
    for i in range(out_h):
        for j in range(out_w):
            out_data[:, :, i, j] = inp.data[:, :, h_start[i]:h_end[i], w_start[j]:w_end[j]].mean(
                axis=(2, 3), dtype=DTYPE
            )

    def backward(grad: np.ndarray) -> None:
        g = np.zeros_like(inp.data)
        for i in range(out_h):
            for j in range(out_w):
                window = (h_end[i] - h_start[i]) * (w_end[j] - w_start[j])
                g[:, :, h_start[i]:h_end[i], w_start[j]:w_end[j]] += (
                    grad[:, :, i:i + 1, j:j + 1] / DTYPE(window)
                )
        _accumulate(inp, g)

    return Tensor._result(out_data, (inp,), backward, "adaptive_avg_pool")


def batch_norm(inp: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """1-D batch normalization over [b,n].

    Training mode normalizes by batch statistics (biased variance) and
    updates the running buffers in place (running variance stored
    unbiased). Eval mode normalizes by the running buffers.
    """
    if inp.ndim != 2:
        raise ShapeError(f"batch_norm: input must be rank 2 [b,n], got {inp.shape}")
    b, n = inp.shape
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({n},)")
    eps = DTYPE(eps)

    if training:
        if b < 2:
            raise ShapeError("batch_norm: training mode requires batch size >= 2")
        mean = inp.data.mean(axis=0, dtype=DTYPE)
        centered = inp.data - mean
        var = (centered * centered).mean(axis=0, dtype=DTYPE)
        inv_std = DTYPE(1.0) / np.sqrt(var + eps)
        xhat = centered * inv_std
        out_data = gamma.data * xhat + beta.data
        running_mean *= DTYPE(1.0 - momentum)
        running_mean += DTYPE(momentum) * mean
        running_var *= DTYPE(1.0 - momentum)
        running_var += DTYPE(momentum) * (var * DTYPE(b / (b - 1)))

        def backward(grad: np.ndarray) -> None:
            if beta.requires_grad:
                _accumulate(beta, grad.sum(axis=0))
            if gamma.requires_grad:
                _accumulate(gamma, (grad * xhat).sum(axis=0))
            if inp.requires_grad:
                gx = grad * gamma.data
                gmean = gx.mean(axis=0, dtype=DTYPE)
                gdot = (gx * xhat).mean(axis=0, dtype=DTYPE)
                _accumulate(inp, inv_std * (gx - gmean - xhat * gdot))

    else:
        inv_std = DTYPE(1.0) / np.sqrt(running_var.astype(DTYPE) + eps)
        xhat = (inp.data - running_mean.astype(DTYPE)) * inv_std
        out_data = gamma.data * xhat + beta.data

        def backward(grad: np.ndarray) -> None:
            if beta.requires_grad:
                _accumulate(beta, grad.sum(axis=0))
            if gamma.requires_grad:
                _accumulate(gamma, (grad * xhat).sum(axis=0))
            if inp.requires_grad:
                _accumulate(inp, grad * gamma.data * inv_std)

    return Tensor._result(out_data, (inp, gamma, beta), backward, "batch_norm")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits; targets are constants."""
    if logits.ndim != 1:
        raise ShapeError(f"bce_with_logits: logits must be rank 1, got {logits.shape}")
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets shape {y.shape} != logits shape {logits.shape}")
    x = logits.data
    # stable formulation: max(x,0) - x*y + log1p(exp(-|x|))
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out_data = np.asarray(loss.mean(dtype=DTYPE))
    n = DTYPE(1.0 / x.size)
    p = np.empty_like(x)
    pos = x >= 0
    p[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    p[~pos] = ex / (1.0 + ex)

    def backward(grad: np.ndarray) -> None:
        _accumulate(logits, grad * (p - y) * n)

    return Tensor._result(out_data, (logits,), backward, "bce_with_logits")


# ----------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------

@dataclass
class GradCheckResult:
    """Outcome of an analytic-vs-numeric gradient comparison.

    In 32-bit arithmetic a central difference can only resolve gradients
    down to ulp(|f|)/(2*step): below that, both the numeric quotient and
    the analytic value of a structurally-invariant direction are rounding
    residue. Coordinates where both sides fall under ``resolution`` are
    therefore verified as consistent-with-zero and counted in
    ``below_resolution``; the relative metric
    |a-n| / max(|a|, |n|, 1e-6) applies to every resolvable coordinate.
    A coordinate where only one side is below resolution fails the check.
    """

    max_rel_err: float
    worst_input: str
    worst_index: tuple
    analytic: float
    numeric: float
    tol: float
    resolution: float = 0.0
    below_resolution: int = 0
    subspace_abs_err: float = 0.0
    subspace_abs_tol: float = 0.0

    @property
    def passed(self) -> bool:
        return (self.max_rel_err <= self.tol
                and self.subspace_abs_err <= max(self.subspace_abs_tol, 0.0) + 1e-30)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = (
            f"{status} max_rel_err={self.max_rel_err:.3e} (tol {self.tol:.1e}) "
            f"worst {self.worst_input}{list(self.worst_index)} "
            f"analytic={self.analytic:.6g} numeric={self.numeric:.6g}"
        )
        if self.below_resolution:
            msg += (
                f" [{self.below_resolution} coords below resolution {self.resolution:.1e}; "
                f"directional probe err {self.subspace_abs_err:.1e} <= {self.subspace_abs_tol:.1e}]"
            )
        return msg


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


_F32_EPS = float(np.finfo(np.float32).eps)


def grad_check_params(f: Callable[[], Tensor], params: dict[str, Tensor],
                      step: float = 1e-3, tol: float = 1e-3,
                      resolution_safety: float = 4.0) -> GradCheckResult:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from the tensors in ``params`` on every
    call; the tensors' data is perturbed in place coordinate by
    coordinate. Gradients smaller than the 32-bit difference-quotient
    resolution are held to a consistency check instead of the relative
    metric (see GradCheckResult).
    """
    for t in params.values():
        t.zero_grad()
    loss = f()
    if loss.size != 1:
        raise GradientError("grad_check requires a scalar-valued function")
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}
    f0 = abs(float(loss.data.reshape(-1)[0]))
    resolution = max(f0, 1.0) * _F32_EPS / (2.0 * step) * resolution_safety

    def scalar(t: Tensor) -> float:
        return float(t.data.reshape(-1)[0])

    worst = GradCheckResult(0.0, "", (), 0.0, 0.0, tol, resolution=resolution)
    small_mask: dict[str, np.ndarray] = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        mask = np.zeros(flat.size, dtype=bool)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + DTYPE(step)
            f_plus = scalar(f())
            flat[i] = orig - DTYPE(step)
            f_minus = scalar(f())
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[i])
            if abs(a) < resolution and abs(numeric) < resolution:
                worst.below_resolution += 1
                mask[i] = True
                continue
            # one-sided near-zeros fall through: the metric flags them
            err = _rel_err(a, numeric)
            if err > worst.max_rel_err:
                idx = np.unravel_index(i, t.shape) if t.ndim else ()
                worst = GradCheckResult(err, name, tuple(int(j) for j in idx), a, numeric,
                                        tol, resolution, worst.below_resolution)
        small_mask[name] = mask

    if worst.below_resolution:
        # aggregate directional probe over the sub-resolution coordinates:
        # their joint projection is measurable even when no single entry is
        rng = np.random.default_rng(0x5EED)
        direction = {name: (rng.choice([-1.0, 1.0], size=mask.size) * mask).astype(DTYPE)
                     for name, mask in small_mask.items()}
        dd_analytic = float(sum((analytic[name].reshape(-1) * direction[name]).sum()
                                for name in params))
        originals = {name: params[name].data.copy() for name in params}
        for name, t in params.items():
            t.data.reshape(-1)[...] += DTYPE(step) * direction[name]
        f_plus = scalar(f())
        for name, t in params.items():
            t.data[...] = originals[name]
            t.data.reshape(-1)[...] -= DTYPE(step) * direction[name]
        f_minus = scalar(f())
        for name, t in params.items():
            t.data[...] = originals[name]
        dd_numeric = (f_plus - f_minus) / (2.0 * step)
        worst.subspace_abs_err = abs(dd_analytic - dd_numeric)
        worst.subspace_abs_tol = max(resolution * np.sqrt(worst.below_resolution), resolution * 4)
    return worst


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor,
               step: float = 1e-3, tol: float = 1e-3) -> GradCheckResult:
    """Single-input convenience wrapper around ``grad_check_params``."""
    if not point.requires_grad:
        point.requires_grad = True
    return grad_check_params(lambda: f(point), {"point": point}, step=step, tol=tol)

"""
Dense tensor kernel with reverse-mode differentiation.

Every exported operation is a DifferentiableOp: a forward map over numpy
arrays plus a vector-Jacobian product. Tensors are immutable; calling an op
records its parents so `gradients()` can walk the graph backwards without
touching the tensors themselves.

Complex gradients follow one convention everywhere: for a real loss L and a
complex intermediate z, the stored gradient is dL/dRe(z) + i*dL/dIm(z).
Gradients flowing into a real input keep only their real part.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from app.errors import (
    DegenerateDenominatorError,
    GradientCheckError,
    NonFiniteError,
    ShapeError,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

DIVISOR_FLOOR = 1e-12
COSINE_NORM_FLOOR = 1e-12


# =====================================
# TENSOR TYPES
# =====================================
class Tensor:
    """Immutable dense array with an optional record of how it was produced."""

    __slots__ = ("data", "parents", "op", "attrs")

    def __init__(self, data: ArrayLike, dtype: Optional[np.dtype] = None):
        arr = np.array(data, dtype=dtype)
        if arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.parents: Tuple["Tensor", ...] = ()
        self.op: Optional["DifferentiableOp"] = None
        self.attrs: Dict[str, Any] = {}

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents: Tuple["Tensor", ...] = (),
              op: Optional["DifferentiableOp"] = None,
              attrs: Optional[Dict[str, Any]] = None) -> "Tensor":
        target = Spectrum if np.iscomplexobj(arr) else Tensor
        out = object.__new__(target)
        arr = np.asarray(arr)
        arr.flags.writeable = False
        out.data = arr
        out.parents = parents
        out.op = op
        out.attrs = attrs or {}
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        """Same data, no history."""
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        origin = self.op.name if self.op is not None else "leaf"
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype}, op={origin})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class Spectrum(Tensor):
    """Complex frequency-domain array; the last two axes are the (m, n) bins."""

    __slots__ = ()

    def __init__(self, data: ArrayLike):
        super().__init__(np.asarray(data, dtype=np.complex128))

    @property
    def spatial_shape(self) -> Tuple[int, int]:
        return self.shape[-2], self.shape[-1]


def as_tensor(value: Union[Tensor, ArrayLike], dtype: Optional[np.dtype] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


# =====================================
# OPERATION BASE
# =====================================
class DifferentiableOp:
    """
    Forward map plus vector-Jacobian product.

    forward(*arrays, **attrs) -> array
    backward(arrays, out, grad, needs, **attrs) -> one gradient (or None) per input

    `needs[i]` tells backward whether input i is on a path to a requested
    gradient, so expensive branches can be skipped.
    """

    name = "op"

    def forward(self, *arrays: np.ndarray, **attrs: Any) -> np.ndarray:
        raise NotImplementedError(f"{self.name}: forward not implemented")

    def backward(self, arrays: Tuple[np.ndarray, ...], out: np.ndarray, grad: np.ndarray,
                 needs: Tuple[bool, ...], **attrs: Any) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{self.name}: backward not implemented")

    def __call__(self, *inputs: Union[Tensor, ArrayLike], **attrs: Any) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        out = self.forward(*(t.data for t in tensors), **attrs)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{self.name} produced non-finite values")
        return Tensor._wrap(out, tensors, self, attrs)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum leading axes added by suffix broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def _check_suffix_broadcast(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    longer, shorter = (a, b) if a.ndim >= b.ndim else (b, a)
    if shorter.ndim == 0 or longer.shape[longer.ndim - shorter.ndim:] == shorter.shape:
        return
    raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not suffix-compatible")


# =====================================
# POINTWISE SUITE
# =====================================
class _Add(DifferentiableOp):
    name = "add"

    def forward(self, a, b):
        _check_suffix_broadcast(self.name, a, b)
        return a + b

    def backward(self, arrays, out, grad, needs):
        a, b = arrays
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


class _Sub(DifferentiableOp):
    name = "sub"

    def forward(self, a, b):
        _check_suffix_broadcast(self.name, a, b)
        return a - b

    def backward(self, arrays, out, grad, needs):
        a, b = arrays
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)


class _Mul(DifferentiableOp):
    name = "multiply"

    def forward(self, a, b):
        _check_suffix_broadcast(self.name, a, b)
        return a * b

    def backward(self, arrays, out, grad, needs):
        a, b = arrays
        ga = _unbroadcast(grad * np.conj(b), a.shape) if needs[0] else None
        gb = _unbroadcast(grad * np.conj(a), b.shape) if needs[1] else None
        return ga, gb


class _Divide(DifferentiableOp):
    name = "divide"

    def forward(self, a, b):
        _check_suffix_broadcast(self.name, a, b)
        smallest = np.min(np.abs(b)) if b.size else np.inf
        if smallest < DIVISOR_FLOOR:
            raise DegenerateDenominatorError(
                f"divide: divisor bin magnitude {smallest:.3e} is below {DIVISOR_FLOOR:.0e}"
            )
        return a / b

    def backward(self, arrays, out, grad, needs):
        a, b = arrays
        ga = _unbroadcast(grad / np.conj(b), a.shape) if needs[0] else None
        gb = _unbroadcast(-grad * np.conj(out / b), b.shape) if needs[1] else None
        return ga, gb


class _Scale(DifferentiableOp):
    name = "scale"

    def forward(self, a, factor: float):
        return a * factor

    def backward(self, arrays, out, grad, needs, factor: float):
        return (grad * factor,)


class _AddScalar(DifferentiableOp):
    name = "add_scalar"

    def forward(self, a, value: float):
        return a + value

    def backward(self, arrays, out, grad, needs, value: float):
        return (grad,)


class _Conjugate(DifferentiableOp):
    name = "conjugate"

    def forward(self, a):
        return np.conj(a)

    def backward(self, arrays, out, grad, needs):
        return (np.conj(grad),)


class _SumChannels(DifferentiableOp):
    name = "sum_over_channels"

    def forward(self, a):
        return a.sum(axis=0)

    def backward(self, arrays, out, grad, needs):
        (a,) = arrays
        return (np.broadcast_to(grad, a.shape).copy(),)


class _ReduceSum(DifferentiableOp):
    name = "reduce_sum"

    def forward(self, a):
        return np.asarray(a.sum())

    def backward(self, arrays, out, grad, needs):
        (a,) = arrays
        return (np.full(a.shape, grad, dtype=np.result_type(a, grad)),)


class _Relu(DifferentiableOp):
    name = "relu"

    def forward(self, a):
        return np.maximum(a, 0)

    def backward(self, arrays, out, grad, needs):
        (a,) = arrays
        return (grad * (a > 0),)


class _Exp(DifferentiableOp):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, arrays, out, grad, needs):
        return (grad * out,)


class _ConcatChannels(DifferentiableOp):
    name = "concat_channels"

    def forward(self, *arrays):
        spatial = {a.shape[1:] for a in arrays}
        if len(spatial) != 1 or any(a.ndim != 3 for a in arrays):
            raise ShapeError(
                f"concat_channels: spatial shapes differ: {[a.shape for a in arrays]}"
            )
        return np.concatenate(arrays, axis=0)

    def backward(self, arrays, out, grad, needs):
        bounds = np.cumsum([a.shape[0] for a in arrays])[:-1]
        return tuple(np.split(grad, bounds, axis=0))


class _Stack(DifferentiableOp):
    name = "stack"

    def forward(self, *arrays):
        if len({a.shape for a in arrays}) != 1:
            raise ShapeError(f"stack: shapes differ: {[a.shape for a in arrays]}")
        return np.stack(arrays, axis=0)

    def backward(self, arrays, out, grad, needs):
        return tuple(grad[i] for i in range(len(arrays)))


class _SliceAxis0(DifferentiableOp):
    name = "slice"

    def forward(self, a, start: int, stop: int):
        if not 0 <= start < stop <= a.shape[0]:
            raise ShapeError(f"slice: [{start}:{stop}] out of range for axis of length {a.shape[0]}")
        return a[start:stop]

    def backward(self, arrays, out, grad, needs, start: int, stop: int):
        (a,) = arrays
        full = np.zeros(a.shape, dtype=np.result_type(a, grad))
        full[start:stop] = grad
        return (full,)


# =====================================
# CONVOLUTION
# =====================================
def _conv_geometry(x_shape, k_shape, padding: str, dilation: int, stride: int):
    if len(x_shape) != 3 or len(k_shape) != 4:
        raise ShapeError(f"conv2d: expected input [c,h,w] and kernel [o,c,k,k], got {x_shape} and {k_shape}")
    c_in, h, w = x_shape
    c_out, k_in, kh, kw = k_shape
    if k_in != c_in:
        raise ShapeError(f"conv2d: kernel expects {k_in} input channels, input has {c_in}")
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if dilation < 1 or stride < 1:
        raise ShapeError(f"conv2d: dilation and stride must be >= 1, got {dilation}, {stride}")
    if padding == "same":
        if kh % 2 == 0:
            raise ShapeError(f"conv2d: 'same' padding needs an odd kernel, got {kh}")
        pad = (kh - 1) // 2 * dilation
    elif padding == "valid":
        pad = 0
    else:
        raise ShapeError(f"conv2d: unknown padding mode {padding!r}")
    span = (kh - 1) * dilation + 1
    out_h = (h + 2 * pad - span) // stride + 1
    out_w = (w + 2 * pad - span) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d: kernel span {span} does not fit input {h}x{w}")
    return pad, out_h, out_w


def _tap_slices(u: int, v: int, dilation: int, stride: int, out_h: int, out_w: int):
    rows = slice(u * dilation, u * dilation + (out_h - 1) * stride + 1, stride)
    cols = slice(v * dilation, v * dilation + (out_w - 1) * stride + 1, stride)
    return slice(None), rows, cols


class _Conv2d(DifferentiableOp):
    """Cross-correlation of a [c,h,w] input with a [o,c,k,k] kernel."""

    name = "conv2d"

    def forward(self, x, kernel, padding="valid", dilation=1, stride=1):
        pad, out_h, out_w = _conv_geometry(x.shape, kernel.shape, padding, dilation, stride)
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
        k = kernel.shape[2]
        out = np.zeros((kernel.shape[0], out_h, out_w), dtype=np.result_type(x, kernel))
        for u in range(k):
            for v in range(k):
                patch = xp[_tap_slices(u, v, dilation, stride, out_h, out_w)]
                out += np.tensordot(kernel[:, :, u, v], patch, axes=(1, 0))
        return out

    def backward(self, arrays, out, grad, needs, padding="valid", dilation=1, stride=1):
        x, kernel = arrays
        pad, out_h, out_w = _conv_geometry(x.shape, kernel.shape, padding, dilation, stride)
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
        k = kernel.shape[2]
        gxp = np.zeros(xp.shape, dtype=np.result_type(x, grad)) if needs[0] else None
        gk = np.zeros(kernel.shape, dtype=np.result_type(kernel, grad)) if needs[1] else None
        for u in range(k):
            for v in range(k):
                sl = _tap_slices(u, v, dilation, stride, out_h, out_w)
                if gk is not None:
                    gk[:, :, u, v] = np.tensordot(grad, xp[sl], axes=([1, 2], [1, 2]))
                if gxp is not None:
                    gxp[sl] += np.tensordot(kernel[:, :, u, v], grad, axes=(0, 0))
        gx = None
        if gxp is not None:
            gx = gxp[:, pad:pad + x.shape[1], pad:pad + x.shape[2]] if pad else gxp
        return gx, gk


# =====================================
# BILINEAR SAMPLING
# =====================================
def _axis_terms(coord: np.ndarray, size: int):
    clamped = np.clip(coord, 0.0, size - 1)
    base = np.minimum(np.floor(clamped), max(size - 2, 0)).astype(np.intp)
    nxt = np.minimum(base + 1, size - 1)
    return base, nxt, clamped - base


def _sampling_matrix(rows: np.ndarray, cols: np.ndarray, h: int, w: int) -> sparse.csr_matrix:
    """Sparse [n_points, h*w] matrix of four-corner bilinear weights."""
    r0, r1, fr = _axis_terms(rows, h)
    c0, c1, fc = _axis_terms(cols, w)
    n = rows.size
    point = np.tile(np.arange(n), 4)
    flat = np.concatenate([r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1])
    weight = np.concatenate([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc])
    return sparse.coo_matrix((weight, (point, flat)), shape=(n, h * w)).tocsr()


def _axis_slope(feature: np.ndarray, coord: np.ndarray, size: int, other: np.ndarray,
                other_size: int, along_rows: bool) -> np.ndarray:
    """
    Derivative of the interpolated value along one axis, per channel and point.

    At grid nodes the derivative is the mean of the left and right slopes;
    beyond the border (clamped region) both slopes are zero.
    """
    o0, o1, fo = _axis_terms(other, other_size)
    if size < 2:
        return np.zeros((feature.shape[0], coord.size), dtype=feature.dtype)

    def segment(seg: np.ndarray, valid: np.ndarray) -> np.ndarray:
        seg = np.clip(seg, 0, size - 2)
        if along_rows:
            lo = (1 - fo) * feature[:, seg, o0] + fo * feature[:, seg, o1]
            hi = (1 - fo) * feature[:, seg + 1, o0] + fo * feature[:, seg + 1, o1]
        else:
            lo = (1 - fo) * feature[:, o0, seg] + fo * feature[:, o1, seg]
            hi = (1 - fo) * feature[:, o0, seg + 1] + fo * feature[:, o1, seg + 1]
        return (hi - lo) * valid

    right = segment(np.floor(coord).astype(np.intp), (coord >= 0) & (coord < size - 1))
    left = segment(np.ceil(coord).astype(np.intp) - 1, (coord > 0) & (coord <= size - 1))
    return 0.5 * (right + left)


class _BilinearSample(DifferentiableOp):
    """Sample a [c,h,w] map at fractional (row, col) points with border clamping."""

    name = "bilinear_sample"

    def forward(self, feature, points):
        if feature.ndim != 3 or points.ndim != 3 or points.shape[0] != 2:
            raise ShapeError(f"bilinear_sample: expected [c,h,w] and [2,h',w'], got {feature.shape}, {points.shape}")
        c, h, w = feature.shape
        rows, cols = points[0].ravel(), points[1].ravel()
        weights = _sampling_matrix(rows, cols, h, w)
        sampled = (weights @ feature.reshape(c, -1).T).T
        return sampled.reshape((c,) + points.shape[1:]).astype(np.result_type(feature, points), copy=False)

    def backward(self, arrays, out, grad, needs):
        feature, points = arrays
        c, h, w = feature.shape
        rows, cols = points[0].ravel(), points[1].ravel()
        g = grad.reshape(c, -1)
        gf = gp = None
        if needs[0]:
            weights = _sampling_matrix(rows, cols, h, w)
            gf = (weights.T @ g.T).T.reshape(feature.shape)
        if needs[1]:
            d_row = _axis_slope(feature, rows, h, cols, w, along_rows=True)
            d_col = _axis_slope(feature, cols, w, rows, h, along_rows=False)
            gp = np.stack([(g * d_row).sum(axis=0), (g * d_col).sum(axis=0)]).reshape(points.shape)
        return gf, gp


def interpolation_matrix(src: int, dst: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape [dst, src]."""
    weights = np.zeros((dst, src))
    if src == 1 or dst == 1:
        weights[:, 0] = 1.0
        return weights
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    base = np.minimum(np.floor(pos).astype(np.intp), src - 2)
    frac = pos - base
    rows = np.arange(dst)
    weights[rows, base] += 1 - frac
    weights[rows, base + 1] += frac
    return weights


class _Resize(DifferentiableOp):
    name = "resize_bilinear"

    def forward(self, x, target: Tuple[int, int]):
        if x.ndim != 3:
            raise ShapeError(f"resize_bilinear: expected [c,h,w], got {x.shape}")
        ry = interpolation_matrix(x.shape[1], target[0]).astype(x.dtype, copy=False)
        rx = interpolation_matrix(x.shape[2], target[1]).astype(x.dtype, copy=False)
        return np.einsum("ij,cjk,lk->cil", ry, x, rx, optimize=True)

    def backward(self, arrays, out, grad, needs, target: Tuple[int, int]):
        (x,) = arrays
        ry = interpolation_matrix(x.shape[1], target[0])
        rx = interpolation_matrix(x.shape[2], target[1])
        return (np.einsum("ij,cil,lk->cjk", ry, grad, rx, optimize=True),)


class _TapContract(DifferentiableOp):
    """Contract per-tap samples [K*K,c,h,w] with a [o,c,K,K] kernel."""

    name = "tap_contract"

    def forward(self, samples, kernel):
        o, c, kh, kw = kernel.shape
        if samples.ndim != 4 or samples.shape[:2] != (kh * kw, c):
            raise ShapeError(f"tap_contract: samples {samples.shape} do not match kernel {kernel.shape}")
        taps = kernel.reshape(o, c, kh * kw)
        return np.tensordot(taps, samples, axes=([1, 2], [1, 0]))

    def backward(self, arrays, out, grad, needs):
        samples, kernel = arrays
        o, c, kh, kw = kernel.shape
        gs = gk = None
        if needs[0]:
            taps = kernel.reshape(o, c, kh * kw)
            gs = np.tensordot(grad, taps, axes=(0, 0)).transpose(3, 2, 0, 1)
        if needs[1]:
            gk = np.tensordot(grad, samples, axes=([1, 2], [2, 3])).transpose(0, 2, 1).reshape(kernel.shape)
        return gs, gk


# =====================================
# FOURIER TRANSFORMS
# =====================================
class _Fft2(DifferentiableOp):
    """Unnormalized forward DFT over the last two axes."""

    name = "fft2"

    def forward(self, x):
        return np.fft.fft2(x, axes=(-2, -1))

    def backward(self, arrays, out, grad, needs):
        m, n = out.shape[-2:]
        return (np.fft.ifft2(grad, axes=(-2, -1)) * (m * n),)


class _Ifft2(DifferentiableOp):
    """Inverse DFT (carries the 1/(mn) factor); keeps the real part."""

    name = "ifft2"

    def forward(self, spectrum):
        return np.fft.ifft2(spectrum, axes=(-2, -1)).real

    def backward(self, arrays, out, grad, needs):
        m, n = out.shape[-2:]
        return (np.fft.fft2(grad, axes=(-2, -1)) / (m * n),)


# =====================================
# AGGREGATION PRIMITIVES
# =====================================
class _CosineSimilarity(DifferentiableOp):
    """Per-pixel cosine similarity across the channel axis of two [c,h,w] maps."""

    name = "cosine_similarity"

    @staticmethod
    def _parts(a, b):
        na = np.sqrt((a * a).sum(axis=0))
        nb = np.sqrt((b * b).sum(axis=0))
        valid = (na >= COSINE_NORM_FLOOR) & (nb >= COSINE_NORM_FLOOR)
        safe_a = np.where(valid, na, 1.0)
        safe_b = np.where(valid, nb, 1.0)
        return safe_a, safe_b, valid

    def forward(self, a, b):
        if a.shape != b.shape or a.ndim != 3:
            raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
        na, nb, valid = self._parts(a, b)
        return np.where(valid, (a * b).sum(axis=0) / (na * nb), 0.0)

    def backward(self, arrays, out, grad, needs):
        a, b = arrays
        na, nb, valid = self._parts(a, b)
        g = np.where(valid, grad, 0.0)
        ga = g * (b / (na * nb) - out * a / (na * na)) if needs[0] else None
        gb = g * (a / (na * nb) - out * b / (nb * nb)) if needs[1] else None
        return ga, gb


class _SoftmaxFrames(DifferentiableOp):
    """Exponentiate and normalize over axis 0."""

    name = "softmax_frames"

    def forward(self, scores):
        shifted = np.exp(scores - scores.max(axis=0, keepdims=True))
        return shifted / shifted.sum(axis=0, keepdims=True)

    def backward(self, arrays, out, grad, needs):
        return (out * (grad - (grad * out).sum(axis=0, keepdims=True)),)


class _WeightedSum(DifferentiableOp):
    """sum_t mask[t] * features[t], the mask broadcast over channels."""

    name = "weighted_sum"

    def forward(self, features, mask):
        if features.ndim != 4 or mask.shape != (features.shape[0],) + features.shape[2:]:
            raise ShapeError(f"weighted_sum: features {features.shape} vs mask {mask.shape}")
        return np.einsum("tchw,thw->chw", features, mask)

    def backward(self, arrays, out, grad, needs):
        features, mask = arrays
        gf = mask[:, None] * grad[None] if needs[0] else None
        gm = np.einsum("tchw,chw->thw", features, grad) if needs[1] else None
        return gf, gm


# =====================================
# PUBLIC FUNCTIONAL API
# =====================================
_ADD, _SUB, _MUL, _DIV = _Add(), _Sub(), _Mul(), _Divide()
_SCALE, _ADD_SCALAR, _CONJ = _Scale(), _AddScalar(), _Conjugate()
_SUM_CHANNELS, _REDUCE_SUM, _RELU, _EXP = _SumChannels(), _ReduceSum(), _Relu(), _Exp()
_CONCAT, _STACK, _SLICE = _ConcatChannels(), _Stack(), _SliceAxis0()
_CONV2D, _SAMPLE, _RESIZE, _TAP = _Conv2d(), _BilinearSample(), _Resize(), _TapContract()
_FFT2, _IFFT2 = _Fft2(), _Ifft2()
_COSINE, _SOFTMAX, _WEIGHTED_SUM = _CosineSimilarity(), _SoftmaxFrames(), _WeightedSum()


def add(a, b) -> Tensor:
    return _ADD(a, b)


def sub(a, b) -> Tensor:
    return _SUB(a, b)


def mul(a, b) -> Tensor:
    return _MUL(a, b)


def divide(a, b) -> Tensor:
    return _DIV(a, b)


def scale(a, factor: float) -> Tensor:
    return _SCALE(a, factor=float(factor))


def add_scalar(a, value: float) -> Tensor:
    return _ADD_SCALAR(a, value=float(value))


def conjugate(a) -> Tensor:
    return _CONJ(a)


def sum_over_channels(a) -> Tensor:
    return _SUM_CHANNELS(a)


def reduce_sum(a) -> Tensor:
    return _REDUCE_SUM(a)


def relu(a) -> Tensor:
    return _RELU(a)


def exp(a) -> Tensor:
    return _EXP(a)


def concat_channels(*tensors) -> Tensor:
    return _CONCAT(*tensors)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return _STACK(*tensors)


def slice_axis0(a, start: int, stop: int) -> Tensor:
    return _SLICE(a, start=int(start), stop=int(stop))


def conv2d(x, kernel, padding: str = "valid", dilation: int = 1, stride: int = 1) -> Tensor:
    return _CONV2D(x, kernel, padding=padding, dilation=int(dilation), stride=int(stride))


def bilinear_sample(feature, points) -> Tensor:
    return _SAMPLE(feature, points)


def resize_bilinear(x, target: Tuple[int, int]) -> Tensor:
    return _RESIZE(x, target=(int(target[0]), int(target[1])))


def upsample_bilinear(x, target: Tuple[int, int]) -> Tensor:
    x = as_tensor(x)
    if target[0] < x.shape[-2] or target[1] < x.shape[-1]:
        raise ShapeError(f"upsample_bilinear: target {tuple(target)} is smaller than source {x.shape[-2:]}")
    return resize_bilinear(x, target)


def tap_contract(samples, kernel) -> Tensor:
    return _TAP(samples, kernel)


def fft2(x) -> Spectrum:
    return _FFT2(x)


def ifft2(spectrum) -> Tensor:
    return _IFFT2(spectrum)


def cosine_similarity(a, b) -> Tensor:
    return _COSINE(a, b)


def softmax_frames(scores) -> Tensor:
    return _SOFTMAX(scores)


def weighted_sum(features, mask) -> Tensor:
    return _WEIGHTED_SUM(features, mask)


def imaginary_residue(spectrum: Union[Tensor, np.ndarray]) -> float:
    """Largest |imag| left after inverting a spectrum; ~0 for conjugate-symmetric input."""
    data = spectrum.data if isinstance(spectrum, Tensor) else spectrum
    return float(np.max(np.abs(np.fft.ifft2(data, axes=(-2, -1)).imag)))


# =====================================
# REVERSE PASS
# =====================================
def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack_: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    return order


def _match_kind(grad: np.ndarray, like: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(grad) and not np.iscomplexobj(like):
        return grad.real
    return grad


def gradients(output: Tensor, wrt: Sequence[Tensor],
              grad_output: Optional[ArrayLike] = None) -> List[np.ndarray]:
    """
    Vector-Jacobian product of `output` with respect to each tensor in `wrt`.

    With no `grad_output` the output must be a single element (a loss).
    Tensors in `wrt` that the output does not depend on get zero gradients.
    """
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"gradients: output of shape {output.shape} needs grad_output")
        seed = np.ones(output.shape, dtype=output.dtype)
    else:
        seed = np.asarray(grad_output)
        if seed.shape != output.shape:
            raise ShapeError(f"gradients: grad_output {seed.shape} does not match output {output.shape}")

    order = _topological_order(output)
    targets = {id(t) for t in wrt}
    depends: Dict[int, bool] = {}
    for node in order:
        depends[id(node)] = id(node) in targets or any(depends.get(id(p), False) for p in node.parents)

    grads: Dict[int, np.ndarray] = {id(output): seed}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.op is None or not depends[id(node)]:
            continue
        needs = tuple(depends[id(p)] for p in node.parents)
        parent_grads = node.op.backward(tuple(p.data for p in node.parents), node.data, g, needs, **node.attrs)
        for parent, pg, need in zip(node.parents, parent_grads, needs):
            if pg is None or not need:
                continue
            pg = _match_kind(pg, parent.data)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
        if id(node) not in targets:
            del grads[id(node)]

    return [grads.get(id(t), np.zeros(t.shape, dtype=t.dtype)) for t in wrt]


# =====================================
# FINITE-DIFFERENCE CHECK
# =====================================
@dataclass
class FiniteDiffReport:
    max_error: float
    input_index: int
    coordinate: Tuple[int, ...]
    checked: int


# below this magnitude a gradient counts as zero
GRADIENT_FLOOR = 1e-7


def relative_error(analytic: float, numeric: float, scale: float = 0.0) -> float:
    """
    |a - n| / max(|a|, |n|, scale, GRADIENT_FLOOR).

    `scale` is the largest analytic gradient magnitude of the tensor being
    checked, so near-zero coordinates are judged against that tensor's
    gradient size rather than their own.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), scale, GRADIENT_FLOOR)


def _projected_loss(out: np.ndarray, weights: np.ndarray) -> float:
    return float(np.real(np.sum(np.conj(weights) * out)))


def finite_diff_check(op: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-6,
                      max_coords: int = 1000, seed: int = 0,
                      check_inputs: Optional[Sequence[int]] = None) -> FiniteDiffReport:
    """
    Compare the analytic VJP of `op` against central differences.

    The output is projected onto a fixed random direction so one backward
    pass covers every input coordinate. Inputs with more than `max_coords`
    coordinates are checked on a random subsample.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"finite_diff_check: eps {eps} outside [1e-7, 1e-4]")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)

    leaves = [Tensor(a) for a in arrays]
    out = op(*leaves)
    direction = rng.standard_normal(out.shape)
    if np.iscomplexobj(out.data):
        direction = direction + 1j * rng.standard_normal(out.shape)
    analytic = gradients(out, leaves, grad_output=direction)

    indices = range(len(arrays)) if check_inputs is None else check_inputs
    worst = FiniteDiffReport(0.0, -1, (), 0)
    for i in indices:
        grad = analytic[i]
        if not np.all(np.isfinite(grad)):
            bad = tuple(int(v) for v in np.argwhere(~np.isfinite(grad))[0])
            raise GradientCheckError(f"non-finite analytic gradient for input {i} at {bad}",
                                     input_index=i, coordinate=bad)
        grad_scale = float(np.max(np.abs(grad))) if grad.size else 0.0
        total = arrays[i].size
        flat_ids = np.arange(total) if total <= max_coords else rng.choice(total, size=max_coords, replace=False)
        for flat in flat_ids:
            coord = np.unravel_index(int(flat), arrays[i].shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][coord] += eps
            minus[i][coord] -= eps
            f_plus = _projected_loss(op(*[Tensor(a) for a in plus]).data, direction)
            f_minus = _projected_loss(op(*[Tensor(a) for a in minus]).data, direction)
            numeric = (f_plus - f_minus) / (2 * eps)
            err = relative_error(float(grad[coord]), numeric, grad_scale)
            worst.checked += 1
            if err > worst.max_error:
                worst = FiniteDiffReport(err, i, tuple(int(c) for c in coord), worst.checked)
    logger.debug(f"finite_diff_check: max relative error {worst.max_error:.3e} over {worst.checked} coordinates")
    return worst

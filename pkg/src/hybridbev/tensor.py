"""Dense float tensors and the differentiable primitives the rest of the package composes.

Tensors are plain row-major ``numpy.ndarray`` objects (float64 unless a caller
asks otherwise).  Every primitive comes as a forward function plus a
hand-written ``*_backward`` that maps an upstream gradient to input gradients.
There is no tape; composite blocks chain these by hand.
"""
from __future__ import annotations

import contextlib
import os
import struct
from typing import BinaryIO, Callable, Iterator, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

DEFAULT_DTYPE = np.float64
_DEBUG = os.environ.get("HYBRIDBEV_DEBUG", "") not in ("", "0")


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class EvaluationError(RuntimeError):
    """Raised when a function under gradient check produces a non-finite value."""


# --------------------------------------------------------------------------
# multiply-accumulate accounting

class MacCounter:
    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)


_mac_counter: Optional[MacCounter] = None


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates issued by primitives inside the block."""
    global _mac_counter
    prev = _mac_counter
    _mac_counter = MacCounter()
    try:
        yield _mac_counter
    finally:
        _mac_counter = prev


def add_macs(n: int) -> None:
    if _mac_counter is not None:
        _mac_counter.add(n)


def _check_finite(x: np.ndarray, name: str) -> np.ndarray:
    if _DEBUG and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced by {name}")
    return x


# --------------------------------------------------------------------------
# matmul / linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    add_macs(a.shape[0] * a.shape[1] * b.shape[1])
    return _check_finite(a @ b, "matmul")


def matmul_backward(dout: Tensor, a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    return dout @ b.T, a.T @ dout


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (N, in) and ``w`` of shape (in, out)."""
    y = matmul(x, w)
    if b is not None:
        y = y + b
    return y


def linear_backward(dout: Tensor, x: Tensor, w: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    dx, dw = matmul_backward(dout, x, w)
    return dx, dw, dout.sum(axis=0)


# --------------------------------------------------------------------------
# pointwise

def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(dout: Tensor, x: Tensor) -> Tensor:
    return dout * (x > 0)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dout: Tensor, y: Tensor) -> Tensor:
    return dout * y * (1.0 - y)


def softplus(x: Tensor) -> Tensor:
    return np.logaddexp(0.0, x)


# --------------------------------------------------------------------------
# softmax

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return _check_finite(e / e.sum(axis=axis, keepdims=True), "softmax")


def softmax_backward(dout: Tensor, y: Tensor, axis: int = -1) -> Tensor:
    return y * (dout - np.sum(dout * y, axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# convolution (single sample, C x H x W)

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: Tensor, kh: int, kw: int, stride: int, pad: int) -> Tuple[Tensor, int, int]:
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    # (C, Ho, Wo, kh, kw) -> (C*kh*kw, Ho*Wo)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    return cols, ho, wo


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C_in, H, W) with ``w`` (C_out, C_in, kh, kw)."""
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d expects x (C,H,W) and w (O,C,kh,kw); got {x.shape}, {w.shape}")
    cout, cin, kh, kw = w.shape
    if x.shape[0] != cin:
        raise DimensionError(f"conv2d channel mismatch: input has {x.shape[0]}, kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError("conv2d kernels must have odd extents")
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    out = matmul(w.reshape(cout, -1), cols).reshape(cout, ho, wo)
    if b is not None:
        out = out + b[:, None, None]
    return out


def conv2d_backward(
    dout: Tensor, x: Tensor, w: Tensor, stride: int = 1, pad: int = 0
) -> Tuple[Tensor, Tensor, Tensor]:
    cout, cin, kh, kw = w.shape
    c, h, wd = x.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    d2 = dout.reshape(cout, ho * wo)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dcols = (w.reshape(cout, -1).T @ d2).reshape(cin, kh, kw, ho, wo)
    dxp = np.zeros((c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    dx = dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw, db


def conv1x1(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Pointwise conv with ``w`` of shape (C_out, C_in)."""
    c, h, wd = x.shape
    if w.shape[1] != c:
        raise DimensionError(f"conv1x1 channel mismatch: input has {c}, kernel expects {w.shape[1]}")
    out = matmul(w, x.reshape(c, h * wd)).reshape(w.shape[0], h, wd)
    if b is not None:
        out = out + b[:, None, None]
    return out


def conv1x1_backward(dout: Tensor, x: Tensor, w: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    c, h, wd = x.shape
    d2 = dout.reshape(w.shape[0], h * wd)
    x2 = x.reshape(c, h * wd)
    return (w.T @ d2).reshape(x.shape), d2 @ x2.T, d2.sum(axis=1)


# --------------------------------------------------------------------------
# inference-mode batch norm: fixed statistics, learnable affine

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mean: Tensor, var: Tensor, eps: float = 1e-5) -> Tensor:
    scale = gamma / np.sqrt(var + eps)
    return (x - mean[:, None, None]) * scale[:, None, None] + beta[:, None, None]


def batchnorm_backward(
    dout: Tensor, x: Tensor, gamma: Tensor, mean: Tensor, var: Tensor, eps: float = 1e-5
) -> Tuple[Tensor, Tensor, Tensor]:
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None, None]) * inv[:, None, None]
    dx = dout * (gamma * inv)[:, None, None]
    return dx, (dout * xhat).sum(axis=(1, 2)), dout.sum(axis=(1, 2))


# --------------------------------------------------------------------------
# finite-difference gradient check

def grad_check(
    f: Callable[[Tensor], Tuple[float, Tensor]],
    x: Tensor,
    eps: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
) -> float:
    """Worst relative error between ``f``'s analytic gradient and central differences.

    ``f`` maps ``x`` to ``(value, grad)``.  ``coords`` restricts the check to a
    subset of flat indices; by default every coordinate is perturbed.  The
    relative error of a coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    value, analytic = f(x.copy())
    if not np.isfinite(value):
        raise EvaluationError("f(x) is not finite")
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if analytic.size != x.size:
        raise DimensionError(f"gradient has {analytic.size} entries, x has {x.size}")
    flat = x.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x.copy())[0]
        flat[i] = orig - eps
        fm = f(x.copy())[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite value while perturbing coordinate {i}")
        numeric = (fp - fm) / (2 * eps)
        a = analytic[i]
        denom = max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, abs(a - numeric) / denom)
    return worst


# --------------------------------------------------------------------------
# binary tensor blocks: u32 rank, u32 extents, little-endian float64 payload

def write_tensor(fh: BinaryIO, x: Tensor) -> None:
    x = np.asarray(x, dtype="<f8")
    fh.write(struct.pack("<I", x.ndim))
    fh.write(struct.pack(f"<{x.ndim}I", *x.shape))
    fh.write(x.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> Tensor:
    head = fh.read(4)
    if len(head) != 4:
        raise EOFError("truncated tensor block")
    (rank,) = struct.unpack("<I", head)
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    n = int(np.prod(shape)) if rank else 1
    payload = fh.read(8 * n)
    if len(payload) != 8 * n:
        raise EOFError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def save_tensor(path: str | os.PathLike, x: Tensor) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, x)


def load_tensor(path: str | os.PathLike) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)

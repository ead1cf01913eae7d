"""Dense float64 tensor helpers.

Tensors are plain ``numpy`` arrays of dtype float64 in row-major order.
Feature maps use axis order (H, W, C); convolution kernels use (h, w, C, F).
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when tensor extents do not line up."""


class NonFiniteError(ValueError):
    """Raised when a tensor carries NaN or Inf."""


def as_tensor(x, name="x"):
    """Convert ``x`` to a finite, non-empty float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.size == 0 or any(d < 1 for d in arr.shape):
        raise ShapeError(f"{name}: every extent must be >= 1, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: contains NaN or Inf")
    return arr


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def hadamard(a, b):
    a, b = as_tensor(a, "a"), as_tensor(b, "b")
    _same_shape(a, b)
    return a * b


def add(a, b):
    a, b = as_tensor(a, "a"), as_tensor(b, "b")
    _same_shape(a, b)
    return a + b


def scale(a, s):
    return as_tensor(a, "a") * float(s)


def square(a):
    a = as_tensor(a, "a")
    return a * a


def flatten(x):
    return np.ascontiguousarray(as_tensor(x)).reshape(-1)


def check_conv_shapes(x_shape, w_shape, b_len=None):
    """Validate (H, W, C) input against an (h, w, C, F) kernel.

    Returns the output shape ``(H - h + 1, W - w + 1, F)``.
    """
    if len(x_shape) != 3:
        raise ShapeError(f"conv input must be rank 3 (H, W, C), got rank {len(x_shape)}")
    if len(w_shape) != 4:
        raise ShapeError(f"conv kernel must be rank 4 (h, w, C, F), got rank {len(w_shape)}")
    H, W, C = x_shape
    kh, kw, kc, F = w_shape
    if kh > H:
        raise ShapeError(f"axis 0 (height): kernel {kh} exceeds input {H}")
    if kw > W:
        raise ShapeError(f"axis 1 (width): kernel {kw} exceeds input {W}")
    if kc != C:
        raise ShapeError(f"axis 2 (channels): kernel has {kc}, input has {C}")
    if b_len is not None and b_len != F:
        raise ShapeError(f"axis 3 (filters): bias has {b_len}, kernel has {F}")
    return (H - kh + 1, W - kw + 1, F)


def patches(x, kh, kw):
    """Receptive fields of ``x`` (..., H, W, C) as (..., H', W', kh*kw*C).

    The flattened patch order is (dh, dw, c), matching ``w.reshape(-1, F)``.
    """
    x = np.ascontiguousarray(x)
    *lead, H, W, C = x.shape
    *lead_strides, sh, sw, sc = x.strides
    view = as_strided(
        x,
        shape=(*lead, H - kh + 1, W - kw + 1, kh, kw, C),
        strides=(*lead_strides, sh, sw, sh, sw, sc),
        writeable=False,
    )
    return view.reshape(*lead, H - kh + 1, W - kw + 1, kh * kw * C)


def conv2d_valid(x, w, b):
    """Stride-1, unpadded 2-D cross-correlation plus per-filter bias."""
    x = as_tensor(x, "x")
    w = as_tensor(w, "w")
    b = as_tensor(b, "b").reshape(-1)
    check_conv_shapes(x.shape, w.shape, b.shape[0])
    kh, kw, _, F = w.shape
    return patches(x, kh, kw) @ w.reshape(-1, F) + b

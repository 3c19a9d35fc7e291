"""Layer primitives with hand-written adjoints.

Every primitive comes as a pair ``op(...) -> (out, cache)`` and
``op_backward(dout, cache) -> grads``.  Tensors are plain ``numpy.ndarray``
objects in N x C x H x W layout; the cache is whatever the adjoint needs so
that it never has to recompute the forward output.  All functions follow the
dtype of their inputs (float32 for training, float64 for gradient checks).
"""

from itertools import product

import numpy as np

_TAPS = tuple(product(range(3), range(3)))


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


def _check_ndim(name, arr, ndim):
    if arr.ndim != ndim:
        raise ShapeError(f"{name}: expected {ndim} dimensions, got shape {arr.shape}")


def conv2d(x, w, b):
    """3x3 same-size cross-correlation with zero padding of one pixel.

    x: (N, C, H, W), w: (K, C, 3, 3), b: (K,)  ->  (N, K, H, W)
    """
    _check_ndim("conv2d input", x, 4)
    _check_ndim("conv2d weight", w, 4)
    N, C, H, W = x.shape
    K, Cw, kh, kw = w.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d: kernel must be 3x3, got {kh}x{kw}")
    if Cw != C:
        raise ShapeError(f"conv2d: input channels {C} != weight in-channels {Cw}")
    if b.shape != (K,):
        raise ShapeError(f"conv2d: bias length {b.shape} != out-channels {K}")

    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # channel-major columns: one GEMM covers the whole batch
    cols = np.empty((C, 9, N, H, W), dtype=x.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for k, (i, j) in enumerate(_TAPS):
        cols[:, k] = xt[:, :, i:i + H, j:j + W]
    cols = cols.reshape(C * 9, N * H * W)
    out = w.reshape(K, C * 9) @ cols
    out += b[:, None]
    out = out.reshape(K, N, H, W).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), (cols, w, x.shape)


def conv2d_backward(dout, cache):
    cols, w, (N, C, H, W) = cache
    K = w.shape[0]
    d = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(K, N * H * W)
    dw = (d @ cols.T).reshape(w.shape)
    db = d.sum(axis=1)
    dcols = (w.reshape(K, C * 9).T @ d).reshape(C, 9, N, H, W)
    dxp = np.zeros((C, N, H + 2, W + 2), dtype=dout.dtype)
    for k, (i, j) in enumerate(_TAPS):
        dxp[:, :, i:i + H, j:j + W] += dcols[:, k]
    return np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)), dw, db


def conv1x1(x, w, b):
    """Per-pixel linear map across channels.  w: (K, C, 1, 1)."""
    _check_ndim("conv1x1 input", x, 4)
    _check_ndim("conv1x1 weight", w, 4)
    N, C, H, W = x.shape
    K, Cw, kh, kw = w.shape
    if (kh, kw) != (1, 1):
        raise ShapeError(f"conv1x1: kernel must be 1x1, got {kh}x{kw}")
    if Cw != C:
        raise ShapeError(f"conv1x1: input channels {C} != weight in-channels {Cw}")
    if b.shape != (K,):
        raise ShapeError(f"conv1x1: bias length {b.shape} != out-channels {K}")
    xf = x.reshape(N, C, H * W)
    out = np.matmul(w.reshape(K, C), xf)
    out += b[None, :, None]
    return out.reshape(N, K, H, W), (xf, w, x.shape)


def conv1x1_backward(dout, cache):
    xf, w, (N, C, H, W) = cache
    K = w.shape[0]
    d = dout.reshape(N, K, H * W)
    dw = np.tensordot(d, xf, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = d.sum(axis=(0, 2))
    dx = np.matmul(w.reshape(K, C).T, d).reshape(N, C, H, W)
    return dx, dw, db


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def maxpool2(x):
    """2x2 max pooling with stride 2.  Ties go to the first cell in row-major order."""
    _check_ndim("maxpool2 input", x, 4)
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got H={H}, W={W}")
    win = (x.reshape(N, C, H // 2, 2, W // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(N, C, H // 2, W // 2, 4))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout, cache):
    idx, (N, C, H, W) = cache
    win = np.zeros((N, C, H // 2, W // 2, 4), dtype=dout.dtype)
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    dx = (win.reshape(N, C, H // 2, W // 2, 2, 2)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(N, C, H, W))
    return dx


def upconv2(x, w, b):
    """Transposed convolution, 2x2 kernel, stride 2.

    x: (N, C, H, W), w: (C, K, 2, 2), b: (K,)  ->  (N, K, 2H, 2W)
    Each input pixel paints one non-overlapping 2x2 output block.
    """
    _check_ndim("upconv2 input", x, 4)
    _check_ndim("upconv2 weight", w, 4)
    N, C, H, W = x.shape
    Cw, K, kh, kw = w.shape
    if (kh, kw) != (2, 2):
        raise ShapeError(f"upconv2: kernel must be 2x2, got {kh}x{kw}")
    if Cw != C:
        raise ShapeError(f"upconv2: input channels {C} != weight in-channels {Cw}")
    if b.shape != (K,):
        raise ShapeError(f"upconv2: bias length {b.shape} != out-channels {K}")
    xf = x.reshape(N, C, H * W)
    y = np.matmul(w.reshape(C, K * 4).T, xf)
    y = (y.reshape(N, K, 2, 2, H, W)
          .transpose(0, 1, 4, 2, 5, 3)
          .reshape(N, K, 2 * H, 2 * W))
    y += b[None, :, None, None]
    return y, (xf, w, x.shape)


def upconv2_backward(dout, cache):
    xf, w, (N, C, H, W) = cache
    K = w.shape[1]
    g = (dout.reshape(N, K, H, 2, W, 2)
             .transpose(0, 1, 3, 5, 2, 4)
             .reshape(N, K * 4, H * W))
    wm = w.reshape(C, K * 4)
    dx = np.matmul(wm, g).reshape(N, C, H, W)
    dw = np.tensordot(xf, g, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


def concat_channels(a, b):
    """Concatenate along the channel axis, ``a`` first."""
    _check_ndim("concat first input", a, 4)
    _check_ndim("concat second input", b, 4)
    for axis, label in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"concat_channels: {label} mismatch {a.shape[axis]} != {b.shape[axis]}"
            )
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_channels_backward(dout, split):
    return dout[:, :split], dout[:, split:]


def softmax_channels(logits):
    """Per-pixel softmax over axis 1, max-subtracted."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return p, p


def softmax_channels_backward(dout, p):
    return p * (dout - (dout * p).sum(axis=1, keepdims=True))

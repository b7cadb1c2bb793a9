"""Forward and backward passes for the layers used by HSI-CNN.

Every function accepts optional leading batch axes in front of the
per-sample shape given in its docstring, so the same code serves a single
3x3xB patch and a (N, 3, 3, B) mini-batch.  Functions never mutate their
inputs; backward functions return parameter gradients summed over the
batch axes.

Tensors are plain ``numpy.ndarray`` objects; a ``LayerParams`` pairs the
weights and biases of one layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, LabelError


@dataclass
class LayerParams:
    weights: np.ndarray
    biases: np.ndarray

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.biases.copy())

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(self.weights.astype(dtype), self.biases.astype(dtype))

    @property
    def size(self) -> int:
        return self.weights.size + self.biases.size


# gradients share the parameter container: one LayerParams per layer name
GradientSet = dict


def conv_output_length(size: int, kernel: int, stride: int) -> int:
    """Length of a valid (unpadded) convolution or pooling output."""
    return (size - kernel) // stride + 1


# ---------------------------------------------------------------------------
# Conv1: 3x3xk kernels sliding along the spectral axis of a 3x3xB patch
# ---------------------------------------------------------------------------

def _spectral_columns(patch, kernel_height, stride):
    # (..., 3, 3, B) -> (..., L, 3*3*k)
    win = sliding_window_view(patch, kernel_height, axis=-1)[..., ::stride, :]
    win = np.moveaxis(win, -2, -4)
    return win.reshape(win.shape[:-3] + (-1,))


def _check_spectral(patch, params, stride):
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if patch.ndim < 3:
        raise DimensionError("patch must have shape (..., h, w, bands)", actual=patch.shape)
    kh, kw, k = params.weights.shape[1:]
    if patch.shape[-3:-1] != (kh, kw):
        raise DimensionError(
            f"patch spatial size {patch.shape[-3:-1]} does not match kernel {(kh, kw)}",
            expected=(kh, kw), actual=patch.shape[-3:-1])
    if patch.shape[-1] < k:
        raise DimensionError(
            f"patch has {patch.shape[-1]} bands, fewer than kernel height {k}",
            expected=k, actual=patch.shape[-1])


def conv_spectral_forward(patch, params: LayerParams, stride: int) -> np.ndarray:
    """Spectral convolution of a (3, 3, B) patch with (n1, 3, 3, k) kernels.

    Returns an (n1, L) array with ``L = (B - k) // stride + 1``; row ``i`` is
    the feature vector produced by kernel ``i``.
    """
    _check_spectral(patch, params, stride)
    n1 = params.weights.shape[0]
    k = params.weights.shape[-1]
    cols = _spectral_columns(patch, k, stride)
    out = cols @ params.weights.reshape(n1, -1).T + params.biases
    return np.swapaxes(out, -1, -2)


def conv_spectral_backward(grad_out, patch, params: LayerParams, stride: int):
    """Gradients of :func:`conv_spectral_forward`.

    Returns ``(LayerParams of gradients, gradient w.r.t. patch)``.
    """
    _check_spectral(patch, params, stride)
    n1 = params.weights.shape[0]
    k = params.weights.shape[-1]
    w = params.weights.reshape(n1, -1)
    g = np.swapaxes(grad_out, -1, -2)  # (..., L, n1)
    cols = _spectral_columns(patch, k, stride)
    g2 = g.reshape(-1, n1)
    dw = (g2.T @ cols.reshape(-1, cols.shape[-1])).reshape(params.weights.shape)
    db = g2.sum(axis=0)

    dcols = (g @ w).reshape(g.shape[:-1] + params.weights.shape[1:])  # (..., L, 3, 3, k)
    dpatch = np.zeros_like(patch, dtype=dcols.dtype)
    for j in range(dcols.shape[-4]):
        dpatch[..., j * stride:j * stride + k] += dcols[..., j, :, :, :]
    return LayerParams(dw, db), dpatch


# ---------------------------------------------------------------------------
# Reshape layer: stack the n1 spectral feature vectors as matrix columns
# ---------------------------------------------------------------------------

def reshape_stack(vectors) -> np.ndarray:
    """Turn Conv1's (n1, L) output into an (L, n1) single-channel image."""
    if vectors.ndim < 2:
        raise DimensionError("expected at least a 2-D (n1, L) array", actual=vectors.shape)
    return np.swapaxes(vectors, -1, -2)


def reshape_stack_backward(grad_out) -> np.ndarray:
    return np.swapaxes(grad_out, -1, -2)


# ---------------------------------------------------------------------------
# Conv2: single-channel valid 2-D convolution with C square kernels
# ---------------------------------------------------------------------------

def _image_columns(x, kh, kw, stride):
    win = sliding_window_view(x, (kh, kw), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    return win.reshape(win.shape[:-2] + (kh * kw,))


def _check_conv2d(x, params, stride):
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    kh, kw = params.weights.shape[1:]
    if x.ndim < 2 or x.shape[-2] < kh or x.shape[-1] < kw:
        raise DimensionError(
            f"input {x.shape[-2:]} is smaller than the {kh}x{kw} kernel",
            expected=(kh, kw), actual=x.shape)


def conv2d_forward(matrix, params: LayerParams, stride: int) -> np.ndarray:
    """Valid convolution of an (H, W) image with (C, kh, kw) kernels -> (H2, W2, C)."""
    _check_conv2d(matrix, params, stride)
    c, kh, kw = params.weights.shape
    cols = _image_columns(matrix, kh, kw, stride)
    return cols @ params.weights.reshape(c, -1).T + params.biases


def conv2d_backward(grad_out, matrix, params: LayerParams, stride: int):
    _check_conv2d(matrix, params, stride)
    c, kh, kw = params.weights.shape
    w = params.weights.reshape(c, -1)
    cols = _image_columns(matrix, kh, kw, stride)
    g2 = grad_out.reshape(-1, c)
    dw = (g2.T @ cols.reshape(-1, kh * kw)).reshape(params.weights.shape)
    db = g2.sum(axis=0)

    dcols = grad_out @ w  # (..., H2, W2, kh*kw)
    h2, w2 = grad_out.shape[-3:-1]
    dx = np.zeros_like(matrix, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[..., i:i + stride * (h2 - 1) + 1:stride,
               j:j + stride * (w2 - 1) + 1:stride] += dcols[..., i * kw + j]
    return LayerParams(dw, db), dx


# ---------------------------------------------------------------------------
# Max pooling over (H, W, C) maps
# ---------------------------------------------------------------------------

def _window_slices(h, w, window, stride):
    ho = conv_output_length(h, window, stride)
    wo = conv_output_length(w, window, stride)
    for i in range(window):
        for j in range(window):
            yield i, j, (Ellipsis, slice(i, i + stride * (ho - 1) + 1, stride),
                         slice(j, j + stride * (wo - 1) + 1, stride), slice(None))


def maxpool2d_forward(x, window: int = 2, stride: int = 2):
    """Max pooling of an (H, W, C) map.

    Returns ``(pooled, argmax)`` where ``argmax`` holds, for each output cell,
    the flat row-major index into the per-sample (H, W, C) input of the
    winning element.  Ties go to the first element in scan order; trailing
    rows/columns that do not fill a window are dropped.
    """
    h, w, c = x.shape[-3:]
    if h < window or w < window:
        raise DimensionError(f"pooling input {h}x{w} smaller than window {window}",
                             expected=window, actual=(h, w))
    slices = list(_window_slices(h, w, window, stride))
    views = [x[sl] for _, _, sl in slices]
    pooled = views[0].copy()
    for v in views[1:]:
        np.maximum(pooled, v, out=pooled)
    # window offset of the first maximum in scan order:
    # pos = m0 * (1 + m1 * (1 + m2 * ...)) with mk = "view k is not the max"
    pos = np.zeros(pooled.shape, dtype=np.uint8)
    for v in reversed(views[:-1]):
        pos += 1
        pos *= (v != pooled).view(np.uint8)

    ho, wo = pooled.shape[-3:-1]
    offsets = np.array([(i * w + j) * c for i, j, _ in slices], dtype=np.int32)
    base = ((np.arange(ho, dtype=np.int32)[:, None, None] * w
             + np.arange(wo, dtype=np.int32)[None, :, None]) * stride * c
            + np.arange(c, dtype=np.int32))
    argmax = np.take(offsets, pos)
    argmax += base
    return pooled, argmax


def maxpool2d_backward(grad_out, argmax, input_shape, window: int = 2, stride: int = 2) -> np.ndarray:
    """Route each pooled gradient back to the input element that won."""
    input_shape = tuple(input_shape)
    per_sample = int(np.prod(input_shape[-3:]))
    n = int(np.prod(input_shape[:-3], dtype=np.int64))
    idx = argmax.reshape(n, -1)
    g = grad_out.reshape(n, -1)
    if stride >= window:
        # windows are disjoint, so every input element receives at most one value
        dx = np.zeros((n, per_sample), dtype=grad_out.dtype)
        np.put_along_axis(dx, idx.astype(np.intp), g, axis=1)
        return dx.reshape(input_shape)
    flat = idx + (np.arange(n, dtype=np.int64) * per_sample)[:, None]
    dx = np.bincount(flat.ravel(), weights=g.ravel(), minlength=n * per_sample)
    return dx.astype(grad_out.dtype, copy=False).reshape(input_shape)


# ---------------------------------------------------------------------------
# Fully connected, ReLU, softmax + cross-entropy
# ---------------------------------------------------------------------------

def fc_forward(x, params: LayerParams) -> np.ndarray:
    """``W @ x + b`` for an (m, n) weight matrix."""
    n = params.weights.shape[1]
    if x.shape[-1] != n:
        raise DimensionError(f"input length {x.shape[-1]} != weight columns {n}",
                             expected=n, actual=x.shape[-1])
    return x @ params.weights.T + params.biases


def fc_backward(grad_out, x, params: LayerParams):
    m, n = params.weights.shape
    g2 = grad_out.reshape(-1, m)
    dw = g2.T @ x.reshape(-1, n)
    db = g2.sum(axis=0)
    # transposed product: OpenBLAS is markedly faster in this orientation
    dx = (params.weights.T @ np.ascontiguousarray(g2.T)).T.reshape(grad_out.shape[:-1] + (n,))
    return LayerParams(dw, db), dx


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out, x) -> np.ndarray:
    return grad_out * (x > 0)


def _check_labels(label, n_classes):
    label = np.asarray(label)
    if not np.issubdtype(label.dtype, np.integer):
        raise LabelError(f"labels must be integers, got dtype {label.dtype}")
    bad = (label < 0) | (label >= n_classes)
    if np.any(bad):
        first = int(label[bad].ravel()[0])
        raise LabelError(f"label {first} outside [0, {n_classes})", label=first)
    return label


def softmax_xent(logits, label):
    """Softmax probabilities and cross-entropy loss ``-log p[label]``.

    With a batch of logits ``label`` is an integer array and the returned
    loss is per sample.
    """
    label = _check_labels(label, logits.shape[-1])
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=-1, keepdims=True)
    probs = e / total
    picked = np.take_along_axis(z, label[..., None], axis=-1)[..., 0]
    loss = np.log(total[..., 0]) - picked
    return loss, probs


def softmax_xent_backward(probs, label) -> np.ndarray:
    """Gradient of the cross-entropy loss with respect to the logits."""
    label = _check_labels(label, probs.shape[-1])
    grad = probs.copy()
    np.put_along_axis(grad, label[..., None], np.take_along_axis(grad, label[..., None], -1) - 1, -1)
    return grad

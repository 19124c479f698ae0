"""Differentiable operations over :class:`Tensor`.

Each function computes its forward value with numpy and, when any input
tracks gradients, attaches a closure returning the input gradients.
Broadcasting follows numpy rules; gradients are summed back to input shape.
"""

from __future__ import annotations

import builtins

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, make_result, record_flops

# Most negative finite float64; used as the "minus infinity" logit sentinel so
# that softmax/argmax arithmetic stays finite.
NEG_SENTINEL = float(np.finfo(DTYPE).min)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out = a.data**p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return make_result(out, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken to be 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) computed without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return (g * _sigmoid_np(-x),)

    return make_result(out, (a,), backward, "log_sigmoid")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant boolean array."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "where")


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by the constant ``value``."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, a.data)

    def backward(g):
        return (_unbroadcast(np.where(mask, 0.0, g), a.shape),)

    return make_result(out, (a,), backward, "masked_fill")


# -- reductions ----------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_result(out, (a,), backward, "mean")


# -- shape manipulation --------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return make_result(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    perm = list(range(a.ndim))
    perm[ax1], perm[ax2] = perm[ax2], perm[ax1]
    return transpose(a, perm)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    return make_result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return builtins.any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = a.data[index]
    advanced = _is_advanced(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return make_result(np.array(out, dtype=DTYPE), (a,), backward, "getitem")


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_result(out, tuple(tensors), backward, "concatenate")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(out, tuple(tensors), backward, "stack")


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading (batch) axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    record_flops("matmul", 2 * m * k * n * int(np.prod(out.shape[:-2], dtype=np.int64)))

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


# -- normalisation / probability ----------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        gx = g * out
        gx -= out * gx.sum(axis=axis, keepdims=True)
        return (gx,)

    return make_result(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), backward, "log_softmax")


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = a.shape[-1]

    def backward(g):
        return (inv / d * (d * g - g.sum(-1, keepdims=True) - xhat * (g * xhat).sum(-1, keepdims=True)),)

    out = make_result(xhat, (a,), backward, "layer_norm")
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


# -- spatial ops ---------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over ``x`` of shape (N, C, H, W) or (C, H, W).

    ``w`` has shape (C_out, C_in // groups, kh, kw). Only ``groups == 1`` and
    depthwise (``groups == C_in == C_out``) are supported.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), w, b, stride, padding, groups)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ShapeError(f"kernel {(kh, kw)} larger than padded input {(h + 2 * padding, wd + 2 * padding)}")
    if groups == 1:
        if ci != c:
            raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
        out = _conv_dense(x, w, stride, padding)
    elif groups == c and co == c and ci == 1:
        out = _conv_depthwise(x, w, stride, padding)
    else:
        raise ShapeError(f"unsupported groups={groups} for input {x.shape} and kernel {w.shape}")
    if b is not None:
        out = add(out, reshape(as_tensor(b), (1, co, 1, 1)))
    return out


def _conv_dense(x: Tensor, w: Tensor, stride: int, padding: int) -> Tensor:
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    record_flops("conv2d", 2 * n * ho * wo * co * c * kh * kw)
    wm = w.data.reshape(co, -1)

    # columns laid out (N, C*kh*kw, Ho*Wo) so each kernel offset is a slab copy
    # and the batched product lands directly in NCHW order
    if kh == 1 and kw == 1 and padding == 0:
        cols = np.ascontiguousarray(x.data[:, :, ::stride, ::stride]).reshape(n, c, ho * wo)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols6 = np.empty((n, c, kh, kw, ho, wo))
        for i in range(kh):
            for j in range(kw):
                cols6[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols = cols6.reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(wm, cols).reshape(n, co, ho, wo)

    def backward(g):
        gm = g.reshape(n, co, ho * wo)
        gw = None
        if w.requires_grad:
            gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wm.T, gm)
            if kh == 1 and kw == 1 and padding == 0:
                gx = np.zeros_like(x.data)
                gx[:, :, ::stride, ::stride] = dcols.reshape(n, c, ho, wo)
            else:
                dcols = dcols.reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        return gx, gw

    return make_result(out, (x, w), backward, "conv2d")


def _conv_depthwise(x: Tensor, w: Tensor, stride: int, padding: int) -> Tensor:
    n, c, h, wd = x.shape
    _, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    record_flops("conv2d_depthwise", 2 * n * ho * wo * c * kh * kw)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wk = w.data[:, 0]
    out = np.zeros((n, c, ho, wo))
    for i in range(kh):
        for j in range(kw):
            out += wk[None, :, i, j, None, None] * xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]

    def backward(g):
        gw = np.zeros_like(w.data) if w.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                if gw is not None:
                    gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
                if gxp is not None:
                    gxp[sl] += g * wk[None, :, i, j, None, None]
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if gxp is not None else None
        return gx, gw

    return make_result(out, (x, w), backward, "conv2d_depthwise")


def avg_pool2d(x, kernel: int = 2) -> Tensor:
    """Non-overlapping average pooling with stride == kernel; trailing rows/cols that
    do not fill a window are dropped."""
    x = as_tensor(x)
    *lead, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool2d kernel {kernel} larger than input {(h, w)}")
    crop = x.data[..., : ho * kernel, : wo * kernel]
    out = crop.reshape(*lead, ho, kernel, wo, kernel).mean(axis=(-3, -1))

    def backward(g):
        full = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g, kernel, axis=-2), kernel, axis=-1) / (kernel * kernel)
        full[..., : ho * kernel, : wo * kernel] = up
        return (full,)

    return make_result(out, (x,), backward, "avg_pool2d")


def global_avg_pool(x) -> Tensor:
    """Per-channel mean over the two trailing spatial axes."""
    return mean(x, axis=(-2, -1))


def bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Interpolation weights (out_size x in_size), half-pixel (align_corners=False) convention."""
    m = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for o in range(out_size):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def resize_bilinear(x, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the trailing (H, W) axes with align_corners=False."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    ho, wo = size
    if ho < 1 or wo < 1:
        raise ShapeError(f"resize target must be positive, got {size}")
    if (ho, wo) == (h, w):
        return x
    ry = bilinear_matrix(ho, h)
    rx = bilinear_matrix(wo, w)
    out = np.einsum("oh,...hw,pw->...op", ry, x.data, rx, optimize=True)

    def backward(g):
        return (np.einsum("oh,...op,pw->...hw", ry, g, rx, optimize=True),)

    return make_result(out, (x,), backward, "resize_bilinear")

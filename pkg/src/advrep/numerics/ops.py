"""Differentiable operations.

Only the operations the auto-encoder and its heads need. Every function takes
and returns :class:`Tensor`; backward closures return one gradient per parent
(``None`` where a parent does not need one).
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result

DEFAULT_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ConfigurationError(ValueError):
    """Raised when layer parameters do not fit the input they are applied to."""


# ---------------------------------------------------------------------------
# convolution


def _shift_slices(h: int, w: int, sign: int = 1):
    """Yield (i, j, dst, src) slice pairs realising a 3x3 neighbourhood shift.

    With ``sign=1`` position (h, w) of tap (i, j) reads source (h+i-1, w+j-1);
    ``sign=-1`` reads (h-i+1, w-j+1).
    """
    for i in range(3):
        di = sign * (i - 1)
        for j in range(3):
            dj = sign * (j - 1)
            dst = (slice(max(0, -di), h - max(0, di)), slice(max(0, -dj), w - max(0, dj)))
            src = (slice(max(0, di), h - max(0, -di)), slice(max(0, dj), w - max(0, -dj)))
            yield i, j, dst, src


def _channel_major(x: np.ndarray) -> np.ndarray:
    # conv outputs are channel-major views already, so this is usually free
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def _im2col(xt: np.ndarray, sign: int = 1) -> np.ndarray:
    """Channel-major (C,N,H,W) -> (9*C, N*H*W) zero-padded 3x3 patch matrix, tap-major."""
    c, n, h, w = xt.shape
    cols = np.zeros((3, 3, c, n, h, w), dtype=xt.dtype)
    for i, j, dst, src in _shift_slices(h, w, sign):
        cols[i, j, :, :, dst[0], dst[1]] = xt[:, :, src[0], src[1]]
    return cols.reshape(9 * c, n * h * w)


def _corr(x: np.ndarray, w: np.ndarray):
    """3x3 'same' cross-correlation of (N,C,H,W) with (F,C,3,3).

    Returns the output (a channel-major view) and the saved operand for the
    weight gradient. When C <= F the input patch matrix is formed; otherwise
    the 9 tap responses are computed first and shift-summed, which moves
    9*min(C, F) rows of data instead of 9*C.
    """
    n, c, h, wd = x.shape
    f = w.shape[0]
    xt = _channel_major(x)
    if c <= f:
        cols = _im2col(xt)
        wm = w.transpose(0, 2, 3, 1).reshape(f, 9 * c)
        out = (wm @ cols).reshape(f, n, h, wd)
        saved = ("cols", cols)
    else:
        taps = w.transpose(2, 3, 0, 1).reshape(9 * f, c) @ xt.reshape(c, -1)
        taps = taps.reshape(3, 3, f, n, h, wd)
        out = np.zeros((f, n, h, wd), dtype=x.dtype)
        for i, j, dst, src in _shift_slices(h, wd):
            out[:, :, dst[0], dst[1]] += taps[i, j, :, :, src[0], src[1]]
        saved = ("x", xt)
    return out.transpose(1, 0, 2, 3), saved


def _corr_weight_grad(g: np.ndarray, saved, w_shape) -> np.ndarray:
    """d(loss)/d(weight) for :func:`_corr` given the output gradient (N,F,H,W)."""
    f, c = w_shape[0], w_shape[1]
    gt = _channel_major(g)
    kind, arr = saved
    if kind == "cols":
        gw = gt.reshape(f, -1) @ arr.T  # (F, 9C), tap-major columns
        return gw.reshape(f, 3, 3, c).transpose(0, 3, 1, 2)
    gcols = _im2col(gt, sign=-1)  # (9F, NHW)
    gw = gcols @ arr.reshape(c, -1).T  # (9F, C)
    return gw.reshape(3, 3, f, c).transpose(2, 3, 0, 1)


def _flip_t(w: np.ndarray) -> np.ndarray:
    """Kernel of the adjoint correlation: swap in/out channels, rotate 180 degrees."""
    return np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def _check_conv(x: Tensor, w: Tensor, in_axis: int, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-d input, got shape {x.shape}")
    if w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise ConfigurationError(f"{op}: expected a 3x3 kernel, got weight shape {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise ConfigurationError(
            f"{op}: input has {x.shape[1]} channels but weight expects {w.shape[in_axis]}"
        )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (spatial size preserved).

    ``weight`` has shape (F, C, 3, 3).
    """
    _check_conv(x, weight, 1, "conv2d")
    out, saved = _corr(x.data, weight.data)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    w_data = weight.data

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = _corr_weight_grad(g, saved, w_data.shape)
        if x.requires_grad:
            gx, _ = _corr(g, _flip_t(w_data))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Adjoint of :func:`conv2d`. ``weight`` has shape (C_in, C_out, 3, 3)."""
    _check_conv(x, weight, 0, "conv_transpose2d")
    w_eff = _flip_t(weight.data)  # (C_out, C_in, 3, 3)
    out, saved = _corr(x.data, w_eff)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = _flip_t(_corr_weight_grad(g, saved, w_eff.shape))
        if x.requires_grad:
            gx, _ = _corr(g, weight.data)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


# ---------------------------------------------------------------------------
# pooling / resampling


def maxpool2d(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 max pooling, stride 2, floor semantics.

    Returns the pooled tensor and the in-window argmax (0..3, row-major window
    order); ties go to the first element in that order.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected a 4-d input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2d: spatial size {h}x{w} is smaller than the 2x2 window")
    h2, w2 = h // 2, w // 2
    d = x.data
    quads = [d[:, :, a : 2 * h2 : 2, b : 2 * w2 : 2] for a in (0, 1) for b in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    idx = np.full(out.shape, 3, dtype=np.int8)
    for k in (2, 1, 0):
        idx[quads[k] == out] = k

    def backward(g):
        gx = np.zeros_like(d)
        for k, (a, b) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            gx[:, :, a : 2 * h2 : 2, b : 2 * w2 : 2] = np.where(idx == k, g, 0)
        return (gx,)

    return make_result(out, (x,), backward), idx


def nearest_index(src: int, dst: int) -> np.ndarray:
    """Source index feeding each of ``dst`` output positions: floor(i*src/dst)."""
    return (np.arange(dst) * src) // dst


def interpolate_nearest(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Nearest-neighbour upsampling of (N,C,h,w) to (N,C,H,W) with H>=h, W>=w."""
    if x.data.ndim != 4:
        raise ShapeError(f"interpolate_nearest: expected a 4-d input, got shape {x.shape}")
    n, c, h, w = x.shape
    big_h, big_w = target
    if big_h < h or big_w < w:
        raise ShapeError(f"interpolate_nearest: target {target} smaller than input {(h, w)}")
    ri = nearest_index(h, big_h)
    ci = nearest_index(w, big_w)
    # work channel-major so the result feeds the next convolution without a copy
    xt = x.data.transpose(1, 0, 2, 3)
    out = np.repeat(np.repeat(xt, np.bincount(ri, minlength=h), axis=2), np.bincount(ci, minlength=w), axis=3)
    # 0/1 membership matrices: summing each source's run is a matmul
    mr = np.zeros((h, big_h), dtype=x.dtype)
    mr[ri, np.arange(big_h)] = 1
    mc = np.zeros((big_w, w), dtype=x.dtype)
    mc[np.arange(big_w), ci] = 1

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gx = (gt.reshape(-1, big_w) @ mc).reshape(c, n, big_h, w)
        gx = mr @ gx
        return (gx.transpose(1, 0, 2, 3),)

    return make_result(out.transpose(1, 0, 2, 3), (x,), backward)


# ---------------------------------------------------------------------------
# normalisation / activations


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalisation of (N,C,H,W).

    In training mode the biased batch variance normalises the input and the
    running buffers are updated in place (left alone when ``momentum`` is 0).
    """
    n, c, h, w = x.shape
    g_ = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("batchnorm2d: training mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if momentum:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean.astype(running_mean.dtype)
            running_var *= 1.0 - momentum
            running_var += momentum * var.astype(running_var.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = g_ * xhat + beta.data.reshape(1, c, 1, 1)

        def backward(g):
            gg = gb = gx = None
            if gamma.requires_grad:
                gg = (g * xhat).sum(axis=(0, 2, 3))
            if beta.requires_grad:
                gb = g.sum(axis=(0, 2, 3))
            if x.requires_grad:
                dxhat = g * g_
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
            return gx, gg, gb

    else:
        inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1).astype(x.dtype)) * inv.reshape(1, c, 1, 1)
        out = g_ * xhat + beta.data.reshape(1, c, 1, 1)

        def backward(g):
            gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            gx = g * (g_ * inv.reshape(1, c, 1, 1)) if x.requires_grad else None
            return gx, gg, gb

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def leaky_relu(x: Tensor, slope: float = DEFAULT_SLOPE) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    pos = x.data >= 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))

    def backward(g):
        return (np.where(pos, g, g * g.dtype.type(slope)),)

    return make_result(out, (x,), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward)


# ---------------------------------------------------------------------------
# dense layers and reshaping


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for x of shape (N, D), weight (K, D)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(src),)

    return make_result(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum of same-shape tensors, or tensor plus a constant."""
    if not isinstance(b, Tensor):
        out = a.data + np.asarray(b, dtype=a.dtype)
        return make_result(out, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, k: float) -> Tensor:
    kk = a.dtype.type(k)
    return make_result(a.data * kk, (a,), lambda g: (g * kk,))


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.broadcast_to(g, shape).astype(g.dtype),)

    return make_result(out, (x,), backward)


# ---------------------------------------------------------------------------
# losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {targets.shape[0]} targets for {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"softmax_cross_entropy: targets must lie in [0, {k})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    out = np.asarray(-logp[rows, targets].mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return make_result(out, (logits,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error; ``target`` is treated as a constant."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {t.shape} differ")
    diff = pred.data - t.astype(pred.dtype, copy=False)
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def backward(g):
        return (diff * (2.0 * g / n),)

    return make_result(out, (pred,), backward)


__all__ = [
    "ConfigurationError",
    "add",
    "as_tensor",
    "batchnorm2d",
    "conv2d",
    "conv_transpose2d",
    "dropout",
    "flatten",
    "interpolate_nearest",
    "leaky_relu",
    "linear",
    "log_softmax",
    "maxpool2d",
    "mse_loss",
    "nearest_index",
    "reshape",
    "scale",
    "softmax",
    "softmax_cross_entropy",
    "tensor_sum",
]

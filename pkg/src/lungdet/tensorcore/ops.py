"""Differentiable operations over :class:`Tensor`.

Each op computes its forward result with numpy and records a closure that maps
the output gradient to parent gradients.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor


def _make(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (),
                  _backward=backward if req else None, op=op)


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[:1] != b.shape[:1] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible {a.shape} and {b.shape}")
    ca = a.shape[1]
    return _make(np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")


def concat_rows(tensors) -> Tensor:
    tensors = list(tensors)
    sizes = np.cumsum([t.shape[0] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors),
                 lambda g: tuple(np.split(g, sizes, axis=0)), "concat_rows")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def take(a: Tensor, key) -> Tensor:
    """Indexing (basic or advanced); the adjoint scatter-adds."""
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(src_shape, dtype=dtype)
        np.add.at(out, key, g)
        return (out,)

    return _make(a.data[key], (a,), backward, "take")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return mul_scalar(sum_all(a), 1.0 / n)


def dot_const(a: Tensor, w: np.ndarray) -> Tensor:
    """sum(a * w) for a constant array ``w``; handy for gradient checks."""
    w = np.asarray(w, dtype=a.dtype)
    if w.shape != a.shape:
        raise ShapeError(f"dot_const: shapes differ {a.shape} vs {w.shape}")
    return _make(np.asarray((a.data * w).sum()), (a,), lambda g: (g * w,), "dot_const")


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, ksize, stride) -> np.ndarray:
    """(N, C, Dp, Hp, Wp) -> (N*D'*H'*W', kd*kh*kw*C), row order (n, z, y, x), column order (kz, ky, kx, c).

    Gathering from a channels-last view keeps the inner copy contiguous over
    channels, which is noticeably faster than the (c, kz, ky, kx) ordering.
    """
    sd, sh, sw = stride
    xl = xp.transpose(0, 2, 3, 4, 1)
    win = sliding_window_view(xl, ksize, axis=(1, 2, 3))[:, ::sd, ::sh, ::sw]
    n, d, h, w, c = win.shape[:5]
    return win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(n * d * h * w, int(np.prod(ksize)) * c)


def _wmat(weight: np.ndarray) -> np.ndarray:
    """[K, C, kd, kh, kw] -> [K, kd*kh*kw*C] matching the im2col column order."""
    return weight.transpose(0, 2, 3, 4, 1).reshape(weight.shape[0], -1)


def _pad(x, p):
    if p == (0, 0, 0):
        return x
    return np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,D,H,W] with ``weight`` [K,C,kd,kh,kw]."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5D input and weight, got {x.shape}, {weight.shape}")
    n, c, d, h, w = x.shape
    k, wc, kd, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv3d: input has {c} channels, weight expects {wc}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({k},)")
    s = _triple(stride)
    p = _triple(padding)
    ks = (kd, kh, kw)
    if min(s) < 1:
        raise ValueError("stride must be >= 1")
    if any(e + 2 * pp < kk for e, pp, kk in zip((d, h, w), p, ks)):
        raise ShapeError(f"conv3d: kernel {ks} larger than padded input {(d, h, w)} + 2*{p}")
    out_sp = tuple((e + 2 * pp - kk) // ss + 1 for e, pp, kk, ss in zip((d, h, w), p, ks, s))

    col = _im2col(_pad(x.data, p), ks, s)
    wmat = _wmat(weight.data)
    out = col @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape((n,) + out_sp + (k,)).transpose(0, 4, 1, 2, 3))

    need_x = x.requires_grad

    def backward(g):
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, k)
        gw = (g2.T @ col).reshape(k, kd, kh, kw, c).transpose(0, 4, 1, 2, 3) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if need_x:
            if s == (1, 1, 1) and all(kk - 1 - pp >= 0 for kk, pp in zip(ks, p)):
                # stride 1: the input adjoint is a full correlation with the flipped kernel
                wt = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                q = tuple(kk - 1 - pp for kk, pp in zip(ks, p))
                gcol = _im2col(_pad(np.ascontiguousarray(g), q), ks, (1, 1, 1))
                gx = (gcol @ _wmat(wt).T).reshape(n, d, h, w, c).transpose(0, 4, 1, 2, 3)
                gx = np.ascontiguousarray(gx)
            else:
                dcol = (g2 @ wmat).reshape((n,) + out_sp + ks + (c,))
                gxp = np.zeros((n, c, d + 2 * p[0], h + 2 * p[1], w + 2 * p[2]), dtype=g.dtype)
                od, oh, ow = out_sp
                for a in range(kd):
                    for b in range(kh):
                        for e in range(kw):
                            gxp[:, :, a:a + s[0] * od:s[0], b:b + s[1] * oh:s[1], e:e + s[2] * ow:s[2]] += \
                                dcol[..., a, b, e, :].transpose(0, 4, 1, 2, 3)
                gx = gxp[:, :, p[0]:p[0] + d, p[1]:p[1] + h, p[2]:p[2] + w]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "conv3d")


# ---------------------------------------------------------------------------
# pooling / upsampling
# ---------------------------------------------------------------------------

def maxpool3d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first element in (z, y, x) scan order."""
    if window != stride:
        raise ValueError("only non-overlapping pooling (window == stride) is supported")
    n, c, d, h, w = x.shape
    f = window
    if d % f or h % f or w % f:
        raise ShapeError(f"maxpool3d: extents {(d, h, w)} not divisible by {f}")
    blocks = x.data.reshape(n, c, d // f, f, h // f, f, w // f, f).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(n, c, d // f, h // f, w // f, f ** 3)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, d // f, h // f, w // f, f ** 3), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, d // f, h // f, w // f, f, f, f).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gb.reshape(n, c, d, h, w),)

    return _make(np.ascontiguousarray(out), (x,), backward, "maxpool3d")


def upsample_nearest3d(x: Tensor, factor: int = 2) -> Tensor:
    f = int(factor)
    if f < 2:
        raise ValueError("upsampling factor must be an integer >= 2")
    n, c, d, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None, :, None], (n, c, d, f, h, f, w, f))
    out = out.reshape(n, c, d * f, h * f, w * f)

    def backward(g):
        return (g.reshape(n, c, d, f, h, f, w, f).sum(axis=(3, 5, 7)),)

    return _make(out, (x,), backward, "upsample_nearest3d")


# ---------------------------------------------------------------------------
# activations and normalisation
# ---------------------------------------------------------------------------

def rrelu(x: Tensor, lower: float = 1 / 8, upper: float = 1 / 3, training: bool = False, rng=None) -> Tensor:
    """Randomised leaky rectifier.

    Training draws one slope per entry from U[lower, upper]; evaluation uses the
    midpoint slope.
    """
    if not (0 <= lower <= upper < 1):
        raise ValueError(f"rrelu bounds must satisfy 0 <= lower <= upper < 1, got {lower}, {upper}")
    if training:
        if rng is None:
            raise ValueError("training-mode rrelu needs a random generator")
        dt = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
        slope = lower + (upper - lower) * rng.random(x.shape, dtype=dt)
        scale = np.where(x.data >= 0, 1.0, slope).astype(x.dtype, copy=False)
    else:
        mid = (lower + upper) / 2
        scale = np.where(x.data >= 0, 1.0, mid).astype(x.dtype, copy=False)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "rrelu")


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over (N, D, H, W).

    In training mode ``running_mean``/``running_var`` are updated in place
    (unbiased variance for the running estimate).
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm3d: {c} channels but parameters {gamma.shape}, {beta.shape}")
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    if training:
        m = x.data.size // c
        mean = x.data.mean(axis=axes)
        xc = x.data - mean.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(bshape)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv.reshape(bshape)
    xhat = xhat.astype(x.dtype, copy=False)
    inv = inv.astype(x.dtype, copy=False)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            mg = gxhat.mean(axis=axes).reshape(bshape)
            mgx = (gxhat * xhat).mean(axis=axes).reshape(bshape)
            gx = (gxhat - mg - xhat * mgx) * inv.reshape(bshape)
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "batchnorm3d")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross entropy in the overflow-free form."""
    y = np.asarray(labels, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: labels {y.shape} vs logits {logits.shape}")
    z = logits.data
    n = max(z.size, 1)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid(z) - y) / n
    return _make(np.asarray(per.sum() / n, dtype=logits.dtype), (logits,),
                 lambda g: (g * grad,), "bce_with_logits")


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Smooth L1 summed over coordinates and averaged over rows (samples)."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"smooth_l1: target {t.shape} vs pred {pred.shape}")
    u = pred.data - t
    au = np.abs(u)
    per = np.where(au < 1, 0.5 * u * u, au - 0.5)
    rows = max(pred.shape[0], 1) if pred.ndim else 1
    grad = np.where(au < 1, u, np.sign(u)) / rows
    return _make(np.asarray(per.sum() / rows, dtype=pred.dtype), (pred,),
                 lambda g: (g * grad,), "smooth_l1")

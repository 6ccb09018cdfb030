"""Layer operations: forward and backward passes.

Convolution uses the cross-correlation convention (no kernel flip) in both
directions. All reductions have a fixed order, so identical inputs produce
bit-identical outputs. Operations preserve the input dtype; float64 inputs
run the same code paths in shadow mode for gradient checking.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import InvalidStateError, ShapeError
from .tensor import BnState, Tensor


# ---------------------------------------------------------------------------
# convolution


def _conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    # floor semantics: trailing positions the window cannot cover are dropped,
    # matching the stride-2 3x3 downsampling the architectures rely on
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(
            f"kernel exceeds padded input: size={size} kernel={k} stride={stride} pad={pad}"
        )
    return span // stride + 1


def _check_conv_shapes(x: Tensor, w: Tensor, b: Tensor | None) -> None:
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: x has {x.shape[1]}, w expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} != ({w.shape[0]},)")


def _pad2d(xd: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return xd
    n, c, h, w = xd.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=xd.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = xd
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, hout: int, wout: int) -> np.ndarray:
    """Patch matrix in (Cin*Kh*Kw, N*Hout*Wout) layout: one GEMM per conv."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, hout, wout), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = xt[:, :, u : u + stride * hout : stride, v : v + stride * wout : stride]
    return cols.reshape(c * kh * kw, n * hout * wout)


def _col2im(
    grad_cols: np.ndarray, n: int, c: int, kh: int, kw: int,
    hp: int, wp: int, stride: int, hout: int, wout: int,
) -> np.ndarray:
    g6 = grad_cols.reshape(c, kh, kw, n, hout, wout)
    gxp = np.zeros((c, n, hp, wp), dtype=grad_cols.dtype)
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, u : u + stride * hout : stride, v : v + stride * wout : stride] += g6[:, u, v]
    return np.ascontiguousarray(gxp.transpose(1, 0, 2, 3))


def conv2d_forward_cols(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
    exact: bool = True,
) -> tuple[Tensor, np.ndarray]:
    """conv2d_forward that also returns the im2col matrix for reuse in backward.

    exact=True accumulates the float32 GEMM in float64 and rounds once, so the
    result is within one cast-rounding of the true cross-correlation. The
    float32 fast path (exact=False) is used inside training loops.
    """
    _check_conv_shapes(x, w, b)
    n, _, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    hout = _conv_out_extent(h, kh, stride, pad)
    wout = _conv_out_extent(wd, kw, stride, pad)
    xp = _pad2d(x.data, pad)
    cols = _im2col(xp, kh, kw, stride, hout, wout)
    w2 = w.data.reshape(cout, cin * kh * kw)
    if exact and xp.dtype == np.float32:
        out = np.matmul(w2.astype(np.float64), cols.astype(np.float64))
        if b is not None:
            out += b.data.astype(np.float64)[:, None]
        out = out.astype(np.float32)
    else:
        out = np.matmul(w2, cols)
        if b is not None:
            out += b.data[:, None]
    out = out.reshape(cout, n, hout, wout).transpose(1, 0, 2, 3)
    return Tensor(np.ascontiguousarray(out)), cols


def conv2d_forward(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0
) -> Tensor:
    """Cross-correlate x (N,Cin,H,W) with kernels w (Cout,Cin,Kh,Kw)."""
    out, _ = conv2d_forward_cols(x, w, b, stride, pad)
    return out


def conv2d_backward(
    x: Tensor, w: Tensor, grad_out: Tensor, stride: int = 1, pad: int = 0,
    cols: np.ndarray | None = None, need_grad_x: bool = True,
) -> tuple[Tensor, Tensor, Tensor]:
    """Analytic gradients (grad_x, grad_w, grad_b) of conv2d_forward.

    cols, when given, must be the im2col matrix of the forward pass; it is
    recomputed otherwise. need_grad_x=False skips grad_x (returned as zeros)
    for convs whose input gradient has no consumer.
    """
    _check_conv_shapes(x, w, None)
    n, _, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    hout = _conv_out_extent(h, kh, stride, pad)
    wout = _conv_out_extent(wd, kw, stride, pad)
    if grad_out.shape != (n, cout, hout, wout):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, cout, hout, wout)}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if cols is None:
        cols = _im2col(_pad2d(x.data, pad), kh, kw, stride, hout, wout)

    k = cin * kh * kw
    lsz = hout * wout
    gm = np.ascontiguousarray(grad_out.data.transpose(1, 0, 2, 3)).reshape(cout, n * lsz)
    grad_w = (gm @ cols.T).reshape(w.shape)
    grad_b = gm.sum(axis=1)
    if not need_grad_x:
        return Tensor(np.zeros_like(x.data)), Tensor(grad_w), Tensor(grad_b)
    grad_cols = np.matmul(w.data.reshape(cout, k).T, gm)
    grad_xp = _col2im(grad_cols, n, cin, kh, kw, hp, wp, stride, hout, wout)
    grad_x = grad_xp[:, :, pad : pad + h, pad : pad + wd] if pad else grad_xp
    return Tensor(np.ascontiguousarray(grad_x)), Tensor(grad_w), Tensor(grad_b)


# ---------------------------------------------------------------------------
# batch normalization


def _check_bn_channels(x: Tensor, s: BnState) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"batch norm expects 4-D input, got {x.shape}")
    if x.shape[1] != s.channels:
        raise ShapeError(f"channel mismatch: x has {x.shape[1]}, state has {s.channels}")


def bn_train_core(
    xd: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, tuple]:
    """Pure train-mode normalization: returns (y, batch_mean, batch_var, cache).

    batch_var is the biased (divide by n) per-channel variance over N*H*W.
    """
    xt = np.ascontiguousarray(xd.transpose(1, 0, 2, 3)).reshape(xd.shape[1], -1)
    mu = xt.mean(axis=1)
    var = ((xt - mu[:, None]) ** 2).mean(axis=1)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, mu, var, (xhat, inv_std, gamma)


def bn_train_backward(cache: tuple, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (grad_x, grad_gamma, grad_beta) through train-mode batch norm."""
    xhat, inv_std, gamma = cache
    axes = (0, 2, 3)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    dxhat = grad_out * gamma[None, :, None, None]
    m1 = dxhat.mean(axis=axes, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
    grad_x = inv_std[None, :, None, None] * (dxhat - m1 - xhat * m2)
    return grad_x, grad_gamma, grad_beta


def bn_forward_train(x: Tensor, s: BnState, update_mean: bool = True, update_var: bool = True) -> Tensor:
    """Train-mode batch norm; updates running statistics in place.

    The running variance update uses the unbiased batch variance
    (divide by n-1); normalization itself uses the biased one.
    """
    _check_bn_channels(x, s)
    y, mu, var, _ = bn_train_core(x.data, s.gamma, s.beta, s.eps)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n < 2:
        raise ShapeError("train-mode batch norm needs at least 2 values per channel")
    unbiased = var * (n / (n - 1))
    m = s.momentum
    if update_mean:
        s.run_mean = ((1.0 - m) * s.run_mean + m * mu).astype(s.run_mean.dtype)
    if update_var:
        s.run_var = ((1.0 - m) * s.run_var + m * unbiased).astype(s.run_var.dtype)
    return Tensor(y)


def bn_forward_eval(x: Tensor, s: BnState) -> Tensor:
    """Eval-mode batch norm using the stored running statistics."""
    _check_bn_channels(x, s)
    if np.any(s.run_var < 0):
        raise InvalidStateError("negative running variance")
    inv_std = 1.0 / np.sqrt(s.run_var + np.asarray(s.eps, dtype=x.dtype))
    y = (
        s.gamma[None, :, None, None]
        * (x.data - s.run_mean[None, :, None, None])
        * inv_std[None, :, None, None]
        + s.beta[None, :, None, None]
    )
    return Tensor(y.astype(x.dtype, copy=False))


# ---------------------------------------------------------------------------
# elementwise / spatial ops


def relu_forward(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0))


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad shape {grad_out.shape} != input shape {x.shape}")
    return Tensor(grad_out.data * (x.data > 0))


def _pool_windows(xd: np.ndarray) -> np.ndarray:
    n, c, h, w = xd.shape
    # window elements end up in row-major scan order, so argmax tie-breaking
    # picks the first element of the 2x2 window
    return (
        xd.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )


def maxpool2_forward(x: Tensor) -> Tensor:
    n, c, h, w = _require_4d(x, "maxpool2")
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {h}x{w}")
    return Tensor(_pool_windows(x.data).max(axis=-1))


def maxpool2_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    n, c, h, w = _require_4d(x, "maxpool2")
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {h}x{w}")
    if grad_out.shape != (n, c, h // 2, w // 2):
        raise ShapeError(f"grad shape {grad_out.shape} != {(n, c, h // 2, w // 2)}")
    win = _pool_windows(x.data)
    idx = win.argmax(axis=-1)
    g = np.zeros_like(win)
    np.put_along_axis(g, idx[..., None], grad_out.data[..., None], axis=-1)
    g = g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return Tensor(np.ascontiguousarray(g))


def upsample_nearest_forward(x: Tensor, scale_h: int, scale_w: int | None = None) -> Tensor:
    _require_4d(x, "upsample_nearest")
    if scale_w is None:
        scale_w = scale_h
    if scale_h < 1 or scale_w < 1:
        raise ShapeError(f"scales must be >= 1, got ({scale_h}, {scale_w})")
    out = np.repeat(np.repeat(x.data, scale_h, axis=2), scale_w, axis=3)
    return Tensor(out)


def upsample_nearest_backward(x: Tensor, grad_out: Tensor, scale_h: int, scale_w: int | None = None) -> Tensor:
    n, c, h, w = _require_4d(x, "upsample_nearest")
    if scale_w is None:
        scale_w = scale_h
    if grad_out.shape != (n, c, h * scale_h, w * scale_w):
        raise ShapeError(f"grad shape {grad_out.shape} != {(n, c, h * scale_h, w * scale_w)}")
    g = grad_out.data.reshape(n, c, h, scale_h, w, scale_w).sum(axis=(3, 5))
    return Tensor(g)


def upsample_nearest2_forward(x: Tensor) -> Tensor:
    return upsample_nearest_forward(x, 2)


def upsample_nearest2_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    return upsample_nearest_backward(x, grad_out, 2)


def concat_channels_forward(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels N/H/W mismatch: {t.shape} vs {ref}")
    return Tensor(np.concatenate([t.data for t in xs], axis=1))


def concat_channels_backward(grad_out: Tensor, channel_counts: Sequence[int]) -> list[Tensor]:
    if sum(channel_counts) != grad_out.shape[1]:
        raise ShapeError("channel counts do not sum to grad channels")
    splits = np.split(grad_out.data, np.cumsum(channel_counts)[:-1], axis=1)
    return [Tensor(np.ascontiguousarray(s)) for s in splits]


def add_forward(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return Tensor(a.data + b.data)


def add_backward(grad_out: Tensor) -> tuple[Tensor, Tensor]:
    return Tensor(grad_out.data.copy()), Tensor(grad_out.data.copy())


def global_avg_pool_forward(x: Tensor) -> Tensor:
    _require_4d(x, "global_avg_pool")
    return Tensor(x.data.mean(axis=(2, 3), keepdims=True))


def global_avg_pool_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    n, c, h, w = _require_4d(x, "global_avg_pool")
    if grad_out.shape != (n, c, 1, 1):
        raise ShapeError(f"grad shape {grad_out.shape} != {(n, c, 1, 1)}")
    scale = np.asarray(1.0 / (h * w), dtype=x.dtype)
    return Tensor(np.broadcast_to(grad_out.data * scale, x.shape).copy())


def _require_4d(x: Tensor, op: str) -> tuple[int, int, int, int]:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects 4-D input, got {x.shape}")
    return x.shape  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# optimization


def sgd_step(
    params: Sequence[Tensor],
    lr: float,
    momentum: float,
    velocity: Sequence[Tensor],
    freeze: Sequence[bool],
) -> None:
    """In-place momentum SGD: v <- momentum*v + grad; p <- p - lr*v.

    Frozen params and their velocities are untouched; grads are cleared
    for every param, frozen or not.
    """
    if not (len(params) == len(velocity) == len(freeze)):
        raise ShapeError("params, velocity and freeze must have equal length")
    for p, v, frozen in zip(params, velocity, freeze):
        if frozen:
            continue
        if p.grad is None:
            raise InvalidStateError("unfrozen param has no grad")
        if v.shape != p.shape:
            raise ShapeError(f"velocity shape {v.shape} != param shape {p.shape}")
        v.data *= np.asarray(momentum, dtype=v.dtype)
        v.data += p.grad
        p.data -= np.asarray(lr, dtype=p.dtype) * v.data
    for p in params:
        p.zero_grad()


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-4) -> Tensor:
    """Central-difference gradient of a scalar function, element by element.

    Runs in float64 regardless of the input dtype; f must be pure.
    """
    base = x.data.astype(np.float64, copy=True)
    g = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = base.copy()
        xp[idx] += h
        xm = base.copy()
        xm[idx] -= h
        g[idx] = (float(f(Tensor(xp))) - float(f(Tensor(xm)))) / (2.0 * h)
    return Tensor(g)

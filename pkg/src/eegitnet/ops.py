"""Layer primitives: convolutions, batch norm, activations, pooling, losses.

All operate on :class:`~eegitnet.tensor.Tensor` and record gradients through
:func:`~eegitnet.tensor.from_op`.  Inputs to the convolution ops are 4-D
``(batch, filters, electrodes, time)``; time is always the last axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, accumulate, flip_time, from_op

PAD_MODES = ("same", "valid", "causal")


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution: kernel extent, dilation, padding mode.

    ``kernel_extent`` is the length of the kernel along whichever axis it
    spans (time for temporal/causal kernels, electrodes for spatial ones);
    the axis itself is inferred from the weight shape.  Causal padding puts
    exactly ``(kernel_extent - 1) * dilation`` zeros on the past side.
    """

    kernel_extent: int
    dilation: int = 1
    padding: str = "same"
    depthwise: bool = False
    filter_count: int = 1

    def __post_init__(self):
        if self.kernel_extent < 1:
            raise ValueError("kernel_extent must be >= 1")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.padding not in PAD_MODES:
            raise ValueError(f"padding must be one of {PAD_MODES}, got {self.padding!r}")
        if self.filter_count < 1:
            raise ValueError("filter_count must be >= 1")


# ----------------------------------------------------------------------
# core 2-D convolution (correlation orientation, dilation on the time axis)

def _windows(xp, kh, kw, dilation):
    span = dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (kh, span), axis=(2, 3))
    if dilation > 1:
        win = win[..., ::dilation]
    return win  # (N, C, Ho, Wo, kh, kw)


def _conv2d_raw(xp, w, dilation, depthwise):
    win = _windows(xp, w.shape[2], w.shape[3], dilation)
    if depthwise:
        # one kernel per input channel, no cross-channel mixing
        return np.einsum("ncijab,cab->ncij", win, w[:, 0], optimize=True)
    # contract (channel, kernel_h, kernel_w); tensordot routes through BLAS
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x, w, pad_h=(0, 0), pad_t=(0, 0), dilation=1, depthwise=False):
    """Full or depthwise 2-D convolution over (electrode, time) axes with
    dilation along time.

    ``x``: (N, C_in, H, W); ``w``: (C_out, C_in, KH, KW), or (C_in, 1, KH, KW)
    in depthwise mode.
    """
    c_in = x.shape[1]
    if depthwise:
        if w.shape[0] != c_in or w.shape[1] != 1:
            raise ValueError(
                f"depthwise weights must be ({c_in}, 1, kh, kw), got {tuple(w.shape)}")
    elif w.shape[1] != c_in:
        raise ValueError(
            f"filter axis mismatch: weights expect {w.shape[1]} input filters, input has {c_in}")

    xp = np.pad(x.data, ((0, 0), (0, 0), pad_h, pad_t))
    kh, kw = w.shape[2], w.shape[3]
    span_h, span_w = kh, dilation * (kw - 1) + 1
    if span_h > xp.shape[2]:
        raise ValueError(
            f"electrode axis too short: kernel spans {span_h}, padded input has {xp.shape[2]}")
    if span_w > xp.shape[3]:
        raise ValueError(
            f"time axis too short: dilated kernel spans {span_w}, padded input has {xp.shape[3]}")

    out = _conv2d_raw(xp, w.data, dilation, depthwise)
    ho, wo = out.shape[2], out.shape[3]
    w_data = w.data

    def backward(g):
        if w.requires_grad:
            win = _windows(xp, kh, kw, dilation)
            if depthwise:
                gw = np.einsum("ncij,ncijab->cab", g, win, optimize=True)[:, None]
            else:
                gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            if depthwise and kw == 1 and ho == 1:
                # electrode-spanning kernel: one outer product instead of a tap loop
                gxp[:, :, :kh, :wo] += np.einsum("ncj,ca->ncaj", g[:, :, 0, :],
                                                 w_data[:, 0, :, 0], optimize=True)
            else:
                for a in range(kh):
                    for b in range(kw):
                        if depthwise:
                            contrib = g * w_data[:, 0, a, b].reshape(1, -1, 1, 1)
                        else:
                            contrib = np.einsum("noij,oc->ncij", g, w_data[:, :, a, b],
                                                optimize=True)
                        off = b * dilation
                        gxp[:, :, a:a + ho, off:off + wo] += contrib
            gx = gxp[:, :, pad_h[0]:pad_h[0] + x.shape[2], pad_t[0]:pad_t[0] + x.shape[3]]
            accumulate(x, np.ascontiguousarray(gx))

    return from_op(out, (x, w), backward)


def conv_temporal(x, spec: ConvSpec, weights):
    """Convolution per a :class:`ConvSpec`.

    Weight layout is ``(filters_out, filters_in_per_group, k_elec, k_time)``.
    For ``same``/``valid`` padding the kernel is applied in correlation
    orientation; for ``causal`` padding the kernel is lag-ordered
    (``weights[..., j]`` multiplies the input ``j * dilation`` steps in the
    past) and only leading zeros are inserted, so output[t] never sees
    input[t' > t].
    """
    if x.ndim != 4:
        raise ValueError(f"input must be 4-D (batch, filters, electrodes, time), got {x.ndim}-D")
    if weights.ndim != 4:
        raise ValueError(f"weights must be 4-D, got {weights.ndim}-D")
    kh, kw = weights.shape[2], weights.shape[3]
    if kh > 1 and kw > 1:
        raise ValueError("kernels span either the electrode axis or the time axis, not both")
    if spec.kernel_extent != max(kh, kw):
        raise ValueError(
            f"kernel axis mismatch: spec.kernel_extent={spec.kernel_extent} but weights span {max(kh, kw)}")
    if spec.depthwise:
        if spec.filter_count != x.shape[1]:
            raise ValueError(
                f"filter axis mismatch: depthwise over {x.shape[1]} filters, "
                f"spec declares {spec.filter_count}")
    elif weights.shape[0] != spec.filter_count:
        raise ValueError(
            f"filter axis mismatch: weights produce {weights.shape[0]} filters, "
            f"spec declares {spec.filter_count}")

    if spec.padding == "same":
        need_h, need_w = kh - 1, spec.dilation * (kw - 1)
        pad_h = (need_h // 2, need_h - need_h // 2)
        pad_t = (need_w // 2, need_w - need_w // 2)
    elif spec.padding == "causal":
        if kh != 1:
            raise ValueError("causal padding applies to time kernels only (electrode extent must be 1)")
        pad_h = (0, 0)
        pad_t = (spec.dilation * (kw - 1), 0)
        weights = flip_time(weights)  # lag order -> correlation order
    else:  # valid
        pad_h = pad_t = (0, 0)
        if kw > 1 and spec.dilation * (kw - 1) >= x.shape[3]:
            raise ValueError(
                f"time axis too short for valid padding: dilation*(T-1)="
                f"{spec.dilation * (kw - 1)} >= {x.shape[3]} samples")
    return conv2d(x, weights, pad_h=pad_h, pad_t=pad_t, dilation=spec.dilation,
                  depthwise=spec.depthwise)


# ----------------------------------------------------------------------
# batch normalization

class RunningStats:
    """Exponential-moving-average mean/variance buffers for one norm layer."""

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def update(self, mean, var, momentum):
        self.mean[...] = momentum * self.mean + (1.0 - momentum) * mean
        self.var[...] = momentum * self.var + (1.0 - momentum) * var


def _per_channel(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm(x, gamma, beta, eps=1e-3, mode="train", running=None, momentum=0.99):
    """Normalize per channel (axis 1) over all other axes.

    Train mode uses biased batch moments and, when ``running`` is given,
    folds them into the running buffers.  Infer mode is a per-channel affine
    map using the running statistics.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    axes = tuple(i for i in range(x.ndim) if i != 1)
    if mode == "infer":
        if running is None:
            raise ValueError("running statistics are required in infer mode")
        inv = 1.0 / np.sqrt(running.var.astype(x.dtype) + eps)
        centered = x.data - _per_channel(running.mean.astype(x.dtype), x.ndim)
        scale = gamma.data * inv
        out = _per_channel(scale, x.ndim) * centered + _per_channel(beta.data, x.ndim)

        def backward(g):
            accumulate(x, g * _per_channel(scale, x.ndim))
            if gamma.requires_grad:
                accumulate(gamma, (g * centered).sum(axis=axes) * inv)
            if beta.requires_grad:
                accumulate(beta, g.sum(axis=axes))

        return from_op(out, (x, gamma, beta), backward)

    if x.shape[0] == 1:
        raise ValueError("batch of size 1 in train mode: batch variance is undefined up to eps")
    m = x.size // x.shape[1]
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - _per_channel(mu, x.ndim)) * _per_channel(inv, x.ndim)
    out = _per_channel(gamma.data, x.ndim) * xhat + _per_channel(beta.data, x.ndim)
    if running is not None:
        running.update(mu, var, momentum)

    def backward(g):
        if gamma.requires_grad:
            accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * _per_channel(gamma.data, x.ndim)
            s1 = gxhat.sum(axis=axes)
            s2 = (gxhat * xhat).sum(axis=axes)
            gx = (gxhat - _per_channel(s1 / m, x.ndim)
                  - xhat * _per_channel(s2 / m, x.ndim)) * _per_channel(inv, x.ndim)
            accumulate(x, gx.astype(x.dtype, copy=False))

    return from_op(out, (x, gamma, beta), backward)


# ----------------------------------------------------------------------
# activations, pooling, dropout, dense head

def elu(x):
    """Exponential linear unit with alpha = 1."""
    neg = x.data < 0
    out = x.data.copy()
    np.expm1(x.data, out=out, where=neg)

    def backward(g):
        gx = g.copy()
        np.multiply(g, out + 1.0, out=gx, where=neg)
        accumulate(x, gx)

    return from_op(out, (x,), backward)


def avg_pool_time(x, pool):
    """Non-overlapping mean pooling along the last axis, floor semantics."""
    if pool < 1:
        raise ValueError("pool must be >= 1")
    s = x.shape[-1]
    s_out = s // pool
    if s_out < 1:
        raise ValueError(f"pool {pool} exceeds time extent {s}")
    lead = x.shape[:-1]
    trimmed = x.data[..., :s_out * pool]
    out = trimmed.reshape(lead + (s_out, pool)).mean(axis=-1)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., :s_out * pool] = np.repeat(g / pool, pool, axis=-1)
        accumulate(x, gx)

    return from_op(out, (x,), backward)


def dropout(x, rate, mode, rng=None):
    """Inverted dropout: train mode zeroes elements w.p. ``rate`` and scales
    survivors by 1/(1-rate); infer mode is the identity."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) * scale
    out = x.data * mask

    def backward(g):
        accumulate(x, g * mask)

    return from_op(out, (x,), backward)


def dense(x, w, b):
    """Affine map on (N, D) rows: x @ w + b."""
    if x.ndim != 2:
        raise ValueError(f"dense expects a flattened (N, D) input, got {x.ndim}-D")
    out = x.data @ w.data + b.data

    def backward(g):
        accumulate(x, g @ w.data.T)
        accumulate(w, x.data.T @ g)
        accumulate(b, g.sum(axis=0))

    return from_op(out, (x, w, b), backward)


def flatten(x):
    """Collapse all axes after the batch axis, channel-major then time."""
    n = x.shape[0]
    out = x.data.reshape(n, -1)

    def backward(g):
        accumulate(x, g.reshape(x.shape))

    return from_op(out, (x,), backward)


def softmax_rows(x):
    """Row-wise softmax along the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        accumulate(x, out * (g - dot))

    return from_op(out, (x,), backward)


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy of softmax(logits) against integer labels.

    Fused for numerical stability; gradient is (softmax - onehot) / N.
    """
    labels = np.asarray(labels)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"labels must be shape ({n},), got {labels.shape}")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    picked = shifted[np.arange(n), labels] - np.log(e.sum(axis=-1))
    out = np.asarray(-picked.mean(), dtype=logits.dtype)

    def backward(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1.0
        accumulate(logits, (float(g) / n) * gl)

    return from_op(out, (logits,), backward)

"""Neural layers: convolutions, linear, layer norm, GELU, cross-entropy.

Convolutions run as im2col-style window extraction plus a contraction;
the naive nested-loop form lives in the test suite as the oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor


@dataclass
class Conv2dParams:
    weight: Tensor            # [out_ch, in_ch/groups, k, k]
    bias: Optional[Tensor]    # [out_ch]
    stride: int = 1
    padding: int = 0
    groups: int = 1


@dataclass
class LinearParams:
    weight: Tensor            # [out_dim, in_dim]
    bias: Optional[Tensor]    # [out_dim]


@dataclass
class LayerNormParams:
    gamma: Tensor             # [dim]
    beta: Tensor              # [dim]
    eps: float = 1e-5


def same_padding(k: int) -> int:
    """Padding that preserves spatial extent for odd k at stride 1."""
    if k % 2 == 0:
        raise ConfigError(f"only odd kernel sizes are supported, got {k}")
    return (k - 1) // 2


# --------------------------------------------------------------------------
# initializers: uniform +-1/sqrt(fan_in) weights, zero biases
# --------------------------------------------------------------------------

def linear_init(in_dim: int, out_dim: int, *, bias: bool = True, seed: int = 0,
                dtype: str = "f32") -> LinearParams:
    bound = 1.0 / math.sqrt(in_dim)
    w = T.uniform([out_dim, in_dim], -bound, bound, seed=seed, dtype=dtype, requires_grad=True)
    b = T.zeros([out_dim], dtype=dtype, requires_grad=True) if bias else None
    return LinearParams(w, b)


def conv2d_init(in_ch: int, out_ch: int, k: int, *, stride: int = 1, padding: int = 0,
                groups: int = 1, bias: bool = True, seed: int = 0, dtype: str = "f32") -> Conv2dParams:
    if in_ch % groups or out_ch % groups:
        raise ConfigError(f"channels ({in_ch}->{out_ch}) not divisible by groups={groups}")
    if k % 2 == 0:
        raise ConfigError(f"only odd kernel sizes are supported, got {k}")
    fan_in = (in_ch // groups) * k * k
    bound = 1.0 / math.sqrt(fan_in)
    w = T.uniform([out_ch, in_ch // groups, k, k], -bound, bound, seed=seed, dtype=dtype, requires_grad=True)
    b = T.zeros([out_ch], dtype=dtype, requires_grad=True) if bias else None
    return Conv2dParams(w, b, stride=stride, padding=padding, groups=groups)


def layer_norm_init(dim: int, *, dtype: str = "f32", eps: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(
        T.ones([dim], dtype=dtype, requires_grad=True),
        T.zeros([dim], dtype=dtype, requires_grad=True),
        eps,
    )


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _conv_checks(x: Tensor, p: Conv2dParams):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B, C, H, W], got {list(x.shape)}")
    oc, cg, k, k2 = p.weight.shape
    if k != k2:
        raise ShapeError("non-square conv kernels are not supported")
    if k % 2 == 0:
        raise ShapeError(f"only odd kernel sizes are supported, got {k}")
    B, C, H, W = x.shape
    if C != cg * p.groups:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, weight expects {cg * p.groups}")
    if oc % p.groups:
        raise ShapeError(f"out_ch={oc} not divisible by groups={p.groups}")
    if H + 2 * p.padding < k or W + 2 * p.padding < k:
        raise ShapeError(f"kernel {k} larger than padded input {H + 2 * p.padding}x{W + 2 * p.padding}")
    oh = (H + 2 * p.padding - k) // p.stride + 1
    ow = (W + 2 * p.padding - k) // p.stride + 1
    return B, C, H, W, oc, k, oh, ow


def _col2im(dcols6: np.ndarray, xp_shape, k: int, stride: int, OH: int, OW: int) -> np.ndarray:
    """Scatter-add [B, C, OH, OW, k, k] window grads back onto the padded input."""
    dxp = np.zeros(xp_shape, dtype=dcols6.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride] += dcols6[:, :, :, :, i, j]
    return dxp


def _dx_dense_stride1(g: np.ndarray, w: np.ndarray, pad: int, H: int, W: int) -> np.ndarray:
    """Input gradient of a stride-1 conv: correlate g with the flipped kernel.

    dx[b,c,y,x] = sum_{o,i,j} g[b,o,y+pad-i,x+pad-j] w[o,c,i,j]
    """
    OC, C, k, _ = w.shape
    B = g.shape[0]
    gp = np.pad(g, [(0, 0), (0, 0), (k - 1 - pad, k - 1 - pad), (k - 1 - pad, k - 1 - pad)])
    win = sliding_window_view(gp, (k, k), axis=(2, 3))          # [B, OC, H, W, k, k]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, H * W, OC * k * k)
    wf = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, OC * k * k)
    return (cols @ wf.T).transpose(0, 2, 1).reshape(B, C, H, W)


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Grouped 2-d cross-correlation. out = floor((H + 2*pad - k)/stride) + 1.

    Runs as window extraction plus one matmul per group.
    """
    B, C, H, W, OC, k, OH, OW = _conv_checks(x, p)
    if k == 1 and p.groups == 1 and p.stride == 1 and p.padding == 0:
        return pointwise_conv2d(x, p)
    if p.groups == C == OC:
        return depthwise_conv2d(x, p)

    G = p.groups
    Cg, Og = C // G, OC // G
    stride, pad = p.stride, p.padding
    w, b = p.weight, p.bias
    P = OH * OW

    xp = np.pad(x.data, [(0, 0), (0, 0), (pad, pad), (pad, pad)]) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]  # [B,C,OH,OW,k,k]
    # one im2col buffer per group: [B, P, Cg*k*k]
    cols = [np.ascontiguousarray(win[:, gi * Cg:(gi + 1) * Cg].transpose(0, 2, 3, 1, 4, 5)
                                 ).reshape(B, P, Cg * k * k)
            for gi in range(G)]
    w2 = w.data.reshape(G, Og, Cg * k * k)
    out = np.empty((B, OC, OH, OW), dtype=x.data.dtype)
    for gi in range(G):
        y = cols[gi] @ w2[gi].T                                   # [B, P, Og]
        out[:, gi * Og:(gi + 1) * Og] = y.transpose(0, 2, 1).reshape(B, Og, OH, OW)
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        if b is not None and b.requires_grad:
            T._accumulate(b, g.sum(axis=(0, 2, 3)))
        need_dx = x.requires_grad
        dx_by_gather = stride == 1 and pad < k and G == 1
        dcols6 = np.empty((B, C, OH, OW, k, k), dtype=g.dtype) if (need_dx and not dx_by_gather) else None
        dw = np.empty_like(w.data) if w.requires_grad else None
        for gi in range(G):
            gp = g[:, gi * Og:(gi + 1) * Og].reshape(B, Og, P).transpose(0, 2, 1)  # [B,P,Og]
            if dw is not None:
                dwg = np.tensordot(gp, cols[gi], axes=([0, 1], [0, 1]))            # [Og, Cg*k*k]
                dw[gi * Og:(gi + 1) * Og] = dwg.reshape(Og, Cg, k, k)
            if need_dx and not dx_by_gather:
                dc = (gp @ w2[gi]).reshape(B, OH, OW, Cg, k, k)
                dcols6[:, gi * Cg:(gi + 1) * Cg] = dc.transpose(0, 3, 1, 2, 4, 5)
        if dw is not None:
            T._accumulate(w, dw)
        if need_dx:
            if dx_by_gather:
                T._accumulate(x, _dx_dense_stride1(g, w.data, pad, H, W))
            else:
                dxp = _col2im(dcols6, xp.shape, k, stride, OH, OW)
                T._accumulate(x, dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp)

    parents = (x, w) if b is None else (x, w, b)
    return T._make(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Per-channel convolution (groups == in_ch == out_ch).

    Shift-and-add over the k^2 taps; the contraction per output element is
    tiny, so window extraction would only inflate memory traffic.
    """
    B, C, H, W, OC, k, OH, OW = _conv_checks(x, p)
    if not (p.groups == C == OC):
        raise ShapeError(f"depthwise requires groups == in_ch == out_ch, got groups={p.groups}, {C}->{OC}")
    stride, pad = p.stride, p.padding
    w, b = p.weight, p.bias
    wk = w.data.reshape(C, k, k)

    xp = np.pad(x.data, [(0, 0), (0, 0), (pad, pad), (pad, pad)]) if pad else x.data
    out = np.zeros((B, C, OH, OW), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            out += wk[:, i, j][None, :, None, None] * \
                xp[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride]
    if b is not None:
        out += b.data[None, :, None, None]

    def backward(g):
        if w.requires_grad:
            dw = np.empty((C, k, k), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    sl = xp[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride]
                    dw[:, i, j] = (g * sl).sum(axis=(0, 2, 3))
            T._accumulate(w, dw.reshape(C, 1, k, k))
        if b is not None and b.requires_grad:
            T._accumulate(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride] += \
                        wk[:, i, j][None, :, None, None] * g
            T._accumulate(x, dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp)

    parents = (x, w) if b is None else (x, w, b)
    return T._make(out, parents, backward, "depthwise_conv2d")


def pointwise_conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """1x1 channel mixer: a per-pixel linear map, composed from matmul."""
    if p.weight.shape[2] != 1 or p.weight.shape[3] != 1:
        raise ShapeError(f"pointwise conv needs a 1x1 kernel, got {list(p.weight.shape)}")
    if p.groups != 1:
        raise ShapeError("pointwise conv uses groups == 1")
    B, C, H, W = x.shape
    OC = p.weight.shape[0]
    if p.weight.shape[1] != C:
        raise ShapeError(f"pointwise channel mismatch: input {C}, weight {p.weight.shape[1]}")
    tokens = T.permute(T.reshape(x, [B, C, H * W]), (0, 2, 1))          # [B, HW, C]
    w2 = T.reshape(p.weight, [OC, C])
    y = T.matmul(tokens, T.permute(w2, (1, 0)))                          # [B, HW, OC]
    if p.bias is not None:
        y = T.add(y, p.bias)
    return T.reshape(T.permute(y, (0, 2, 1)), [B, OC, H, W])


# --------------------------------------------------------------------------
# linear / layer norm / activations / loss
# --------------------------------------------------------------------------

def linear(x: Tensor, p: LinearParams) -> Tensor:
    """y = x W^T + b over the last axis."""
    in_dim = p.weight.shape[1]
    if x.shape[-1] != in_dim:
        raise ShapeError(f"linear expects last axis {in_dim}, got {list(x.shape)}")
    squeeze = x.ndim == 1
    if squeeze:
        x = T.reshape(x, [1, in_dim])
    y = T.matmul(x, T.permute(p.weight, (1, 0)))
    if p.bias is not None:
        y = T.add(y, p.bias)
    return T.reshape(y, [p.weight.shape[0]]) if squeeze else y


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then scale-shift."""
    dim = p.gamma.shape[0]
    if x.shape[-1] != dim:
        raise ShapeError(f"layer_norm expects last axis {dim}, got {list(x.shape)}")
    gamma, beta, eps = p.gamma, p.beta, p.eps

    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            T._accumulate(gamma, (g * xhat).reshape(-1, dim).sum(axis=0))
        if beta.requires_grad:
            T._accumulate(beta, g.reshape(-1, dim).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            T._accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return T._make(out, (x, gamma, beta), backward, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)   # 0.7978845608028654
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-form GELU: 0.5 x (1 + tanh(c (x + a x^3))), c = sqrt(2/pi), a = 0.044715."""
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * (xd * xd * xd))
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
            T._accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du))

    return T._make(out, (x,), backward, "gelu")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label], via log-sum-exp."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, num_classes], got {list(logits.shape)}")
    B, K = logits.shape
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape[0] != B:
        raise ShapeError(f"{B} rows of logits but {lab.shape[0]} labels")
    if lab.size and (lab.min() < 0 or lab.max() >= K):
        raise DataError(f"label out of range [0, {K}): {int(lab.min())}..{int(lab.max())}")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1, keepdims=True)
    lse = np.log(se) + m
    picked = z[np.arange(B), lab][:, None]
    out = np.asarray((lse - picked).mean(), dtype=z.dtype)

    def backward(g):
        if logits.requires_grad:
            p = e / se
            p[np.arange(B), lab] -= 1.0
            T._accumulate(logits, p * (np.asarray(g) / B))

    return T._make(out, (logits,), backward, "cross_entropy")

"""Minimal float64 conv-net primitives with exact manual gradients.

Everything here is sized for desk-scale feature maps (a few channels,
16x16-ish), so clarity and exactness win over throughput: convolutions are
same-padded 3x3 einsum sums over the nine kernel offsets, and every backward
pass is the exact adjoint of its forward (verified against central finite
differences in the test suite).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GN_EPS = 1e-6


def _im2col(x: np.ndarray) -> np.ndarray:
    """Unfold 3x3 same-padded patches: (B,C,H,W) -> (B, 9*C, H*W)."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, 9 * C, H * W))
    for k in range(9):
        ki, kj = divmod(k, 3)
        cols[:, k * C:(k + 1) * C, :] = \
            xp[:, :, ki:ki + H, kj:kj + W].reshape(B, C, H * W)
    return cols


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """Kernel (Cout,Cin,3,3) -> (Cout, 9*Cin) in im2col offset order."""
    Cout, Cin = w.shape[:2]
    return w.transpose(0, 2, 3, 1).reshape(Cout, 9 * Cin)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 convolution: x (B,Cin,H,W) -> (B,Cout,H,W)."""
    B, Cin, H, W = x.shape
    cols = _im2col(x)
    out = np.matmul(_kernel_matrix(w), cols)
    return out.reshape(B, w.shape[0], H, W) + b[None, :, None, None]


def conv2d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of conv2d."""
    B, Cin, H, W = x.shape
    Cout = w.shape[0]
    cols = _im2col(x)
    dyf = dy.reshape(B, Cout, H * W)
    dw2 = np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0)
    dw = dw2.reshape(Cout, 3, 3, Cin).transpose(0, 3, 1, 2).copy()
    dcols = np.matmul(_kernel_matrix(w).T, dyf)  # (B, 9*Cin, H*W)
    dxp = np.zeros((B, Cin, H + 2, W + 2))
    for k in range(9):
        ki, kj = divmod(k, 3)
        dxp[:, :, ki:ki + H, kj:kj + W] += \
            dcols[:, k * Cin:(k + 1) * Cin, :].reshape(B, Cin, H, W)
    db = dy.sum(axis=(0, 2, 3))
    return dxp[:, :, 1:-1, 1:-1], dw, db


def group_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
               groups: int) -> tuple[np.ndarray, tuple]:
    """Group normalization over (C/groups, H, W) per sample."""
    B, C, H, W = x.shape
    g = x.reshape(B, groups, C // groups, H, W)
    mu = g.mean(axis=(2, 3, 4), keepdims=True)
    var = g.var(axis=(2, 3, 4), keepdims=True)
    invstd = 1.0 / np.sqrt(var + GN_EPS)
    xhat = ((g - mu) * invstd).reshape(B, C, H, W)
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, invstd, groups)


def group_norm_backward(dy: np.ndarray, gamma: np.ndarray, cache: tuple
                        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, invstd, groups = cache
    B, C, H, W = dy.shape
    n = (C // groups) * H * W
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = (dy * gamma[None, :, None, None]) \
        .reshape(B, groups, C // groups, H, W)
    xh = xhat.reshape(B, groups, C // groups, H, W)
    s1 = dxhat.sum(axis=(2, 3, 4), keepdims=True)
    s2 = (dxhat * xh).sum(axis=(2, 3, 4), keepdims=True)
    dx = invstd * (dxhat - s1 / n - xh * s2 / n)
    return dx.reshape(B, C, H, W), dgamma, dbeta


def swish(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def swish_backward(dy: np.ndarray, x: np.ndarray, s: np.ndarray
                   ) -> np.ndarray:
    return dy * s * (1.0 + x * (1.0 - s))


@dataclass
class ConvLayer:
    """One 3x3 conv with optional group norm and swish activation."""

    weight: np.ndarray
    bias: np.ndarray
    gamma: np.ndarray | None
    beta: np.ndarray | None
    use_norm: bool
    use_act: bool
    groups: int = 1

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = [self.weight, self.bias]
        if self.use_norm:
            out += [self.gamma, self.beta]
        return out


def init_conv_layer(rng: np.random.Generator, c_in: int, c_out: int,
                    use_norm: bool, use_act: bool, groups: int = 1,
                    weight_scale: float = 1.0) -> ConvLayer:
    fan_in = c_in * 9
    w = rng.normal(0.0, weight_scale * np.sqrt(2.0 / fan_in),
                   size=(c_out, c_in, 3, 3))
    b = np.zeros(c_out)
    gamma = np.ones(c_out) if use_norm else None
    beta = np.zeros(c_out) if use_norm else None
    return ConvLayer(w, b, gamma, beta, use_norm, use_act, groups)


def layer_forward(layer: ConvLayer, x: np.ndarray,
                  extra: np.ndarray | None = None) -> tuple[np.ndarray, dict]:
    """conv -> (+extra) -> norm -> act, returning the backprop cache.

    extra is an additive pre-norm injection (timestep embedding or a skip
    branch); its gradient equals the dpre returned by layer_backward.
    """
    pre = conv2d(x, layer.weight, layer.bias)
    if extra is not None:
        pre = pre + extra
    cache = {"x": x, "pre": pre}
    h = pre
    if layer.use_norm:
        h, gn_cache = group_norm(h, layer.gamma, layer.beta, layer.groups)
        cache["gn"] = gn_cache
    if layer.use_act:
        cache["act_in"] = h
        h, s = swish(h)
        cache["s"] = s
    cache["out"] = h
    return h, cache


def layer_backward(layer: ConvLayer, cache: dict, dout: np.ndarray
                   ) -> tuple[np.ndarray, dict, np.ndarray]:
    """Backward of layer_forward.

    Returns (dx, grads, dpre) where dpre is the gradient at the post-extra
    pre-norm activation (what an additive injection receives).
    """
    d = dout
    if layer.use_act:
        d = swish_backward(d, cache["act_in"], cache["s"])
    grads = {}
    if layer.use_norm:
        d, dgamma, dbeta = group_norm_backward(d, layer.gamma, cache["gn"])
        grads["gamma"] = dgamma
        grads["beta"] = dbeta
    dpre = d
    dx, dw, db = conv2d_backward(cache["x"], layer.weight, dpre)
    grads["weight"] = dw
    grads["bias"] = db
    return dx, grads, dpre


class Adam:
    """Adaptive-moment optimizer over a flat list of parameter arrays."""

    def __init__(self, arrays: list[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.step = 0

    def update(self, arrays: list[np.ndarray], grads: list[np.ndarray]):
        self.step += 1
        bc1 = 1.0 - self.beta1 ** self.step
        bc2 = 1.0 - self.beta2 ** self.step
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

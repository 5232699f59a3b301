"""Numpy layer primitives with hand-written backward passes."""
import math

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def linear_forward(x, w, b):
    return x @ w + b


def linear_backward(dout, x, w):
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ w.T, x2.T @ d2, d2.sum(axis=0)


def layernorm_forward(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layernorm_backward(dout, cache):
    xhat, inv_std, gain = cache
    dgain = (dout * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbias = dout.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dout * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def gelu_forward(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    return 0.5 * x * (1.0 + th), (x, th)


def gelu_backward(dout, cache):
    x, th = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dout * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding of a scalar timestep."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = float(t) * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb


def position_embedding_3d(shape, dim):
    """Fixed sinusoidal (t, h, w) embedding in raster order, ``(prod(shape), dim)``.

    Each axis gets an even share of the channels; leftovers stay zero.
    """
    per_axis = (dim // 3) // 2 * 2
    coords = np.indices(shape).reshape(3, -1).T.astype(np.float64)
    out = np.zeros((coords.shape[0], dim))
    if per_axis == 0:
        return out
    half = per_axis // 2
    freqs = np.exp(-math.log(100.0) * np.arange(half) / max(half, 1))
    for a in range(3):
        args = coords[:, a : a + 1] * freqs[None, :]
        out[:, a * per_axis : a * per_axis + half] = np.sin(args)
        out[:, a * per_axis + half : (a + 1) * per_axis] = np.cos(args)
    return out


class Adam:
    """Adam over a dict of arrays, updated in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

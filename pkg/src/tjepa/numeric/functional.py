"""Composite differentiable ops used by the encoders, predictor and heads."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor

_GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def linear_forward(x: Tensor, W: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ W + bias`` with ``W`` stored as (in, out)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    out = x @ W
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {W.shape}")
        out = out + bias
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return Tensor._from_op(data, tensors, backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return Tensor._from_op(data, tensors, backward)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax; ``mask`` (True = keep) zeroes excluded entries."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    a = x.data
    n = a.shape[-1]
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gm = gamma.data
    out = xhat * gm + beta.data
    lead = tuple(range(a.ndim - 1))

    def backward(g):
        dxhat = g * gm
        dx = rstd / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(out, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    a = x.data
    a2 = a * a
    t = np.tanh(_GELU_C * a * (1.0 + 0.044715 * a2))
    out = 0.5 * a * (1.0 + t)

    def backward(g):
        dt = _GELU_C * (1.0 + 3 * 0.044715 * a2) * (1.0 - t * t)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * dt),)

    return Tensor._from_op(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    return as_tensor(x).relu()


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ConfigurationError("dropout probability must be < 1")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def backward(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward)


ATTENTION_KEYS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")


def multi_head_self_attention(
    x: Tensor,
    params: dict,
    num_heads: int,
    key_mask: np.ndarray | None = None,
) -> Tensor:
    """Scaled dot-product self-attention over the token axis (second to last).

    ``x`` is (..., n, h).  ``key_mask`` is a boolean (..., n) array marking
    tokens that may be attended to; every row needs at least one True.
    No causal masking: tokens are an unordered set.
    """
    x = as_tensor(x)
    h = x.shape[-1]
    if num_heads < 1 or h % num_heads:
        raise ConfigurationError(f"hidden size {h} is not divisible by num_heads={num_heads}")
    dh = h // num_heads
    lead = x.shape[:-2]
    n = x.shape[-2]

    def heads(t: Tensor) -> Tensor:
        t = t.reshape(lead + (n, num_heads, dh))
        nd = t.ndim
        return t.swapaxes(nd - 3, nd - 2)  # (..., H, n, dh)

    q = heads(linear_forward(x, params["Wq"], params["bq"]))
    k = heads(linear_forward(x, params["Wk"], params["bk"]))
    v = heads(linear_forward(x, params["Wv"], params["bv"]))
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
    attn = softmax(scores, axis=-1, mask=mask)
    ctx = attn @ v  # (..., H, n, dh)
    nd = ctx.ndim
    ctx = ctx.swapaxes(nd - 3, nd - 2).reshape(lead + (n, h))
    return linear_forward(ctx, params["Wo"], params["bo"])


def conv2d(x: Tensor, W: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 'same' convolution, stride 1.

    ``x`` is (N, C, H, W); ``W`` is stored as (C * 9, C_out) so the op is an
    im2col matmul.
    """
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects (N, C, H, W), got {x.shape}")
    n, c, hh, ww = x.shape
    if W.shape[0] != c * 9:
        raise DimensionError(f"conv2d: kernel {W.shape} does not match {c} input channels")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # N,C,H,W,3,3
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, hh, ww, c * 9)
    out = cols @ W.data
    parents = [x, W]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    out = out.transpose(0, 3, 1, 2)

    def backward(g):
        g = g.transpose(0, 2, 3, 1)  # N,H,W,C_out
        flat = g.reshape(-1, g.shape[-1])
        dW = cols.reshape(-1, c * 9).T @ flat
        dcols = (g @ W.data.T).reshape(n, hh, ww, c, 3, 3)
        dxp = np.zeros_like(xp)
        for ki in range(3):
            for kj in range(3):
                dxp[:, :, ki : ki + hh, kj : kj + ww] += dcols[..., ki, kj].transpose(0, 3, 1, 2)
        grads = [dxp[:, :, 1:-1, 1:-1], dW]
        if bias is not None:
            grads.append(flat.sum(axis=0))
        return grads

    return Tensor._from_op(np.ascontiguousarray(out), parents, backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over the last two axes; odd edges dropped."""
    x = as_tensor(x)
    *lead, hh, ww = x.shape
    ho, wo = hh // 2, ww // 2
    if ho == 0 or wo == 0:
        raise DimensionError(f"max_pool2d: spatial size {(hh, ww)} is smaller than the 2x2 window")
    a = x.data[..., : 2 * ho, : 2 * wo].reshape(*lead, ho, 2, wo, 2)
    a = np.moveaxis(a, -3, -2).reshape(*lead, ho, wo, 4)
    arg = a.argmax(axis=-1)
    out = np.take_along_axis(a, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        win = np.zeros(a.shape, dtype=g.dtype)
        np.put_along_axis(win, arg[..., None], g[..., None], axis=-1)
        win = np.moveaxis(win.reshape(*lead, ho, wo, 2, 2), -2, -3).reshape(*lead, 2 * ho, 2 * wo)
        dx = np.zeros(x.shape, dtype=g.dtype)
        dx[..., : 2 * ho, : 2 * wo] = win
        return (dx,)

    return Tensor._from_op(out, (x,), backward)


class BatchNorm:
    """Batch normalization over every axis except ``channel_axis``.

    Training uses batch statistics (biased variance) and updates running
    estimates (unbiased variance); evaluation uses the running estimates.
    """

    def __init__(self, num_features: int, channel_axis: int = 1, momentum: float = 0.1, eps: float = 1e-5, dtype=None):
        from .tensor import get_default_dtype, parameter

        dtype = dtype or get_default_dtype()
        self.channel_axis = channel_axis
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(num_features, dtype=dtype))
        self.beta = parameter(np.zeros(num_features, dtype=dtype))
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def parameters(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}

    def _shape(self, ndim: int) -> tuple:
        shape = [1] * ndim
        shape[self.channel_axis] = -1
        return tuple(shape)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x = as_tensor(x)
        shape = self._shape(x.ndim)
        channel = self.channel_axis % x.ndim
        axes = tuple(i for i in range(x.ndim) if i != channel)
        g = self.gamma.data.reshape(shape)
        b = self.beta.data.reshape(shape)
        if not training:
            scale = (1.0 / np.sqrt(self.running_var + self.eps)).reshape(shape)
            return (x - self.running_mean.reshape(shape)) * scale * self.gamma.reshape(shape) + self.beta.reshape(shape)
        a = x.data
        count = a.size // a.shape[channel]
        mu = a.mean(axis=axes, keepdims=True)
        xc = a - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        rstd = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * rstd
        out = xhat * g + b
        m = self.momentum
        unbiased = var.reshape(-1) * (count / max(count - 1, 1))
        self.running_mean = ((1 - m) * self.running_mean + m * mu.reshape(-1)).astype(self.running_mean.dtype)
        self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)

        def backward(grad):
            dxhat = grad * g
            dx = rstd / count * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return dx, (grad * xhat).sum(axis=axes), grad.sum(axis=axes)

        return Tensor._from_op(out, (x, self.gamma, self.beta), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    if logits.ndim != 2 or len(labels) != logits.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs {len(labels)} labels")
    logp = log_softmax(logits, axis=-1)
    return -(logp[np.arange(len(labels)), labels].mean())

"""Neural layers shared by all four Q-network variants.

Every layer exposes ``parameters()`` returning ordered ``(name, Tensor)``
pairs so optimizers and checkpointing can walk the whole model without
knowing its structure.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform fan-in scaled init (limit sqrt(6/fan_in))."""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Linear:
    """Affine map x @ W + b broadcasting over leading dims."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(he_uniform(rng, (in_dim, out_dim), in_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(
                f"linear expects last extent {self.in_dim}, got input shape {x.shape}"
            )
        return T.matmul(x, self.weight) + self.bias

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.shift, self.eps)

    def parameters(self):
        return [("gain", self.gain), ("shift", self.shift)]


class BatchNorm2d:
    """Per-channel batch normalization with running eval statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return T.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training,
            self.momentum,
            self.eps,
        )

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class Conv2d:
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        stride: int,
        rng: np.random.Generator,
    ):
        fan_in = in_channels * kernel * kernel
        self.stride = stride
        self.kernel = Tensor(
            he_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, self.bias, self.stride)

    def parameters(self):
        return [("kernel", self.kernel), ("bias", self.bias)]


class Dropout:
    """Inverted dropout; the default rate of 0 makes it the identity."""

    def __init__(self, rate: float = 0.0):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate

    def __call__(self, x: Tensor, training: bool, rng=None) -> Tensor:
        if not training or self.rate == 0.0:
            return x
        if rng is None:
            raise ConfigError("dropout with rate > 0 needs an rng in training mode")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) < keep).astype(np.float64) / keep
        return x * Tensor(mask)

    def parameters(self):
        return []


class MultiHeadAttention:
    """Scaled dot-product self-attention with h heads over [B,S,d]."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        B, S, d = x.shape
        h, dk = self.heads, self.head_dim

        def split(t: Tensor) -> Tensor:
            return t.reshape(B, S, h, dk).transpose(0, 2, 1, 3)  # [B,h,S,dk]

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dk))
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)  # [B,h,S,dk]
        merged = ctx.transpose(0, 2, 1, 3).reshape(B, S, d)
        return self.wo(merged)

    def parameters(self):
        out = []
        for pname, layer in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out += [(f"{pname}.{n}", p) for n, p in layer.parameters()]
        return out


class GatedTXLLayer:
    """One gated transformer encoder layer.

    Pre-norm attention and feed-forward sublayers, each followed by a sigmoid
    gate over the concatenation of the sublayer's input and output. In the
    default ``literal`` mode the gate activation itself is added residually
    (Y = X + Dropout(G1)); ``multiplicative`` mode instead adds the gated
    sublayer output (Y = X + Dropout(G1 * Attn)). The layer output is
    layer-normalized.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        ff_dim: int,
        rng: np.random.Generator,
        dropout: float = 0.0,
        gate_mode: str = "literal",
    ):
        if gate_mode not in ("literal", "multiplicative"):
            raise ConfigError(f"unknown gate_mode {gate_mode!r}")
        self.dim = dim
        self.gate_mode = gate_mode
        self.norm_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.gate1 = Linear(2 * dim, dim, rng)
        self.norm_ff = LayerNorm(dim)
        self.ff1 = Linear(dim, ff_dim, rng)
        self.ff2 = Linear(ff_dim, dim, rng)
        self.gate2 = Linear(2 * dim, dim, rng)
        self.norm_out = LayerNorm(dim)
        self.dropout = Dropout(dropout)

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        a = self.attn(self.norm_attn(x))
        g1 = self.gate1(T.cat([x, a], axis=-1)).sigmoid()
        inc1 = g1 if self.gate_mode == "literal" else g1 * a
        y = x + self.dropout(inc1, training, rng)
        f = self.ff2(self.ff1(self.norm_ff(y)).relu())
        g2 = self.gate2(T.cat([y, f], axis=-1)).sigmoid()
        inc2 = g2 if self.gate_mode == "literal" else g2 * f
        z = y + self.dropout(inc2, training, rng)
        return self.norm_out(z)

    def parameters(self):
        groups = [
            ("norm_attn", self.norm_attn),
            ("attn", self.attn),
            ("gate1", self.gate1),
            ("norm_ff", self.norm_ff),
            ("ff1", self.ff1),
            ("ff2", self.ff2),
            ("gate2", self.gate2),
            ("norm_out", self.norm_out),
        ]
        return [(f"{g}.{n}", p) for g, layer in groups for n, p in layer.parameters()]


class GatedEncoder:
    """Stack of gated layers; each layer's output feeds the next."""

    def __init__(self, layers: list):
        if not layers:
            raise ConfigError("encoder needs at least one layer")
        self.layers = list(layers)

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, training, rng)
        return x

    def parameters(self):
        return [
            (f"layer{i}.{n}", p)
            for i, layer in enumerate(self.layers)
            for n, p in layer.parameters()
        ]


class AttentionPooling:
    """Collapse [B,S,E] to [B,E] with learned softmax scores over S."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.score = Linear(dim, 1, rng)

    def weights(self, x: Tensor) -> Tensor:
        scores = self.score(x)  # [B,S,1]
        return T.softmax(scores.reshape(x.shape[0], x.shape[1]), axis=-1)

    def __call__(self, x: Tensor) -> Tensor:
        w = self.weights(x)  # [B,S]
        return (x * w.reshape(x.shape[0], x.shape[1], 1)).sum(axis=1)

    def parameters(self):
        return [(f"score.{n}", p) for n, p in self.score.parameters()]


class PositionalEmbedding:
    """Learnable per-position offsets, broadcast over the batch."""

    def __init__(self, max_len: int, dim: int, rng: np.random.Generator, scale: float = 0.02):
        self.max_len = max_len
        self.dim = dim
        self.table = Tensor(
            rng.standard_normal((1, max_len, dim)) * scale, requires_grad=True
        )

    def __call__(self, x: Tensor) -> Tensor:
        B, S, E = x.shape
        if S > self.max_len:
            raise ShapeError(
                f"sequence length {S} exceeds positional table length {self.max_len}"
            )
        if E != self.dim:
            raise ShapeError(f"embed dim {E} != positional table dim {self.dim}")
        return x + self.table[:, :S, :]

    def parameters(self):
        return [("table", self.table)]

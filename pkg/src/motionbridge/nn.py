"""Attention-based sequence blocks shared by the VAE, diffusion generator and classifier."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

D_MODEL = 64
N_HEADS = 4
PERIOD = 25


class Parameter(Tensor):
    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Attribute-walking parameter container."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            full = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 init: str = "xavier"):
        if init == "xavier":
            w = rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))
        elif init == "zeros":
            w = np.zeros((n_in, n_out))
        elif init == "identity":
            w = np.eye(n_in, n_out)
        elif init == "small":
            w = rng.normal(0.0, 0.01, size=(n_in, n_out))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out)) if bias else None
        self.n_in, self.n_out = n_in, n_out

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise T.ShapeError(f"Linear({self.n_in}->{self.n_out}): input width {x.shape[-1]}")
        if x.ndim == 1:
            return self.forward(T.reshape(x, (1, -1)))[0]
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d))
        self.shift = Parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x) * self.gain + self.shift


class MLP(Module):
    """Affine layers with GELU between them; the last layer is linear."""

    def __init__(self, widths: list[int], rng: np.random.Generator, last_init: str = "xavier"):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        n = len(widths) - 1
        self.layers = [Linear(widths[i], widths[i + 1], rng,
                              init=last_init if i == n - 1 else "xavier") for i in range(n)]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x


# -- positional encodings and masks ------------------------------------------

def periodic_pos_enc(t, period: int, d: int) -> np.ndarray:
    """Sinusoidal encoding of ``t mod period``; shape ``(..., d)``."""
    if period < 1:
        raise ValueError("period must be >= 1")
    pos = np.mod(np.asarray(t, dtype=np.float64), period)[..., None]
    i = np.arange(d)
    freq = 1.0 / (10000.0 ** ((i - i % 2) / d))
    ang = pos * freq
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


def sinusoid_enc(t, d: int) -> np.ndarray:
    """Plain (non-repeating) sinusoidal encoding."""
    pos = np.asarray(t, dtype=np.float64)[..., None]
    i = np.arange(d)
    freq = 1.0 / (10000.0 ** ((i - i % 2) / d))
    ang = pos * freq
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


@dataclass(frozen=True)
class MaskSpec:
    kind: str
    period: int
    matrix: np.ndarray  # additive, 0/negative bias or -inf

    @property
    def allowed(self) -> np.ndarray:
        return np.isfinite(self.matrix)

    @property
    def bias(self) -> np.ndarray:
        return np.where(self.allowed, self.matrix, 0.0)


def no_mask(n: int) -> MaskSpec:
    return MaskSpec("none", 1, np.zeros((n, n)))


def periodic_causal_mask(n: int, period: int) -> MaskSpec:
    """Causal mask whose allowed entries get bias -floor((i - j) / period)."""
    if n < 1 or period < 1:
        raise ValueError("length and period must be >= 1")
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    bias = -np.floor((i - j) / period)
    return MaskSpec("periodic-causal", period, np.where(j > i, -np.inf, bias))


def prefixed_periodic_causal_mask(n_frames: int, period: int) -> MaskSpec:
    """Periodic-causal mask over frames with a leading summary token that sees everything."""
    inner = periodic_causal_mask(n_frames, period).matrix
    m = np.zeros((n_frames + 1, n_frames + 1))
    m[1:, 1:] = inner
    return MaskSpec("periodic-causal", period, m)


# -- attention ---------------------------------------------------------------

class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.d // self.heads).transpose(0, 2, 1, 3)

    def forward(self, xq: Tensor, xkv: Tensor, mask: MaskSpec | None = None) -> Tensor:
        if xq.ndim != 3 or xkv.ndim != 3:
            raise T.ShapeError("attention expects (batch, tokens, width) inputs")
        if xq.shape[-1] != self.d or xkv.shape[-1] != self.d:
            raise T.ShapeError(f"attention width mismatch: query {xq.shape[-1]}, "
                               f"key/value {xkv.shape[-1]}, model {self.d}")
        b, nq, _ = xq.shape
        q, k, v = self._split(self.q(xq)), self._split(self.k(xkv)), self._split(self.v(xkv))
        scores = (q @ k.T) * (1.0 / np.sqrt(self.d // self.heads))
        allowed = None
        if mask is not None:
            if mask.matrix.shape != (nq, xkv.shape[1]):
                raise T.ShapeError(f"mask shape {mask.matrix.shape} vs scores {(nq, xkv.shape[1])}")
            if mask.kind != "none":
                scores = scores + mask.bias
                allowed = mask.allowed
        att = T.softmax(scores, axis=-1, mask=allowed)
        self.last_attention = att.data
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, nq, self.d)
        return self.o(out)


def mhsa(attn: MultiHeadAttention, x: Tensor, mask: MaskSpec | None = None) -> Tensor:
    return attn(x, x, mask)


def mhca(attn: MultiHeadAttention, query: Tensor, kv: Tensor) -> Tensor:
    return attn(query, kv, None)


class SelfAttentionBlock(Module):
    """Pre-norm transformer layer: x + MHSA(LN x); x + FFN(LN x)."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ff_mult: int = 2):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.ff = MLP([d, ff_mult * d, d], rng)

    def forward(self, x: Tensor, mask: MaskSpec | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ff(self.norm2(x))


class CrossAttentionBlock(Module):
    """Pre-norm layer with cross attention from query tokens onto a key/value set."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, ff_mult: int = 2):
        self.norm_q = LayerNorm(d)
        self.norm_kv = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.ff = MLP([d, ff_mult * d, d], rng)

    def forward(self, x: Tensor, kv: Tensor) -> Tensor:
        kvn = self.norm_kv(kv)
        x = x + self.attn(self.norm_q(x), kvn, None)
        return x + self.ff(self.norm2(x))


class TokenEncoder(Module):
    """Learnable prefix token + positional encoding + MHSA stack -> prefix output.

    The prefix token's output after the stack is the sequence embedding.
    """

    def __init__(self, n_in: int, d: int, rng: np.random.Generator, layers: int = 2,
                 heads: int = N_HEADS, period: int = PERIOD, causal: bool = False):
        self.n_in, self.d, self.period, self.causal = n_in, d, period, causal
        self.inp = Linear(n_in, d, rng)
        self.token = Parameter(rng.normal(0.0, 0.02, size=(1, 1, d)))
        self.blocks = [SelfAttentionBlock(d, heads, rng) for _ in range(layers)]
        self.norm = LayerNorm(d)

    def tokens(self, frames: Tensor) -> Tensor:
        b, n, f = frames.shape
        if f != self.n_in:
            raise T.ShapeError(f"encoder expects frame width {self.n_in}, got {f}")
        h = self.inp(frames) + periodic_pos_enc(np.arange(n), self.period, self.d)
        tok = T.broadcast_to(self.token, (b, 1, self.d))
        return T.concat([tok, h], axis=1)

    def mask(self, n: int) -> MaskSpec:
        if self.causal:
            return prefixed_periodic_causal_mask(n, self.period)
        return no_mask(n + 1)

    def forward(self, frames: Tensor) -> Tensor:
        x = self.tokens(frames)
        m = self.mask(frames.shape[1])
        for blk in self.blocks:
            x = blk(x, m)
        return self.norm(x[:, 0, :])

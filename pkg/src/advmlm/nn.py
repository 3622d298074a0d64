"""Neural network layers built on :mod:`advmlm.tensor`."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, Tensor


@dataclass(frozen=True)
class GruConfig:
    num_layers: int = 3
    embed_dim: int = 128
    hidden_dim: int = 64
    bidirectional: bool = True

    def __post_init__(self):
        if min(self.num_layers, self.embed_dim, self.hidden_dim) <= 0:
            raise ContractViolation("GRU dimensions must be positive")

    @property
    def output_dim(self) -> int:
        return self.hidden_dim * (2 if self.bidirectional else 1)


@dataclass(frozen=True)
class TransformerConfig:
    num_layers: int = 4
    num_heads: int = 4
    model_dim: int = 128
    ff_dim: int = 512
    max_seq_len: int = 256
    dropout_rate: float = 0.1

    def __post_init__(self):
        if min(self.num_layers, self.num_heads, self.model_dim, self.ff_dim, self.max_seq_len) <= 0:
            raise ContractViolation("transformer dimensions must be positive")
        if self.model_dim % self.num_heads:
            raise ContractViolation("model_dim must be divisible by num_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractViolation("dropout_rate must lie in [0, 1)")


class Module:
    """Minimal parameter container.

    Attributes holding a grad-requiring :class:`Tensor` are parameters;
    attributes holding a :class:`Module` (or a list of them) are children.
    Registration order fixes the parameter order, which checkpoints rely on.
    """

    def __setattr__(self, name, value):
        self.__dict__.setdefault("_order", [])
        if name != "_order" and name not in self._order and _is_registrable(value):
            self._order.append(name)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name in self.__dict__.get("_order", []):
            value = getattr(self, name)
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            else:
                for i, child in enumerate(value):
                    out.update(child.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self


def _is_registrable(value) -> bool:
    if isinstance(value, (Tensor, Module)):
        return True
    return isinstance(value, list) and bool(value) and all(isinstance(v, Module) for v in value)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(T.get_default_dtype())
    return Tensor(data, requires_grad=True)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = uniform_init(rng, (in_dim, out_dim), in_dim)
        self.bias = uniform_init(rng, (out_dim,), in_dim)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        dtype = T.get_default_dtype()
        self.weight = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias)


class Embedding(Module):
    """Embedding table usable with hard ids or soft one-hot rows."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.table = uniform_init(rng, (vocab_size, dim), vocab_size)

    def __call__(self, x) -> Tensor:
        return embed(x, self.table)


def embed(x, table: Tensor) -> Tensor:
    """Embed integer ids (lookup) or soft one-hot rows (``x @ table``)."""
    if isinstance(x, Tensor) and np.issubdtype(x.dtype, np.floating):
        if x.shape[-1] != table.shape[0]:
            raise ContractViolation(f"soft input width {x.shape[-1]} != vocab size {table.shape[0]}")
        sums = x.data.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-4):
            raise ContractViolation("soft one-hot rows must sum to 1")
        return x @ table
    return T.embedding(np.asarray(x.data if isinstance(x, Tensor) else x), table)


# --------------------------------------------------------------------- GRU
class GRULayer(Module):
    """One direction of one GRU layer; gate order (reset, update, candidate)."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, reverse: bool = False):
        self.w_ih = uniform_init(rng, (in_dim, 3 * hidden), in_dim)
        self.b_ih = uniform_init(rng, (3 * hidden,), hidden)
        self.w_hh = uniform_init(rng, (3 * hidden, hidden), hidden)
        self.b_hh = uniform_init(rng, (3 * hidden,), hidden)
        self.reverse = reverse

    def __call__(self, x: Tensor, mask) -> Tensor:
        gi = x @ self.w_ih + self.b_ih
        return T.gru_sequence(gi, self.w_hh, self.b_hh, mask, reverse=self.reverse)


class GRU(Module):
    def __init__(self, cfg: GruConfig, rng: np.random.Generator):
        self.cfg = cfg
        layers = []
        in_dim = cfg.embed_dim
        for _ in range(cfg.num_layers):
            layers.append(GRULayer(in_dim, cfg.hidden_dim, rng))
            if cfg.bidirectional:
                layers.append(GRULayer(in_dim, cfg.hidden_dim, rng, reverse=True))
            in_dim = cfg.output_dim
        self.layers = layers

    def __call__(self, x: Tensor, valid_tokens_mask) -> Tensor:
        return gru_forward(self, x, valid_tokens_mask)


def gru_forward(gru: GRU, x: Tensor, valid_tokens_mask) -> Tensor:
    """Stacked (optionally bidirectional) GRU; outputs at invalid positions are zero."""
    mask = np.asarray(valid_tokens_mask, dtype=x.dtype)
    if mask.shape != x.shape[:2] or np.any((mask != 0) & (mask != 1)):
        raise ContractViolation("valid_tokens_mask must be a binary [batch, seq] matrix")
    step = 2 if gru.cfg.bidirectional else 1
    h = x
    for i in range(0, len(gru.layers), step):
        outs = [layer(h, mask) for layer in gru.layers[i : i + step]]
        h = outs[0] if step == 1 else T.concat(outs, axis=-1)
    return h


# ------------------------------------------------------------- transformer
class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, key_mask: np.ndarray, rate: float = 0.0, rng=None) -> Tensor:
        B, S, D = x.shape
        h, dh = self.heads, D // self.heads

        def split(t: Tensor) -> Tensor:
            return t.reshape(B, S, h, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
        attn = T.masked_softmax(scores, key_mask[:, None, None, :])
        attn = dropout(attn, rate, rng)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, S, D)
        return self.out(ctx)

    def attention_weights(self, x: Tensor, key_mask: np.ndarray) -> np.ndarray:
        B, S, D = x.shape
        h, dh = self.heads, D // self.heads
        q = self.q(x).data.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        k = self.k(x).data.reshape(B, S, h, dh).transpose(0, 2, 1, 3)
        scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(dh)
        return T.masked_softmax(Tensor._wrap(scores), key_mask[:, None, None, :]).data


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + ff(ln(x))."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.model_dim)
        self.attn = MultiHeadAttention(cfg.model_dim, cfg.num_heads, rng)
        self.ln2 = LayerNorm(cfg.model_dim)
        self.ff1 = Linear(cfg.model_dim, cfg.ff_dim, rng)
        self.ff2 = Linear(cfg.ff_dim, cfg.model_dim, rng)
        self.rate = cfg.dropout_rate

    def __call__(self, x: Tensor, key_mask: np.ndarray, rng=None) -> Tensor:
        x = x + dropout(self.attn(self.ln1(x), key_mask, self.rate, rng), self.rate, rng)
        ff = self.ff2(T.gelu(self.ff1(self.ln2(x))))
        return x + dropout(ff, self.rate, rng)


class TransformerEncoder(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.pos = uniform_init(rng, (cfg.max_seq_len, cfg.model_dim), cfg.max_seq_len)
        self.blocks = [TransformerBlock(cfg, rng) for _ in range(cfg.num_layers)]

    def __call__(self, x: Tensor, valid_tokens_mask, rng=None) -> Tensor:
        return transformer_forward(self, x, valid_tokens_mask, rng)


def transformer_forward(enc: TransformerEncoder, x: Tensor, valid_tokens_mask, rng=None) -> Tensor:
    """Add learned positions, then run the blocks with attention restricted to valid keys.

    ``rng`` enables dropout; pass None for deterministic evaluation.
    """
    B, S, _ = x.shape
    if S > enc.cfg.max_seq_len:
        raise ContractViolation(f"sequence length {S} exceeds max_seq_len {enc.cfg.max_seq_len}")
    key_mask = np.asarray(valid_tokens_mask, dtype=bool)
    h = x + enc.pos[:S]
    for block in enc.blocks:
        h = block(h, key_mask, rng)
    return h


class MLMHead(Module):
    """Projects hidden states to unnormalised logits over the full vocabulary."""

    # Small weights and zero bias keep the untrained logits near-uniform.
    INIT_SCALE = 0.02

    def __init__(self, dim: int, vocab_size: int, rng: np.random.Generator):
        self.proj = Linear(dim, vocab_size, rng)
        dtype = T.get_default_dtype()
        self.proj.weight.data = rng.uniform(-self.INIT_SCALE, self.INIT_SCALE, size=(dim, vocab_size)).astype(dtype)
        self.proj.bias.data = np.zeros(vocab_size, dtype=dtype)

    def __call__(self, h: Tensor) -> Tensor:
        return self.proj(h)


def mlm_head(head: MLMHead, h: Tensor) -> Tensor:
    return head(h)

"""Trainable building blocks: parameter containers, Transformer encoder, recurrent layers."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, Optional

import numpy as np

from .. import tensor as T
from ..tensor import Tensor


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data[...] = arr


def _param(array) -> Tensor:
    return Tensor(array, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _param(rng.standard_normal((d_in, d_out)) / math.sqrt(d_in))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = _param(np.ones(d))
        self.beta = _param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 128
    max_len: int = 128
    vocab_size: int = 0
    seed: int = 0
    rnn_cell: str = "gru"
    rnn_hidden: int = 0

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_len < 4:
            raise ValueError("max_len must be at least 4")
        if self.rnn_cell not in ("gru", "lstm"):
            raise ValueError(f"unknown rnn_cell {self.rnn_cell!r}")

    def to_dict(self) -> dict:
        return asdict(self)


_MASK_VALUE = -1e9


class EncoderLayer(Module):
    """Post-norm block: self-attention + residual + norm, feed-forward + residual + norm."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.norm1 = LayerNorm(d)
        self.ff1 = Linear(d, cfg.ffn_dim, rng)
        self.ff2 = Linear(cfg.ffn_dim, d, rng)
        self.norm2 = LayerNorm(d)

    def _heads(self, x: Tensor, B: int, L: int) -> Tensor:
        return T.transpose(T.reshape(x, (B, L, self.n_heads, -1)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, bias: np.ndarray) -> Tensor:
        B, L, d = x.shape
        dh = d // self.n_heads
        q = self._heads(self.q(x), B, L)
        k = self._heads(self.k(x), B, L)
        v = self._heads(self.v(x), B, L)
        scores = T.scale(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh)) + bias
        ctx = T.softmax(scores, axis=-1) @ v
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, d))
        x = self.norm1(x + self.out(ctx))
        return self.norm2(x + self.ff2(T.gelu(self.ff1(x))))


class TransformerEncoder(Module):
    """Token + learned position embeddings followed by ``n_layers`` encoder blocks.

    Masked (PAD) key positions get an additive ``-1e9`` bias, which makes
    their attention weight exactly zero after the softmax.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        d = cfg.d_model
        self.tok_emb = _param(rng.standard_normal((cfg.vocab_size, d)))
        self.pos_emb = _param(rng.standard_normal((cfg.max_len, d)) * 0.1)
        self.emb_norm = LayerNorm(d)
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]

    def __call__(self, ids: np.ndarray, mask: np.ndarray, extra_rows: Optional[Tensor] = None,
                 offsets: Optional[Tensor] = None) -> Tensor:
        """Hidden states ``[B, L, d]`` for id matrix ``ids`` and boolean ``mask``.

        ``extra_rows`` extends the token table (ids beyond the vocabulary),
        used for the marker embeddings of a weight-shared encoder.
        ``offsets`` (``[B, L, d]``) is added to the input embeddings, e.g.
        segment embeddings of a concatenated pair.
        """
        ids = np.asarray(ids)
        L = ids.shape[1]
        table = self.tok_emb if extra_rows is None else T.concat([self.tok_emb, extra_rows], axis=0)
        x = T.embedding(table, ids) + self.pos_emb[:L]
        if offsets is not None:
            x = x + offsets
        x = self.emb_norm(x)
        bias = np.where(mask, 0.0, _MASK_VALUE).astype(x.dtype)[:, None, None, :]
        for layer in self.layers:
            x = layer(x, bias)
        return x


def pool_cls(hidden: Tensor) -> Tensor:
    """First-position vector; ``[L, d] -> [d]`` or ``[B, L, d] -> [B, d]``."""
    if hidden.shape[-2] < 1:
        raise ValueError("cannot pool an empty sequence")
    return T.select_row(hidden, 0)


def pool_mean(hidden: Tensor, mask: np.ndarray) -> Tensor:
    """Average of the unmasked positions of ``[B, L, d]`` hidden states."""
    mask = np.asarray(mask, dtype=hidden.dtype)
    weights = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    return T.sum_(hidden * weights[:, :, None], axis=1)


class RecurrentLayer(Module):
    """Single-direction GRU or LSTM over ``[B, S, d_in]``; returns ``[B, S, hidden]``."""

    def __init__(self, d_in: int, hidden: int, cell: str, rng: np.random.Generator):
        gates = 3 if cell == "gru" else 4
        self.cell = cell
        self.hidden = hidden
        self.w_in = Linear(d_in, gates * hidden, rng)
        self.w_rec = Linear(hidden, gates * hidden, rng, bias=False)

    def __call__(self, xs: Tensor) -> Tensor:
        B, S, _ = xs.shape
        H = self.hidden
        proj = self.w_in(xs)
        h = Tensor(np.zeros((B, H), dtype=xs.dtype))
        c = h
        outs = []
        for t in range(S):
            xt = proj[:, t, :]
            hp = self.w_rec(h)
            if self.cell == "gru":
                z = T.sigmoid(xt[:, :H] + hp[:, :H])
                r = T.sigmoid(xt[:, H:2 * H] + hp[:, H:2 * H])
                n = T.tanh(xt[:, 2 * H:] + r * hp[:, 2 * H:])
                h = n + z * (h - n)
            else:
                gates = xt + hp
                i = T.sigmoid(gates[:, :H])
                f = T.sigmoid(gates[:, H:2 * H])
                g = T.tanh(gates[:, 2 * H:3 * H])
                o = T.sigmoid(gates[:, 3 * H:])
                c = f * c + i * g
                h = o * T.tanh(c)
            outs.append(T.reshape(h, (B, 1, H)))
        return T.concat(outs, axis=1)


class BiRNN(Module):
    """Bidirectional recurrence over padded sentence sequences.

    The backward direction runs on each sequence's valid prefix reversed, so
    trailing padding never leaks into real positions.
    """

    def __init__(self, d_in: int, hidden: int, cell: str, rng: np.random.Generator):
        self.fwd = RecurrentLayer(d_in, hidden, cell, rng)
        self.bwd = RecurrentLayer(d_in, hidden, cell, rng)

    @staticmethod
    def _reversal(lengths: np.ndarray, S: int, dtype) -> np.ndarray:
        perm = np.zeros((len(lengths), S, S), dtype=dtype)
        for b, n in enumerate(lengths):
            for t in range(S):
                perm[b, t, n - 1 - t if t < n else t] = 1.0
        return perm

    def __call__(self, xs: Tensor, lengths: np.ndarray) -> Tensor:
        perm = self._reversal(np.asarray(lengths), xs.shape[1], xs.dtype)
        forward = self.fwd(xs)
        backward = perm @ self.bwd(perm @ xs)
        return T.concat([forward, backward], axis=2)

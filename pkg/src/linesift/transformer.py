"""Multi-head self-attention encoder stacks.

One layer computes, in post-norm residual order:

    G = LN(MultiAttn(H) + H)
    H' = LN(FFN(G) + G)

with per-head projections Q = H Wq, K = H Wk, V = H Wv, scaled-dot
attention softmax(Q K^T / sqrt(d_k)) V, head concatenation through Wo, and
a two-layer GELU feed-forward. The token encoder adds token + learned
absolute position embeddings and zeroes padded positions; the statement
encoder prepends a learnable program-summary row to the statement vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["EncoderConfig", "EncoderStack", "TokenEncoder", "StatementEncoder",
           "preset_config", "PRESETS"]


@dataclass
class EncoderConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn_hidden: int = 256
    max_positions: int = 512
    dropout: float = 0.0
    vocab_size: int = 0

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(
                f"hidden {self.hidden} not divisible by heads {self.heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


# Named presets: the small one keeps finite-difference checks fast, the big
# one mirrors the published 6-layer / 768-hidden / 12-head configuration.
PRESETS = {
    "desk-2x64x4": dict(layers=2, hidden=64, heads=4, ffn_hidden=256),
    "paper-6x768x12": dict(layers=6, hidden=768, heads=12, ffn_hidden=3072),
}


def preset_config(name: str, **overrides) -> EncoderConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return EncoderConfig(**kw)


def _normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return T.parameter(rng.normal(0.0, std, size=shape))


class _Layer:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d, dk, u, df = cfg.hidden, cfg.head_dim, cfg.heads, cfg.ffn_hidden
        self.wq = [_normal(rng, (d, dk)) for _ in range(u)]
        self.wk = [_normal(rng, (d, dk)) for _ in range(u)]
        self.wv = [_normal(rng, (d, dk)) for _ in range(u)]
        self.wo = _normal(rng, (u * dk, d))
        self.w1 = _normal(rng, (d, df))
        self.b1 = T.parameter(np.zeros(df))
        self.w2 = _normal(rng, (df, d))
        self.b2 = T.parameter(np.zeros(d))
        self.ln1_gain = T.parameter(np.ones(d))
        self.ln1_bias = T.parameter(np.zeros(d))
        self.ln2_gain = T.parameter(np.ones(d))
        self.ln2_bias = T.parameter(np.zeros(d))

    def parameters(self, prefix: str):
        for h, (q, k, v) in enumerate(zip(self.wq, self.wk, self.wv)):
            yield f"{prefix}.head{h}.wq", q
            yield f"{prefix}.head{h}.wk", k
            yield f"{prefix}.head{h}.wv", v
        for name in ("wo", "w1", "b1", "w2", "b2",
                     "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
            yield f"{prefix}.{name}", getattr(self, name)


class EncoderStack:
    """The shared layer stack; input and output are [len x hidden]."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.layers = [_Layer(cfg, rng) for _ in range(cfg.layers)]

    def parameters(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield from layer.parameters(f"{prefix}.layer{i}")

    def forward(
        self,
        H: Tensor,
        valid: np.ndarray | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
        attention_sink: list | None = None,
    ) -> Tensor:
        n = H.shape[0]
        inv_sqrt_dk = 1.0 / math.sqrt(self.cfg.head_dim)
        col_mask = None
        if valid is not None:
            col_mask = np.tile(valid.astype(np.float64), (n, 1))
        drop = self.cfg.dropout if training else 0.0
        for layer in self.layers:
            heads = []
            layer_maps = []
            for wq, wk, wv in zip(layer.wq, layer.wk, layer.wv):
                q = H @ wq
                k = H @ wk
                v = H @ wv
                att = T.softmax_rows((q @ k.transpose()) * inv_sqrt_dk, col_mask)
                if attention_sink is not None:
                    layer_maps.append(att.data.copy())
                heads.append(att @ v)
            if attention_sink is not None:
                attention_sink.append(layer_maps)
            mixed = T.concat_cols(heads) @ layer.wo
            if drop > 0.0:
                mixed = T.dropout(mixed, drop, rng)
            G = T.layer_norm(H + mixed, layer.ln1_gain, layer.ln1_bias)
            ff = T.gelu(G @ layer.w1 + layer.b1) @ layer.w2 + layer.b2
            if drop > 0.0:
                ff = T.dropout(ff, drop, rng)
            H = T.layer_norm(G + ff, layer.ln2_gain, layer.ln2_bias)
        return H


class TokenEncoder:
    """Per-segment contextual token vectors (token + position embeddings)."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        if cfg.vocab_size <= 0:
            raise ValueError("token encoder needs a positive vocab_size")
        self.cfg = cfg
        self.tok_emb = _normal(rng, (cfg.vocab_size, cfg.hidden))
        self.pos_emb = _normal(rng, (cfg.max_positions, cfg.hidden))
        self.stack = EncoderStack(cfg, rng)

    def parameters(self, prefix: str = "te"):
        yield f"{prefix}.tok_emb", self.tok_emb
        yield f"{prefix}.pos_emb", self.pos_emb
        yield from self.stack.parameters(prefix)

    def forward(
        self,
        token_ids,
        padding_mask: np.ndarray | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
        attention_sink: list | None = None,
    ) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        n = ids.shape[0]
        if n > self.cfg.max_positions:
            raise ValueError(
                f"segment of {n} tokens exceeds capacity {self.cfg.max_positions}"
            )
        valid = None
        if padding_mask is not None:
            valid = np.asarray(padding_mask, dtype=bool)
            if valid.shape != (n,):
                raise ValueError("padding mask length must match the segment")
            if not valid.any():
                raise ValueError("segment is entirely padding")
        H = T.embedding_lookup(self.tok_emb, ids) + self.pos_emb.rows(0, n)
        H = self.stack.forward(H, valid, training, rng, attention_sink)
        if valid is not None and not valid.all():
            keep = np.tile(valid.astype(np.float64)[:, None], (1, self.cfg.hidden))
            H = T.mul(H, T.constant(keep))
        return H

    def attention_maps(self, token_ids, padding_mask=None) -> list[list[np.ndarray]]:
        """Post-softmax attention matrices, indexed [layer][head]."""
        sink: list = []
        self.forward(token_ids, padding_mask, attention_sink=sink)
        return sink


class StatementEncoder:
    """Statement-level stack producing the program vector and statement vectors."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 program_pool: str = "summary"):
        if program_pool not in ("summary", "mean"):
            raise ValueError(f"unknown program_pool {program_pool!r}")
        self.cfg = cfg
        self.program_pool = program_pool
        self.pos_emb = _normal(rng, (cfg.max_positions, cfg.hidden))
        self.summary = _normal(rng, (1, cfg.hidden))
        self.stack = EncoderStack(cfg, rng)

    def parameters(self, prefix: str = "se"):
        yield f"{prefix}.pos_emb", self.pos_emb
        yield f"{prefix}.summary", self.summary
        yield from self.stack.parameters(prefix)

    def forward(
        self,
        statement_inputs: Tensor,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        L = statement_inputs.shape[0]
        if not (1 <= L <= self.cfg.max_positions):
            raise ValueError(
                f"statement count {L} outside [1, {self.cfg.max_positions}]"
            )
        X = T.concat_rows([
            self.summary,
            statement_inputs + self.pos_emb.rows(0, L),
        ])
        H = self.stack.forward(X, None, training, rng)
        statements = H.rows(1, L + 1)
        if self.program_pool == "mean":
            pool = T.constant(np.full((1, L), 1.0 / L))
            program = pool @ statements
        else:
            program = H.rows(0, 1)
        return program, statements

"""Encoder-decoder translator over frame features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import VARIANTS, AttentionMap, ConfigError, MultiHeadAttention
from .data import BOS, EOS, PAD
from .layers import BatchNorm, Embedding, FeedForward, LayerNorm, Linear, Module, xavier_uniform
from .numerics import ContractError, Tensor

AGGREGATIONS = ("mean", "max", "cls")


@dataclass
class ModelConfig:
    d_model: int = 512
    heads: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 2
    n_positions: int = 7
    dropout: float = 0.5
    attention: str = "gloss"
    aggregation: str = "mean"
    vocab_size: int = 0
    feature_dim: int = 1024
    ff_size: int = 2048

    def validate(self) -> None:
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.attention not in VARIANTS:
            raise ConfigError(f"attention must be one of {VARIANTS}, got {self.attention!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.vocab_size <= EOS:
            raise ConfigError(f"vocab_size must exceed the reserved ids, got {self.vocab_size}")
        if self.n_positions < 1 or not 0.0 <= self.dropout < 1.0:
            raise ConfigError("n_positions must be >= 1 and dropout in [0, 1)")


@dataclass
class EncoderOutput:
    hidden: Tensor  # (B, T, d)
    mask: np.ndarray  # (B, T) bool
    maps: list[AttentionMap] = field(default_factory=list)
    embedding: Tensor | None = None  # (B, d)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def positional_encoding(pos: int, d_model: int) -> np.ndarray:
    if pos < 0:
        raise ValueError(f"position must be >= 0, got {pos}")
    return positional_table(pos + 1, d_model)[pos]


def positional_table(n: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: even dims ``sin(p / 10000^(2i/d))``, odd dims ``cos``."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d_model)
    table = np.zeros((n, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table


def sentence_embedding(hidden, mode: str = "mean", mask=None) -> Tensor:
    """Aggregate ``(B, T, d)`` (or ``(T, d)``) hidden states into one vector each.

    ``cls`` returns the state at slot 0, where the model prepends its CLS frame.
    """
    hidden = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
    single = hidden.ndim == 2
    if single:
        hidden = nx.reshape(hidden, (1, *hidden.shape))
    B, T, d = hidden.shape
    mask = np.ones((B, T), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(B, T)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ContractError("sentence_embedding: a sequence is fully masked")
    if mode == "mean":
        e = nx.div(nx.sum(nx.mul(hidden, mask[:, :, None].astype(np.float64)), axis=1), counts[:, None].astype(np.float64))
    elif mode == "max":
        e = nx.max(nx.masked_fill(hidden, ~mask[:, :, None], -np.inf), axis=1)
    elif mode == "cls":
        e = nx.reshape(hidden[:, 0, :], (B, d))
    else:
        raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {mode!r}")
    return nx.reshape(e, (d,)) if single else e


class EncoderLayer(Module):
    """``z = MHSA(LN(x)) + x``; ``x' = MLP(LN(z)) + z``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.norm_attn = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads, cfg.attention, cfg.n_positions, rng)
        self.norm_ff = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff_size, rng)
        self.p = cfg.dropout

    def forward(self, x: Tensor, mask: np.ndarray, rng, layer: int) -> tuple[Tensor, list[AttentionMap]]:
        h, maps = self.attn(self.norm_attn(x), mask, layer=layer)
        z = nx.add(x, nx.dropout(h, self.p, rng, self.training))
        out = nx.add(z, nx.dropout(self.ff(self.norm_ff(z)), self.p, rng, self.training))
        return out, maps


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.norm_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, cfg.heads, "self", cfg.n_positions, rng)
        self.norm_cross = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, "self", cfg.n_positions, rng)
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(d, cfg.ff_size, rng)
        self.p = cfg.dropout

    def forward(self, y, y_mask, memory, memory_mask, rng, layer: int):
        h, _ = self.self_attn(self.norm_self(y), y_mask, causal=True, layer=layer)
        y = nx.add(y, nx.dropout(h, self.p, rng, self.training))
        h, maps = self.cross_attn(self.norm_cross(y), y_mask, memory=memory, memory_mask=memory_mask, layer=layer)
        y = nx.add(y, nx.dropout(h, self.p, rng, self.training))
        y = nx.add(y, nx.dropout(self.ff(self.norm_ff(y)), self.p, rng, self.training))
        return y, maps


class Translator(Module):
    def __init__(self, config: ModelConfig, seed: int = 42):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.video_proj = Linear(config.feature_dim, d, rng)
        self.video_norm = BatchNorm(d)
        self.token_table = Embedding(config.vocab_size, d, rng)
        self.text_proj = Linear(d, d, rng)
        self.text_norm = BatchNorm(d)
        self.cls = Tensor(xavier_uniform(rng, 1, d), requires_grad=True) if config.aggregation == "cls" else None
        self.encoder = [EncoderLayer(config, rng) for _ in range(config.encoder_layers)]
        self.memory_norm = LayerNorm(d)
        self.decoder = [DecoderLayer(config, rng) for _ in range(config.decoder_layers)]
        self.decoder_norm = LayerNorm(d)
        self.output = Linear(d, config.vocab_size, rng)
        self.dropout_rng = np.random.default_rng([seed, 1])
        self._pos = positional_table(512, d)

    def _positions(self, n: int) -> np.ndarray:
        if n > self._pos.shape[0]:
            self._pos = positional_table(2 * n, self.config.d_model)
        return self._pos[:n]

    # -- embeddings --------------------------------------------------------

    def embed_video(self, features, mask=None) -> Tensor:
        """``relu(BN(W1 x + b1)) + f_pos(t)`` for ``(B, T, D_in)`` features."""
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.config.feature_dim:
            raise ConfigError(f"feature_dim is {x.shape[-1]}, model expects {self.config.feature_dim}")
        h = nx.relu(self.video_norm(self.video_proj(Tensor(x)), mask))
        return nx.add(h, self._positions(x.shape[-2]))

    def embed_text(self, ids, mask=None) -> Tensor:
        """``relu(BN(W2 Emb(y) + b2)) + f_pos(m)`` for ``(B, M)`` ids."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[-1] == 0:
            return Tensor(np.zeros((*ids.shape, self.config.d_model)))
        h = nx.relu(self.text_norm(self.text_proj(self.token_table(ids)), mask))
        return nx.add(h, self._positions(ids.shape[-1]))

    # -- encoder -----------------------------------------------------------

    def encode(self, features, mask=None) -> EncoderOutput:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 2:
            features = features[None]
        B, T, _ = features.shape
        mask = np.ones((B, T), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        x = self.embed_video(features, mask)
        if self.cls is not None:
            x = nx.concat([nx.add(np.zeros((B, 1, self.config.d_model)), self.cls), x], axis=1)
            mask = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)
        return self.encoder_forward(x, mask)

    def encoder_forward(self, x: Tensor, mask: np.ndarray) -> EncoderOutput:
        x = nx.dropout(x, self.config.dropout, self.dropout_rng, self.training)
        maps: list[AttentionMap] = []
        for i, layer in enumerate(self.encoder):
            x, layer_maps = layer(x, mask, self.dropout_rng, i)
            maps.extend(layer_maps)
        return EncoderOutput(x, mask, maps, sentence_embedding(x, self.config.aggregation, mask))

    # -- decoder -----------------------------------------------------------

    def _decode_memory(self, memory: Tensor, memory_mask, ids, ids_mask=None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        ids_mask = ids != PAD if ids_mask is None else ids_mask
        y = self.embed_text(ids, ids_mask)
        y = nx.dropout(y, self.config.dropout, self.dropout_rng, self.training)
        for i, layer in enumerate(self.decoder):
            y, _ = layer(y, ids_mask, memory, memory_mask, self.dropout_rng, i)
        return self.output(self.decoder_norm(y))

    def decode_logits(self, enc: EncoderOutput, tokens_in, token_mask=None) -> Tensor:
        """Teacher-forced ``(B, M, V)`` logits with causal decoder self-attention."""
        return self._decode_memory(self.memory_norm(enc.hidden), enc.mask, tokens_in, token_mask)

    def greedy(self, enc: EncoderOutput, max_len: int) -> list[list[int]]:
        if max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {max_len}")
        with nx.no_grad():
            memory = self.memory_norm(enc.hidden)
            B = memory.shape[0]
            ys = np.full((B, 1), BOS, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            for _ in range(max_len):
                logp = nx.log_softmax(self._decode_memory(memory, enc.mask, ys, np.ones(ys.shape, bool))).data[:, -1]
                nxt = np.where(done, PAD, logp.argmax(axis=-1))
                ys = np.concatenate([ys, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all():
                    break
        return [_strip(row[1:]) for row in ys.tolist()]

    def beam(self, enc: EncoderOutput, k: int, max_len: int) -> list[list[int]]:
        if max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {max_len}")
        if k < 1:
            raise ConfigError(f"beam width must be >= 1, got {k}")
        out = []
        with nx.no_grad():
            memory = self.memory_norm(enc.hidden)
            for b in range(memory.shape[0]):
                out.append(self._beam_one(memory.data[b : b + 1], enc.mask[b : b + 1], k, max_len))
        return out

    def _beam_one(self, memory: np.ndarray, memory_mask: np.ndarray, k: int, max_len: int) -> list[int]:
        live: list[tuple[list[int], float]] = [([BOS], 0.0)]
        finished: list[tuple[list[int], float]] = []
        for _ in range(max_len):
            n = len(live)
            ys = np.array([seq for seq, _ in live], dtype=np.int64)
            logits = self._decode_memory(
                Tensor(np.repeat(memory, n, axis=0)), np.repeat(memory_mask, n, axis=0), ys, np.ones(ys.shape, bool)
            )
            logp = nx.log_softmax(logits).data[:, -1]
            total = np.array([s for _, s in live])[:, None] + logp
            order = np.argsort(-total.reshape(-1), kind="stable")
            nxt = []
            for flat in order[: 2 * k]:
                src, tok = divmod(int(flat), logp.shape[1])
                cand = (live[src][0] + [tok], float(total.reshape(-1)[flat]))
                (finished if tok == EOS else nxt).append(cand)
                if len(finished) >= k or len(nxt) >= k:
                    break
            if len(finished) >= k:
                break
            live = nxt[:k]
        pool = finished if finished else live
        best = max(pool, key=lambda c: c[1])
        return _strip(best[0][1:])

    def decode(self, enc: EncoderOutput, mode: str = "greedy", tokens_in=None, max_len: int = 30, beam: int = 1):
        """``teacher_forced`` returns logits; ``greedy``/``beam`` return id lists."""
        if mode == "teacher_forced":
            return self.decode_logits(enc, tokens_in)
        if mode == "greedy":
            return self.greedy(enc, max_len)
        if mode == "beam":
            return self.beam(enc, beam, max_len)
        raise ConfigError(f"unknown decode mode {mode!r}")


def _strip(seq: list[int]) -> list[int]:
    out = []
    for tok in seq:
        if tok == EOS or tok == PAD:
            break
        out.append(tok)
    return out

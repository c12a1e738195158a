"""Self-attention, gloss attention and a sliding-window baseline.

All variants take ``x`` as either ``(T, d)`` or ``(B, T, d)`` with an
optional boolean ``mask`` marking real (unpadded) positions, and return the
concatenated per-head outputs together with one :class:`AttentionMap` per
(sample, head), cropped to the sample's true length.

Gloss attention gives each query ``N`` consecutive starting positions
``t - ceil(N/2), ..., t - ceil(N/2) + N - 1``, shifts them by a learned,
query-dependent offset, wraps them into ``[0, T)`` with a floored modulo over
the sample's true length, and reads keys/values at the fractional positions
by linear interpolation (the upper neighbour wraps to frame 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .layers import Module, xavier_uniform
from .numerics import ContractError, Tensor

VARIANTS = ("self", "gloss", "sliding")


class ConfigError(ValueError):
    pass


class ScoreCounter:
    """Counts query-key score evaluations (one per dot product)."""

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


score_counter = ScoreCounter()


@dataclass
class GlossAttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_offset: Tensor | None
    n_positions: int
    heads: int
    w_out: Tensor | None = None
    b_out: Tensor | None = None

    def __post_init__(self) -> None:
        d = self.w_q.shape[0]
        if self.heads < 1 or d % self.heads:
            raise ConfigError(f"d_model={d} is not divisible by heads={self.heads}")
        if self.n_positions < 1:
            raise ConfigError(f"n_positions must be >= 1, got {self.n_positions}")
        for name in ("w_q", "w_k", "w_v"):
            if getattr(self, name).shape != (d, d):
                raise ConfigError(f"{name} must be {(d, d)}, got {getattr(self, name).shape}")
        if self.w_offset is not None:
            expected = (self.heads, self.n_positions, d // self.heads)
            if self.w_offset.shape != expected:
                raise ConfigError(f"w_offset must be {expected}, got {self.w_offset.shape}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @classmethod
    def initialise(
        cls, d_model: int, heads: int, n_positions: int, rng: np.random.Generator, out_projection: bool = True
    ) -> "GlossAttentionParams":
        """Xavier projections and zero offsets (pure local window at start)."""
        if heads < 1 or d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")

        def mat():
            return Tensor(xavier_uniform(rng, d_model, d_model), requires_grad=True)

        w_q, w_k, w_v = mat(), mat(), mat()
        w_offset = Tensor(np.zeros((heads, n_positions, d_model // heads)), requires_grad=True)
        w_out = b_out = None
        if out_projection:
            w_out = mat()
            b_out = Tensor(np.zeros(d_model), requires_grad=True)
        return cls(w_q, w_k, w_v, w_offset, n_positions, heads, w_out, b_out)


@dataclass
class AttentionMap:
    """Attention weights of one head for one sample.

    ``weights`` is ``(T_q, K)``: ``K`` is the key count for dot-product
    attention and ``N`` for gloss attention, in which case ``positions``
    holds the fractional frame position of every column.
    """

    layer: int
    head: int
    weights: np.ndarray
    positions: np.ndarray | None = None
    n_frames: int | None = None
    sample: int = 0
    kind: str = "self"
    extra: dict = field(default_factory=dict)

    def dense(self) -> np.ndarray:
        """Frame-level ``(T_q, n_frames)`` map.

        For gloss attention each weight is split over the two frames its
        position interpolates between, in the interpolation proportions.
        """
        if self.positions is None:
            return self.weights
        T = int(self.n_frames)
        out = np.zeros((self.weights.shape[0], T))
        base = np.floor(self.positions)
        frac = self.positions - base
        lo = base.astype(np.int64)
        hi = (lo + 1) % T
        rows = np.broadcast_to(np.arange(out.shape[0])[:, None], lo.shape)
        np.add.at(out, (rows, lo), (1.0 - frac) * self.weights)
        np.add.at(out, (rows, hi), frac * self.weights)
        return out


# ---------------------------------------------------------------------------
# position bookkeeping
# ---------------------------------------------------------------------------


def init_positions(t: int, n: int, T: int | None = None) -> np.ndarray:
    """Initial positions ``t - ceil(n/2) + i`` for ``i = 0..n-1`` (not wrapped)."""
    if T is not None and not 0 <= t < T:
        raise ContractError(f"query index {t} outside [0, {T})")
    start = t - math.ceil(n / 2)
    return np.arange(start, start + n, dtype=np.float64)


def window_positions(T: int, n: int) -> np.ndarray:
    """``(T, n)`` table of :func:`init_positions` for every query."""
    return np.arange(T, dtype=np.float64)[:, None] - math.ceil(n / 2) + np.arange(n, dtype=np.float64)


def adjust_positions(P, q_t, w_offset, T: int) -> np.ndarray:
    """``(P + w_offset @ q_t) mod T`` for one query, result in ``[0, T)``."""
    P = np.asarray(P, dtype=np.float64)
    offsets = np.asarray(w_offset, dtype=np.float64) @ np.asarray(q_t, dtype=np.float64)
    return nx.floor_mod(P + offsets, float(T)).data


def interpolate_kv(p_hat, K, V) -> tuple[Tensor, Tensor]:
    """Keys and values read at fractional positions ``p_hat`` (shape ``(N,)``)."""
    p = p_hat if isinstance(p_hat, Tensor) else Tensor(p_hat)
    K = K if isinstance(K, Tensor) else Tensor(K)
    V = V if isinstance(V, Tensor) else Tensor(V)
    T, d = K.shape
    n = p.shape[0]
    pos = nx.reshape(p, (1, n))
    k_hat = nx.reshape(nx.interp_gather(K, pos, float(T)), (n, d))
    v_hat = nx.reshape(nx.interp_gather(V, pos, float(T)), (n, d))
    return k_hat, v_hat


# ---------------------------------------------------------------------------
# internals
# ---------------------------------------------------------------------------


def _batched(x, mask):
    x = x if isinstance(x, Tensor) else Tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1, *x.shape))
    B, T = x.shape[:2]
    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(B, T)
    return x, mask, squeeze


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, T, d = x.shape
    return nx.transpose(nx.reshape(x, (B, T, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, T, H * dh))


def _finish(out: Tensor, squeeze: bool) -> Tensor:
    merged = _merge_heads(out)
    return nx.reshape(merged, merged.shape[1:]) if squeeze else merged


def _band(Tq: int, Tk: int, window: int) -> np.ndarray:
    start = np.arange(Tq)[:, None] - math.ceil(window / 2)
    j = np.arange(Tk)[None, :]
    return (j >= start) & (j < start + window)


def _allowed(q_mask, k_mask, causal: bool, window: int | None) -> np.ndarray:
    Tq, Tk = q_mask.shape[1], k_mask.shape[1]
    allowed = np.broadcast_to(k_mask[:, None, :], (q_mask.shape[0], Tq, Tk)).copy()
    if causal:
        allowed &= np.tril(np.ones((Tq, Tk), dtype=bool))
    if window is not None:
        allowed &= _band(Tq, Tk, window)
    # padded queries may look at any real key so their rows stay finite
    allowed = np.where(q_mask[:, :, None], allowed, k_mask[:, None, :])
    return allowed[:, None]


def _dot_product(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray) -> tuple[Tensor, np.ndarray]:
    B, H, Tq, dh = q.shape
    score_counter.add(B * H * Tq * k.shape[2])
    scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    scores = nx.masked_fill(scores, ~allowed, -np.inf)
    weights = nx.softmax(scores)
    return nx.matmul(weights, v), weights.data


def _maps(weights, q_mask, k_mask, layer, kind, positions=None) -> list[AttentionMap]:
    maps = []
    B, H = weights.shape[:2]
    for b in range(B):
        tq = int(q_mask[b].sum())
        tk = int(k_mask[b].sum())
        for h in range(H):
            if positions is None:
                maps.append(AttentionMap(layer, h, weights[b, h, :tq, :tk], sample=b, kind=kind))
            else:
                maps.append(
                    AttentionMap(layer, h, weights[b, h, :tq], positions[b, h, :tq], n_frames=tk, sample=b, kind=kind)
                )
    return maps


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------


def self_attention(
    x,
    params: GlossAttentionParams,
    mask=None,
    *,
    causal: bool = False,
    memory=None,
    memory_mask=None,
    layer: int = 0,
) -> tuple[Tensor, list[AttentionMap]]:
    """Scaled dot-product attention over all (unmasked) keys.

    With ``memory`` given, keys and values come from it (cross-attention).
    """
    xb, q_mask, squeeze = _batched(x, mask)
    if memory is None:
        src, k_mask = xb, q_mask
    else:
        src, k_mask, _ = _batched(memory, memory_mask)
    H = params.heads
    q = _split_heads(nx.matmul(xb, params.w_q), H)
    k = _split_heads(nx.matmul(src, params.w_k), H)
    v = _split_heads(nx.matmul(src, params.w_v), H)
    out, weights = _dot_product(q, k, v, _allowed(q_mask, k_mask, causal, None))
    return _finish(out, squeeze), _maps(weights, q_mask, k_mask, layer, "cross" if memory is not None else "self")


def sliding_window_attention(
    x, params: GlossAttentionParams, mask=None, window: int | None = None, *, layer: int = 0
) -> tuple[Tensor, list[AttentionMap]]:
    """Self-attention restricted to keys ``t - ceil(w/2) .. t - ceil(w/2) + w - 1``.

    The band is clipped to the sequence (no wrap-around); a real query whose
    band holds no real key raises :class:`ContractError`.
    """
    window = params.n_positions if window is None else window
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    xb, m, squeeze = _batched(x, mask)
    H = params.heads
    q = _split_heads(nx.matmul(xb, params.w_q), H)
    k = _split_heads(nx.matmul(xb, params.w_k), H)
    v = _split_heads(nx.matmul(xb, params.w_v), H)
    out, weights = _dot_product(q, k, v, _allowed(m, m, False, window))
    return _finish(out, squeeze), _maps(weights, m, m, layer, "sliding")


def gloss_attention(x, params: GlossAttentionParams, mask=None, *, layer: int = 0) -> tuple[Tensor, list[AttentionMap]]:
    """Attention over ``N`` offset-adjusted, interpolated positions per query.

    Positions wrap modulo each sample's true length, so padded frames are
    never read.  Cost is ``N * T`` score evaluations per head.
    """
    if params.w_offset is None:
        raise ConfigError("gloss attention needs an offset matrix")
    xb, m, squeeze = _batched(x, mask)
    B, T, _ = xb.shape
    H, N, dh = params.heads, params.n_positions, params.d_head
    lengths = m.sum(axis=1)
    if np.any(lengths < 1):
        raise ContractError("gloss_attention: a sequence has no real frames")

    q = _split_heads(nx.matmul(xb, params.w_q), H)
    k = _split_heads(nx.matmul(xb, params.w_k), H)
    v = _split_heads(nx.matmul(xb, params.w_v), H)

    offsets = nx.matmul(q, nx.transpose(params.w_offset, (0, 2, 1)))  # (B, H, T, N)
    modulus = lengths[:, None, None, None].astype(np.float64)
    p_hat = nx.floor_mod(nx.add(offsets, window_positions(T, N)), modulus)
    k_hat = nx.interp_gather(k, p_hat, modulus)  # (B, H, T, N, dh)
    v_hat = nx.interp_gather(v, p_hat, modulus)

    score_counter.add(B * H * T * N)
    scores = nx.mul(nx.sum(nx.mul(nx.reshape(q, (B, H, T, 1, dh)), k_hat), axis=-1), 1.0 / math.sqrt(dh))
    weights = nx.softmax(scores)
    out = nx.sum(nx.mul(nx.reshape(weights, (B, H, T, N, 1)), v_hat), axis=-2)
    return _finish(out, squeeze), _maps(weights.data, m, m, layer, "gloss", positions=p_hat.data)


def multi_head(x, variant: str, params: GlossAttentionParams, mask=None, **kwargs) -> tuple[Tensor, list[AttentionMap]]:
    """Run ``variant`` over all heads, then apply the output projection."""
    if variant == "self":
        z, maps = self_attention(x, params, mask, **kwargs)
    elif variant == "gloss":
        z, maps = gloss_attention(x, params, mask, **kwargs)
    elif variant == "sliding":
        z, maps = sliding_window_attention(x, params, mask, **kwargs)
    else:
        raise ConfigError(f"unknown attention variant {variant!r}; expected one of {VARIANTS}")
    if params.w_out is not None:
        z = nx.matmul(z, params.w_out)
        if params.b_out is not None:
            z = nx.add(z, params.b_out)
    return z, maps


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, variant: str, n_positions: int, rng: np.random.Generator):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown attention variant {variant!r}; expected one of {VARIANTS}")
        p = GlossAttentionParams.initialise(d_model, heads, n_positions, rng)
        self.variant = variant
        self.heads = heads
        self.n_positions = n_positions
        self.w_q, self.w_k, self.w_v = p.w_q, p.w_k, p.w_v
        self.w_offset = p.w_offset if variant == "gloss" else None
        self.w_out, self.b_out = p.w_out, p.b_out

    @property
    def params(self) -> GlossAttentionParams:
        return GlossAttentionParams(
            self.w_q, self.w_k, self.w_v, self.w_offset, self.n_positions, self.heads, self.w_out, self.b_out
        )

    def forward(self, x, mask=None, **kwargs) -> tuple[Tensor, list[AttentionMap]]:
        return multi_head(x, self.variant, self.params, mask, **kwargs)

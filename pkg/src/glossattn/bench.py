"""Forward-pass timing and score counting for the attention variants."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .attention import ConfigError, GlossAttentionParams, gloss_attention, score_counter, self_attention, sliding_window_attention

_RUNNERS = {
    "gloss": gloss_attention,
    "self": self_attention,
    "sliding": sliding_window_attention,
}


@dataclass
class BenchRow:
    variant: str
    T: int
    n_positions: int
    d_model: int
    median_s: float
    scores: int

    def as_dict(self) -> dict:
        return {
            "variant": self.variant,
            "T": self.T,
            "N": self.n_positions,
            "d": self.d_model,
            "median_s": self.median_s,
            "scores": self.scores,
        }


def count_scores(variant: str, T: int, n: int = 7, d: int = 8, seed: int = 0) -> int:
    """Exact score evaluations of one single-head forward pass."""
    rng = np.random.default_rng(seed)
    params = GlossAttentionParams.initialise(d, 1, n, rng, out_projection=False)
    x = rng.standard_normal((T, d))
    score_counter.reset()
    with nx.no_grad():
        _RUNNERS[variant](x, params)
    return score_counter.count


def _setup(variant: str, T: int, n: int, d: int, seed: int):
    if variant not in _RUNNERS:
        raise ConfigError(f"unknown variant {variant!r}")
    if T < 2 * n:
        raise ConfigError(f"T={T} must be at least 2N={2 * n}")
    rng = np.random.default_rng(seed)
    params = GlossAttentionParams.initialise(d, 1, n, rng, out_projection=False)
    if variant == "gloss":
        # non-zero offsets so the interpolation path does real work
        params.w_offset.data = rng.standard_normal(params.w_offset.shape)
    return rng.standard_normal((T, d)), params


def _timed(runner, x, params) -> tuple[float, int]:
    runner(x, params)  # untimed call first so caches hold this size
    score_counter.reset()
    t0 = time.perf_counter()
    runner(x, params)
    return time.perf_counter() - t0, score_counter.count


def time_forward(variant: str, T: int, n: int = 7, d: int = 64, repeats: int = 5, seed: int = 0) -> BenchRow:
    """Median wall time of a single-head, no-grad forward pass."""
    return run_bench([T], (variant,), n, d, repeats, seed)[0]


def run_bench(
    lengths: Sequence[int],
    variants: Sequence[str] = ("gloss", "self"),
    n: int = 7,
    d: int = 64,
    repeats: int = 5,
    seed: int = 0,
) -> list[BenchRow]:
    """Time every (variant, T).

    Lengths are interleaved within each repeat so that slow drift on a shared
    machine hits all of them alike.
    """
    rows = []
    for v in variants:
        inputs = {T: _setup(v, T, n, d, seed) for T in lengths}
        times: dict[int, list[float]] = {T: [] for T in lengths}
        scores: dict[int, int] = {}
        with nx.no_grad():
            for _ in range(repeats):
                for T in lengths:
                    dt, scores[T] = _timed(_RUNNERS[v], *inputs[T])
                    times[T].append(dt)
        rows += [BenchRow(v, T, n, d, float(np.median(times[T])), scores[T]) for T in lengths]
    return rows


def doubling_ratios(rows: Sequence[BenchRow]) -> dict[tuple[str, int], float]:
    """``time(2T) / time(T)`` for every variant and T whose double was timed."""
    by_key = {(r.variant, r.T): r.median_s for r in rows}
    return {(v, T): by_key[(v, 2 * T)] / t for (v, T), t in by_key.items() if (v, 2 * T) in by_key}


def write_csv(path_or_file, rows: Sequence[BenchRow]) -> None:
    fields = ["variant", "T", "N", "d", "median_s", "scores"]
    if hasattr(path_or_file, "write"):
        w = csv.DictWriter(path_or_file, fields)
        w.writeheader()
        w.writerows(r.as_dict() for r in rows)
        return
    with open(path_or_file, "w", newline="", encoding="utf-8") as fh:
        write_csv(fh, rows)

"""Scaling benchmark: the selective scan against a naive global self-attention
baseline whose cost grows quadratically with sequence length.

The attention layer exists purely as a complexity foil for the bench command;
it is forward-only numpy and never trained.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ssm


@dataclass
class AttentionParams:
    wq: np.ndarray  # (D, D)
    wk: np.ndarray
    wv: np.ndarray


def init_attention(rng: np.random.Generator, d: int) -> AttentionParams:
    s = 1.0 / np.sqrt(d)
    return AttentionParams(
        wq=rng.normal(size=(d, d)) * s,
        wk=rng.normal(size=(d, d)) * s,
        wv=rng.normal(size=(d, d)) * s,
    )


def naive_attention(x: np.ndarray, p: AttentionParams) -> np.ndarray:
    """softmax(Q K^T / sqrt(D)) V over the full L x L score matrix."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"naive_attention: expected (L, D) with L >= 1, got {x.shape}")
    q, k, v = x @ p.wq, x @ p.wk, x @ p.wv
    scores = q @ k.T / np.sqrt(x.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v


def attention_weights(x: np.ndarray, p: AttentionParams) -> np.ndarray:
    q, k = x @ p.wq, x @ p.wk
    scores = q @ k.T / np.sqrt(x.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    return weights / weights.sum(axis=1, keepdims=True)


def _scan_problem(rng, length: int, d: int, n: int):
    return (
        ssm.SelectiveInputs(
            x=rng.normal(size=(length, d)),
            delta=rng.uniform(0.05, 0.3, size=(length, d)),
            b=rng.normal(size=(length, n)),
            c=rng.normal(size=(length, n)),
            skip=rng.normal(size=d),
        ),
        -np.abs(rng.normal(size=(d, n))) - 0.05,
    )


def _best_of(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_benchmark(lengths, d: int = 16, n: int = 4, repeats: int = 3, seed: int = 0):
    """Time the sequential scan, the parallel scan, and naive attention at each
    length. Returns rows of (L, scan_seq_ms, scan_par_ms, attn_ms)."""
    rng = np.random.default_rng(seed)
    rows = []
    for length in lengths:
        si, a = _scan_problem(rng, int(length), d, n)
        x_attn = rng.normal(size=(int(length), d))
        attn = init_attention(rng, d)
        t_seq = _best_of(lambda: ssm.selective_scan_sequential(si, a), repeats)
        t_par = _best_of(lambda: ssm.selective_scan_parallel(si, a), repeats)
        t_att = _best_of(lambda: naive_attention(x_attn, attn), repeats)
        rows.append((int(length), t_seq * 1e3, t_par * 1e3, t_att * 1e3))
    return rows


def format_csv(rows) -> str:
    lines = ["L,scan_seq_ms,scan_par_ms,attn_ms"]
    for length, seq_ms, par_ms, attn_ms in rows:
        lines.append(f"{length},{seq_ms:.3f},{par_ms:.3f},{attn_ms:.3f}")
    return "\n".join(lines) + "\n"

"""Single-query attention over dense and block-paged key/value state.

Three paths share one numeric core:

* reference_attention - every query head owns its own K/V stream; this is
  the oracle the other paths are checked against.
* gqa_attention - query heads share K/V streams in contiguous groups of
  ``num_query_heads // num_kv_heads``; same math, fewer K/V streams.
* paged_attention - reads K/V through a block table, restricted to the
  blocks that hold tokens below the context length ``t``. Softmax is
  two-pass: per-block maxima first, then one global max, then weights
  normalized by a denominator accumulated with the fixed pairwise tree.
  Positions at or past ``t`` in the last block are excluded by slicing,
  so their weight is exactly zero and their bytes are never read into
  the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .kv_cache import BlockPool, BlockTable
from .numerics import block_sum_reduce_rows, stable_softmax

__all__ = [
    "AttentionConfig",
    "AttentionOutput",
    "query_group_of",
    "reference_attention",
    "gqa_attention",
    "paged_attention",
]


@dataclass(frozen=True)
class AttentionConfig:
    num_query_heads: int
    num_kv_heads: int
    head_dim: int
    block_size: int = 16

    def __post_init__(self):
        if min(self.num_query_heads, self.num_kv_heads, self.head_dim, self.block_size) < 1:
            raise ConfigError("all attention dimensions must be >= 1")
        if self.num_query_heads % self.num_kv_heads != 0:
            raise ConfigError(
                f"{self.num_query_heads} query heads not divisible by "
                f"{self.num_kv_heads} kv heads"
            )

    @property
    def group_size(self) -> int:
        return self.num_query_heads // self.num_kv_heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)


@dataclass
class AttentionOutput:
    """Attended values per query head, plus optional diagnostics."""

    output: np.ndarray  # [num_query_heads, head_dim]
    weights: np.ndarray | None = None  # [num_query_heads, t] when requested
    blocks_touched: int | None = None  # paged path only


def query_group_of(head_index: int, config: AttentionConfig) -> int:
    """KV head serving the given query head (contiguous grouping)."""
    if not 0 <= head_index < config.num_query_heads:
        raise ValueError(
            f"head index {head_index} out of range [0, {config.num_query_heads})"
        )
    return head_index // config.group_size


def _check_query(q, config) -> np.ndarray:
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (config.num_query_heads, config.head_dim):
        raise ShapeError(
            f"query must be [{config.num_query_heads}, {config.head_dim}], got {q.shape}"
        )
    return q


def _check_kv(keys, values, heads, config) -> tuple[np.ndarray, np.ndarray]:
    keys = np.asarray(keys, dtype=np.float32)
    values = np.asarray(values, dtype=np.float32)
    if keys.ndim != 3 or keys.shape[1:] != (heads, config.head_dim) or keys.shape[0] < 1:
        raise ShapeError(
            f"keys must be [t >= 1, {heads}, {config.head_dim}], got {keys.shape}"
        )
    if values.shape != keys.shape:
        raise ShapeError(f"values shape {values.shape} != keys shape {keys.shape}")
    return keys, values


def _attend_group(q_rows, k_stream, v_stream, scale):
    """Soft attention of ``q_rows`` against one K/V stream.

    q_rows is [m, d]; k_stream/v_stream are [t, d]. Returns ([m, d] output,
    [m, t] weights). One softmax per query row keeps this path bit-identical
    whether the caller grouped heads or not.
    """
    logits = q_rows @ k_stream.T
    logits *= np.float32(scale)
    weights = np.empty_like(logits)
    for i in range(logits.shape[0]):
        weights[i] = stable_softmax(logits[i])
    return weights @ v_stream, weights


def reference_attention(q, keys, values, config: AttentionConfig,
                        diagnostics: bool = False) -> AttentionOutput:
    """Dense attention with one K/V stream per query head.

    ``q`` is [num_query_heads, head_dim]; ``keys``/``values`` are
    [t, num_query_heads, head_dim].
    """
    q = _check_query(q, config)
    keys, values = _check_kv(keys, values, config.num_query_heads, config)
    t = keys.shape[0]
    out = np.empty((config.num_query_heads, config.head_dim), dtype=np.float32)
    w = np.empty((config.num_query_heads, t), dtype=np.float32)
    for h in range(config.num_query_heads):
        out[h : h + 1], w[h : h + 1] = _attend_group(
            q[h : h + 1], keys[:, h, :], values[:, h, :], config.scale
        )
    return AttentionOutput(out, w if diagnostics else None, None)


def gqa_attention(q, keys, values, config: AttentionConfig,
                  diagnostics: bool = False) -> AttentionOutput:
    """Grouped-query attention: contiguous query-head groups share KV.

    ``keys``/``values`` are [t, num_kv_heads, head_dim]. With group size 1
    this degenerates to reference_attention exactly.
    """
    q = _check_query(q, config)
    keys, values = _check_kv(keys, values, config.num_kv_heads, config)
    t = keys.shape[0]
    g = config.group_size
    out = np.empty((config.num_query_heads, config.head_dim), dtype=np.float32)
    w = np.empty((config.num_query_heads, t), dtype=np.float32)
    for kv_head in range(config.num_kv_heads):
        rows = slice(kv_head * g, (kv_head + 1) * g)
        out[rows], w[rows] = _attend_group(
            q[rows], keys[:, kv_head, :], values[:, kv_head, :], config.scale
        )
    return AttentionOutput(out, w if diagnostics else None, None)


def paged_attention(q, table: BlockTable, pool: BlockPool, t: int,
                    config: AttentionConfig, diagnostics: bool = False) -> AttentionOutput:
    """Block-paged attention over the first ``t`` cached tokens.

    Touches exactly ceil(t / block_size) blocks of the table. The query
    head -> kv head mapping matches gqa_attention; with an fp32 pool the
    output agrees with the dense paths to float32 rounding.
    """
    q = _check_query(q, config)
    if config.block_size != pool.block_size:
        raise ConfigError(
            f"config block_size {config.block_size} != pool block_size {pool.block_size}"
        )
    if config.num_kv_heads != pool.num_kv_heads or config.head_dim != pool.head_dim:
        raise ConfigError("attention geometry does not match the pool")
    if t < 1:
        raise ValueError("context length t must be >= 1")
    if t > table.token_count:
        raise IndexError(f"t={t} exceeds {table.token_count} cached tokens")

    bsz = config.block_size
    valid_blocks = -(-t // bsz)
    keys, values = pool.gather_cached_kv(table, 0, t)
    starts = np.arange(valid_blocks, dtype=np.int64) * bsz

    g = config.group_size
    out = np.empty((config.num_query_heads, config.head_dim), dtype=np.float32)
    w = np.empty((config.num_query_heads, t), dtype=np.float32)
    for kv_head in range(config.num_kv_heads):
        rows = slice(kv_head * g, (kv_head + 1) * g)
        logits = q[rows] @ keys[:, kv_head, :].T
        logits *= np.float32(config.scale)
        # Pass 1: per-block maxima, then the global max per query row.
        block_max = np.maximum.reduceat(logits, starts, axis=1)
        row_max = block_max.max(axis=1, keepdims=True)
        # Pass 2: exponentials, per-block partial sums, shared denominator.
        e = np.exp(logits - row_max, dtype=np.float32)
        partials = np.add.reduceat(e, starts, axis=1)
        denom = block_sum_reduce_rows(partials)
        weights = e / denom[:, None]
        out[rows] = weights @ values[:, kv_head, :]
        w[rows] = weights
    return AttentionOutput(out, w if diagnostics else None, valid_blocks)

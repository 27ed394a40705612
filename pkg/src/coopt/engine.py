"""Greedy batch decoding over a seeded toy transformer.

The model is deliberately small: an embedding table, per-layer Q/K/V/output
projections drawn from a seeded Gaussian, and a linear vocab head. No
feed-forward blocks, no normalization, no training. Its job is to drive the
cache and attention paths with realistic shapes while staying deterministic:
identical config and seed give bit-identical weights and token outputs.

A mode picks the cache precision and the attention path:

====================  =========  =====================================
mode                  cache      attention path
====================  =========  =====================================
original              fp32       full gather, KV widened per query head
opt_kv                fp8        same dense path as original
opt_gqa               fp32       grouped-query attention
opt_pa                fp32       valid-block paged attention
coopt                 fp8        paged attention with grouped heads
====================  =========  =====================================

Writes honor the skip rules everywhere: right-padded batch positions carry
slot -1 and are never stored. An optional engine flag additionally skips
caching exact-duplicate consecutive prompt tokens in the fp8 modes; it is
off by default because dropping a token's K/V changes what attention sees.

Decoding is one token per sequence per step. Each step first turns the
previous step's stashed logits into the next token (greedy argmax, lowest
index wins ties), then runs that token forward: per layer its K/V is
written before attention reads, so after every step the cache holds exactly
the prompt plus all generated tokens. Sequences are processed one at a time
within a step; nothing about a sequence depends on its batch neighbors, so
an entry of a batch of eight matches the same request run alone bit for bit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .attention import (
    AttentionConfig,
    gqa_attention,
    paged_attention,
    reference_attention,
)
from .errors import CapacityError, ConfigError
from .kv_cache import BlockPool, BlockTable, WriteReport

__all__ = [
    "OptimizationMode",
    "MODE_PRECISION",
    "ToyModelConfig",
    "ToyModel",
    "Request",
    "SequenceState",
    "RunMetrics",
    "Engine",
    "greedy_pick",
    "total_latency",
    "generation_throughput",
    "accuracy",
]


class OptimizationMode(str, Enum):
    ORIGINAL = "original"
    OPT_KV = "opt_kv"
    OPT_GQA = "opt_gqa"
    OPT_PA = "opt_pa"
    COOPT = "coopt"


MODE_PRECISION = {
    OptimizationMode.ORIGINAL: "fp32",
    OptimizationMode.OPT_KV: "fp8",
    OptimizationMode.OPT_GQA: "fp32",
    OptimizationMode.OPT_PA: "fp32",
    OptimizationMode.COOPT: "fp8",
}

_SKIP_FILTER_MODES = (OptimizationMode.OPT_KV, OptimizationMode.COOPT)


@dataclass(frozen=True)
class ToyModelConfig:
    vocab_size: int = 64
    num_layers: int = 1
    num_query_heads: int = 4
    num_kv_heads: int = 2
    head_dim: int = 32
    seed: int = 0
    # Residual gain of the attention projection. Small enough that greedy
    # decode stays robust to KV quantization noise, large enough that the
    # attended context still steers the output distribution.
    attn_gain: float = 0.10

    def __post_init__(self):
        if min(self.vocab_size, self.num_layers, self.num_query_heads,
               self.num_kv_heads, self.head_dim) < 1:
            raise ConfigError("model dimensions must all be >= 1")
        if self.num_query_heads % self.num_kv_heads != 0:
            raise ConfigError(
                f"{self.num_query_heads} query heads not divisible by "
                f"{self.num_kv_heads} kv heads"
            )
        if not 0.0 <= self.attn_gain or not math.isfinite(self.attn_gain):
            raise ConfigError("attn_gain must be finite and >= 0")

    @property
    def model_dim(self) -> int:
        return self.num_query_heads * self.head_dim


class ToyModel:
    """Seeded random weights; draw order is fixed so seeds are portable:
    embedding, then per layer Q, K, V, output, then the vocab head."""

    def __init__(self, config: ToyModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        dim = config.model_dim
        kv_dim = config.num_kv_heads * config.head_dim
        inv = np.float32(1.0 / math.sqrt(dim))
        self.embedding = rng.standard_normal((config.vocab_size, dim), dtype=np.float32)
        self.layers = []
        for _ in range(config.num_layers):
            w_q = rng.standard_normal((dim, dim), dtype=np.float32) * inv
            w_k = rng.standard_normal((dim, kv_dim), dtype=np.float32) * inv
            w_v = rng.standard_normal((dim, kv_dim), dtype=np.float32) * inv
            w_o = rng.standard_normal((dim, dim), dtype=np.float32) * np.float32(
                config.attn_gain / math.sqrt(dim)
            )
            self.layers.append((w_q, w_k, w_v, w_o))
        self.lm_head = rng.standard_normal((dim, config.vocab_size), dtype=np.float32) * inv

    def embed(self, token: int) -> np.ndarray:
        return self.embedding[token].copy()

    def embed_rows(self, tokens) -> np.ndarray:
        """Embedding rows for a whole token sequence, shape [t, model_dim]."""
        return self.embedding[np.asarray(tokens, dtype=np.int64)]

    def project_qkv(self, x: np.ndarray, layer: int):
        w_q, w_k, w_v, _ = self.layers[layer]
        cfg = self.config
        q = (x @ w_q).reshape(cfg.num_query_heads, cfg.head_dim)
        k = (x @ w_k).reshape(cfg.num_kv_heads, cfg.head_dim)
        v = (x @ w_v).reshape(cfg.num_kv_heads, cfg.head_dim)
        return q, k, v

    def project_qkv_rows(self, xs: np.ndarray, layer: int):
        """Q/K/V for a stack of positions at once: [t, heads, head_dim]."""
        w_q, w_k, w_v, _ = self.layers[layer]
        cfg = self.config
        t = xs.shape[0]
        q = (xs @ w_q).reshape(t, cfg.num_query_heads, cfg.head_dim)
        k = (xs @ w_k).reshape(t, cfg.num_kv_heads, cfg.head_dim)
        v = (xs @ w_v).reshape(t, cfg.num_kv_heads, cfg.head_dim)
        return q, k, v

    def apply_output(self, x: np.ndarray, attn_out: np.ndarray, layer: int) -> np.ndarray:
        w_o = self.layers[layer][3]
        return x + attn_out.reshape(-1) @ w_o

    def lm_logits(self, x: np.ndarray) -> np.ndarray:
        return x @ self.lm_head


@dataclass
class Request:
    prompt: list[int]
    max_new_tokens: int


@dataclass
class SequenceState:
    sequence_id: int
    prompt: list[int]
    max_new_tokens: int
    block_tables: list[BlockTable]
    generated: list[int] = field(default_factory=list)
    done: bool = False
    last_logits: np.ndarray | None = None

    @property
    def token_count(self) -> int:
        return len(self.prompt) + len(self.generated)


@dataclass
class RunMetrics:
    mode: str
    latencies_s: list[float]
    total_generated_tokens: int
    generation_time_s: float
    blocks_allocated: int
    used_cache_bytes: int
    max_blocks_per_sequence: int
    per_step_blocks_read: list[int]
    per_step_gathered_tokens: list[int]
    per_step_gather_calls: list[int]
    generated_token_ids: list[list[int]]
    prompt_lengths: list[int]
    path_calls: dict
    tokens_written: int
    tokens_skipped: int
    fp8_cell_encodes: int
    fp8_cell_decodes: int


def greedy_pick(logits) -> int:
    """Argmax over vocab logits; equal scores resolve to the lowest index.

    Invariant under any positive rescaling of the logits.
    """
    arr = np.asarray(logits)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("logits must be a non-empty vector")
    return int(np.argmax(arr))


def total_latency(samples) -> float:
    """Sum of per-request latencies, accumulated exactly."""
    vals = [float(s) for s in samples]
    if any(not math.isfinite(v) or v < 0 for v in vals):
        raise ValueError("latency samples must be finite and non-negative")
    return math.fsum(vals)


def generation_throughput(total_tokens: int, generation_time_s: float) -> float:
    """Tokens per second; a run that generated nothing reports 0.0."""
    if total_tokens < 0:
        raise ValueError("total_tokens must be >= 0")
    if total_tokens == 0:
        return 0.0
    if not generation_time_s > 0:
        raise ValueError("generation_time_s must be positive")
    return total_tokens / generation_time_s


def accuracy(n_correct: int, n_total: int) -> float:
    """Percentage of correct outcomes."""
    if n_total < 1:
        raise ValueError("n_total must be >= 1")
    if not 0 <= n_correct <= n_total:
        raise ValueError(f"n_correct {n_correct} outside [0, {n_total}]")
    return 100.0 * n_correct / n_total


class Engine:
    """Runs batches of requests through one optimization mode."""

    def __init__(self, model: ToyModel, pool: BlockPool, mode,
                 skip_duplicate_prompt_tokens: bool = False):
        self.model = model
        self.pool = pool
        self.mode = OptimizationMode(mode)
        cfg = model.config
        if pool.num_kv_heads != cfg.num_kv_heads or pool.head_dim != cfg.head_dim:
            raise ConfigError("pool geometry does not match the model")
        want = MODE_PRECISION[self.mode]
        if pool.precision != want:
            raise ConfigError(
                f"mode {self.mode.value} needs a {want} pool, got {pool.precision}"
            )
        self.skip_duplicate_prompt_tokens = (
            skip_duplicate_prompt_tokens and self.mode in _SKIP_FILTER_MODES
        )
        self.attn_config = AttentionConfig(
            num_query_heads=cfg.num_query_heads,
            num_kv_heads=cfg.num_kv_heads,
            head_dim=cfg.head_dim,
            block_size=pool.block_size,
        )
        # Dense fallback view: one KV stream per query head after widening.
        self.wide_config = AttentionConfig(
            num_query_heads=cfg.num_query_heads,
            num_kv_heads=cfg.num_query_heads,
            head_dim=cfg.head_dim,
            block_size=pool.block_size,
        )
        self.path_calls = {"reference": 0, "gqa": 0, "paged": 0}

    # -- sequence plumbing -------------------------------------------------

    def new_sequences(self, requests) -> list[SequenceState]:
        vocab = self.model.config.vocab_size
        states = []
        for i, req in enumerate(requests):
            if len(req.prompt) < 1:
                raise ValueError(f"request {i}: prompt must not be empty")
            if any(not 0 <= t < vocab for t in req.prompt):
                raise ValueError(f"request {i}: token id outside [0, {vocab})")
            if req.max_new_tokens < 0:
                raise ValueError(f"request {i}: max_new_tokens must be >= 0")
            tables = [
                BlockTable(sequence_id=i)
                for _ in range(self.model.config.num_layers)
            ]
            states.append(
                SequenceState(
                    sequence_id=i,
                    prompt=list(req.prompt),
                    max_new_tokens=req.max_new_tokens,
                    block_tables=tables,
                )
            )
        return states

    def _attend(self, q: np.ndarray, table: BlockTable, t: int) -> np.ndarray:
        if self.mode in (OptimizationMode.ORIGINAL, OptimizationMode.OPT_KV):
            keys, values = self.pool.gather_cached_kv(table, 0, t)
            g = self.attn_config.group_size
            if g > 1:
                keys = np.repeat(keys, g, axis=1)
                values = np.repeat(values, g, axis=1)
            result = reference_attention(q, keys, values, self.wide_config)
            self.path_calls["reference"] += 1
        elif self.mode is OptimizationMode.OPT_GQA:
            keys, values = self.pool.gather_cached_kv(table, 0, t)
            result = gqa_attention(q, keys, values, self.attn_config)
            self.path_calls["gqa"] += 1
        else:
            result = paged_attention(q, table, self.pool, t, self.attn_config)
            self.path_calls["paged"] += 1
        return result.output

    def _step_batch(self, states, tokens):
        """Advance every sequence by one input token, lockstep.

        Builds one batched cache write per layer, then attends per
        sequence. Returns the per-state vocab logits.
        """
        n = len(states)
        model = self.model
        cfg = model.config
        xs = [model.embed(tokens[i]) for i in range(n)]
        for layer in range(cfg.num_layers):
            k_rows = np.zeros((n, cfg.num_kv_heads, cfg.head_dim), dtype=np.float32)
            v_rows = np.zeros_like(k_rows)
            slots = np.empty(n, dtype=np.int64)
            qs: list[np.ndarray] = [None] * n
            for i, state in enumerate(states):
                q, k, v = model.project_qkv(xs[i], layer)
                qs[i] = q
                k_rows[i] = k
                v_rows[i] = v
                table = state.block_tables[layer]
                self.pool.allocate_blocks(table, 1)
                slots[i] = self.pool.slots_for_range(table, table.token_count, 1)[0]
            self.pool.reshape_and_cache(k_rows, v_rows, slots)
            for i, state in enumerate(states):
                table = state.block_tables[layer]
                table.advance(1, self.pool.block_size)
                attn = self._attend(qs[i], table, table.token_count)
                xs[i] = model.apply_output(xs[i], attn, layer)
        return [model.lm_logits(x) for x in xs]

    # -- public stages -----------------------------------------------------

    def prefill(self, states) -> WriteReport:
        """Run all prompts through the model, caching every token's K/V.

        Layer by layer, each sequence's whole prompt is projected and
        written in one batch, then attention runs causally per position
        reading only the cached prefix [0, p + 1). The last layer's
        attention feeds nothing except the logits of the final prompt
        position, so it runs only there; those logits are stashed for the
        first decode step.
        """
        before_w = self.pool.stats.tokens_written
        before_s = self.pool.stats.tokens_skipped
        model = self.model
        last_layer = model.config.num_layers - 1
        hidden = [model.embed_rows(s.prompt) for s in states]
        for layer in range(model.config.num_layers):
            queries = []
            for i, state in enumerate(states):
                t = len(state.prompt)
                q_rows, k_rows, v_rows = model.project_qkv_rows(hidden[i], layer)
                queries.append(q_rows)
                table = state.block_tables[layer]
                self.pool.allocate_blocks(table, t)
                slots = self.pool.slots_for_range(table, table.token_count, t)
                skip = set()
                if self.skip_duplicate_prompt_tokens:
                    skip = {
                        int(slots[p])
                        for p in range(1, t)
                        if state.prompt[p] == state.prompt[p - 1]
                    }
                self.pool.reshape_and_cache(k_rows, v_rows, slots, skip)
                table.advance(t, self.pool.block_size)
            for i, state in enumerate(states):
                t = len(state.prompt)
                table = state.block_tables[layer]
                if layer == last_layer:
                    attn = self._attend(queries[i][t - 1], table, t)
                    hidden[i][t - 1] = model.apply_output(hidden[i][t - 1], attn, layer)
                else:
                    for p in range(t):
                        attn = self._attend(queries[i][p], table, p + 1)
                        hidden[i][p] = model.apply_output(hidden[i][p], attn, layer)
        for i, state in enumerate(states):
            state.last_logits = model.lm_logits(hidden[i][len(state.prompt) - 1])
        written = self.pool.stats.tokens_written - before_w
        skipped = self.pool.stats.tokens_skipped - before_s
        return WriteReport(written, skipped)

    def decode_step(self, states) -> list[int]:
        """Append one greedy token per sequence and cache its K/V."""
        for state in states:
            if state.done:
                raise ValueError(
                    f"sequence {state.sequence_id} is already done; "
                    "decode_step requires live sequences"
                )
            if state.last_logits is None:
                raise ValueError(
                    f"sequence {state.sequence_id} has no stashed logits; run prefill first"
                )
        appended = []
        for state in states:
            token = greedy_pick(state.last_logits)
            state.generated.append(token)
            appended.append(token)
        logits = self._step_batch(states, appended)
        for state, lg in zip(states, logits):
            state.last_logits = lg
            if len(state.generated) >= state.max_new_tokens:
                state.done = True
        return appended

    def run_batch(self, requests) -> RunMetrics:
        """Prefill plus greedy decode until every request is done.

        Latency for a request spans run start to its final token. On pool
        exhaustion the raised CapacityError carries the metrics collected
        so far in its ``partial_metrics`` attribute.
        """
        start = time.perf_counter()
        self.pool.stats.reset()
        self.path_calls = {"reference": 0, "gqa": 0, "paged": 0}
        if not requests:
            return self._collect([], start, start, [], [])
        states = self.new_sequences(requests)
        latencies = [0.0] * len(states)
        steps: list[tuple[int, int, int]] = []
        try:
            self.prefill(states)
            now = time.perf_counter()
            for state in states:
                if state.max_new_tokens == 0:
                    state.done = True
                    latencies[state.sequence_id] = now - start
            live = [s for s in states if not s.done]
            while live:
                before = (
                    self.pool.stats.blocks_read,
                    self.pool.stats.gathered_tokens,
                    self.pool.stats.gather_calls,
                )
                self.decode_step(live)
                now = time.perf_counter()
                steps.append(
                    (
                        self.pool.stats.blocks_read - before[0],
                        self.pool.stats.gathered_tokens - before[1],
                        self.pool.stats.gather_calls - before[2],
                    )
                )
                for state in live:
                    if state.done:
                        latencies[state.sequence_id] = now - start
                live = [s for s in live if not s.done]
        except CapacityError as err:
            err.partial_metrics = self._collect(
                states, start, time.perf_counter(), steps, latencies
            )
            raise
        metrics = self._collect(states, start, time.perf_counter(), steps, latencies)
        for state in states:
            for table in state.block_tables:
                self.pool.free_sequence(table)
        return metrics

    def _collect(self, states, start, end, steps, latencies) -> RunMetrics:
        stats = self.pool.stats
        max_blocks = max(
            (t.block_count() for s in states for t in s.block_tables), default=0
        )
        return RunMetrics(
            mode=self.mode.value,
            latencies_s=list(latencies),
            total_generated_tokens=sum(len(s.generated) for s in states),
            generation_time_s=end - start,
            blocks_allocated=self.pool.allocated_count,
            used_cache_bytes=self.pool.used_bytes(),
            max_blocks_per_sequence=max_blocks,
            per_step_blocks_read=[s[0] for s in steps],
            per_step_gathered_tokens=[s[1] for s in steps],
            per_step_gather_calls=[s[2] for s in steps],
            generated_token_ids=[list(s.generated) for s in states],
            prompt_lengths=[len(s.prompt) for s in states],
            path_calls=dict(self.path_calls),
            tokens_written=stats.tokens_written,
            tokens_skipped=stats.tokens_skipped,
            fp8_cell_encodes=stats.fp8_cell_encodes,
            fp8_cell_decodes=stats.fp8_cell_decodes,
        )

"""Built-in oracle-equivalence checks, runnable as ``bench selftest``.

The core check sweeps context lengths across block boundaries, every
supported head grouping, and two head widths, comparing the paged path on
an fp32 pool against dense reference attention element by element.
"""

from __future__ import annotations

import numpy as np

from .attention import AttentionConfig, gqa_attention, paged_attention, reference_attention
from .fp8 import DECODE_TABLE, decode_e4m3, encode_e4m3
from .kv_cache import BlockPool, BlockTable

__all__ = [
    "GRID_T",
    "GRID_BLOCK",
    "GRID_HEADS",
    "GRID_DIM",
    "iter_grid_cases",
    "make_case",
    "paged_vs_reference_error",
    "run_selftest",
]

GRID_T = (1, 5, 16, 17, 37, 64, 256)
GRID_BLOCK = (8, 16, 32)
GRID_HEADS = ((1, 1), (4, 4), (4, 2), (8, 2), (8, 1))
GRID_DIM = (4, 32)


def iter_grid_cases(fast: bool = False):
    """Yield (t, block_size, num_query_heads, num_kv_heads, head_dim)."""
    ts = (1, 17, 64) if fast else GRID_T
    for t in ts:
        for block_size in GRID_BLOCK:
            for num_q, num_kv in GRID_HEADS:
                for dim in GRID_DIM:
                    yield t, block_size, num_q, num_kv, dim


def make_case(t, block_size, num_q, num_kv, dim, precision="fp32", seed=0):
    """Build a seeded query plus a written pool for one grid case.

    Returns (q, keys, values, pool, table, config); keys/values are the
    float32 source the pool was written from, shaped [t, num_kv, dim].
    """
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((num_q, dim), dtype=np.float32)
    keys = rng.standard_normal((t, num_kv, dim), dtype=np.float32)
    values = rng.standard_normal((t, num_kv, dim), dtype=np.float32)
    capacity = -(-t // block_size) + 2
    pool = BlockPool(block_size, num_kv, dim, capacity, precision=precision)
    table = BlockTable(sequence_id=0)
    pool.allocate_blocks(table, t)
    slots = pool.slots_for_range(table, 0, t)
    pool.reshape_and_cache(keys, values, slots)
    table.advance(t, block_size)
    config = AttentionConfig(num_q, num_kv, dim, block_size)
    return q, keys, values, pool, table, config


def paged_vs_reference_error(t, block_size, num_q, num_kv, dim, seed=0):
    """Max |paged - reference| over all output elements for one case."""
    q, keys, values, pool, table, config = make_case(
        t, block_size, num_q, num_kv, dim, seed=seed
    )
    paged = paged_attention(q, table, pool, t, config)
    group = num_q // num_kv
    wide = AttentionConfig(num_q, num_q, dim, block_size)
    ref = reference_attention(
        q, np.repeat(keys, group, axis=1), np.repeat(values, group, axis=1), wide
    )
    assert paged.blocks_touched == -(-t // block_size)
    return float(np.max(np.abs(paged.output - ref.output)))


def _check_codec(stream) -> bool:
    codes = np.arange(256, dtype=np.uint8)
    finite = (codes & 0x7F) != 0x7F
    back = encode_e4m3(decode_e4m3(codes[finite]).astype(np.float64))
    # -0 and +0 encode to themselves; every finite value must round-trip.
    ok = bool(np.all(DECODE_TABLE[back] == DECODE_TABLE[codes[finite]]))
    stream(f"{'PASS' if ok else 'FAIL'} fp8 codec round-trip over all finite codes")
    return ok


def run_selftest(fast: bool = False, stream=print) -> bool:
    """Oracle-equivalence suite; returns True when everything passed."""
    ok = _check_codec(stream)
    worst = 0.0
    failures = 0
    cases = 0
    for t, block_size, num_q, num_kv, dim in iter_grid_cases(fast):
        err = paged_vs_reference_error(t, block_size, num_q, num_kv, dim)
        worst = max(worst, err)
        cases += 1
        if err > 1e-5:
            failures += 1
            stream(
                f"FAIL paged-vs-reference t={t} B={block_size} "
                f"heads={num_q}/{num_kv} d={dim} max|diff|={err:.3g}"
            )
    stream(
        f"{'PASS' if failures == 0 else 'FAIL'} paged-vs-reference grid "
        f"({cases} cases, worst |diff| {worst:.3g}, tolerance 1e-05)"
    )
    ok &= failures == 0

    degen_worst = 0.0
    rng = np.random.default_rng(7)
    for _ in range(20 if fast else 100):
        heads = int(rng.integers(1, 9))
        dim = int(rng.choice([4, 8, 32]))
        t = int(rng.integers(1, 70))
        config = AttentionConfig(heads, heads, dim, 16)
        q = rng.standard_normal((heads, dim), dtype=np.float32)
        keys = rng.standard_normal((t, heads, dim), dtype=np.float32)
        values = rng.standard_normal((t, heads, dim), dtype=np.float32)
        a = gqa_attention(q, keys, values, config).output
        b = reference_attention(q, keys, values, config).output
        degen_worst = max(degen_worst, float(np.max(np.abs(a - b))))
    degen_ok = degen_worst <= 1e-6
    stream(
        f"{'PASS' if degen_ok else 'FAIL'} grouped attention degeneracy "
        f"(worst |diff| {degen_worst:.3g}, tolerance 1e-06)"
    )
    return bool(ok and degen_ok)

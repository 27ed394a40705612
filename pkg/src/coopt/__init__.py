"""Co-optimized KV caching, grouped queries, and paged attention.

A small, fully deterministic serving stack built on numpy: an 8-bit
floating point KV cache with per-cell scales, a block-paged store with
skip-aware writes, grouped-query attention, a block-structured paged
attention kernel, an analytic cost model, and a greedy decode engine
that can run the same workload under five optimization modes.
"""

from .attention import (
    AttentionConfig,
    AttentionOutput,
    gqa_attention,
    paged_attention,
    query_group_of,
    reference_attention,
)
from .bench import (
    BenchConfig,
    WorkloadSpec,
    emit_report,
    generate_workload,
    load_workload,
    run_benchmark,
    save_workload,
    workload_checksum,
)
from .cost_model import (
    KernelLoadParams,
    MemoryHierarchyParams,
    effective_access_latency,
    kernel_load,
)
from .engine import (
    Engine,
    OptimizationMode,
    Request,
    RunMetrics,
    ToyModel,
    ToyModelConfig,
    accuracy,
    generation_throughput,
    greedy_pick,
    total_latency,
)
from .errors import CapacityError, ConfigError, IntegrityError, ShapeError
from .fp8 import (
    DECODE_TABLE,
    E4M3_MAX,
    Fp8Block,
    decode_e4m3,
    dequantize_block,
    encode_e4m3,
    quantize_block,
)
from .kv_cache import BlockPool, BlockTable, PoolStats, WriteReport, used_cache_bytes
from .numerics import block_sum_reduce, block_sum_reduce_rows, dot, stable_softmax, tensor
from .selfcheck import run_selftest

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "AttentionOutput",
    "BenchConfig",
    "BlockPool",
    "BlockTable",
    "CapacityError",
    "ConfigError",
    "DECODE_TABLE",
    "E4M3_MAX",
    "Engine",
    "Fp8Block",
    "IntegrityError",
    "KernelLoadParams",
    "MemoryHierarchyParams",
    "OptimizationMode",
    "PoolStats",
    "Request",
    "RunMetrics",
    "ShapeError",
    "ToyModel",
    "ToyModelConfig",
    "WorkloadSpec",
    "WriteReport",
    "accuracy",
    "block_sum_reduce",
    "block_sum_reduce_rows",
    "decode_e4m3",
    "dequantize_block",
    "dot",
    "effective_access_latency",
    "emit_report",
    "encode_e4m3",
    "generate_workload",
    "generation_throughput",
    "gqa_attention",
    "greedy_pick",
    "kernel_load",
    "load_workload",
    "paged_attention",
    "quantize_block",
    "query_group_of",
    "reference_attention",
    "run_benchmark",
    "run_selftest",
    "save_workload",
    "stable_softmax",
    "tensor",
    "total_latency",
    "used_cache_bytes",
    "workload_checksum",
]

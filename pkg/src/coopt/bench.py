"""Workload generation, the benchmark runner, and report emission.

A workload is a list of requests with seeded random prompts. The runner
executes the same workload under each requested mode on a fresh pool,
asserts the workload bytes did not drift between modes, and reports both
measured timings and the analytic cost-model figures. Static batching:
all requests are submitted together and decoded lockstep until done.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cost_model import (
    KernelLoadParams,
    MemoryHierarchyParams,
    effective_access_latency,
    kernel_load,
)
from .engine import (
    MODE_PRECISION,
    Engine,
    OptimizationMode,
    Request,
    ToyModel,
    ToyModelConfig,
    generation_throughput,
    total_latency,
)
from .errors import ConfigError
from .kv_cache import BlockPool

__all__ = [
    "WorkloadSpec",
    "BenchConfig",
    "generate_workload",
    "workload_checksum",
    "save_workload",
    "load_workload",
    "run_benchmark",
    "emit_report",
    "CSV_COLUMNS",
]

_WORKLOAD_MAGIC = b"CWL1"

CSV_COLUMNS = [
    "mode",
    "total_latency_s",
    "throughput_tok_s",
    "p50_s",
    "p99_s",
    "blocks_allocated",
    "used_cache_bytes",
    "t_effective_cycles",
    "c_kernel",
]


@dataclass(frozen=True)
class WorkloadSpec:
    """Seeded request-mix description.

    ``distribution`` picks how prompt lengths are drawn: ``fixed`` uses
    ``length`` for every request, ``uniform`` draws integers from
    [min_len, max_len], ``lognormal`` draws exp(Normal(mu, sigma)) rounded
    to an integer and clamped into [1, max_len].
    """

    num_requests: int
    distribution: str = "fixed"
    length: int = 16
    min_len: int = 1
    max_len: int = 2048
    mu: float = 3.0
    sigma: float = 0.8
    max_new_tokens: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.num_requests < 0:
            raise ConfigError("num_requests must be >= 0")
        if self.max_new_tokens < 0:
            raise ConfigError("max_new_tokens must be >= 0")
        if self.distribution == "fixed":
            if self.length < 1:
                raise ConfigError("fixed length must be >= 1")
        elif self.distribution == "uniform":
            if not 1 <= self.min_len <= self.max_len:
                raise ConfigError(
                    f"need 1 <= min_len <= max_len, got [{self.min_len}, {self.max_len}]"
                )
        elif self.distribution == "lognormal":
            if self.sigma < 0 or self.max_len < 1:
                raise ConfigError("lognormal needs sigma >= 0 and max_len >= 1")
        else:
            raise ConfigError(f"unknown distribution {self.distribution!r}")


def generate_workload(spec: WorkloadSpec, vocab_size: int) -> list[Request]:
    """Draw the workload; identical spec and vocab give identical requests."""
    if vocab_size < 1:
        raise ConfigError("vocab_size must be >= 1")
    rng = np.random.default_rng(spec.seed)
    n = spec.num_requests
    if spec.distribution == "fixed":
        lengths = np.full(n, spec.length, dtype=np.int64)
    elif spec.distribution == "uniform":
        lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n, dtype=np.int64)
    else:
        raw = np.rint(rng.lognormal(spec.mu, spec.sigma, size=n))
        lengths = np.clip(raw, 1, spec.max_len).astype(np.int64)
    return [
        Request(
            prompt=rng.integers(0, vocab_size, size=int(length)).tolist(),
            max_new_tokens=spec.max_new_tokens,
        )
        for length in lengths
    ]


def workload_checksum(requests) -> str:
    """Order-sensitive digest of prompts and generation budgets."""
    h = hashlib.sha256()
    for req in requests:
        h.update(struct.pack("<II", req.max_new_tokens, len(req.prompt)))
        h.update(np.asarray(req.prompt, dtype="<u4").tobytes())
    return h.hexdigest()


def save_workload(requests, path) -> None:
    """Write requests as a little-endian binary file (magic ``CWL1``)."""
    out = [_WORKLOAD_MAGIC, struct.pack("<I", len(requests))]
    for req in requests:
        out.append(struct.pack("<II", req.max_new_tokens, len(req.prompt)))
        out.append(np.asarray(req.prompt, dtype="<u4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_workload(path) -> list[Request]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _WORKLOAD_MAGIC:
        raise ValueError(f"{path}: not a workload file (bad magic)")
    (count,) = struct.unpack_from("<I", blob, 4)
    pos = 8
    requests = []
    for _ in range(count):
        max_new, length = struct.unpack_from("<II", blob, pos)
        pos += 8
        ids = np.frombuffer(blob, dtype="<u4", count=length, offset=pos)
        pos += 4 * length
        requests.append(Request(prompt=[int(t) for t in ids], max_new_tokens=max_new))
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after {count} requests")
    return requests


@dataclass
class BenchConfig:
    model: ToyModelConfig = field(default_factory=ToyModelConfig)
    block_size: int = 16
    capacity_blocks: int = 4096
    precision_by_mode: dict = field(default_factory=dict)
    t_cache: float = 20.0
    t_dram: float = 400.0
    warmup_runs: int = 1
    skip_duplicate_prompt_tokens: bool = False

    def __post_init__(self):
        if self.block_size < 1 or self.capacity_blocks < 1:
            raise ConfigError("block_size and capacity_blocks must be >= 1")
        if self.warmup_runs < 0:
            raise ConfigError("warmup_runs must be >= 0")
        for mode, prec in self.precision_by_mode.items():
            OptimizationMode(mode)
            if prec not in ("fp32", "fp8"):
                raise ConfigError(f"unknown precision {prec!r} for mode {mode}")


def _percentile(samples, q) -> float:
    if not samples:
        return 0.0
    return float(np.percentile(np.asarray(samples, dtype=np.float64), q))


def _match_fraction(a: list[list[int]], b: list[list[int]]) -> float:
    """Position-wise token agreement between two runs of one workload."""
    total = matched = 0
    for xs, ys in zip(a, b):
        n = max(len(xs), len(ys))
        total += n
        matched += sum(1 for x, y in zip(xs, ys) if x == y)
    return matched / total if total else 1.0


def run_benchmark(requests, modes, config: BenchConfig) -> dict:
    """Run one workload under each mode and build the report dict.

    Each mode gets a fresh pool; the model weights are shared (identical
    seed either way). Warm-up passes run the full workload and are excluded
    from every timing. The workload checksum is recomputed per mode and must
    not drift, otherwise the comparison would be meaningless.
    """
    mode_list = [OptimizationMode(m) for m in modes]
    if len(set(mode_list)) != len(mode_list):
        raise ConfigError("duplicate mode in mode list")
    model = ToyModel(config.model)
    reference_checksum = workload_checksum(requests)
    report = {
        "schema_version": 1,
        "environment": {
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "num_requests": len(requests),
            "workload_checksum": reference_checksum,
            "config": {
                "model": asdict(config.model),
                "block_size": config.block_size,
                "capacity_blocks": config.capacity_blocks,
                "precision_by_mode": dict(config.precision_by_mode),
                "t_cache": config.t_cache,
                "t_dram": config.t_dram,
                "warmup_runs": config.warmup_runs,
            },
        },
        "modes": {},
    }
    first_tokens: list[list[int]] | None = None
    for mode in mode_list:
        checksum = workload_checksum(requests)
        if checksum != reference_checksum:
            raise ConfigError(
                f"workload mutated before mode {mode.value}: "
                f"{checksum} != {reference_checksum}"
            )
        precision = config.precision_by_mode.get(mode.value, MODE_PRECISION[mode])
        pool = BlockPool(
            block_size=config.block_size,
            num_kv_heads=config.model.num_kv_heads,
            head_dim=config.model.head_dim,
            capacity=config.capacity_blocks,
            precision=precision,
        )
        engine = Engine(
            model, pool, mode,
            skip_duplicate_prompt_tokens=config.skip_duplicate_prompt_tokens,
        )
        for _ in range(config.warmup_runs):
            engine.run_batch(requests)
        metrics = engine.run_batch(requests)

        decode_steps = len(metrics.per_step_gather_calls)
        mean_blocks = (
            sum(metrics.per_step_blocks_read) / decode_steps if decode_steps else 0.0
        )
        calls = sum(metrics.per_step_gather_calls)
        mean_span = sum(metrics.per_step_gathered_tokens) / calls if calls else 0.0
        hit_rate = pool.stats.reread_fraction
        if metrics.max_blocks_per_sequence and requests:
            c_kernel = kernel_load(
                KernelLoadParams(
                    batch_size=len(requests),
                    blocks_per_sequence=metrics.max_blocks_per_sequence,
                    head_dim=config.model.head_dim,
                )
            )
        else:
            c_kernel = 0
        entry = {
            "precision": precision,
            "total_latency_s": total_latency(metrics.latencies_s),
            "throughput_tok_s": generation_throughput(
                metrics.total_generated_tokens, metrics.generation_time_s
            ),
            "p50_s": _percentile(metrics.latencies_s, 50),
            "p99_s": _percentile(metrics.latencies_s, 99),
            "blocks_allocated": metrics.blocks_allocated,
            "used_cache_bytes": metrics.used_cache_bytes,
            "total_generated_tokens": metrics.total_generated_tokens,
            "generation_time_s": metrics.generation_time_s,
            "tokens_written": metrics.tokens_written,
            "tokens_skipped": metrics.tokens_skipped,
            "hit_rate": hit_rate,
            "t_effective_cycles": effective_access_latency(
                MemoryHierarchyParams(hit_rate, config.t_cache, config.t_dram)
            ),
            "c_kernel": c_kernel,
            "mean_blocks_read_per_decode_step": mean_blocks,
            "mean_gather_span_tokens": mean_span,
            "workload_checksum": checksum,
            "output_checksum": hashlib.sha256(
                json.dumps(metrics.generated_token_ids).encode()
            ).hexdigest(),
            "path_calls": dict(metrics.path_calls),
        }
        if first_tokens is None:
            first_tokens = metrics.generated_token_ids
            entry["token_match_vs_first_mode"] = 1.0
        else:
            entry["token_match_vs_first_mode"] = _match_fraction(
                first_tokens, metrics.generated_token_ids
            )
        report["modes"][mode.value] = entry
    return report


def emit_report(report: dict, fmt: str, path=None) -> str:
    """Serialize a report as json or csv; optionally write it to ``path``.

    The json form round-trips through json.loads unchanged. The csv form is
    one row per mode with a fixed column set; an empty report yields just
    the header row.
    """
    if fmt == "json":
        text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for mode, entry in report.get("modes", {}).items():
            writer.writerow(
                [mode] + [repr(entry[c]) if isinstance(entry[c], float) else entry[c]
                          for c in CSV_COLUMNS[1:]]
            )
        text = buf.getvalue()
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text

"""``bench`` command line: run benchmarks, generate workloads, selftest.

Config files are JSON with four optional sections. Unknown keys are
rejected so typos fail loudly. Example:

    {
      "model":      {"vocab_size": 64, "num_layers": 1,
                     "H_q": 4, "H_k": 2, "d": 32, "seed": 0},
      "cache":      {"B": 16, "capacity": 4096,
                     "precision": {"coopt": "fp8"}},
      "workload":   {"num_requests": 8, "distribution": "lognormal",
                     "mu": 4.0, "sigma": 0.5, "max_len": 1024,
                     "max_new_tokens": 16, "seed": 13},
      "cost_model": {"T_cache": 20.0, "T_DRAM": 400.0}
    }
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .bench import (
    BenchConfig,
    WorkloadSpec,
    emit_report,
    generate_workload,
    load_workload,
    run_benchmark,
    save_workload,
)
from .engine import ToyModelConfig
from .errors import ConfigError
from .selfcheck import run_selftest

_MODEL_KEYS = {
    "vocab_size": "vocab_size",
    "num_layers": "num_layers",
    "H_q": "num_query_heads",
    "H_k": "num_kv_heads",
    "d": "head_dim",
    "seed": "seed",
    "attn_gain": "attn_gain",
}

_WORKLOAD_KEYS = (
    "num_requests", "distribution", "length", "min_len", "max_len",
    "mu", "sigma", "max_new_tokens", "seed",
)


def _take(section: dict, allowed, where: str) -> dict:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return section


def parse_config(doc: dict) -> tuple[BenchConfig, WorkloadSpec]:
    """Build runner and workload settings from a parsed config document."""
    _take(doc, ("model", "cache", "workload", "cost_model", "warmup_runs",
                "skip_duplicate_prompt_tokens"), "config")
    model_sec = _take(dict(doc.get("model", {})), _MODEL_KEYS, "model")
    model = ToyModelConfig(**{_MODEL_KEYS[k]: v for k, v in model_sec.items()})

    cache_sec = _take(dict(doc.get("cache", {})), ("B", "capacity", "precision"), "cache")
    cost_sec = _take(dict(doc.get("cost_model", {})), ("T_cache", "T_DRAM"), "cost_model")
    config = BenchConfig(
        model=model,
        block_size=int(cache_sec.get("B", 16)),
        capacity_blocks=int(cache_sec.get("capacity", 4096)),
        precision_by_mode=dict(cache_sec.get("precision", {})),
        t_cache=float(cost_sec.get("T_cache", 20.0)),
        t_dram=float(cost_sec.get("T_DRAM", 400.0)),
        warmup_runs=int(doc.get("warmup_runs", 1)),
        skip_duplicate_prompt_tokens=bool(doc.get("skip_duplicate_prompt_tokens", False)),
    )
    wl_sec = _take(dict(doc.get("workload", {})), _WORKLOAD_KEYS, "workload")
    spec = WorkloadSpec(num_requests=int(wl_sec.pop("num_requests", 0)), **wl_sec)
    return config, spec


def _load_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _cmd_run(args) -> int:
    config, spec = parse_config(_load_json(args.config))
    if args.warmup is not None:
        config = dataclasses.replace(config, warmup_runs=args.warmup)
    if args.workload:
        requests = load_workload(args.workload)
    else:
        requests = generate_workload(spec, config.model.vocab_size)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise ConfigError("no modes requested")
    report = run_benchmark(requests, modes, config)
    text = emit_report(report, args.format, args.out)
    if args.out:
        for mode, entry in report["modes"].items():
            print(
                f"{mode}: {entry['throughput_tok_s']:.1f} tok/s, "
                f"p50 {entry['p50_s']:.4f}s, p99 {entry['p99_s']:.4f}s, "
                f"{entry['used_cache_bytes']} cache bytes"
            )
        print(f"report written to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_workload(args) -> int:
    doc = _load_json(args.spec)
    if "workload" in doc or "model" in doc:
        config, spec = parse_config(doc)
        vocab = config.model.vocab_size
    else:
        wl = _take(dict(doc), _WORKLOAD_KEYS + ("vocab_size",), "workload spec")
        vocab = int(wl.pop("vocab_size", ToyModelConfig().vocab_size))
        spec = WorkloadSpec(**wl)
    requests = generate_workload(spec, vocab)
    save_workload(requests, args.out)
    total = sum(len(r.prompt) for r in requests)
    print(f"wrote {len(requests)} requests ({total} prompt tokens) to {args.out}")
    return 0


def _cmd_selftest(args) -> int:
    return 0 if run_selftest(fast=args.fast) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bench",
        description="Benchmark the co-optimized attention engine.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a benchmark from a config file")
    run_p.add_argument("--config", required=True, help="JSON config path")
    run_p.add_argument("--modes", default="original,coopt",
                       help="comma-separated mode list (default: original,coopt)")
    run_p.add_argument("--format", choices=("json", "csv"), default="json")
    run_p.add_argument("--out", default=None, help="write the report here")
    run_p.add_argument("--workload", default=None,
                       help="reuse a saved workload file instead of generating one")
    run_p.add_argument("--warmup", type=int, default=None,
                       help="override the number of untimed warm-up passes")
    run_p.set_defaults(func=_cmd_run)

    wl_p = sub.add_parser("workload", help="generate and save a workload")
    wl_p.add_argument("--spec", required=True,
                      help="JSON file: either a full config or a bare workload spec")
    wl_p.add_argument("--out", required=True, help="output workload file")
    wl_p.set_defaults(func=_cmd_workload)

    st_p = sub.add_parser("selftest", help="run the built-in oracle checks")
    st_p.add_argument("--fast", action="store_true", help="smaller grid")
    st_p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(f"bench: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

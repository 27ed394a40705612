"""Analytic cost model: hit-rate-weighted access latency and kernel load.

Latencies are in cycles. The DRAM figure defaults to 400 cycles, a common
round number for a miss that goes all the way to memory; the cache figure
defaults to 20. Kernel load is the dense-work proxy
batch_size * blocks_per_sequence * head_dim**2.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = [
    "MemoryHierarchyParams",
    "KernelLoadParams",
    "effective_access_latency",
    "kernel_load",
]


@dataclass(frozen=True)
class MemoryHierarchyParams:
    hit_rate: float
    t_cache: float = 20.0
    t_dram: float = 400.0

    def __post_init__(self):
        if not 0.0 <= self.hit_rate <= 1.0:
            raise ValueError(f"hit_rate must be in [0, 1], got {self.hit_rate}")
        if not 0.0 < self.t_cache <= self.t_dram:
            raise ValueError(
                f"need 0 < t_cache <= t_dram, got {self.t_cache} and {self.t_dram}"
            )


def effective_access_latency(params: MemoryHierarchyParams) -> float:
    """Expected cycles per access under the given hit rate."""
    return params.hit_rate * params.t_cache + (1.0 - params.hit_rate) * params.t_dram


@dataclass(frozen=True)
class KernelLoadParams:
    batch_size: int
    blocks_per_sequence: int
    head_dim: int

    def __post_init__(self):
        if min(self.batch_size, self.blocks_per_sequence, self.head_dim) < 1:
            raise ValueError("kernel load parameters must all be >= 1")


def kernel_load(params: KernelLoadParams) -> int:
    """Work units batch_size * blocks_per_sequence * head_dim**2."""
    load = params.batch_size * params.blocks_per_sequence * params.head_dim**2
    if load >= 2**63:
        raise OverflowError(f"kernel load {load} exceeds the 64-bit range")
    return load

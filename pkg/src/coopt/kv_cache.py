"""Block-paged key/value storage with a skip-filtered write path.

A pool owns ``capacity`` physical blocks. Each block holds ``block_size``
token positions for ``num_kv_heads`` heads of ``head_dim`` values, stored
separately for keys and values. Storage layout is one cell per
(block, kv-head) pair:

* fp32 mode keeps raw float32 cells, the bit-exact baseline;
* fp8 mode keeps one uint8 code per element plus one float32 scale per
  cell (see the fp8 module for the code format).

Token positions map to flat slots ``block * block_size + offset``. A write
batch carries one slot per incoming token; a negative slot marks padding
and a slot listed in the caller's skip set is excluded as well. Either way
the bytes of the skipped slot are left untouched.

Scale policy for fp8 cells: the scale only grows. The first write to a
cell fixes scale = max|values| / 448; a later write whose peak exceeds the
cell's recorded peak re-encodes the cell's previous content under the new
scale (zero codes stay zero bit-for-bit, so never-written and skipped
slots are unaffected). Because a rescale may rewrite previously written
slots, a slot that has been written must not appear in a later skip set.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import CapacityError, IntegrityError, ShapeError
from .fp8 import DECODE_TABLE, E4M3_MAX, encode_e4m3

__all__ = [
    "BlockTable",
    "BlockPool",
    "PoolStats",
    "WriteReport",
    "used_cache_bytes",
]


@dataclass
class BlockTable:
    """Per-sequence map from logical block index to physical block id."""

    sequence_id: int
    logical_to_physical: list[int] = field(default_factory=list)
    token_count: int = 0

    def block_count(self) -> int:
        return len(self.logical_to_physical)

    def advance(self, n_tokens: int, block_size: int) -> None:
        """Commit ``n_tokens`` freshly written tokens to this sequence."""
        if n_tokens < 0:
            raise ValueError("cannot advance by a negative token count")
        new_total = self.token_count + n_tokens
        if -(-new_total // block_size) > len(self.logical_to_physical):
            raise IntegrityError(
                f"sequence {self.sequence_id}: {new_total} tokens exceed "
                f"{len(self.logical_to_physical)} mapped blocks"
            )
        self.token_count = new_total


class WriteReport(NamedTuple):
    written: int
    skipped: int


@dataclass
class PoolStats:
    """Instrumentation counters; reset between measured runs."""

    tokens_written: int = 0
    tokens_skipped: int = 0
    gather_calls: int = 0
    gathered_tokens: int = 0
    blocks_read: int = 0
    fp8_cell_encodes: int = 0
    fp8_cell_decodes: int = 0
    fp8_rescales: int = 0
    seen_blocks: set = field(default_factory=set)

    def record_gather(self, block_ids, token_count: int) -> None:
        self.gather_calls += 1
        self.blocks_read += len(block_ids)
        self.gathered_tokens += token_count
        self.seen_blocks.update(int(b) for b in block_ids)

    @property
    def reread_fraction(self) -> float:
        """Fraction of block reads that hit a block read before (cache-hit
        proxy for the cost model)."""
        if self.blocks_read == 0:
            return 0.0
        return 1.0 - len(self.seen_blocks) / self.blocks_read

    def reset(self) -> None:
        self.__init__()


def used_cache_bytes(allocated_blocks: int, bytes_per_block: int) -> int:
    """Total bytes held by ``allocated_blocks`` blocks of the given size."""
    if allocated_blocks < 0:
        raise ValueError("allocated_blocks must be >= 0")
    if bytes_per_block <= 0:
        raise ValueError("bytes_per_block must be > 0")
    return allocated_blocks * bytes_per_block


class BlockPool:
    """Fixed-capacity pool of KV blocks plus the write/read paths."""

    def __init__(
        self,
        block_size: int,
        num_kv_heads: int,
        head_dim: int,
        capacity: int,
        precision: str = "fp32",
    ):
        if block_size < 1 or num_kv_heads < 1 or head_dim < 1 or capacity < 1:
            raise ValueError("pool geometry fields must all be >= 1")
        if precision not in ("fp32", "fp8"):
            raise ValueError(f"unknown precision {precision!r}")
        self.block_size = block_size
        self.num_kv_heads = num_kv_heads
        self.head_dim = head_dim
        self.capacity = capacity
        self.precision = precision
        # Last element pops first, so block ids are handed out ascending.
        self.free_list = list(range(capacity - 1, -1, -1))
        self._free_set = set(self.free_list)
        # Token-position-major layout: a gathered span reshapes straight to
        # [tokens, heads, dim] with no transpose copy on the read path.
        shape = (capacity, block_size, num_kv_heads, head_dim)
        if precision == "fp32":
            self.k_store = np.zeros(shape, dtype=np.float32)
            self.v_store = np.zeros(shape, dtype=np.float32)
        else:
            self.k_codes = np.zeros(shape, dtype=np.uint8)
            self.v_codes = np.zeros(shape, dtype=np.uint8)
            self.k_scales = np.ones((capacity, num_kv_heads), dtype=np.float32)
            self.v_scales = np.ones((capacity, num_kv_heads), dtype=np.float32)
            self.k_peaks = np.zeros((capacity, num_kv_heads), dtype=np.float32)
            self.v_peaks = np.zeros((capacity, num_kv_heads), dtype=np.float32)
        self.stats = PoolStats()

    # -- geometry ---------------------------------------------------------

    @property
    def bytes_per_block(self) -> int:
        """Bytes held per block: K and V payloads plus fp8 scales."""
        payload = self.num_kv_heads * self.block_size * self.head_dim
        if self.precision == "fp8":
            return 2 * (payload + 4 * self.num_kv_heads)
        return 2 * payload * 4

    @property
    def allocated_count(self) -> int:
        return self.capacity - len(self.free_list)

    def used_bytes(self) -> int:
        return used_cache_bytes(self.allocated_count, self.bytes_per_block)

    def slots_for_range(self, table: BlockTable, start: int, count: int) -> np.ndarray:
        """Flat slots for token positions [start, start + count) of a table."""
        if start < 0 or count < 0:
            raise ValueError("start and count must be non-negative")
        if count and (start + count - 1) // self.block_size >= table.block_count():
            raise IntegrityError(
                f"sequence {table.sequence_id}: position {start + count - 1} "
                "has no mapped block"
            )
        if count == 1:
            phys = table.logical_to_physical[start // self.block_size]
            return np.array([phys * self.block_size + start % self.block_size],
                            dtype=np.int64)
        pos = np.arange(start, start + count, dtype=np.int64)
        phys = np.array(
            [table.logical_to_physical[b] for b in pos // self.block_size],
            dtype=np.int64,
        )
        return phys * self.block_size + pos % self.block_size

    # -- allocation -------------------------------------------------------

    def allocate_blocks(self, table: BlockTable, tokens_to_add: int) -> BlockTable:
        """Extend ``table`` so it can hold ``tokens_to_add`` more tokens."""
        if tokens_to_add < 0:
            raise ValueError("tokens_to_add must be >= 0")
        target = -(-(table.token_count + tokens_to_add) // self.block_size)
        need = target - table.block_count()
        if need <= 0:
            return table
        if need > len(self.free_list):
            raise CapacityError(
                f"sequence {table.sequence_id}: needs {need} blocks, "
                f"{len(self.free_list)} free (short {need - len(self.free_list)})"
            )
        for _ in range(need):
            block_id = self.free_list.pop()
            self._free_set.discard(block_id)
            table.logical_to_physical.append(block_id)
        return table

    def free_sequence(self, table: BlockTable) -> int:
        """Return a sequence's blocks to the pool, scrubbing their bytes."""
        ids = table.logical_to_physical
        for b in ids:
            if b in self._free_set or not (0 <= b < self.capacity):
                raise IntegrityError(
                    f"sequence {table.sequence_id}: block {b} is not allocated"
                )
        if len(set(ids)) != len(ids):
            raise IntegrityError(
                f"sequence {table.sequence_id}: table repeats a physical block"
            )
        arr = np.array(sorted(ids), dtype=np.int64)
        if self.precision == "fp32":
            self.k_store[arr] = 0.0
            self.v_store[arr] = 0.0
        else:
            self.k_codes[arr] = 0
            self.v_codes[arr] = 0
            self.k_scales[arr] = 1.0
            self.v_scales[arr] = 1.0
            self.k_peaks[arr] = 0.0
            self.v_peaks[arr] = 0.0
        self.free_list.extend(int(b) for b in arr)
        self._free_set.update(int(b) for b in arr)
        reclaimed = len(ids)
        table.logical_to_physical = []
        table.token_count = 0
        return reclaimed

    # -- write path -------------------------------------------------------

    def reshape_and_cache(self, keys, values, slots, skip=frozenset()) -> WriteReport:
        """Write per-token K/V rows into their block slots.

        ``keys`` and ``values`` are [n_tokens, num_kv_heads, head_dim];
        ``slots`` holds one flat slot per token. Tokens with a negative slot
        (padding) or a slot in ``skip`` are not stored, and their target
        bytes stay untouched. Returns how many tokens were written/skipped.
        """
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        slots = np.asarray(slots, dtype=np.int64).ravel()
        want = (slots.size, self.num_kv_heads, self.head_dim)
        if keys.shape != want or values.shape != want:
            raise ShapeError(
                f"keys/values must have shape {want}, got {keys.shape} and {values.shape}"
            )
        if skip:
            keep = np.array([s >= 0 and s not in skip for s in slots.tolist()])
        else:
            keep = slots >= 0
        wslots = slots[keep]
        skipped = int(slots.size - wslots.size)
        if wslots.size == 0:
            self.stats.tokens_skipped += skipped
            return WriteReport(0, skipped)
        uniq = np.unique(wslots)
        if uniq.size != wslots.size:
            raise ValueError("write batch repeats a slot")
        blocks = wslots // self.block_size
        offsets = wslots % self.block_size
        for b in np.unique(blocks):
            if b in self._free_set or b >= self.capacity:
                raise IntegrityError(f"slot targets unallocated block {int(b)}")
        if self.precision == "fp32":
            self.k_store[blocks, offsets] = keys[keep]
            self.v_store[blocks, offsets] = values[keep]
        else:
            self._write_fp8(blocks, offsets, keys[keep], values[keep])
        self.stats.tokens_written += int(wslots.size)
        self.stats.tokens_skipped += skipped
        return WriteReport(int(wslots.size), skipped)

    def _write_fp8(self, blocks, offsets, krows, vrows) -> None:
        order = np.argsort(blocks, kind="stable")
        sorted_blocks = blocks[order]
        ublocks, starts = np.unique(sorted_blocks, return_index=True)
        self._grow_cell_scales(self.k_codes, self.k_scales, self.k_peaks,
                               ublocks, starts, krows[order])
        self._grow_cell_scales(self.v_codes, self.v_scales, self.v_peaks,
                               ublocks, starts, vrows[order])
        # With every touched cell's scale settled, one encode call covers
        # the K and V rows of the whole batch.
        n = blocks.size
        rows = np.concatenate((krows, vrows), axis=0).astype(np.float64)
        row_scales = np.concatenate(
            (self.k_scales[blocks], self.v_scales[blocks]), axis=0
        )
        codes = encode_e4m3(rows / row_scales[:, :, None])
        self.k_codes[blocks, offsets] = codes[:n]
        self.v_codes[blocks, offsets] = codes[n:]
        self.stats.fp8_cell_encodes += 2 * len(ublocks) * self.num_kv_heads

    def _grow_cell_scales(self, codes, scales, peaks, ublocks, starts, rows) -> None:
        """Widen cell scales where an incoming batch raises the cell's peak.

        ``rows`` is block-sorted [n, heads, dim]; ``starts`` bounds each
        unique block's run. A cell whose recorded peak grows (or that has
        never fixed a scale) takes scale = peak / max-representable and
        re-expresses its held content under it. All-zero codes decode to
        zero and re-encode to zero bit-for-bit, so slots that were never
        written, padded over, or skipped keep their exact bytes.
        """
        incoming = np.maximum.reduceat(np.abs(rows).max(axis=2), starts, axis=0)
        old = peaks[ublocks]
        new = np.maximum(old, incoming)
        grow = (new > old) | (old == 0.0)
        if not grow.any():
            return
        gi, gh = np.nonzero(grow)
        gb = ublocks[gi]
        cell_peaks = new[gi, gh].astype(np.float64)
        new_scales = np.where(
            cell_peaks > 0.0, cell_peaks / E4M3_MAX, 1.0
        ).astype(np.float32)
        held = peaks[gb, gh] > 0.0
        if held.any():
            hb, hh = gb[held], gh[held]
            content = DECODE_TABLE[codes[hb, :, hh, :]] * scales[hb, hh][:, None, None]
            codes[hb, :, hh, :] = encode_e4m3(
                content.astype(np.float64)
                / new_scales[held].astype(np.float64)[:, None, None]
            )
            self.stats.fp8_rescales += int(held.sum())
        scales[gb, gh] = new_scales
        peaks[gb, gh] = new[gi, gh]

    # -- read path --------------------------------------------------------

    def gather_cached_kv(self, table: BlockTable, start: int, end: int):
        """Materialize K and V for token positions [start, end) as float32.

        Returns two arrays of shape [end - start, num_kv_heads, head_dim].
        Only the blocks covering the range are touched, and integrity of
        fp8 codes is checked for the returned positions only.
        """
        if start < 0 or end <= start:
            raise ValueError(f"empty or negative gather range [{start}, {end})")
        if end > table.token_count:
            raise IndexError(
                f"gather range [{start}, {end}) exceeds {table.token_count} cached tokens"
            )
        b0 = start // self.block_size
        b1 = -(-end // self.block_size)
        ids = np.array(table.logical_to_physical[b0:b1], dtype=np.int64)
        self.stats.record_gather(ids, end - start)
        lo = start - b0 * self.block_size
        hi = end - b0 * self.block_size
        if self.precision == "fp32":
            k = self._span_fp32(self.k_store, ids, lo, hi)
            v = self._span_fp32(self.v_store, ids, lo, hi)
        else:
            k, v = self._span_fp8_pair(ids, lo, hi)
            self.stats.fp8_cell_decodes += 2 * len(ids) * self.num_kv_heads
        return k, v

    def _span_fp32(self, store, ids, lo, hi):
        span = store[ids].reshape(-1, self.num_kv_heads, self.head_dim)
        return span[lo:hi]

    def _span_fp8_pair(self, ids, lo, hi):
        # Fold each cell's scale into its own 256-entry value table, then
        # decode the whole span with a single flat lookup: the index of an
        # element is its cell's table row offset plus the code byte. The
        # scaled tables stay small enough to sit in cache, so this beats
        # decode-then-multiply by a wide margin on long spans.
        nb, heads = len(ids), self.num_kv_heads
        scales = np.stack((self.k_scales[ids], self.v_scales[ids]))
        tables = scales.reshape(2, nb, heads, 1) * DECODE_TABLE
        codes = np.stack((self.k_codes[ids], self.v_codes[ids]))
        base = np.arange(2 * nb * heads, dtype=np.int32).reshape(2, nb, 1, heads, 1) << 8
        flat = np.take(tables.reshape(-1), base + codes)
        spans = flat.reshape(2, -1, heads, self.head_dim)[:, lo:hi]
        # Scales are finite and positive, so a NaN here can only come from
        # a NaN codepoint inside the requested range. Bytes in the masked
        # tail (past hi) are never inspected.
        if np.isnan(spans).any():
            raise IntegrityError("NaN codepoint in gathered cache range")
        return spans[0], spans[1]

    # -- debug dump -------------------------------------------------------

    def dump_bytes(self) -> bytes:
        """Serialize every allocated block, byte-stable for identical writes.

        Header: magic ``KVD1``, precision byte (0 = fp32, 1 = fp8), then
        block_size, num_kv_heads, head_dim, capacity as little-endian
        uint32. Per allocated block (ascending id): block id as uint32,
        then per kv-head a K record followed by a V record. An fp8 record
        is the float32 scale followed by block_size * head_dim code bytes;
        an fp32 record is the raw float32 values.
        """
        out = [
            struct.pack(
                "<4sBIIII",
                b"KVD1",
                1 if self.precision == "fp8" else 0,
                self.block_size,
                self.num_kv_heads,
                self.head_dim,
                self.capacity,
            )
        ]
        for b in sorted(set(range(self.capacity)) - self._free_set):
            out.append(struct.pack("<I", b))
            for h in range(self.num_kv_heads):
                if self.precision == "fp8":
                    out.append(struct.pack("<f", float(self.k_scales[b, h])))
                    out.append(self.k_codes[b, :, h, :].tobytes())
                    out.append(struct.pack("<f", float(self.v_scales[b, h])))
                    out.append(self.v_codes[b, :, h, :].tobytes())
                else:
                    out.append(self.k_store[b, :, h, :].astype("<f4").tobytes())
                    out.append(self.v_store[b, :, h, :].astype("<f4").tobytes())
        return b"".join(out)

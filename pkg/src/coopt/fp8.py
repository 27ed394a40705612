"""Software 8-bit float codec (4 exponent bits, 3 mantissa bits) with
per-block symmetric scaling.

Code layout: bit 7 sign, bits 6-3 exponent (bias 7), bits 2-0 mantissa.
The all-ones pattern S.1111.111 encodes NaN; there are no infinities, so
the largest finite magnitude is S.1111.110 = 448. A zero exponent field
holds subnormals with a fixed 2**-9 quantum, making 2**-9 the smallest
positive value. Encoding rounds to nearest (ties to even) and saturates
at +-448 instead of overflowing.

A quantized block stores one uint8 code per element plus a single float32
scale chosen as max(|values|) / 448, so the largest element lands on the
top code and everything else keeps the codec's relative precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IntegrityError

__all__ = [
    "E4M3_MAX",
    "E4M3_MIN_NORMAL",
    "E4M3_MIN_SUBNORMAL",
    "DECODE_TABLE",
    "decode_e4m3",
    "encode_e4m3",
    "Fp8Block",
    "quantize_block",
    "dequantize_block",
]

E4M3_MAX = 448.0
E4M3_MIN_NORMAL = 2.0**-6
E4M3_MIN_SUBNORMAL = 2.0**-9

_EXP_BIAS = 7
_NAN_MAG = 0x7F  # exponent and mantissa all ones, sign stripped


def _build_decode_table() -> np.ndarray:
    table = np.empty(256, dtype=np.float32)
    for code in range(256):
        exp_field = (code >> 3) & 0xF
        mant = code & 0x7
        if exp_field == 0xF and mant == 0x7:
            mag = np.float32(np.nan)
        elif exp_field == 0:
            mag = np.float32(mant * E4M3_MIN_SUBNORMAL)
        else:
            mag = np.float32((1.0 + mant / 8.0) * 2.0 ** (exp_field - _EXP_BIAS))
        table[code] = -mag if code & 0x80 else mag
    table.setflags(write=False)
    return table


DECODE_TABLE = _build_decode_table()


def decode_e4m3(codes) -> np.ndarray:
    """Map uint8 codes to their float32 values (NaN for the two NaN codes)."""
    return DECODE_TABLE[np.asarray(codes, dtype=np.uint8)]


def encode_e4m3(values) -> np.ndarray:
    """Round finite floats to the nearest code, ties to even, saturating.

    Accepts any array shape and returns uint8 codes of the same shape.
    Magnitudes below half the subnormal quantum flush to (signed) zero;
    magnitudes past 448 clamp to the top finite code.
    """
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot encode non-finite values")
    sign = np.where(np.signbit(v), 0x80, 0).astype(np.uint8)
    mag = np.abs(v)

    # Exponent of each magnitude: frexp gives mag = m * 2**e2 with m in
    # [0.5, 1), so e2 - 1 is floor(log2(mag)). Clamping at -6 folds the
    # subnormal range onto the fixed 2**-9 quantum.
    _, e2 = np.frexp(mag)
    exp = np.maximum(e2.astype(np.int64) - 1, -6)
    quantum = np.ldexp(1.0, exp - 3)
    # Power-of-two division is exact, so rint performs the real tie-break.
    steps = np.rint(mag / quantum).astype(np.int64)

    # Normal codes pack as (exp + bias) * 8 + (steps - 8). A mantissa that
    # rounded up to steps == 16 lands by that same arithmetic exactly on
    # the next binade's zero-mantissa code, and anything above the top
    # finite value packs above 0x7E, so one clamp covers both overflow
    # into the NaN pattern and saturation at +-448.
    code_mag = np.where(steps >= 8, ((exp + _EXP_BIAS) << 3) + steps - 8, steps)
    code_mag = np.minimum(code_mag, 0x7E).astype(np.uint8)
    return sign | code_mag


@dataclass(frozen=True)
class Fp8Block:
    """One quantized payload: uint8 codes plus a single positive scale."""

    codes: np.ndarray
    scale: float

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")

    @property
    def element_count(self) -> int:
        return self.codes.size


def quantize_block(values) -> Fp8Block:
    """Quantize a float vector into codes plus one shared scale.

    The scale is max(|values|) / 448 rounded to float32 (1.0 for an all-zero
    block), so the peak element maps onto the top finite code.
    """
    vals = np.asarray(values, dtype=np.float32).ravel()
    if vals.size == 0:
        raise ValueError("cannot quantize an empty block")
    if not np.all(np.isfinite(vals)):
        raise ValueError("cannot quantize non-finite values")
    peak = float(np.max(np.abs(vals)))
    scale = np.float32(peak / E4M3_MAX) if peak > 0.0 else np.float32(1.0)
    codes = encode_e4m3(vals.astype(np.float64) / float(scale))
    return Fp8Block(codes=codes, scale=float(scale))


def dequantize_block(block: Fp8Block) -> np.ndarray:
    """Decode a quantized block back to float32 (codes times scale)."""
    if np.any((block.codes & 0x7F) == _NAN_MAG):
        raise IntegrityError("NaN codepoint in quantized block")
    return DECODE_TABLE[block.codes] * np.float32(block.scale)

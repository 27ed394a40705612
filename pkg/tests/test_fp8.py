"""Codec tests built on a from-scratch enumeration of all 256 codepoints.

The oracle below reconstructs the code layout independently (sign bit,
4-bit exponent with bias 7, 3-bit mantissa, one NaN pattern per sign,
no infinities) so the table under test cannot agree with it by accident.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopt.errors import IntegrityError
from coopt.fp8 import (
    DECODE_TABLE,
    E4M3_MAX,
    E4M3_MIN_NORMAL,
    E4M3_MIN_SUBNORMAL,
    Fp8Block,
    decode_e4m3,
    dequantize_block,
    encode_e4m3,
    quantize_block,
)


def oracle_decode(code: int) -> float:
    sign = -1.0 if code & 0x80 else 1.0
    exp_field = (code >> 3) & 0xF
    mant = code & 0x7
    if exp_field == 0xF and mant == 0x7:
        return math.nan
    if exp_field == 0:
        return sign * mant * 2.0**-9
    return sign * (1.0 + mant / 8.0) * 2.0 ** (exp_field - 7)


ORACLE_VALUES = [oracle_decode(c) for c in range(256)]
FINITE_CODES = [c for c in range(256) if not math.isnan(ORACLE_VALUES[c])]


def oracle_encode(v: float) -> int:
    """Nearest finite codepoint, ties to the code with an even mantissa bit."""
    sign_bit = 0x80 if math.copysign(1.0, v) < 0 else 0x00
    mag = abs(v)
    best, best_err = None, None
    for code in FINITE_CODES:
        if code & 0x80:
            continue
        err = abs(ORACLE_VALUES[code] - mag)
        if best is None or err < best_err or (err == best_err and code % 2 == 0):
            best, best_err = code, err
    return sign_bit | best


class TestDecodeTable:
    def test_matches_first_principles_enumeration(self):
        for code in range(256):
            want = ORACLE_VALUES[code]
            got = float(DECODE_TABLE[code])
            if math.isnan(want):
                assert math.isnan(got), f"code {code:#04x} should be NaN"
            else:
                assert got == np.float32(want), f"code {code:#04x}"

    def test_zero_codes_keep_their_sign(self):
        assert DECODE_TABLE[0x00] == 0.0 and not np.signbit(DECODE_TABLE[0x00])
        assert DECODE_TABLE[0x80] == 0.0 and np.signbit(DECODE_TABLE[0x80])

    def test_extremes(self):
        assert float(DECODE_TABLE[0x7E]) == E4M3_MAX
        assert float(DECODE_TABLE[0xFE]) == -E4M3_MAX
        assert float(DECODE_TABLE[0x01]) == E4M3_MIN_SUBNORMAL
        assert float(DECODE_TABLE[0x08]) == E4M3_MIN_NORMAL

    def test_table_is_read_only(self):
        with pytest.raises(ValueError):
            DECODE_TABLE[0] = 1.0

    def test_decode_maps_arrays(self):
        out = decode_e4m3(np.array([[0x00, 0x7E], [0x38, 0x08]], dtype=np.uint8))
        assert out.shape == (2, 2)
        assert float(out[0, 1]) == 448.0
        assert float(out[1, 0]) == 1.0


class TestEncode:
    def test_exact_codepoints_round_trip(self):
        vals = DECODE_TABLE[FINITE_CODES].astype(np.float64)
        codes = encode_e4m3(vals)
        # Signed zeros share a value, so compare decoded bits not raw codes.
        assert np.array_equal(
            DECODE_TABLE[codes].tobytes(), DECODE_TABLE[FINITE_CODES].tobytes()
        )

    def test_matches_nearest_even_oracle_on_midpoints(self):
        # Every midpoint between adjacent positive codes is a worst case
        # for the tie-break; add a sprinkle of near-midpoint offsets.
        probes = []
        pos = sorted(ORACLE_VALUES[c] for c in FINITE_CODES if not c & 0x80)
        for lo, hi in zip(pos, pos[1:]):
            mid = (lo + hi) / 2.0
            probes += [mid, math.nextafter(mid, lo), math.nextafter(mid, hi)]
        probes += [-p for p in probes]
        got = encode_e4m3(np.array(probes))
        for p, g in zip(probes, got):
            want = oracle_encode(p)
            assert int(g) == want, f"{p!r}: got {int(g):#04x}, want {want:#04x}"

    def test_tie_between_sixteen_and_eighteen(self):
        # 17 sits exactly between codes for 16 and 18; even mantissa wins.
        assert float(decode_e4m3(encode_e4m3([17.0]))[0]) == 16.0
        assert float(decode_e4m3(encode_e4m3([19.0]))[0]) == 20.0

    def test_saturates_instead_of_overflowing(self):
        out = decode_e4m3(encode_e4m3([464.0, 1e30, 1e308, -1e308]))
        assert out.tolist() == [448.0, 448.0, 448.0, -448.0]

    def test_tiny_values_flush_to_signed_zero(self):
        half_quantum = 2.0**-10
        codes = encode_e4m3([half_quantum, -half_quantum, 0.0, -0.0])
        assert codes.tolist() == [0x00, 0x80, 0x00, 0x80]
        assert float(decode_e4m3(encode_e4m3([2.0**-10 * 1.5]))[0]) == 2.0**-9

    def test_subnormal_band_uses_fixed_quantum(self):
        vals = [k * 2.0**-9 for k in range(1, 8)]
        assert decode_e4m3(encode_e4m3(vals)).tolist() == pytest.approx(vals)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            encode_e4m3([math.inf])
        with pytest.raises(ValueError):
            encode_e4m3([math.nan])

    def test_preserves_shape(self):
        assert encode_e4m3(np.zeros((3, 5, 2))).shape == (3, 5, 2)

    @given(st.floats(-500.0, 500.0, allow_nan=False))
    @settings(max_examples=300, deadline=None)
    def test_agrees_with_oracle_everywhere(self, v):
        assert int(encode_e4m3([v])[0]) == oracle_encode(v)

    @given(st.floats(0.0, 448.0, allow_nan=False), st.floats(0.0, 448.0, allow_nan=False))
    @settings(max_examples=150, deadline=None)
    def test_monotone_in_magnitude(self, a, b):
        lo, hi = sorted([a, b])
        d_lo = float(decode_e4m3(encode_e4m3([lo]))[0])
        d_hi = float(decode_e4m3(encode_e4m3([hi]))[0])
        assert d_lo <= d_hi


class TestDecodeNaN:
    def test_both_nan_codes(self):
        out = decode_e4m3(np.array([0x7F, 0xFF], dtype=np.uint8))
        assert np.all(np.isnan(out))


class TestQuantizeBlock:
    def test_peak_at_max_normal_gives_unit_scale(self):
        block = quantize_block([448.0])
        assert block.scale == 1.0
        assert float(dequantize_block(block)[0]) == 448.0

    def test_unit_peak_round_trips_exactly(self):
        block = quantize_block([1.0])
        assert float(dequantize_block(block)[0]) == 1.0

    def test_all_zero_block(self):
        block = quantize_block(np.zeros(16))
        assert block.scale == 1.0
        assert np.all(dequantize_block(block) == 0.0)

    def test_roundtrip_bound_on_seeded_blocks(self):
        rng = np.random.default_rng(77)
        for _ in range(200):
            vals = rng.standard_normal(64).astype(np.float32)
            block = quantize_block(vals)
            deq = dequantize_block(block)
            in_range = np.abs(vals) >= block.scale * E4M3_MIN_NORMAL
            rel = np.abs(deq[in_range] - vals[in_range]) / np.abs(vals[in_range])
            assert rel.size and float(rel.max()) <= 2.0**-3

    def test_requantize_reproduces_codes(self):
        rng = np.random.default_rng(123)
        for _ in range(200):
            vals = rng.standard_normal(48) * float(rng.uniform(0.01, 100.0))
            first = quantize_block(vals)
            second = quantize_block(dequantize_block(first))
            assert np.array_equal(first.codes, second.codes)

    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(ValueError):
            quantize_block([])
        with pytest.raises(ValueError):
            quantize_block([1.0, math.inf])

    def test_element_count(self):
        assert quantize_block(np.ones((4, 8))).element_count == 32


class TestFp8Block:
    def test_codes_become_read_only(self):
        block = Fp8Block(codes=np.zeros(4, dtype=np.uint8), scale=1.0)
        with pytest.raises(ValueError):
            block.codes[0] = 3

    def test_rejects_bad_scale(self):
        for bad in (0.0, -1.0, math.inf, math.nan):
            with pytest.raises(ValueError):
                Fp8Block(codes=np.zeros(1, dtype=np.uint8), scale=bad)

    def test_dequantize_flags_nan_payload(self):
        block = Fp8Block(codes=np.array([0x00, 0x7F], dtype=np.uint8), scale=1.0)
        with pytest.raises(IntegrityError):
            dequantize_block(block)

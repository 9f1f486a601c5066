import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fp4train import formats as F
from fp4train._validation import MalformedInputError


def ocp_e2m1(bits):
    # independent decode straight from the field definition
    s, e, m = bits >> 3, (bits >> 1) & 3, bits & 1
    mag = (m / 2.0) if e == 0 else 2.0 ** (e - 1) * (1 + m / 2.0)
    return -mag if s else mag


def test_e2m1_examples():
    assert F.decode_e2m1(0b0000) == 0.0
    assert F.decode_e2m1(0b0001) == 0.5
    assert F.decode_e2m1(0b1111) == -6.0


def test_e2m1_exhaustive():
    vals = [F.decode_e2m1(c) for c in range(16)]
    assert vals == [ocp_e2m1(c) for c in range(16)]
    assert sorted(set(abs(v) for v in vals)) == [0, 0.5, 1, 1.5, 2, 3, 4, 6]
    assert sum(v == 0 for v in vals) == 2


def test_s1p2_exhaustive():
    assert F.decode_s1p2(0b0101) == 1.25
    assert F.decode_s1p2(0b1111) == -1.75
    for c in range(16):
        sign = -1.0 if c & 8 else 1.0
        assert F.decode_s1p2(c) == sign * (((c >> 2) & 1) + (c & 3) / 4)


def test_magnitudes_monotone():
    assert np.all(np.diff(F.decode_e2m1(np.arange(8))) > 0)
    assert np.all(np.diff(F.decode_s1p2(np.arange(8))) > 0)


def test_e8m0():
    assert F.decode_e8m0(127) == 1.0
    assert F.decode_e8m0(0) == 2.0 ** -127
    assert F.decode_e8m0(254) == 2.0 ** 127
    assert F.decode_e8m0(0xFF) == 2.0 ** 127  # saturates, no NaN code


def test_e6m2():
    assert F.decode_e6m2(F.encode_e6m2(48, 0)) == 1.0
    assert F.decode_e6m2(F.encode_e6m2(50, 0b10)) == 6.0
    assert F.decode_e6m2(F.encode_e6m2(0, 0b11)) == 2.0 ** -48 * 1.75
    vals = F.decode_e6m2(np.arange(256))
    assert np.all(vals > 0) and np.all(np.isfinite(vals)) and np.all(np.diff(vals) > 0)
    assert F.HIF_ONE_CODE == F.encode_e6m2(48, 0)
    with pytest.raises(ValueError):
        F.encode_e6m2(64, 0)


def test_zero_mx_block_bytes():
    blk = F.MxBlock(127, (0,) * 32)
    data = F.pack_block(blk)
    assert len(data) == 17 and data[0] == 127 and data[1:] == bytes(16)
    assert F.unpack_block(data, "mxfp4") == blk


def test_hif_layout():
    e2 = (1, 0, 0, 0, 0, 0, 0, 1)
    e3 = (0,) * 15 + (1,)
    elems = (0x3, 0xA) + (0,) * 62
    data = F.pack_block(F.HifBlock(192, e2, e3, elems))
    assert len(data) == 36
    assert data[0] == 192 and data[1] == 0b10000001
    assert data[2] == 0 and data[3] == 0x80  # e3 little-endian, bit 15 in the high byte
    assert data[4] == 0xA3  # element 0 in the low nibble


def test_round_trip_random_blocks():
    rng = np.random.default_rng(0)
    for _ in range(10_000 // 50):
        sc = rng.integers(0, 256, size=50)
        el = rng.integers(0, 16, size=(50, 32))
        got = F.unpack_mx_arrays(F.pack_mx_arrays(sc, el))
        assert np.array_equal(got[0], sc) and np.array_equal(got[1], el)
        e2 = rng.integers(0, 2, (50, 8))
        e3 = rng.integers(0, 2, (50, 16))
        el = rng.integers(0, 16, (50, 64))
        got = F.unpack_hif_arrays(F.pack_hif_arrays(sc, e2, e3, el))
        for a, b in zip(got, (sc, e2, e3, el)):
            assert np.array_equal(a, b)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 255), st.lists(st.integers(0, 1), min_size=8, max_size=8),
       st.lists(st.integers(0, 1), min_size=16, max_size=16),
       st.lists(st.integers(0, 15), min_size=64, max_size=64))
def test_hif_block_round_trip(s1, e2, e3, el):
    blk = F.HifBlock(s1, tuple(e2), tuple(e3), tuple(el))
    assert F.unpack_block(F.pack_block(blk), "hif4") == blk


def test_group_scales_and_decode():
    e2 = (1,) + (0,) * 7
    e3 = (0, 1) + (0,) * 14
    blk = F.HifBlock(F.encode_e6m2(48, 0), e2, e3, (0b0111,) * 64)
    gs = blk.group_scales()
    assert gs[0] == 0.5 and gs[1] == 0.25 and np.all(gs[2:] == 1.0)
    assert blk.decode()[0] == 1.75 * 0.5 and blk.decode()[4] == 1.75 * 0.25


def test_wrong_lengths():
    with pytest.raises(MalformedInputError):
        F.unpack_block(bytes(16), "mxfp4")
    with pytest.raises(MalformedInputError):
        F.unpack_block(bytes(17), "hif4")
    with pytest.raises(ValueError):
        F.unpack_block(bytes(17), "nvfp4")
    with pytest.raises(ValueError):
        F.MxBlock(0, (0,) * 31)
    with pytest.raises(ValueError):
        F.HifBlock(0, (2,) * 8, (0,) * 16, (0,) * 64)


def test_bits_per_value():
    assert F.bits_per_value("mxfp4") == 4.25
    assert F.bits_per_value("hif4") == 4.5
    assert F.bits_per_value("mxfp4", 33) == 2 * 17 * 8 / 33

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import _oracle as O
from fp4train import formats as F
from fp4train._validation import InvalidValueError
from fp4train.quantize import (
    NEAREST,
    RoundingMode,
    ScalingPolicy,
    block_uniforms,
    fake_quantize,
    quantize_block_hif,
    quantize_block_mx,
    quantize_tensor,
    relative_rms_error,
    stochastic_round,
)

TF = ScalingPolicy.TRUNCATION_FREE


# ── single-block examples ────────────────────────────────────────


def test_mx_zero_block():
    blk = quantize_block_mx(np.zeros(32))
    assert blk.scale == F.E8M0_BIAS and set(blk.elems) == {0}
    assert F.decode_e8m0(blk.scale) == 1.0


def test_mx_amax_six_standard():
    v = np.zeros(32)
    v[3], v[5] = 6.0, -6.0
    blk = quantize_block_mx(v)
    assert F.decode_e8m0(blk.scale) == 1.0
    assert blk.elems[3] == 0b0111 and blk.elems[5] == 0b1111


def test_mx_amax_seven():
    v = np.zeros(32)
    v[0] = 7.0
    tf = quantize_block_mx(v, scaling=TF)
    assert F.decode_e8m0(tf.scale) == 2.0
    assert tf.decode()[0] == 8.0  # 3.5 ties to 4 (even mantissa)
    std = quantize_block_mx(v)
    assert F.decode_e8m0(std.scale) == 1.0 and std.decode()[0] == 6.0


def test_hif_zero_block():
    blk = quantize_block_hif(np.zeros(64))
    assert blk.scale1 == F.HIF_ONE_CODE
    assert set(blk.e2) == {1} and set(blk.e3) == {1} and set(blk.elems) == {0}


def test_hif_downshift_example():
    v = np.zeros(64)
    v[0] = 1.75                 # group 0, subset 0
    v[8:12] = [0.4, -0.1, 0.25, 0.0]  # group 2, subset 1
    blk = quantize_block_hif(v)
    assert F.decode_e6m2(blk.scale1) == 1.0
    assert blk.e2[0] == 0 and blk.e3[0] == 0
    assert blk.e2[1] == 1 and blk.e3[2] == 1
    gs = blk.group_scales()
    assert gs[0] == 1.0 and gs[2] == 0.25  # grid step 0.25 / 4 in group 2
    out = blk.decode()
    assert out[0] == 1.75 and out[8] == 0.375  # 1.6 steps of 0.25 rounds to 1.5


def test_hif_uniform_ones():
    # 1.0 is reachable only through the S1 rule: S1 = 0.625, so elements land on 1.5 * 0.625
    blk = quantize_block_hif(np.ones(64))
    assert F.decode_e6m2(blk.scale1) == 0.625
    assert set(blk.e2) == {0} and set(blk.e3) == {0}
    s, ref = O.hif_block([1.0] * 64)
    assert np.array_equal(blk.decode(), ref)


def test_block_errors():
    with pytest.raises(InvalidValueError):
        quantize_block_mx([np.nan] + [0.0] * 31)
    with pytest.raises(InvalidValueError):
        quantize_block_hif([np.inf] + [0.0] * 63)
    with pytest.raises(ValueError):
        quantize_block_mx(np.zeros(31))
    with pytest.raises(ValueError):
        quantize_tensor(np.zeros((4, 64)), "hif4", scaling="tf")
    with pytest.raises(ValueError):
        quantize_tensor(np.zeros((0, 64)), "mxfp4")
    with pytest.raises(ValueError):
        RoundingMode("additive", 0.0)


# ── scalar oracle ────────────────────────────────────────────────


@settings(max_examples=150, deadline=None)
@given(arrays(np.float64, 32, elements=st.floats(-1e4, 1e4, allow_subnormal=False)), st.booleans())
def test_mx_block_matches_oracle(v, tf):
    blk = quantize_block_mx(v, scaling=TF if tf else "standard")
    e, ref = O.mx_block(list(v), tf)
    if any(v):
        assert blk.scale == e + 127
    assert np.array_equal(blk.decode(), ref)


@settings(max_examples=150, deadline=None)
@given(arrays(np.float64, 64, elements=st.floats(-1e4, 1e4, allow_subnormal=False)))
def test_hif_block_matches_oracle(v):
    blk = quantize_block_hif(v)
    (s1, e2, e3), ref = O.hif_block(list(v))
    assert F.decode_e6m2(blk.scale1) == s1
    assert list(blk.e2) == e2 and list(blk.e3) == e3
    assert np.array_equal(blk.decode(), ref)


def test_ties_go_to_even():
    # every midpoint of the E2M1 grid, at scale 1
    mids = [0.25, 0.75, 1.25, 1.75, 2.5, 3.5, 5.0]
    v = np.zeros(32)
    v[0] = 6.0
    v[1:8] = mids
    got = quantize_block_mx(v).decode()[1:8]
    assert list(got) == [0.0, 1.0, 1.0, 2.0, 2.0, 4.0, 4.0]
    assert list(got) == [O.nearest_even(m, O.E2M1) for m in mids]


def _gauss(n=256, seed=0):
    return np.random.default_rng(seed).standard_normal((n, n))


def test_tensor_error_against_oracle():
    x = _gauss()
    for scheme in ("mxfp4", "hif4"):
        got = quantize_tensor(x, scheme).dequantize()
        ref = np.array(O.quantize_rows(x.tolist(), scheme))
        assert np.array_equal(got, ref)
        assert abs(relative_rms_error(x, got) - relative_rms_error(x, ref)) < 1e-6


def test_hif4_beats_mxfp4_on_gaussian():
    x = _gauss()
    e_mx = relative_rms_error(x, fake_quantize(x, "mxfp4"))
    e_hif = relative_rms_error(x, fake_quantize(x, "hif4"))
    assert e_hif < e_mx


def test_representable_identity():
    rng = np.random.default_rng(1)
    x = rng.choice(F.decode_e2m1(np.arange(16)), size=(8, 64))
    x[:, ::32] = 6.0  # fix every block scale to 1
    assert np.array_equal(fake_quantize(x, "mxfp4"), x)
    h = rng.choice(F.decode_s1p2(np.arange(16)), size=(8, 128))
    h[:, ::4] = 1.75  # every group saturated, so no downshift
    assert np.array_equal(fake_quantize(h, "hif4"), h)


def test_padding_and_shapes():
    x = np.random.default_rng(2).standard_normal((5, 70))
    for scheme, bs in (("mxfp4", 32), ("hif4", 64)):
        q = quantize_tensor(x, scheme)
        assert q.n_blocks == 5 * -(-70 // bs)
        assert q.dequantize().shape == x.shape
        assert np.all(q.decoded_blocks().reshape(5, -1)[:, 70:] == 0)
        qc = quantize_tensor(x, scheme, axis="col")
        assert qc.n_blocks == 70 * -(-5 // bs)
        assert np.array_equal(qc.dequantize(), quantize_tensor(x.T, scheme).dequantize().T)


# ── properties ───────────────────────────────────────────────────


def test_sr_unbiased_elementwise():
    rng = np.random.default_rng(3)
    n = 20_000
    for scheme, bs, top in (("mxfp4", 32, 6.0), ("hif4", 64, 1.75)):
        row = rng.uniform(-top, top, bs)
        row[0] = top
        x = np.tile(row, (n, 1))
        q = fake_quantize(x, scheme, rounding="sr", seed=11)
        mean, sd = q.mean(axis=0), q.std(axis=0)
        se = np.where(sd > 0, sd / np.sqrt(n), 0)
        assert np.all(np.abs(mean - row) <= 4 * se + 1e-12)


def test_additive_rounding_runs_and_is_seeded():
    x = _gauss(64)
    for d in (0.5, 0.25):
        a = fake_quantize(x, "hif4", rounding=RoundingMode("additive", d), seed=5)
        b = fake_quantize(x, "hif4", rounding=RoundingMode("additive", d), seed=5)
        assert np.array_equal(a, b)
        assert relative_rms_error(x, a) < 0.2


def test_no_truncation():
    rng = np.random.default_rng(4)
    x = rng.standard_t(2, size=(2000, 64)) * 10
    _, c_std = fake_quantize(x, "mxfp4", return_clips=True)
    q, c_tf = fake_quantize(x, "mxfp4", scaling="tf", return_clips=True)
    _, c_hif = fake_quantize(x, "hif4", return_clips=True)
    assert c_std > 0 and c_tf == 0 and c_hif == 0


def test_determinism():
    x = _gauss(64)
    for scheme in ("mxfp4", "hif4"):
        assert quantize_tensor(x, scheme) == quantize_tensor(x, scheme)
        a = quantize_tensor(x, scheme, rounding="sr", seed=3, tensor_id=1)
        assert a == quantize_tensor(x, scheme, rounding="sr", seed=3, tensor_id=1)
        assert a != quantize_tensor(x, scheme, rounding="sr", seed=4, tensor_id=1)


def test_idempotence():
    x = _gauss(64)
    for scheme, scaling in (("mxfp4", "standard"), ("mxfp4", "tf")):
        once = fake_quantize(x, scheme, scaling=scaling)
        assert np.array_equal(fake_quantize(once, scheme, scaling=scaling), once)


def test_scale_bounds_every_block():
    x = np.random.default_rng(5).standard_t(3, size=(64, 256))
    q = quantize_tensor(x, "mxfp4")
    dec = q.decoded_blocks()
    assert np.all(np.abs(dec).max(axis=1) <= F.decode_e8m0(q.scales) * 6.0)
    h = quantize_tensor(x, "hif4")
    dec = h.decoded_blocks()
    assert np.all(np.abs(dec).max(axis=1) <= F.decode_e6m2(h.scales) * 1.75)


def test_block_uniforms_order_independent():
    from fp4train.quantize import _stream_uniforms

    full = _stream_uniforms(9, 2, 6, 64)
    for b in (0, 3, 5):
        assert np.array_equal(block_uniforms(9, 2, b, 64), full[b])


@pytest.mark.parametrize("scheme", ["mxfp4", "hif4"])
@pytest.mark.parametrize("rounding", ["nr", "sr", "sr-additive:0.3"])
@pytest.mark.parametrize("axis", ["row", "col"])
def test_kernel_matches_numpy(scheme, rounding, axis):
    x = np.random.default_rng(6).standard_t(3, size=(37, 150))
    for dtype in (np.float64, np.float32):
        xs = x.astype(dtype)
        for scaling in (("standard", "tf") if scheme == "mxfp4" else ("standard",)):
            a, ca = fake_quantize(xs, scheme, axis, rounding, scaling, 1, 2, True, backend="numpy")
            b, cb = fake_quantize(xs, scheme, axis, rounding, scaling, 1, 2, True)
            assert a.dtype == b.dtype == dtype
            assert np.array_equal(a, b) and ca == cb
            q = quantize_tensor(xs, scheme, axis, rounding, scaling, 1, 2)
            assert np.array_equal(q.dequantize(dtype), b)


# ── stochastic_round ─────────────────────────────────────────────

GRID = list(F.E2M1_VALUES)


def test_stochastic_round_on_grid():
    rng = np.random.default_rng(0)
    assert all(stochastic_round(3.0, GRID, "sr", rng) == 3.0 for _ in range(100))


def test_stochastic_round_mean_five():
    rng = np.random.default_rng(0)
    draws = np.array([stochastic_round(5.0, GRID, "sr", rng) for _ in range(100_000)])
    assert set(draws) == {4.0, 6.0}
    assert abs(draws.mean() - 5.0) < 0.02


def test_stochastic_round_nearest_and_additive():
    assert stochastic_round(5.0, GRID, NEAREST) == 4.0
    assert stochastic_round(2.5, GRID, "nr") == 2.0
    assert stochastic_round(7.0, GRID, "nr") == 6.0
    rng = np.random.default_rng(1)
    draws = [stochastic_round(5.0, GRID, "sr-additive", rng) for _ in range(2000)]
    assert set(draws) <= {4.0, 6.0} and 0.3 < np.mean(np.array(draws) == 6.0) < 0.7


def test_stochastic_round_errors():
    with pytest.raises(ValueError):
        stochastic_round(1.0, [], "sr")
    with pytest.raises(ValueError):
        stochastic_round(1.0, [1.0, 0.0], "sr")

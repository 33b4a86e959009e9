from __future__ import annotations

import numpy as np
import pytest

from tcmcodec.entropy import (
    P_MIN,
    SCALE_FLOOR,
    TOTAL_FREQ,
    CodedStream,
    EntropyParameters,
    EntropySession,
    Payload,
    build_cdf_table,
    dequantize,
    entropy_of,
    estimate_rate_bits,
    laplace_bin_probability,
    laplace_pmf,
    quantize,
    quantize_symbols,
    range_decode,
    range_encode,
    rate_slack_bits,
    round_half_away,
    symbol_range,
    uniform_table,
)
from tcmcodec.errors import DecodeError, EncodingError, NumericError


# ── Quantization ──


def test_round_half_away_from_zero():
    values = np.array([-2.5, -1.5, -0.5, -0.49, 0.0, 0.49, 0.5, 1.5, 2.5])
    np.testing.assert_array_equal(
        round_half_away(values), [-3, -2, -1, -0, 0, 0, 1, 2, 3]
    )


def test_quantize_with_mean_offsets():
    latent = np.array([[[1.2, -0.7], [3.6, 0.0]]], np.float32)
    mean = np.array([[[0.5, 0.5], [1.0, -2.0]]], np.float32)
    symbols = quantize_symbols(latent, mean)
    np.testing.assert_array_equal(symbols, [[[1, -1], [3, 2]]])
    np.testing.assert_allclose(dequantize(symbols, mean), [[[1.5, -0.5], [4.0, 0.0]]])


def test_quantize_is_idempotent():
    latent = np.random.default_rng(0).normal(0, 5, (2, 4, 4)).astype(np.float32)
    once = quantize(latent)
    np.testing.assert_array_equal(quantize(once), once)


def test_quantize_rejects_non_finite():
    with pytest.raises(NumericError):
        quantize_symbols(np.array([np.inf], np.float32))


# ── Laplace model ──


def test_scale_floor_applied():
    params = EntropyParameters(np.zeros(3), np.array([0.0, 0.05, 2.0]))
    np.testing.assert_allclose(params.scale, [SCALE_FLOOR, SCALE_FLOOR, 2.0], rtol=1e-6)


def test_laplace_probabilities_sum_to_one():
    rng = np.random.default_rng(1)
    symbols = np.arange(-4000, 4001)
    for _ in range(50):
        mean = rng.uniform(-20, 20)
        scale = rng.uniform(SCALE_FLOOR, 50)
        probs = laplace_bin_probability(symbols, mean, scale, clamp=False)
        assert abs(probs.sum() - 1.0) < 1e-9


def closed_form_cdf(x, scale):
    return np.where(x < 0, 0.5 * np.exp(np.minimum(x, 0) / scale),
                    1.0 - 0.5 * np.exp(-np.maximum(x, 0) / scale))


def test_laplace_bins_match_closed_form_cdf():
    rng = np.random.default_rng(11)
    symbols = np.arange(-20, 21, dtype=np.float64)
    for _ in range(50):
        mean = rng.uniform(-5, 5)
        scale = rng.uniform(SCALE_FLOOR, 8)
        want = closed_form_cdf(symbols - mean + 0.5, scale) - closed_form_cdf(symbols - mean - 0.5, scale)
        got = laplace_bin_probability(symbols, mean, scale, clamp=False)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-15)


def test_laplace_probability_clamped():
    assert laplace_bin_probability(500, 0.0, SCALE_FLOOR) == P_MIN
    assert laplace_bin_probability(0, 0.0, 1.0) > 0.39


def test_laplace_tail_mass_is_positive():
    probs = laplace_bin_probability(np.array([30.0, -30.0]), 0.0, 1.0, clamp=False)
    assert np.all(probs > 0)
    np.testing.assert_allclose(probs[0], probs[1])


def test_pmf_rows_include_tails():
    pmf = laplace_pmf([0.0, 3.0], [1.0, 5.0], -2, 2)
    np.testing.assert_allclose(pmf.sum(axis=1), 1.0, atol=1e-12)


def test_estimate_rate_bits_matches_probabilities():
    params = EntropyParameters(np.zeros((1, 1, 2)), np.ones((1, 1, 2)))
    symbols = np.array([[[0, 1]]])
    p0 = laplace_bin_probability(0, 0, 1)
    p1 = laplace_bin_probability(1, 0, 1)
    assert estimate_rate_bits(symbols, params) == pytest.approx(-np.log2(p0) - np.log2(p1))


# ── CDF tables ──


def test_random_cdf_rows_are_valid():
    rng = np.random.default_rng(2)
    means = rng.uniform(-30, 30, 1000)
    scales = np.exp(rng.uniform(np.log(0.05), np.log(200), 1000))
    table = build_cdf_table(means, scales, -60, 60).check()
    assert table.rows == 1000
    assert np.all(np.diff(table.cdf, axis=1) >= 1)
    assert np.all(table.cdf[:, -1] == TOTAL_FREQ)
    assert np.all(table.cdf[:, 0] == 0)


def test_wide_range_with_tiny_scale_keeps_every_bin():
    table = build_cdf_table([0.0], [SCALE_FLOOR], -3000, 3000).check()
    assert table.freqs.min() == 1
    assert table.freqs.sum() == TOTAL_FREQ


def test_symbol_range_limits():
    assert symbol_range(np.array([-3, 0, 7])) == (-4, 8)
    with pytest.raises(EncodingError):
        symbol_range(np.array([40000]))
    with pytest.raises(EncodingError):
        symbol_range(np.array([-32768]))


# ── Range coder ──


def test_empty_stream_is_five_bytes():
    payload = range_encode(np.array([], np.int64), uniform_table(4))
    assert len(payload.data) == 5
    assert range_decode(payload, uniform_table(4)).size == 0


def test_uniform_alphabet_costs_one_byte_per_symbol():
    rng = np.random.default_rng(3)
    symbols = rng.integers(0, 256, 5000)
    table = uniform_table(256)
    payload = range_encode(symbols, table)
    assert abs(len(payload.data) - 5000) <= 8
    np.testing.assert_array_equal(range_decode(payload, table), symbols)


def test_round_trip_fuzz():
    rng = np.random.default_rng(4)
    for case in range(40):
        count = int(rng.integers(1, 3000))
        mean = rng.uniform(-5, 5, count)
        scale = np.exp(rng.uniform(np.log(0.05), np.log(30), count))
        symbols = np.clip(np.round(rng.laplace(mean, scale)), -200, 200).astype(np.int64)
        s_min, s_max = symbol_range(symbols)
        table = build_cdf_table(mean, scale, s_min, s_max)
        payload = range_encode(symbols, table)
        np.testing.assert_array_equal(range_decode(payload, table), symbols)
        assert 8 * len(payload.data) <= table.bits(symbols) + 96


def test_round_trip_with_index_map():
    rng = np.random.default_rng(5)
    table = build_cdf_table([0.0, 10.0, -10.0], [1.0, 0.5, 4.0], -30, 30)
    indexes = rng.integers(0, 3, 2000)
    centers = np.array([0, 10, -10])[indexes]
    symbols = np.clip(centers + rng.integers(-2, 3, 2000), -30, 30)
    payload = range_encode(symbols, table, indexes)
    np.testing.assert_array_equal(range_decode(payload, table, indexes), symbols)


def test_carry_heavy_stream():
    # Symbols sitting on the top of the cdf drive the low register into carries
    table = build_cdf_table([0.0], [0.2], -1, 1)
    symbols = np.ones(20000, dtype=np.int64)
    payload = range_encode(symbols, table)
    np.testing.assert_array_equal(range_decode(payload, table), symbols)


@pytest.mark.slow
def test_million_symbol_round_trip():
    rng = np.random.default_rng(6)
    symbols = np.clip(np.round(rng.laplace(0, 3, 1_000_000)), -100, 100).astype(np.int64)
    table = build_cdf_table([0.0], [3.0], -101, 101)
    payload = range_encode(symbols, table)
    np.testing.assert_array_equal(range_decode(payload, table), symbols)


def test_out_of_range_symbol_rejected():
    with pytest.raises(EncodingError):
        range_encode(np.array([5]), uniform_table(4))


def test_truncated_payload_raises_decode_error():
    rng = np.random.default_rng(7)
    symbols = rng.integers(0, 256, 400)
    table = uniform_table(256)
    payload = range_encode(symbols, table)
    with pytest.raises(DecodeError):
        range_decode(Payload(payload.data[:100], 400), table)


def test_entropy_of_uniform():
    assert entropy_of([1, 1, 1, 1]) == pytest.approx(2.0)
    assert entropy_of([5, 0]) == 0


# ── Sessions ──


def test_session_laplace_round_trip_and_audit():
    rng = np.random.default_rng(8)
    mean = rng.normal(0, 2, (4, 6, 6)).astype(np.float32)
    scale = rng.uniform(0.05, 4, (4, 6, 6)).astype(np.float32)
    params = EntropyParameters(mean, scale)
    latent = mean + rng.laplace(0, params.scale).astype(np.float32)
    symbols = quantize_symbols(latent)

    session = EntropySession()
    stream = session.encode_laplace("y", symbols, params)
    decoded = EntropySession().decode_laplace(stream, params)
    np.testing.assert_array_equal(decoded, symbols)
    assert stream.bits <= stream.estimated_bits + rate_slack_bits(stream.estimated_bits)
    assert session.total_bytes == len(stream.data)


def test_session_mean_offset_round_trip():
    rng = np.random.default_rng(9)
    mean = rng.normal(0, 10, (2, 4, 4)).astype(np.float32)
    params = EntropyParameters(mean, np.ones_like(mean))
    latent = mean + rng.normal(0, 1, mean.shape).astype(np.float32)
    offsets = quantize_symbols(latent, mean)
    stream = EntropySession().encode_laplace("y", offsets, params, mean_offset=True)
    decoded = EntropySession().decode_laplace(stream, params, mean_offset=True)
    np.testing.assert_array_equal(decoded, offsets)
    np.testing.assert_array_equal(dequantize(decoded, mean), quantize(latent, mean))


def test_session_factorized_round_trip():
    rng = np.random.default_rng(10)
    loc = np.array([0.0, 2.0, -1.0], np.float32)
    scale = np.array([1.0, 0.5, 3.0], np.float32)
    symbols = np.round(loc[:, None, None] + rng.laplace(0, scale[:, None, None], (3, 5, 7))).astype(np.int64)
    session = EntropySession()
    stream = session.encode_factorized("z", symbols, loc, scale)
    decoded = EntropySession().decode_factorized(stream, symbols.shape, loc, scale)
    np.testing.assert_array_equal(decoded, symbols)
    assert session.estimated_bits == pytest.approx(stream.estimated_bits)


def test_session_rejects_corrupt_range():
    params = EntropyParameters(np.zeros((1, 1, 1)), np.ones((1, 1, 1)))
    with pytest.raises(DecodeError):
        EntropySession().decode_laplace(CodedStream(3, 3, b"\0" * 5), params)
    with pytest.raises(DecodeError):
        EntropySession().decode_laplace(CodedStream(-40000, 40000, b"\0" * 5), params)


def test_coded_stream_equality_ignores_audit_fields():
    a = CodedStream(-1, 1, b"abc", name="x", estimated_bits=12.0)
    b = CodedStream(-1, 1, b"abc")
    assert a == b

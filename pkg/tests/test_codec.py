from __future__ import annotations

import numpy as np
import pytest

import tcmcodec.codec as codec_module
from conftest import make_video, small_config
from tcmcodec.codec import (
    FEATURE_LIMIT,
    FrameType,
    InterFrameCoder,
    RdConfig,
    decode_inter_frame,
    decode_intra_frame,
    dpb_update,
    encode_inter_frame,
    encode_intra_frame,
    fuse_priors,
    temporal_context_encode,
)
from tcmcodec.context import DecodedPictureBuffer, DpbEntry, DpbSource, TcmConfig, mine_contexts
from tcmcodec.entropy import SCALE_FLOOR, EntropySession, rate_slack_bits
from tcmcodec.errors import ChecksumError, ConfigurationError, DecodeError
from tcmcodec.metrics import distortion, rd_loss
from tcmcodec.motion import LATENT_STRIDE
from tcmcodec.weights import init_weights


def rd_for(weights):
    return RdConfig.from_codec_config(weights.config)


def start_stream(frames, weights):
    """Intra-code the first frame and return (encoder dpb, decoder dpb, I result)."""
    enc_dpb = DecodedPictureBuffer(weights.config.dpb_channels)
    dec_dpb = DecodedPictureBuffer(weights.config.dpb_channels)
    first = encode_intra_frame(frames[0], weights, rd_for(weights), EntropySession(), 0)
    dpb_update(enc_dpb, first.recon, None, weights)
    _, height, width = frames[0].shape
    recon = decode_intra_frame(first.record, weights, EntropySession(), height, width, 0)
    dpb_update(dec_dpb, recon, None, weights)
    return enc_dpb, dec_dpb, first


def code_clip(frames, weights):
    """Encode and decode a clip (I then P frames); return both reconstructions."""
    enc_dpb, dec_dpb, first = start_stream(frames, weights)
    enc_recons, dec_recons = [first.recon], [dec_dpb.entry.frame]
    for t in range(1, len(frames)):
        out = encode_inter_frame(frames[t], enc_dpb.entry, weights, rd_for(weights),
                                 EntropySession(), index=t)
        dpb_update(enc_dpb, out.recon, out.feature, weights)
        recon, feature = decode_inter_frame(out.record, dec_dpb.entry, weights,
                                            EntropySession(), index=t)
        dpb_update(dec_dpb, recon, feature, weights)
        enc_recons.append(out.recon)
        dec_recons.append(recon)
    return enc_recons, dec_recons


# ── Stage shapes ──


def test_temporal_prior_and_fusion_shapes(small_weights):
    cfg = small_weights.config
    tcm = TcmConfig.from_codec_config(cfg)
    rng = np.random.default_rng(0)
    contexts = mine_contexts(rng.normal(size=(8, 64, 64)).astype(np.float32),
                             np.zeros((2, 64, 64), np.float32), tcm, small_weights)
    f_c = temporal_context_encode(contexts, small_weights)
    latent_hw = 64 // LATENT_STRIDE
    assert f_c.shape == (cfg.latent_channels, latent_hw, latent_hw)

    hyper_out = rng.normal(size=(cfg.latent_channels, latent_hw, latent_hw)).astype(np.float32)
    params = fuse_priors(f_c, hyper_out, small_weights)
    assert params.mean.shape == f_c.shape
    assert params.scale.min() >= np.float32(SCALE_FLOOR)

    with pytest.raises(ConfigurationError):
        fuse_priors(f_c, hyper_out[:, :2], small_weights)


# ── Round trips ──


def test_intra_round_trip_is_bit_exact(small_weights, video):
    out = encode_intra_frame(video[0], small_weights, rd_for(small_weights), EntropySession(), 0)
    assert out.record.frame_type == FrameType.I
    assert [p.name for p in out.record.payloads] == ["img_main", "img_hyper"]
    recon = decode_intra_frame(out.record, small_weights, EntropySession(), 64, 64, 0)
    np.testing.assert_array_equal(recon, out.recon)
    assert recon.min() >= 0.0 and recon.max() <= 1.0


def test_inter_round_trip_is_bit_exact(small_weights, video):
    enc, dec = code_clip(video, small_weights)
    for a, b in zip(enc, dec):
        np.testing.assert_array_equal(a, b)


def test_inter_record_layout_and_feature(small_weights, video):
    enc_dpb, _, _ = start_stream(video, small_weights)
    out = encode_inter_frame(video[1], enc_dpb.entry, small_weights, rd_for(small_weights),
                             EntropySession(), index=1)
    names = [p.name for p in out.record.payloads]
    assert names == ["mv_main", "mv_hyper", "ctx_main", "ctx_hyper"]
    assert out.feature.shape == (small_weights.config.dpb_channels, 64, 64)
    assert np.abs(out.feature).max() <= FEATURE_LIMIT
    assert out.record.mv_bits == out.stats.mv_bits


def test_rate_audit(small_weights, video):
    enc_dpb, _, first = start_stream(video, small_weights)
    out = encode_inter_frame(video[1], enc_dpb.entry, small_weights, rd_for(small_weights),
                             EntropySession(), index=1)
    for record in (first.record, out.record):
        for payload in record.payloads:
            assert payload.bits <= payload.estimated_bits + rate_slack_bits(payload.estimated_bits)


def test_reported_loss_recomputes(small_weights, video):
    enc_dpb, _, _ = start_stream(video, small_weights)
    rd = rd_for(small_weights)
    out = encode_inter_frame(video[1], enc_dpb.entry, small_weights, rd, EntropySession(), index=1)
    d = distortion(video[1], out.recon, rd.distortion)
    expected = rd_loss(d, out.stats.mv_bits, out.stats.ctx_bits, rd.lmbda, 64 * 64)
    assert out.stats.loss == pytest.approx(expected, rel=1e-9)
    assert out.stats.bits == out.record.bits_total


def test_wrong_reference_fails_checksum(small_weights, video):
    enc_dpb, dec_dpb, _ = start_stream(video, small_weights)
    out = encode_inter_frame(video[1], enc_dpb.entry, small_weights, rd_for(small_weights),
                             EntropySession(), index=1)
    entry = dec_dpb.entry
    perturbed = DpbEntry(entry.frame, entry.feature + np.float32(0.5), entry.source)
    with pytest.raises(ChecksumError) as info:
        decode_inter_frame(out.record, perturbed, small_weights, EntropySession(), index=1)
    assert info.value.frame_index == 1


def test_frame_type_mismatch_rejected(small_weights, video):
    out = encode_intra_frame(video[0], small_weights, rd_for(small_weights), EntropySession(), 0)
    dpb = DecodedPictureBuffer(8)
    dpb_update(dpb, out.recon, None, small_weights)
    with pytest.raises(DecodeError):
        decode_inter_frame(out.record, dpb.entry, small_weights, EntropySession())


def test_rd_config_validation():
    with pytest.raises(ConfigurationError):
        RdConfig(lmbda=0)
    with pytest.raises(ConfigurationError):
        RdConfig(lmbda=256, cascade_T=0)


# ── Decoded picture buffer ──


def test_dpb_sources(small_weights, video):
    enc_dpb, _, _ = start_stream(video, small_weights)
    assert enc_dpb.entry.source is DpbSource.I_EXTRACTOR
    out = encode_inter_frame(video[1], enc_dpb.entry, small_weights, rd_for(small_weights),
                             EntropySession(), index=1)
    entry = dpb_update(enc_dpb, out.recon, out.feature, small_weights)
    assert entry.source is DpbSource.GENERATOR
    assert entry.feature is out.feature


def test_feature_propagation_switched_off(video):
    weights = init_weights(2, small_config(propagate_feature=False))
    enc_dpb, _, _ = start_stream(video, weights)
    out = encode_inter_frame(video[1], enc_dpb.entry, weights, rd_for(weights),
                             EntropySession(), index=1)
    entry = dpb_update(enc_dpb, out.recon, out.feature, weights)
    assert entry.source is DpbSource.I_EXTRACTOR
    enc, dec = code_clip(video[:3], weights)
    np.testing.assert_array_equal(enc[-1], dec[-1])


@pytest.mark.parametrize("flag", ["refill_encoder", "refill_decoder", "refill_generator",
                                  "refill_entropy"])
def test_refill_switches_round_trip(flag, video):
    weights = init_weights(4, small_config(**{flag: False}))
    enc, dec = code_clip(video[:2], weights)
    np.testing.assert_array_equal(enc[1], dec[1])


def test_refill_switch_changes_output(video):
    on = init_weights(5, small_config())
    off = init_weights(5, small_config(refill_generator=False))
    enc_on, _ = code_clip(video[:2], on)
    enc_off, _ = code_clip(video[:2], off)
    assert not np.array_equal(enc_on[1], enc_off[1])


@pytest.mark.parametrize("levels,contexts", [(L, m) for L in range(1, 5) for m in range(1, L + 1)])
def test_every_level_configuration_round_trips(levels, contexts):
    weights = init_weights(6, small_config(tcm_levels=levels, tcm_contexts=contexts))
    frames = make_video(frames=4, seed=levels)
    enc, dec = code_clip(frames, weights)
    for a, b in zip(enc, dec):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("dpb_channels", [64, 48, 15, 9])
def test_every_buffer_width_round_trips(dpb_channels):
    weights = init_weights(7, small_config(dpb_channels=dpb_channels))
    frames = make_video(frames=4, seed=dpb_channels)
    enc, dec = code_clip(frames, weights)
    for a, b in zip(enc, dec):
        np.testing.assert_array_equal(a, b)


def test_contexts_use_the_coded_motion(small_weights, video, monkeypatch):
    seen = {}
    real_compress = codec_module.mv_compress
    real_mine = codec_module.mine_contexts

    def spy_compress(flow, weights, session):
        result = real_compress(flow, weights, session)
        seen["flow_hat"] = result[1]
        seen["raw"] = flow
        return result

    def spy_mine(feature, flow, config, weights):
        seen["mined_with"] = flow
        return real_mine(feature, flow, config, weights)

    monkeypatch.setattr(codec_module, "mv_compress", spy_compress)
    monkeypatch.setattr(codec_module, "mine_contexts", spy_mine)
    enc_dpb, _, _ = start_stream(video, small_weights)
    encode_inter_frame(video[1], enc_dpb.entry, small_weights, rd_for(small_weights),
                       EntropySession(), index=1)
    assert seen["mined_with"] is seen["flow_hat"]
    assert seen["mined_with"] is not seen["raw"]


def test_coder_gain_follows_lambda():
    low = InterFrameCoder(init_weights(0, small_config(lmbda=256)))
    high = InterFrameCoder(init_weights(0, small_config(lmbda=1024)))
    assert float(low.gain) == pytest.approx(1.0)
    assert float(high.gain) == pytest.approx(2.0)

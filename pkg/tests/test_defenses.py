"""Defense transforms, gradient surrogates, and the synthetic channel."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import advaudio.autodiff as ad
from advaudio.audio import Waveform
from advaudio.corpus import make_corpus
from advaudio.defenses import (CODEC_BITS, CODEC_LOWPASS_HZ, ChannelParams,
                               DefenseSpec, _mulaw_requantize,
                               apply_defense, apply_defense_chain,
                               bandpass_taps, codec_defense,
                               defense_sample_rate, defense_spectral_gate,
                               diff_apply_defense, fir_filter_same,
                               lowpass_taps, simulate_channel, with_seed)
from advaudio.errors import ConfigError, ContractError


def _tone(freq_hz, n=16000, amp=0.3, sr=16000):
    t = np.arange(n) / sr
    return (amp * np.sin(2 * np.pi * freq_hz * t)).astype(np.float32)


def _snr_db(reference, test):
    err = reference.astype(np.float64) - test.astype(np.float64)
    p_sig = float(np.mean(reference.astype(np.float64) ** 2))
    p_err = float(np.mean(err ** 2))
    if p_err == 0:
        return np.inf
    return 10.0 * np.log10(p_sig / p_err)


# ---------------------------------------------------------------------------
# FIR building blocks


def test_lowpass_has_unit_dc_gain():
    h = lowpass_taps(2000.0, 16000)
    assert h.sum() == pytest.approx(1.0)
    assert len(h) % 2 == 1
    np.testing.assert_allclose(h, h[::-1], atol=1e-15)


def test_lowpass_rejects_bad_cutoff():
    with pytest.raises(ContractError):
        lowpass_taps(0.0, 16000)
    with pytest.raises(ContractError):
        lowpass_taps(9000.0, 16000)


def test_lowpass_separates_pass_and_stop_bands():
    h = lowpass_taps(2000.0, 16000)
    inband = fir_filter_same(_tone(500), h)
    stopped = fir_filter_same(_tone(6000), h)
    assert np.max(np.abs(inband)) > 0.27            # ~unchanged
    assert np.max(np.abs(stopped)) < np.max(np.abs(inband)) / 10


def test_bandpass_blocks_dc():
    h = bandpass_taps(100.0, 7500.0, 16000)
    assert abs(h.sum()) < 1e-6
    np.testing.assert_array_equal(bandpass_taps(0.0, 2000.0, 16000, 64),
                                  lowpass_taps(2000.0, 16000, 64))


def test_fir_same_is_zero_delay_and_linear():
    h = lowpass_taps(3000.0, 16000)
    impulse = np.zeros(257)
    impulse[128] = 1.0
    out = fir_filter_same(impulse, h)
    assert np.argmax(np.abs(out)) == 128
    a, b = np.random.Generator(np.random.PCG64(1)).normal(0, 0.1, (2, 400))
    np.testing.assert_allclose(fir_filter_same(a + b, h),
                               fir_filter_same(a, h) + fir_filter_same(b, h),
                               atol=1e-12)


def test_fir_adjoint_pairing():
    # <F x, y> == <x, F' y> with F' the reversed-kernel convolution; the
    # codec backward pass relies on this identity
    rng = np.random.Generator(np.random.PCG64(3))
    h = lowpass_taps(2500.0, 16000)
    x = rng.normal(0, 1, 300)
    y = rng.normal(0, 1, 300)
    lhs = float(np.dot(fir_filter_same(x, h), y))
    rhs = float(np.dot(x, fir_filter_same(y, h[::-1])))
    assert lhs == pytest.approx(rhs, rel=1e-10)


# ---------------------------------------------------------------------------
# sample-rate defense


def test_sample_rate_factor_one_is_identity():
    x = Waveform(_tone(440))
    y = defense_sample_rate(x, 1.0)
    np.testing.assert_array_equal(y.samples, x.samples)


@pytest.mark.parametrize("factor", [0.4, 0.6, 0.8, 1.2, 1.4])
def test_sample_rate_length_law(factor):
    x = Waveform(_tone(440, n=16000))
    y = defense_sample_rate(x, factor)
    assert len(y.samples) == int(round(16000 * factor))


def test_sample_rate_warns_outside_sweep():
    x = Waveform(_tone(440, n=2000))
    with pytest.warns(UserWarning):
        defense_sample_rate(x, 1.6)


# ---------------------------------------------------------------------------
# spectral gate


def test_gate_zero_reduction_is_transparent():
    x = Waveform(_tone(440) + _tone(1320, amp=0.1))
    y = defense_spectral_gate(x, 0.0)
    assert _snr_db(x.samples, y.samples) >= 60.0


def test_gate_reduction_bounds():
    x = Waveform(_tone(440, n=4000))
    with pytest.raises(ContractError):
        defense_spectral_gate(x, -0.1)
    with pytest.raises(ContractError):
        defense_spectral_gate(x, 1.0001)


def test_gate_suppresses_noise_where_the_signal_pauses():
    # the floor estimate comes from the quietest frames, so the input
    # needs genuine pauses; the gate should strip noise from the pause
    # while keeping most of the tone's energy
    rng = np.random.Generator(np.random.PCG64(7))
    clean = _tone(440, amp=0.4)
    clean[8000:] = 0.0
    noisy = Waveform(np.clip(clean + rng.normal(0, 0.02, clean.shape), -1, 1)
                     .astype(np.float32))
    gated = defense_spectral_gate(noisy, 1.0)
    pause_before = float(np.mean(noisy.samples[9000:15000] ** 2))
    pause_after = float(np.mean(gated.samples[9000:15000] ** 2))
    tone_before = float(np.mean(noisy.samples[1000:7000] ** 2))
    tone_after = float(np.mean(gated.samples[1000:7000] ** 2))
    assert pause_after < pause_before / 3
    assert tone_after > tone_before / 2


def test_gate_accepts_explicit_noise_profile():
    rng = np.random.Generator(np.random.PCG64(8))
    profile = Waveform(rng.normal(0, 0.02, 16000).astype(np.float32))
    x = Waveform(_tone(440, amp=0.4))
    y = defense_spectral_gate(x, 1.0, noise_profile=profile)
    # the tone sits far above the noise floor, so it survives the gate
    assert _snr_db(x.samples, y.samples) >= 20.0


# ---------------------------------------------------------------------------
# codec


def test_codec_rejects_bad_level():
    x = Waveform(_tone(440, n=2000))
    for level in (0, 6, -1):
        with pytest.raises(ContractError):
            codec_defense(x, level)


def test_codec_is_deterministic():
    x = Waveform(_tone(523, n=8000))
    np.testing.assert_array_equal(codec_defense(x, 2).samples,
                                  codec_defense(x, 2).samples)


def test_codec_distortion_decreases_with_level():
    wav, _ = make_corpus(31, 1, 2.0)[0]
    snrs = [_snr_db(wav.samples, codec_defense(wav, lv).samples)
            for lv in (1, 2, 3, 4, 5)]
    assert all(a < b for a, b in zip(snrs, snrs[1:]))


def test_mulaw_requantize_is_idempotent():
    rng = np.random.Generator(np.random.PCG64(9))
    x = rng.uniform(-1, 1, 5000)
    for bits in (4, 6, 10):
        q = _mulaw_requantize(x, bits)
        np.testing.assert_allclose(_mulaw_requantize(q, bits), q, atol=1e-12)


def test_codec_tables_are_aligned():
    assert set(CODEC_LOWPASS_HZ) == set(CODEC_BITS) == {1, 2, 3, 4, 5}
    assert sorted(CODEC_LOWPASS_HZ.values()) == list(CODEC_LOWPASS_HZ.values())
    assert sorted(CODEC_BITS.values()) == list(CODEC_BITS.values())


# ---------------------------------------------------------------------------
# dispatch and differentiable forms


def test_defense_spec_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        DefenseSpec("echo_cancellation")


def test_defense_chain_is_ordered_composition():
    wav, _ = make_corpus(32, 1, 2.0)[0]
    chain = (DefenseSpec("spectral_gate", {"reduction": 0.5}),
             DefenseSpec("codec", {"level": 3}))
    manual = codec_defense(defense_spectral_gate(wav, 0.5), 3)
    np.testing.assert_array_equal(apply_defense_chain(wav, chain).samples,
                                  manual.samples)


@pytest.mark.parametrize("spec", [
    DefenseSpec("sample_rate_change", {"factor": 0.8}),
    DefenseSpec("spectral_gate", {"reduction": 0.5}),
    DefenseSpec("codec", {"level": 3}),
])
def test_diff_defense_matches_value_form(spec):
    wav, _ = make_corpus(33, 1, 2.0)[0]
    want = apply_defense(wav, spec).samples
    t = ad.constant(wav.samples.astype(np.float32), dtype=np.float32)
    got = diff_apply_defense(t, spec).values
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, atol=2e-5)


def test_diff_sample_rate_gradient_matches_finite_differences():
    rng = np.random.Generator(np.random.PCG64(12))
    x = (0.1 * rng.normal(0, 1, 400)).astype(np.float64)
    spec = DefenseSpec("sample_rate_change", {"factor": 0.8})

    def loss_of(v):
        t = ad.constant(v.astype(np.float64), dtype=np.float64)
        y = diff_apply_defense(t, spec)
        return float(np.sum(y.values ** 2))

    tape = ad.Tape()
    leaf = tape.leaf(x, dtype=np.float64)
    y = diff_apply_defense(leaf, spec)
    grad = tape.backward(ad.sum_(ad.square(y)))[leaf]

    h = 1e-5
    for idx in (0, 57, 199, 399):
        e = np.zeros_like(x)
        e[idx] = h
        fd = (loss_of(x + e) - loss_of(x - e)) / (2 * h)
        np.testing.assert_allclose(grad[idx], fd, rtol=1e-3, atol=1e-8)


def test_diff_codec_gradient_flows_through_lowpass():
    # quantization is straight-through, so the gradient equals the exact
    # lowpass-chain gradient and must be finite and nonzero
    wav, _ = make_corpus(34, 1, 2.0)[0]
    tape = ad.Tape()
    leaf = tape.leaf(wav.samples.astype(np.float32), dtype=np.float32)
    y = diff_apply_defense(leaf, DefenseSpec("codec", {"level": 2}))
    grad = tape.backward(ad.sum_(ad.square(y)))[leaf]
    assert np.all(np.isfinite(grad))
    assert float(np.max(np.abs(grad))) > 0.0


# ---------------------------------------------------------------------------
# channel simulation


def test_channel_identity_params_is_clip_of_mix():
    x = Waveform(_tone(440, amp=0.8))
    mix = Waveform(_tone(660, amp=0.5, n=8000))  # shorter: zero-padded
    p = ChannelParams(time_offset=(0, 0), snr_db=None, band_hz=None, gain=1.0)
    out = simulate_channel(x, p, mix_with=mix)
    other = np.pad(mix.samples.astype(np.float64), (0, 8000))
    want = np.clip(x.samples.astype(np.float64) + other, -1, 1)
    np.testing.assert_allclose(out.samples, want.astype(np.float32), atol=1e-7)


def test_channel_offset_is_circular_roll():
    x = Waveform(_tone(440, n=2000))
    p = ChannelParams(time_offset=(3, 3), snr_db=None, band_hz=None, gain=1.0)
    out = simulate_channel(x, p)
    np.testing.assert_allclose(out.samples, np.roll(x.samples, 3), atol=1e-7)


def test_channel_noise_power_matches_snr_target():
    x = Waveform(_tone(440, amp=0.3))
    p = ChannelParams(time_offset=(0, 0), snr_db=20.0, band_hz=None,
                      gain=1.0, seed=4)
    out = simulate_channel(x, p)
    noise = out.samples.astype(np.float64) - x.samples.astype(np.float64)
    got_snr = 10 * np.log10(np.mean(x.samples.astype(np.float64) ** 2)
                            / np.mean(noise ** 2))
    assert abs(got_snr - 20.0) <= 0.5


def test_channel_is_seeded():
    x = Waveform(_tone(440))
    p = ChannelParams(seed=5)
    a = simulate_channel(x, p)
    b = simulate_channel(x, p)
    c = simulate_channel(x, with_seed(p, 6))
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


def test_channel_output_is_valid_waveform():
    x = Waveform(_tone(440, amp=0.9))
    out = simulate_channel(x, ChannelParams(seed=2, snr_db=5.0))
    assert out.samples.dtype == np.float32
    assert float(np.max(np.abs(out.samples))) <= 1.0


@pytest.mark.parametrize("params,err", [
    (dict(gain=0.0), ConfigError),
    (dict(gain=2.5), ConfigError),
    (dict(snr_db=np.inf), ConfigError),
    (dict(band_hz=(7500.0, 100.0)), ConfigError),
    (dict(band_hz=(100.0, 9000.0)), ConfigError),
])
def test_channel_param_validation(params, err):
    x = Waveform(_tone(440, n=1000))
    with pytest.raises(err):
        simulate_channel(x, ChannelParams(**params))


def test_channel_bad_offset_range_rejected():
    x = Waveform(_tone(440, n=1000))
    with pytest.raises(ConfigError):
        simulate_channel(x, ChannelParams(time_offset=(5, 2)))


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=10, deadline=None)
def test_channel_deterministic_for_any_seed(seed):
    x = Waveform(_tone(300, n=4000, amp=0.5))
    p = ChannelParams(seed=seed)
    np.testing.assert_array_equal(simulate_channel(x, p).samples,
                                  simulate_channel(x, p).samples)

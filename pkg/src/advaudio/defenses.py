"""Input-side defenses and the synthetic over-the-air channel.

Three defenses: time/pitch rescaling, stationary spectral gating, and a
lossy codec stand-in (band-limit plus companded requantization). Each has
a value-level form returning a Waveform and, where an adaptive attack
needs gradients, a differentiable form on tape tensors (quantization and
gating masks use straight-through gradients).

The channel simulator replaces a physical speaker-air-microphone loop
with a parametric chain: mix, circular time offset, FIR bandpass,
optional impulse response, gain, additive noise at a target SNR, clip.
All randomness is counter-based (Philox) off an explicit seed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .audio import (
    Waveform,
    istft,
    resample,
    resample_adjoint,
    resample_apply,
    resample_kernel,
    stft,
)
from .errors import ConfigError, ContractError
from .features import StftConfig, diff_istft, diff_stft

# ---------------------------------------------------------------------------
# FIR building blocks

_FIR_BETA = 8.0


def lowpass_taps(cutoff_hz: float, sample_rate_hz: int, half_len: int = 64) -> np.ndarray:
    """Odd-length windowed-sinc lowpass, unit DC gain, zero-phase when
    applied with centered 'same' convolution."""
    if not 0 < cutoff_hz < sample_rate_hz / 2:
        raise ContractError(f"cutoff {cutoff_hz} Hz outside (0, Nyquist)")
    n = np.arange(-half_len, half_len + 1, dtype=np.float64)
    c = 2.0 * cutoff_hz / sample_rate_hz
    u = n / (half_len + 1)
    window = np.i0(_FIR_BETA * np.sqrt(1.0 - u * u)) / np.i0(_FIR_BETA)
    h = c * np.sinc(c * n) * window
    return h / h.sum()


def bandpass_taps(low_hz: float, high_hz: float, sample_rate_hz: int,
                  half_len: int = 256) -> np.ndarray:
    """Windowed-sinc bandpass as a difference of two lowpasses."""
    hi = lowpass_taps(high_hz, sample_rate_hz, half_len)
    if low_hz <= 0:
        return hi
    lo = lowpass_taps(low_hz, sample_rate_hz, half_len)
    return hi - lo


def fir_filter_same(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Centered same-length FIR convolution via FFT (zero net delay for
    symmetric odd-length kernels)."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    n = x.shape[0] + h.shape[0] - 1
    nfft = 1 << (n - 1).bit_length()
    y = np.fft.irfft(np.fft.rfft(x, nfft) * np.fft.rfft(h, nfft), nfft)[:n]
    delay = (h.shape[0] - 1) // 2
    return y[delay:delay + x.shape[0]]


# ---------------------------------------------------------------------------
# defense: sample-rate change

_SWEEP_LO, _SWEEP_HI = 0.4, 1.4


def defense_sample_rate(x: Waveform, factor: float) -> Waveform:
    """Table-3 style rescale defense; output length is round(L*factor)."""
    if not (_SWEEP_LO <= factor <= _SWEEP_HI):
        warnings.warn(
            f"rescale factor {factor} is outside the studied sweep "
            f"[{_SWEEP_LO}, {_SWEEP_HI}]; running anyway", stacklevel=2
        )
    return resample(x, factor)


def diff_defense_sample_rate(x_t: ad.Tensor, factor: float) -> ad.Tensor:
    """Differentiable rescale: the windowed-sinc map with its exact adjoint."""
    length = x_t.shape[0]
    if factor == 1.0:
        return ad.clip(x_t, -1.0, 1.0)
    taps, h, _ = resample_kernel(length, factor)
    dtype = x_t.dtype
    y = ad.linear_operator(
        x_t,
        lambda v: resample_apply(v, taps, h).astype(dtype),
        lambda g: resample_adjoint(g, taps, h, length).astype(dtype),
    )
    return ad.clip(y, -1.0, 1.0)


# ---------------------------------------------------------------------------
# defense: spectral gating


@dataclass(frozen=True)
class GateConfig:
    stft: StftConfig = StftConfig()
    sigma_mult: float = 1.5
    quiet_fraction: float = 0.1


def _gate_mask(mag: np.ndarray, noise_mag: np.ndarray | None,
               cfg: GateConfig) -> np.ndarray:
    """Boolean keep-mask per (F, D) bin from a stationary noise floor."""
    if noise_mag is None:
        frame_energy = (mag ** 2).sum(axis=0)
        n_quiet = max(1, int(round(cfg.quiet_fraction * mag.shape[1])))
        quiet = np.argsort(frame_energy, kind="stable")[:n_quiet]
        noise_mag = mag[:, quiet]
    floor = noise_mag.mean(axis=1, keepdims=True)
    spread = noise_mag.std(axis=1, keepdims=True)
    return mag > (floor + cfg.sigma_mult * spread)


def defense_spectral_gate(x: Waveform, reduction: float,
                          noise_profile: Waveform | None = None,
                          cfg: GateConfig = GateConfig()) -> Waveform:
    """Stationary spectral gating: attenuate bins under the noise floor."""
    if not 0.0 <= reduction <= 1.0:
        raise ContractError(f"reduction {reduction} outside [0, 1]")
    s = stft(x, cfg.stft.fft_size, cfg.stft.win_samples, cfg.stft.hop_samples,
             cfg.stft.window)
    mag = np.abs(s.bins)
    noise_mag = None
    if noise_profile is not None:
        ns = stft(noise_profile, cfg.stft.fft_size, cfg.stft.win_samples,
                  cfg.stft.hop_samples, cfg.stft.window)
        noise_mag = np.abs(ns.bins)
    keep = _gate_mask(mag, noise_mag, cfg)
    s.bins = s.bins * np.where(keep, 1.0, 1.0 - reduction)
    return istft(s)


def diff_defense_spectral_gate(x_t: ad.Tensor, reduction: float,
                               noise_profile: Waveform | None = None,
                               cfg: GateConfig = GateConfig()) -> ad.Tensor:
    """Gate with the mask computed value-level and treated as constant
    (straight-through), so gradients flow through the kept bins."""
    if not 0.0 <= reduction <= 1.0:
        raise ContractError(f"reduction {reduction} outside [0, 1]")
    re, im = diff_stft(x_t, cfg.stft)
    mag = np.sqrt(re.values.astype(np.float64) ** 2
                  + im.values.astype(np.float64) ** 2).T
    noise_mag = None
    if noise_profile is not None:
        ns = stft(noise_profile, cfg.stft.fft_size, cfg.stft.win_samples,
                  cfg.stft.hop_samples, cfg.stft.window)
        noise_mag = np.abs(ns.bins)
    keep = _gate_mask(mag, noise_mag, cfg)
    scale = ad.constant(np.where(keep, 1.0, 1.0 - reduction).T, dtype=x_t.dtype)
    return diff_istft(ad.mul(re, scale), ad.mul(im, scale), x_t.shape[0],
                      cfg.stft)


# ---------------------------------------------------------------------------
# defense: lossy codec stand-in

CODEC_LOWPASS_HZ = {1: 2000.0, 2: 3000.0, 3: 4500.0, 4: 6000.0, 5: 7500.0}
CODEC_BITS = {1: 4, 2: 5, 3: 6, 4: 8, 5: 10}
_MU = 255.0


def _mulaw_requantize(x: np.ndarray, bits: int) -> np.ndarray:
    comp = np.sign(x) * np.log1p(_MU * np.abs(x)) / np.log1p(_MU)
    levels = (1 << bits) - 1
    q = np.round((comp + 1.0) / 2.0 * levels) / levels * 2.0 - 1.0
    return np.sign(q) * ((1.0 + _MU) ** np.abs(q) - 1.0) / _MU


def codec_defense(x: Waveform, level: int) -> Waveform:
    """Band-limit plus companded requantization; harsher at lower levels."""
    if level not in CODEC_LOWPASS_HZ:
        raise ContractError(f"codec level must be 1..5, got {level}")
    h = lowpass_taps(CODEC_LOWPASS_HZ[level], x.sample_rate_hz)
    y = fir_filter_same(x.samples, h)
    y = _mulaw_requantize(np.clip(y, -1.0, 1.0), CODEC_BITS[level])
    return Waveform(np.clip(y, -1.0, 1.0).astype(np.float32), x.sample_rate_hz)


def diff_codec_defense(x_t: ad.Tensor, level: int,
                       sample_rate_hz: int = 16000) -> ad.Tensor:
    """Codec with exact lowpass gradient and straight-through quantization."""
    if level not in CODEC_LOWPASS_HZ:
        raise ContractError(f"codec level must be 1..5, got {level}")
    h = lowpass_taps(CODEC_LOWPASS_HZ[level], sample_rate_hz)
    dtype = x_t.dtype
    y = ad.linear_operator(
        x_t,
        lambda v: fir_filter_same(v, h).astype(dtype),
        lambda g: fir_filter_same(g, h[::-1]).astype(dtype),
    )
    y = ad.clip(y, -1.0, 1.0)
    quant = _mulaw_requantize(y.values.astype(np.float64), CODEC_BITS[level])
    residual = ad.constant((quant - y.values).astype(dtype), dtype=dtype)
    return ad.clip(ad.add(y, residual), -1.0, 1.0)


# ---------------------------------------------------------------------------
# defense dispatch

_DEFENSE_KINDS = ("sample_rate_change", "spectral_gate", "codec")


@dataclass(frozen=True)
class DefenseSpec:
    """One named defense with its parameters; chains are ordered lists."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _DEFENSE_KINDS:
            raise ConfigError(
                f"unknown defense {self.kind!r}; expected one of {_DEFENSE_KINDS}"
            )


def apply_defense(x: Waveform, spec: DefenseSpec) -> Waveform:
    if spec.kind == "sample_rate_change":
        return defense_sample_rate(x, spec.params["factor"])
    if spec.kind == "spectral_gate":
        return defense_spectral_gate(
            x, spec.params["reduction"],
            noise_profile=spec.params.get("noise_profile"),
        )
    return codec_defense(x, spec.params["level"])


def apply_defense_chain(x: Waveform, specs) -> Waveform:
    for spec in specs:
        x = apply_defense(x, spec)
    return x


def diff_apply_defense(x_t: ad.Tensor, spec: DefenseSpec,
                       sample_rate_hz: int = 16000) -> ad.Tensor:
    if spec.kind == "sample_rate_change":
        return diff_defense_sample_rate(x_t, spec.params["factor"])
    if spec.kind == "spectral_gate":
        return diff_defense_spectral_gate(
            x_t, spec.params["reduction"],
            noise_profile=spec.params.get("noise_profile"),
        )
    return diff_codec_defense(x_t, spec.params["level"], sample_rate_hz)


# ---------------------------------------------------------------------------
# over-the-air channel


@dataclass(frozen=True)
class ChannelParams:
    """Synthetic speaker-air-microphone path.

    time_offset: inclusive draw range for the circular shift; None draws
    uniformly over the whole signal length. snr_db None disables noise;
    band_hz None disables filtering.
    """

    time_offset: tuple[int, int] | None = None
    snr_db: float | None = 20.0
    band_hz: tuple[float, float] | None = (100.0, 7500.0)
    gain: float = 0.9
    ir: tuple[float, ...] | None = None
    seed: int = 0

    def validate(self, sample_rate_hz: int):
        if not 0.0 < self.gain <= 2.0:
            raise ConfigError(f"gain {self.gain} outside (0, 2]")
        if self.snr_db is not None and not np.isfinite(self.snr_db):
            raise ConfigError(f"snr_db must be finite or None, got {self.snr_db}")
        if self.band_hz is not None:
            lo, hi = self.band_hz
            if not lo < hi <= sample_rate_hz / 2:
                raise ConfigError(
                    f"band ({lo}, {hi}) must satisfy low < high <= Nyquist"
                )


def with_seed(p: ChannelParams, seed: int) -> ChannelParams:
    return replace(p, seed=seed)


def simulate_channel(x: Waveform, p: ChannelParams,
                     mix_with: Waveform | None = None) -> Waveform:
    """Apply the channel chain; deterministic per (inputs, p.seed).

    Draw order is fixed: offset first, then the noise vector. The noise
    level targets snr_db against the post-gain signal power.
    """
    p.validate(x.sample_rate_hz)
    rng = np.random.Generator(np.random.Philox(p.seed))
    y = x.samples.astype(np.float64)
    if mix_with is not None:
        other = mix_with.samples.astype(np.float64)
        if len(other) < len(y):
            other = np.pad(other, (0, len(y) - len(other)))
        elif len(other) > len(y):
            y = np.pad(y, (0, len(other) - len(y)))
        y = np.clip(y + other, -1.0, 1.0)
    if p.time_offset is None:
        offset = int(rng.integers(0, y.shape[0]))
    else:
        lo, hi = p.time_offset
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad offset range ({lo}, {hi})")
        offset = int(rng.integers(lo, hi + 1))
    y = np.roll(y, offset)
    if p.band_hz is not None:
        y = fir_filter_same(y, bandpass_taps(p.band_hz[0], p.band_hz[1],
                                             x.sample_rate_hz))
    if p.ir is not None:
        y = fir_filter_same(y, np.asarray(p.ir, dtype=np.float64))
    y = y * p.gain
    if p.snr_db is not None:
        power = float(np.mean(y ** 2))
        sigma = np.sqrt(power / (10.0 ** (p.snr_db / 10.0)))
        y = y + rng.normal(0.0, sigma, y.shape)
    return Waveform(np.clip(y, -1.0, 1.0).astype(np.float32), x.sample_rate_hz)

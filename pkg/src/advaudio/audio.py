"""Waveform type, WAV I/O, STFT/iSTFT, resampling, and mel features.

Conventions fixed here and relied on everywhere else:

* Waveforms are mono float32 in [-1, 1]; 16 kHz unless stated otherwise.
* STFT centers frames by reflect-padding ``fft_size // 2`` samples on both
  sides (the right pad is extended so the last frame is complete), then
  slices frames of ``win_samples`` every ``hop_samples``, giving
  ``D = 1 + ceil((L + 2*(fft_size//2) - win_samples) / hop_samples)`` frames.
  Windows are periodic. Inversion is weighted overlap-add normalized by the
  squared-window envelope, which reconstructs exactly (not just COLA-
  approximately) whenever the envelope is strictly positive; that envelope
  condition is checked when the spectrogram is built.
* PCM quantization rounds half away from zero, so golden WAVs are
  platform-stable.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, FormatError, UnsupportedFormatError

DEFAULT_SAMPLE_RATE = 16000
_RANGE_TOL = 1e-5


@dataclass
class Waveform:
    """Mono audio, float32 samples in [-1, 1]. Treated as immutable."""

    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if s.size == 0:
            raise ContractError("waveform must contain at least one sample")
        if self.sample_rate_hz <= 0:
            raise ContractError(f"sample rate must be positive, got {self.sample_rate_hz}")
        peak = float(np.max(np.abs(s)))
        if peak > 1.0 + _RANGE_TOL:
            raise ContractError(f"samples exceed [-1, 1] (peak {peak:.6g})")
        if peak > 1.0:
            s = np.clip(s, -1.0, 1.0)
        self.samples = s

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass
class Spectrogram:
    """Complex STFT bins of shape (F, D) plus everything needed to invert."""

    bins: np.ndarray
    hop_samples: int
    win_samples: int
    fft_size: int
    original_length: int | None
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    window: str = "hann"

    n_freqs: int = field(init=False)
    n_frames: int = field(init=False)

    def __post_init__(self):
        self.bins = np.asarray(self.bins)
        if self.bins.ndim != 2:
            raise ContractError(f"bins must be 2-D (F, D), got shape {self.bins.shape}")
        self.n_freqs, self.n_frames = self.bins.shape
        if self.n_freqs != self.fft_size // 2 + 1:
            raise ContractError(
                f"F = {self.n_freqs} but fft_size {self.fft_size} implies "
                f"{self.fft_size // 2 + 1}"
            )


# ---------------------------------------------------------------------------
# WAV I/O (RIFF/WAVE, 16-bit PCM, mono)


def load_wav(path) -> Waveform:
    """Read a mono 16-bit PCM WAV file; samples scale as int16 / 32768."""
    try:
        with wave.open(str(path), "rb") as f:
            n_channels = f.getnchannels()
            sampwidth = f.getsampwidth()
            rate = f.getframerate()
            n = f.getnframes()
            payload = f.readframes(n)
    except wave.Error as e:
        raise FormatError(f"not a readable WAV file: {path} ({e})") from e
    except EOFError as e:
        raise FormatError(f"truncated WAV file: {path}") from e
    if n_channels != 1:
        raise UnsupportedFormatError(
            f"{path}: {n_channels} channels; only mono is supported (no silent downmix)"
        )
    if sampwidth != 2:
        raise UnsupportedFormatError(
            f"{path}: {8 * sampwidth}-bit samples; only 16-bit PCM is supported"
        )
    pcm = np.frombuffer(payload, dtype="<i2")
    return Waveform(pcm.astype(np.float32) / 32768.0, rate)


def save_wav(w: Waveform, path) -> None:
    """Write 16-bit PCM mono. Quantization: round(s*32768) half away from zero."""
    scaled = w.samples.astype(np.float64) * 32768.0
    q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    pcm = np.clip(q, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate_hz)
        f.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# windows and the overlap-add envelope


def window_values(name: str, win: int) -> np.ndarray:
    """Periodic analysis window of length `win`, float64."""
    n = np.arange(win)
    if name == "hann":
        return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / win))
    if name == "hamming":
        return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / win)
    if name == "rect":
        return np.ones(win, dtype=np.float64)
    raise ConfigError(f"unknown window {name!r} (expected hann, hamming, or rect)")


def _ola_envelope(w2: np.ndarray, hop: int, n_frames: int, length: int) -> np.ndarray:
    env = np.zeros(length, dtype=np.float64)
    win = w2.shape[0]
    for k in range(win):
        env[k:k + hop * n_frames:hop] += w2[k]
    return env


def check_stft_config(fft_size: int, win: int, hop: int, window: str) -> np.ndarray:
    """Validate an STFT configuration; returns the window on success.

    The inversion divides by the squared-window overlap envelope, so the
    configuration is usable exactly when that envelope stays bounded away
    from zero in steady state. Hop > win or a vanishing envelope (for
    example hann with hop == win) cannot reconstruct and is rejected.
    """
    if not (0 < hop <= win <= fft_size):
        raise ConfigError(
            f"need 0 < hop <= win <= fft_size, got hop={hop} win={win} fft={fft_size}"
        )
    w = window_values(window, win)
    w2 = w * w
    # steady-state envelope over a few window lengths; edges excluded
    n_frames = 4 * (win // hop) + 4
    length = (n_frames - 1) * hop + win
    env = _ola_envelope(w2, hop, n_frames, length)
    core = env[win:length - win] if length > 2 * win else env
    if core.size == 0 or core.min() <= 1e-8 * max(env.max(), 1e-300):
        raise ConfigError(
            f"window {window!r} with hop={hop} win={win} leaves overlap-add "
            "envelope zeros; reconstruction would be impossible"
        )
    return w


def stft(w: Waveform, fft_size: int = 512, win_samples: int = 512,
         hop_samples: int = 128, window: str = "hann") -> Spectrogram:
    """Centered STFT; see the module docstring for the exact convention."""
    wv = check_stft_config(fft_size, win_samples, hop_samples, window)
    x = w.samples.astype(np.float64)
    pad = fft_size // 2
    n_frames = 1 + -((x.shape[0] + 2 * pad - win_samples) // -hop_samples)
    covered = (n_frames - 1) * hop_samples + win_samples
    pad_right = pad + (covered - (x.shape[0] + 2 * pad))
    if max(pad, pad_right) >= x.shape[0]:
        raise ContractError(
            f"waveform of {x.shape[0]} samples too short for reflect pad "
            f"{max(pad, pad_right)}"
        )
    xp = np.pad(x, (pad, pad_right), mode="reflect")
    s0 = xp.strides[0]
    frames = np.lib.stride_tricks.as_strided(
        xp, (n_frames, win_samples), (s0 * hop_samples, s0)
    )
    spec = np.fft.rfft(frames * wv, n=fft_size, axis=1)
    return Spectrogram(
        bins=spec.T.copy(),
        hop_samples=hop_samples,
        win_samples=win_samples,
        fft_size=fft_size,
        original_length=len(w),
        sample_rate_hz=w.sample_rate_hz,
        window=window,
    )


def istft(s: Spectrogram) -> Waveform:
    """Invert an STFT back to original_length samples (clipped to [-1, 1])."""
    if s.original_length is None:
        raise ContractError("spectrogram lacks original_length; cannot invert")
    wv = check_stft_config(s.fft_size, s.win_samples, s.hop_samples, s.window)
    frames = np.fft.irfft(s.bins.T, n=s.fft_size, axis=1)[:, :s.win_samples]
    frames = frames * wv
    n_frames = s.n_frames
    hop = s.hop_samples
    length = (n_frames - 1) * hop + s.win_samples
    acc = np.zeros(length, dtype=np.float64)
    for k in range(s.win_samples):
        acc[k:k + hop * n_frames:hop] += frames[:, k]
    env = _ola_envelope(wv * wv, hop, n_frames, length)
    pad = s.fft_size // 2
    lo, hi = pad, pad + s.original_length
    if hi > length:
        raise ContractError(
            f"spectrogram frames cover {length} samples, fewer than "
            f"pad + original_length = {hi}"
        )
    core = acc[lo:hi] / env[lo:hi]
    return Waveform(np.clip(core, -1.0, 1.0).astype(np.float32), s.sample_rate_hz)


# ---------------------------------------------------------------------------
# resampling


_KAISER_BETA = 8.0
_TAPS_PER_SIDE = 32


def _kaiser(u: np.ndarray) -> np.ndarray:
    inside = np.abs(u) <= 1.0
    arg = np.where(inside, 1.0 - u * u, 0.0)
    return np.where(inside, np.i0(_KAISER_BETA * np.sqrt(arg)) / np.i0(_KAISER_BETA), 0.0)


def resample_kernel(length: int, factor: float):
    """Windowed-sinc interpolation taps for resampling a length-L signal.

    Returns (tap_indices, tap_weights, n_out): output sample n is the dot
    product of tap_weights[n] with the (zero-padded) input at
    tap_indices[n]. Exposed so gradients can use the exact adjoint map.
    """
    n_out = int(round(length * factor))
    if n_out < 1:
        raise ContractError(f"resample would produce {n_out} samples")
    c = min(1.0, factor)  # cutoff relative to the input Nyquist
    t = np.arange(n_out, dtype=np.float64) / factor
    k0 = np.floor(t).astype(np.int64)
    offsets = np.arange(-(_TAPS_PER_SIDE - 1), _TAPS_PER_SIDE + 1)
    taps = k0[:, None] + offsets[None, :]
    d = t[:, None] - taps
    h = c * np.sinc(c * d) * _kaiser(d / _TAPS_PER_SIDE)
    return taps, h, n_out


def resample_apply(x: np.ndarray, taps: np.ndarray, h: np.ndarray) -> np.ndarray:
    xp = np.pad(np.asarray(x, dtype=np.float64), _TAPS_PER_SIDE + 1)
    return np.einsum("ij,ij->i", h, xp[taps + _TAPS_PER_SIDE + 1])


def resample_adjoint(g: np.ndarray, taps: np.ndarray, h: np.ndarray,
                     length: int) -> np.ndarray:
    gp = np.zeros(length + 2 * (_TAPS_PER_SIDE + 1), dtype=np.float64)
    np.add.at(gp, taps + _TAPS_PER_SIDE + 1, h * np.asarray(g, np.float64)[:, None])
    return gp[_TAPS_PER_SIDE + 1:_TAPS_PER_SIDE + 1 + length]


def resample(w: Waveform, factor: float) -> Waveform:
    """Time/pitch-scale by band-limited interpolation to round(L*factor) samples.

    The nominal sample rate is unchanged: downstream consumers keep assuming
    16 kHz, which is exactly the sample-rate-change defense being modeled.
    Output is clipped to [-1, 1] (interpolation can overshoot slightly).
    """
    if not (0.1 <= factor <= 10.0):
        raise ContractError(f"resample factor {factor} outside [0.1, 10]")
    if factor == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate_hz)
    taps, h, _ = resample_kernel(len(w), factor)
    y = resample_apply(w.samples, taps, h)
    return Waveform(np.clip(y, -1.0, 1.0).astype(np.float32), w.sample_rate_hz)


def snr_db(reference: np.ndarray, estimate: np.ndarray) -> float:
    """Signal-to-noise ratio of estimate against reference, in dB."""
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if reference.shape != estimate.shape:
        raise ContractError(
            f"snr_db: shapes differ {reference.shape} vs {estimate.shape}"
        )
    err = np.sum((reference - estimate) ** 2)
    sig = np.sum(reference ** 2)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(sig / err))


# ---------------------------------------------------------------------------
# mel features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate_hz: int, fft_size: int, n_mels: int,
                   fmin_hz: float = 0.0, fmax_hz: float | None = None) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, fft_size//2 + 1), float64."""
    if fmax_hz is None:
        fmax_hz = sample_rate_hz / 2.0
    if not (0 <= fmin_hz < fmax_hz <= sample_rate_hz / 2.0):
        raise ContractError(f"bad mel band edges [{fmin_hz}, {fmax_hz}]")
    n_freqs = fft_size // 2 + 1
    bin_hz = np.arange(n_freqs) * sample_rate_hz / fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    fb = np.zeros((n_mels, n_freqs), dtype=np.float64)
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        rise = (bin_hz - lo) / max(mid - lo, 1e-12)
        fall = (hi - bin_hz) / max(hi - mid, 1e-12)
        fb[i] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


MEL_FLOOR = 1e-10


def mel_features(w: Waveform, n_mels: int = 40, fft_size: int = 512,
                 win_samples: int = 512, hop_samples: int = 128) -> np.ndarray:
    """log(mel @ |STFT|^2 + 1e-10), time-major: shape (D, n_mels), float64."""
    if n_mels < 8:
        raise ContractError(f"n_mels must be >= 8, got {n_mels}")
    s = stft(w, fft_size=fft_size, win_samples=win_samples, hop_samples=hop_samples)
    power = np.abs(s.bins) ** 2
    fb = mel_filterbank(w.sample_rate_hz, fft_size, n_mels)
    return np.log(fb @ power + MEL_FLOOR).T.copy()

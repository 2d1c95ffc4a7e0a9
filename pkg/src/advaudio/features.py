"""Differentiable signal transforms built on the autodiff engine.

These mirror the value-level functions in :mod:`advaudio.audio` exactly
(same padding, framing, windowing, and mel filterbank), but run on tape
tensors so losses can backpropagate to raw samples. The DFT is expressed
as framed matmuls against fixed cosine/sine bases; the inverse uses the
matching synthesis bases plus the same squared-window envelope
normalization as the value-level iSTFT.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .audio import MEL_FLOOR, _ola_envelope, check_stft_config, mel_filterbank
from .errors import ContractError


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 512
    win_samples: int = 512
    hop_samples: int = 128
    window: str = "hann"

    def frame_count(self, length: int) -> int:
        pad = self.fft_size // 2
        span = length + 2 * pad - self.win_samples
        return 1 + -(span // -self.hop_samples)


@dataclass(frozen=True)
class MelConfig:
    sample_rate_hz: int = 16000
    n_mels: int = 40
    stft: StftConfig = StftConfig()


_BASIS_CACHE: dict = {}


def dft_bases(fft_size: int, win: int) -> tuple[np.ndarray, np.ndarray]:
    """Analysis bases (win, F): real part uses cos, imaginary part -sin."""
    key = ("fwd", fft_size, win)
    if key not in _BASIS_CACHE:
        n = np.arange(win)[:, None]
        k = np.arange(fft_size // 2 + 1)[None, :]
        ang = 2.0 * np.pi * n * k / fft_size
        _BASIS_CACHE[key] = (np.cos(ang), -np.sin(ang))
    return _BASIS_CACHE[key]


def idft_bases(fft_size: int, win: int) -> tuple[np.ndarray, np.ndarray]:
    """Synthesis bases (F, win) for the first `win` samples of the inverse."""
    key = ("inv", fft_size, win)
    if key not in _BASIS_CACHE:
        F = fft_size // 2 + 1
        k = np.arange(F)[:, None]
        n = np.arange(win)[None, :]
        ang = 2.0 * np.pi * k * n / fft_size
        weight = np.full((F, 1), 2.0)
        weight[0, 0] = 1.0
        if fft_size % 2 == 0:
            weight[-1, 0] = 1.0
        _BASIS_CACHE[key] = (
            weight * np.cos(ang) / fft_size,
            -weight * np.sin(ang) / fft_size,
        )
    return _BASIS_CACHE[key]


def diff_stft(x: ad.Tensor, cfg: StftConfig = StftConfig()) -> tuple[ad.Tensor, ad.Tensor]:
    """STFT of a 1-D sample tensor; returns (real, imag), each (D, F)."""
    wv = check_stft_config(cfg.fft_size, cfg.win_samples, cfg.hop_samples, cfg.window)
    L = x.shape[0]
    pad = cfg.fft_size // 2
    n_frames = cfg.frame_count(L)
    covered = (n_frames - 1) * cfg.hop_samples + cfg.win_samples
    pad_right = covered - L - pad
    xp = ad.reflect_pad(x, (pad, pad_right))
    frames = ad.frame(xp, cfg.win_samples, cfg.hop_samples)
    wf = ad.mul(frames, ad.constant(wv, dtype=x.dtype))
    cosb, sinb = dft_bases(cfg.fft_size, cfg.win_samples)
    re = ad.matmul(wf, ad.constant(cosb, dtype=x.dtype))
    im = ad.matmul(wf, ad.constant(sinb, dtype=x.dtype))
    return re, im


def diff_istft(re: ad.Tensor, im: ad.Tensor, original_length: int,
               cfg: StftConfig = StftConfig()) -> ad.Tensor:
    """Invert (real, imag) frame spectra back to original_length samples."""
    if re.shape != im.shape:
        raise ContractError(f"re/im shapes differ: {re.shape} vs {im.shape}")
    wv = check_stft_config(cfg.fft_size, cfg.win_samples, cfg.hop_samples, cfg.window)
    n_frames, F = re.shape
    if F != cfg.fft_size // 2 + 1:
        raise ContractError(f"F={F} inconsistent with fft_size {cfg.fft_size}")
    if n_frames != cfg.frame_count(original_length):
        raise ContractError(
            f"{n_frames} frames cannot come from {original_length} samples "
            f"under this configuration"
        )
    icos, isin = idft_bases(cfg.fft_size, cfg.win_samples)
    frames = ad.add(
        ad.matmul(re, ad.constant(icos, dtype=re.dtype)),
        ad.matmul(im, ad.constant(isin, dtype=re.dtype)),
    )
    wf = ad.mul(frames, ad.constant(wv, dtype=re.dtype))
    covered = (n_frames - 1) * cfg.hop_samples + cfg.win_samples
    acc = ad.overlap_add(wf, cfg.hop_samples, covered)
    env = _ola_envelope(wv * wv, cfg.hop_samples, n_frames, covered)
    pad = cfg.fft_size // 2
    core = ad.slice_(acc, (slice(pad, pad + original_length),))
    return ad.mul(core, ad.constant(1.0 / env[pad:pad + original_length],
                                    dtype=re.dtype))


def diff_power_spectrum(x: ad.Tensor, cfg: StftConfig = StftConfig()) -> ad.Tensor:
    """|STFT|^2 as a (D, F) tensor."""
    re, im = diff_stft(x, cfg)
    return ad.add(ad.square(re), ad.square(im))


def diff_mel_features(x: ad.Tensor, cfg: MelConfig = MelConfig()) -> ad.Tensor:
    """log-mel features (D, n_mels); matches audio.mel_features bit-for-bit
    in float64 up to summation order."""
    if cfg.n_mels < 8:
        raise ContractError(f"n_mels must be >= 8, got {cfg.n_mels}")
    power = diff_power_spectrum(x, cfg.stft)
    fb = mel_filterbank(cfg.sample_rate_hz, cfg.stft.fft_size, cfg.n_mels)
    mel = ad.matmul(power, ad.constant(fb.T, dtype=x.dtype))
    return ad.log(ad.add(mel, float(MEL_FLOOR)))

"""Differentiable audio augmentations used inside attack gradient steps.

Three augmentations: circular translation, additive uniform noise, and
frequency-band masking on the spectrogram (with resynthesis and peak
rescale). A pipeline draws fresh parameters per call; the drawn
parameters are plain data so attack traces can log and replay them. For
frozen draws every augmentation is a differentiable map, which is what
lets the attack average gradients over augmentation draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .audio import Waveform, istft, stft
from .errors import ConfigError, ContractError
from .features import StftConfig, diff_istft, diff_stft
from .seeding import derive_seed

__all__ = [
    "AugmentationSpec", "AugmentationPipeline", "AugmentDraw",
    "translate", "translate_tensor", "add_uniform_noise", "noise_field",
    "spec_augment", "band_mask", "apply_draw_tensor", "apply_draw",
    "sample_pipeline", "default_pipeline", "DEFAULT_STFT",
]

DEFAULT_STFT = StftConfig()

_KINDS = ("translation", "additive_noise", "spec_augment")


@dataclass(frozen=True)
class AugmentationSpec:
    """One augmentation slot: what to apply and with which parameters.

    max_shift caps translation draws: None rotates anywhere in the
    signal, an integer draws from [0, max_shift). Attacks whose payload
    is already periodic at some block size only need robustness to the
    sub-block residue, which a capped draw expresses directly.
    """

    kind: str
    enabled: bool = True
    eps_noise: float = 0.02
    n_mask: int = 10
    n_size: int = 50
    max_shift: int | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown augmentation kind {self.kind!r}")
        if not 0.0 <= self.eps_noise <= 0.5:
            raise ConfigError(f"eps_noise {self.eps_noise} outside [0, 0.5]")
        if self.n_mask < 0:
            raise ConfigError("n_mask must be >= 0")
        if not 1 <= self.n_size <= DEFAULT_STFT.fft_size // 2 + 1:
            raise ConfigError("n_size outside [1, n_freqs]")
        if self.max_shift is not None and self.max_shift < 1:
            raise ConfigError("max_shift must be >= 1 when set")


@dataclass(frozen=True)
class AugmentDraw:
    """Frozen parameters of one applied augmentation (JSON-friendly).

    scale is the realized peak-rescale factor of a spec_augment draw.
    While None the factor is recomputed from the current input; once
    realized it is a bona fide constant, which is what makes the frozen
    pipeline pass a finite-difference gradient check.
    """

    kind: str
    shift: int = 0
    eps_noise: float = 0.0
    noise_seed: int = 0
    masks: tuple = ()
    silent: bool = False
    scale: float | None = None


@dataclass
class AugmentationPipeline:
    """Ordered augmentations with a private counter-based random stream.

    Draw sequences are a pure function of (seed, draw counter), so two
    pipelines built with the same seed replay identical parameters.
    """

    specs: tuple
    seed: int = 0
    stft_config: StftConfig = field(default_factory=StftConfig)
    _counter: int = field(default=0, repr=False)

    def __post_init__(self):
        self.specs = tuple(self.specs)

    def draw(self, n_samples: int) -> list[AugmentDraw]:
        """Fresh parameter draws for one application to n_samples of audio."""
        rng = np.random.Generator(np.random.Philox(
            key=derive_seed(self.seed, "augment", self._counter)))
        self._counter += 1
        n_freqs = self.stft_config.fft_size // 2 + 1
        draws = []
        for spec in self.specs:
            if not spec.enabled:
                continue
            if spec.kind == "translation":
                hi = n_samples
                if spec.max_shift is not None:
                    hi = min(spec.max_shift, n_samples)
                draws.append(AugmentDraw("translation",
                                         shift=int(rng.integers(hi))))
            elif spec.kind == "additive_noise":
                draws.append(AugmentDraw(
                    "additive_noise", eps_noise=spec.eps_noise,
                    noise_seed=int(rng.integers(2 ** 62))))
            else:
                k = int(rng.integers(spec.n_mask + 1))
                masks = []
                for _ in range(k):
                    width = int(rng.integers(1, spec.n_size + 1))
                    start = int(rng.integers(n_freqs))
                    masks.append((start, width))
                draws.append(AugmentDraw("spec_augment", masks=tuple(masks)))
        return draws


def default_pipeline(seed: int = 0, *, translation: bool = True,
                     noise: bool = True, spec: bool = True,
                     eps_noise: float = 0.02, n_mask: int = 10,
                     n_size: int = 50) -> AugmentationPipeline:
    specs = (
        AugmentationSpec("translation", enabled=translation),
        AugmentationSpec("additive_noise", enabled=noise, eps_noise=eps_noise),
        AugmentationSpec("spec_augment", enabled=spec, n_mask=n_mask,
                         n_size=n_size),
    )
    return AugmentationPipeline(specs, seed)


# ---------------------------------------------------------------------------
# translation


def translate(x: Waveform, i: int) -> Waveform:
    """Circular left rotation by i samples."""
    n = len(x.samples)
    if not 0 <= i < n:
        raise ContractError(f"shift {i} outside [0, {n})")
    return Waveform(np.concatenate([x.samples[i:], x.samples[:i]]),
                    x.sample_rate_hz)


def translate_tensor(x: ad.Tensor, i: int) -> ad.Tensor:
    n = x.values.shape[0]
    if not 0 <= i < n:
        raise ContractError(f"shift {i} outside [0, {n})")
    if i == 0:
        return x
    return ad.concat([ad.slice_(x, slice(i, n)), ad.slice_(x, slice(0, i))])


# ---------------------------------------------------------------------------
# additive uniform noise


def noise_field(n: int, eps_noise: float, noise_seed: int) -> np.ndarray:
    """The uniform noise realization for a draw, regenerable from its seed."""
    rng = np.random.Generator(np.random.Philox(key=noise_seed))
    return rng.uniform(-eps_noise, eps_noise, n)


def add_uniform_noise(x: Waveform, eps_noise: float,
                      rng: np.random.Generator) -> Waveform:
    if eps_noise < 0:
        raise ContractError("eps_noise must be >= 0")
    if eps_noise == 0:
        return x
    r = rng.uniform(-eps_noise, eps_noise, x.samples.shape)
    return Waveform(np.clip(x.samples + r, -1.0, 1.0).astype(np.float32),
                    x.sample_rate_hz)


# ---------------------------------------------------------------------------
# frequency-band masking


def band_mask(masks, n_freqs: int) -> np.ndarray:
    """0/1 keep-mask over frequency bins for a set of (start, width) bands."""
    keep = np.ones(n_freqs)
    for start, width in masks:
        keep[start:min(start + width, n_freqs)] = 0.0
    return keep


def spec_augment(x: Waveform, n_mask: int, n_size: int,
                 rng: np.random.Generator,
                 cfg: StftConfig = DEFAULT_STFT) -> tuple[Waveform, AugmentDraw]:
    """Mask k ~ U{0..n_mask} random frequency bands and resynthesize.

    The output peak is rescaled to match the input peak. A silent input
    is returned unchanged, flagged in the draw.
    """
    peak = float(np.max(np.abs(x.samples)))
    if peak == 0.0:
        return x, AugmentDraw("spec_augment", silent=True)
    n_freqs = cfg.fft_size // 2 + 1
    k = int(rng.integers(n_mask + 1))
    masks = tuple((int(rng.integers(n_freqs)), int(rng.integers(1, n_size + 1)))
                  for _ in range(k))
    out, scale = _spec_augment_values(x, AugmentDraw("spec_augment", masks=masks), cfg)
    return out, AugmentDraw("spec_augment", masks=masks, scale=scale)


def _spec_augment_values(x: Waveform, draw: AugmentDraw,
                         cfg: StftConfig) -> tuple[Waveform, float]:
    spec = stft(x, cfg.fft_size, cfg.win_samples, cfg.hop_samples, cfg.window)
    keep = band_mask(draw.masks, spec.bins.shape[0])
    masked = type(spec)(bins=spec.bins * keep[:, None],
                        hop_samples=spec.hop_samples,
                        win_samples=spec.win_samples,
                        fft_size=spec.fft_size,
                        original_length=spec.original_length,
                        sample_rate_hz=spec.sample_rate_hz,
                        window=spec.window)
    y = istft(masked)
    if draw.scale is not None:
        scale = draw.scale
    else:
        peak_in = float(np.max(np.abs(x.samples)))
        peak_out = float(np.max(np.abs(y.samples)))
        scale = peak_in / peak_out if peak_out > 0 else 1.0
    scaled = np.clip(y.samples * scale, -1.0, 1.0)
    return Waveform(scaled.astype(np.float32), x.sample_rate_hz), scale


# ---------------------------------------------------------------------------
# tape-level application of frozen draws


def apply_draw_tensor(x: ad.Tensor, draw: AugmentDraw,
                      cfg: StftConfig = DEFAULT_STFT) -> ad.Tensor:
    """Apply one frozen draw differentiably."""
    if draw.kind == "translation":
        return translate_tensor(x, draw.shift)
    if draw.kind == "additive_noise":
        if draw.eps_noise == 0.0:
            return x
        r = noise_field(x.values.shape[0], draw.eps_noise, draw.noise_seed)
        return ad.clip(ad.add(x, ad.constant(r.astype(x.values.dtype),
                                             dtype=x.values.dtype)), -1.0, 1.0)
    if draw.kind == "spec_augment":
        if draw.silent:
            return x
        n = x.values.shape[0]
        re, im = diff_stft(x, cfg)
        keep = band_mask(draw.masks, re.values.shape[1])[None, :]
        keep_c = ad.constant(keep.astype(x.values.dtype), dtype=x.values.dtype)
        y = diff_istft(ad.mul(re, keep_c), ad.mul(im, keep_c), n, cfg)
        if draw.scale is not None:
            scale = draw.scale
        else:
            # peak ratio is held constant in backward: the true subgradient
            # of max|y| concentrates on one sample and destabilizes descent
            peak_in = float(np.max(np.abs(x.values)))
            peak_out = float(np.max(np.abs(y.values)))
            scale = peak_in / peak_out if peak_in > 0 and peak_out > 0 else 1.0
        return ad.clip(ad.mul(y, scale), -1.0, 1.0)
    raise ConfigError(f"unknown draw kind {draw.kind!r}")


def apply_draw(x: Waveform, draw: AugmentDraw,
               cfg: StftConfig = DEFAULT_STFT) -> Waveform:
    """Value-level twin of apply_draw_tensor."""
    if draw.kind == "translation":
        return translate(x, draw.shift)
    if draw.kind == "additive_noise":
        if draw.eps_noise == 0.0:
            return x
        r = noise_field(len(x.samples), draw.eps_noise, draw.noise_seed)
        return Waveform(np.clip(x.samples + r, -1.0, 1.0).astype(np.float32),
                        x.sample_rate_hz)
    if draw.kind == "spec_augment":
        if draw.silent or float(np.max(np.abs(x.samples))) == 0.0:
            return x
        return _spec_augment_values(x, draw, cfg)[0]
    raise ConfigError(f"unknown draw kind {draw.kind!r}")


def sample_pipeline(p: AugmentationPipeline,
                    x: Waveform) -> tuple[Waveform, list[AugmentDraw]]:
    """Draw fresh parameters and apply the whole pipeline, value-level.

    Returned draws are fully realized (silence flags set, rescale factors
    pinned), so replaying them on the same input reproduces the output and
    differentiating through them is well posed.
    """
    draws = p.draw(len(x.samples))
    out = x
    fixed = []
    for d in draws:
        if d.kind == "spec_augment":
            if float(np.max(np.abs(out.samples))) == 0.0:
                d = AugmentDraw("spec_augment", silent=True)
            elif d.scale is None:
                out_next, scale = _spec_augment_values(out, d, p.stft_config)
                fixed.append(replace(d, scale=scale))
                out = out_next
                continue
        out = apply_draw(out, d, p.stft_config)
        fixed.append(d)
    return out, fixed

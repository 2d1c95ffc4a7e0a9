"""Synthetic audio-text corpus: each character is a 100 ms chord.

Every token id owns a distinct pair of base sinusoids chosen from 13
mel-spaced frequencies between 300 and 1850 Hz; odd ids add a third,
higher partial. Keeping the identifying pair under 2 kHz means a 2 kHz
lowpass (the harshest codec level) still leaves tokens separable, so the
surrogate can stay accurate on defended clean audio.

Items vary in loudness over a fixed background noise floor: most draw a
per-item level in [0.12, 1], and a small fraction are whispered (level
in [0.02, 0.04]). Whispered items are still a couple of orders of
magnitude above the noise floor, so they transcribe fine when clean,
but moderate added broadband noise genuinely buries them. A model
trained on this corpus is confident on clean audio and calibrated,
rather than confidently wrong, on noisy audio; the noisy-condition
perplexity statistics downstream depend on that heavy-tailed structure.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np

from .audio import Waveform, hz_to_mel, mel_to_hz
from .errors import ContractError
from .vocab import DEFAULT_VOCAB, TokenSequence, Vocab

SAMPLE_RATE = 16000
TOKEN_SAMPLES = 1600  # 100 ms per character
_FADE = 80  # 5 ms edge ramps against clicks

_N_BASE = 13
_BASE_LO_HZ = 300.0
_BASE_HI_HZ = 1850.0
_MIN_GAP = 2  # pair partials at least two mel steps apart
_THIRD_BASE_HZ = 2500.0
_THIRD_STEP_HZ = 60.0
_AMP_PAIR = 0.28
_AMP_THIRD = 0.12
_NOISE_AMP = 0.004
_LEVEL_LO = 0.12   # quietest normal-item loudness, relative to the loudest
_WHISPER_P = 0.10  # fraction of whispered items
_WHISPER_LO = 0.02
_WHISPER_HI = 0.04

_LETTER_P = 0.82
_SPACE_P = 0.15
_COMMA_P = 0.015
_PERIOD_P = 0.015


def base_frequencies() -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(_BASE_LO_HZ), hz_to_mel(_BASE_HI_HZ),
                                 _N_BASE))


def token_chord(token_id: int, vocab_size: int = 64) -> tuple[float, ...]:
    """Frequencies for one token: a unique pair, plus a third for odd ids.

    Only pairs whose partials are >= _MIN_GAP steps apart are used, so no
    two tokens differ by a single adjacent-frequency swap; that keeps the
    chords separable at the analysis window's frequency resolution.
    """
    pairs = [p for p in combinations(range(_N_BASE), 2)
             if p[1] - p[0] >= _MIN_GAP]
    if token_id >= len(pairs):
        raise ContractError(f"no chord assignment for token id {token_id}")
    base = base_frequencies()
    i, j = pairs[token_id]
    freqs = [float(base[i]), float(base[j])]
    if token_id % 2 == 1:
        freqs.append(_THIRD_BASE_HZ + _THIRD_STEP_HZ * token_id)
    return tuple(freqs)


def render_tokens(ids, rng: np.random.Generator | None = None,
                  level: float = 1.0) -> Waveform:
    """Deterministic chord audio for a token id sequence (+ optional noise).

    level scales the chords only, like a speaker talking more softly; the
    background noise floor stays fixed, so quiet items have genuinely less
    headroom against any noise added later.
    """
    t = np.arange(TOKEN_SAMPLES) / SAMPLE_RATE
    fade = np.ones(TOKEN_SAMPLES)
    ramp = np.linspace(0.0, 1.0, _FADE)
    fade[:_FADE] = ramp
    fade[-_FADE:] = ramp[::-1]
    chunks = []
    for tid in ids:
        freqs = token_chord(tid)
        chunk = np.zeros(TOKEN_SAMPLES)
        for n, f in enumerate(freqs):
            amp = _AMP_THIRD if n == 2 else _AMP_PAIR
            chunk += level * amp * np.sin(2 * np.pi * f * t)
        chunks.append(chunk * fade)
    x = np.concatenate(chunks)
    if rng is not None:
        x = x + rng.normal(0.0, _NOISE_AMP, x.shape)
    return Waveform(np.clip(x, -1.0, 1.0).astype(np.float32), SAMPLE_RATE)


def sample_transcript(rng: np.random.Generator, n_tokens: int) -> str:
    """Random characters; first/last are letters, non-letters never adjacent."""
    letters = [chr(c) for c in range(ord("a"), ord("z") + 1)]
    others = [" ", ",", "."]
    other_p = np.array([_SPACE_P, _COMMA_P, _PERIOD_P])
    other_p = other_p / other_p.sum()
    chars = []
    for pos in range(n_tokens):
        boundary = pos == 0 or pos == n_tokens - 1
        prev_other = bool(chars) and chars[-1] not in letters
        if boundary or prev_other:
            chars.append(letters[rng.integers(len(letters))])
            continue
        if rng.random() < _LETTER_P:
            chars.append(letters[rng.integers(len(letters))])
        else:
            chars.append(others[rng.choice(len(others), p=other_p)])
    return "".join(chars)


def make_corpus(seed: int, n_items: int, duration_s: float,
                vocab: Vocab = DEFAULT_VOCAB) -> list[tuple[Waveform, TokenSequence]]:
    """Seeded synthetic corpus of (audio, transcript) pairs."""
    if duration_s not in (2, 4):
        raise ContractError(f"duration must be 2 or 4 seconds, got {duration_s}")
    if n_items < 1:
        raise ContractError("need at least one corpus item")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_tokens = int(duration_s * SAMPLE_RATE) // TOKEN_SAMPLES
    items = []
    for _ in range(n_items):
        text = sample_transcript(rng, n_tokens)
        seq = TokenSequence.from_text(text, vocab)
        if rng.random() < _WHISPER_P:
            level = float(rng.uniform(_WHISPER_LO, _WHISPER_HI))
        else:
            level = float(rng.uniform(_LEVEL_LO, 1.0))
        items.append((render_tokens(seq.ids, rng, level), seq))
    return items

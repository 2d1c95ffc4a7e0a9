"""Desk-scale audio-conditioned language model, fully differentiable.

A feature tower maps log-mel frames through two strided 1-D convolutions
and a linear projection to a (T, 32) feature map. Those features are
mean-pooled into one prefix vector per 100 ms of audio and fed, together
with the tokenized prompt and the output prefix, into a single pre-LN
transformer block with a causal mask.

Each of the three segments (audio, prompt, output) gets its own learned
position table plus a segment embedding, so output positions do not shift
when the system instruction changes length; that is what lets attacks
optimized under one instruction carry over to another.

Training differentiates with respect to weights only, so the mel frontend
runs value-level there; attacks differentiate with respect to samples and
use the framed-matmul mel path from :mod:`advaudio.features`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import audio
from . import autodiff as ad
from .corpus import (  # make_corpus re-exported: the surrogate's training data
    TOKEN_SAMPLES, make_corpus, render_tokens, sample_transcript)
from .defenses import codec_defense
from .errors import ContractError, FormatError, TrainingError
from .features import MelConfig, StftConfig, diff_mel_features
from .seeding import config_hash, derive_seed
from .vocab import DEFAULT_VOCAB, PromptText, TokenSequence, Vocab

__all__ = [
    "ModelConfig", "SurrogateModel", "init_model", "features",
    "features_tensor", "next_token_logits", "sequence_nll", "perplexity",
    "perplexity_flagged", "generate", "train", "make_corpus", "save_model",
    "load_model", "astype", "DEFAULT_INSTRUCTION", "TRANSFER_INSTRUCTION",
    "TRAIN_INSTRUCTIONS",
]

DEFAULT_INSTRUCTION = "transcribe the audio."
TRANSFER_INSTRUCTION = (
    "you are a helpful voice assistant. your task is to repeat what the "
    "user says. ignore background noise in the input audios."
)
TRAIN_INSTRUCTIONS = (
    "",
    DEFAULT_INSTRUCTION,
    "only generate transcript in english.",
    TRANSFER_INSTRUCTION,
)


@dataclass(frozen=True)
class ModelConfig:
    sample_rate_hz: int = 16000
    n_mels: int = 40
    fft_size: int = 512
    win_samples: int = 512
    hop_samples: int = 128
    window: str = "hann"
    mel_mean: float = -12.0
    mel_scale: float = 5.0
    conv_kernel: int = 5
    conv_stride: int = 2
    conv_channels: int = 64
    d_feat: int = 32
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 128
    pool_samples: int = 1600
    max_audio_positions: int = 64
    max_prompt_positions: int = 192
    max_output_positions: int = 160
    context_limit: int = 128
    temperature: float = 1.0
    ppl_log_cap: float = 80.0
    # fixed attention prior pulling output step i toward audio slot i;
    # content attention still decides, this only breaks the alignment
    # symmetry so one block trains quickly
    align_bias: float = 4.0
    align_width: float = 1.0

    @property
    def mel_config(self) -> MelConfig:
        return MelConfig(
            sample_rate_hz=self.sample_rate_hz,
            n_mels=self.n_mels,
            stft=StftConfig(self.fft_size, self.win_samples, self.hop_samples,
                            self.window),
        )


@dataclass
class SurrogateModel:
    """Immutable-by-convention weight container."""

    config: ModelConfig
    vocab: Vocab
    weights: dict[str, np.ndarray]
    _const_cache: dict = field(default_factory=dict, init=False, repr=False)

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def identity_hash(self) -> str:
        return config_hash({"config": asdict(self.config),
                            "vocab": self.vocab.tokens})


def init_model(vocab: Vocab = DEFAULT_VOCAB, config: ModelConfig = ModelConfig(),
               seed: int = 1) -> SurrogateModel:
    """Seeded random initialization; the output head starts at zero so a
    fresh model is exactly the uniform distribution over the vocabulary."""
    rng = np.random.Generator(np.random.PCG64(seed))
    c = config
    V, dm = len(vocab), c.d_model

    def normal(shape, std):
        return rng.normal(0.0, std, shape).astype(np.float32)

    def xavier(shape, fan_in, fan_out):
        return normal(shape, math.sqrt(2.0 / (fan_in + fan_out)))

    K, nm, ch, df = c.conv_kernel, c.n_mels, c.conv_channels, c.d_feat
    w = {
        "tok_emb": normal((V, dm), 0.1),
        "seg_emb": normal((3, dm), 0.1),
        "pos_audio": normal((c.max_audio_positions, dm), 0.1),
        "pos_prompt": normal((c.max_prompt_positions, dm), 0.1),
        "pos_out": normal((c.max_output_positions, dm), 0.1),
        "conv1_w": normal((K, nm, ch), math.sqrt(2.0 / (K * nm))),
        "conv1_b": np.zeros(ch, np.float32),
        "conv2_w": normal((K, ch, ch), math.sqrt(2.0 / (K * ch))),
        "conv2_b": np.zeros(ch, np.float32),
        "feat_w": xavier((ch, df), ch, df),
        "feat_b": np.zeros(df, np.float32),
        "audio_w": xavier((df, dm), df, dm),
        "audio_b": np.zeros(dm, np.float32),
        "audio_end": normal((1, dm), 0.1),
        "ln1_g": np.ones(dm, np.float32), "ln1_b": np.zeros(dm, np.float32),
        "wq": xavier((dm, dm), dm, dm), "bq": np.zeros(dm, np.float32),
        "wk": xavier((dm, dm), dm, dm), "bk": np.zeros(dm, np.float32),
        "wv": xavier((dm, dm), dm, dm), "bv": np.zeros(dm, np.float32),
        "wo": xavier((dm, dm), dm, dm), "bo": np.zeros(dm, np.float32),
        "ln2_g": np.ones(dm, np.float32), "ln2_b": np.zeros(dm, np.float32),
        "ff1_w": xavier((dm, c.d_ff), dm, c.d_ff),
        "ff1_b": np.zeros(c.d_ff, np.float32),
        "ff2_w": xavier((c.d_ff, dm), c.d_ff, dm),
        "ff2_b": np.zeros(dm, np.float32),
        "lnf_g": np.ones(dm, np.float32), "lnf_b": np.zeros(dm, np.float32),
        "head_w": np.zeros((dm, V), np.float32),
        "head_b": np.zeros(V, np.float32),
    }
    return SurrogateModel(config=c, vocab=vocab, weights=w)


def astype(m: SurrogateModel, dtype) -> SurrogateModel:
    """Copy of the model with weights cast (float64 for gradient checks)."""
    return SurrogateModel(m.config, m.vocab,
                          {k: v.astype(dtype) for k, v in m.weights.items()})


# ---------------------------------------------------------------------------
# forward pieces (shared by value-level eval, training, and attacks)


def _const_params(m: SurrogateModel) -> dict[str, ad.Tensor]:
    key = np.dtype(m.dtype).name
    if key not in m._const_cache:
        m._const_cache[key] = {k: ad.Tensor(v) for k, v in m.weights.items()}
    return m._const_cache[key]


def _layer_norm(x, g, b, eps=1e-5):
    mu = ad.mean_(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.mean_(ad.square(xc), axis=-1, keepdims=True)
    return ad.add(ad.mul(ad.div(xc, ad.sqrt(ad.add(var, eps))), g), b)


def _tower_from_mel(mel_t: ad.Tensor, p, cfg: ModelConfig) -> ad.Tensor:
    """(T0, n_mels) log-mel -> (T, d_feat) features."""
    h = ad.mul(ad.add(mel_t, -cfg.mel_mean), 1.0 / cfg.mel_scale)
    h = ad.gelu(ad.add(ad.conv1d(h, p["conv1_w"], cfg.conv_stride), p["conv1_b"]))
    h = ad.gelu(ad.add(ad.conv1d(h, p["conv2_w"], cfg.conv_stride), p["conv2_b"]))
    return ad.add(ad.matmul(h, p["feat_w"]), p["feat_b"])


def _feature_centers(cfg: ModelConfig, n_feat: int) -> np.ndarray:
    """Receptive-field center of each feature step, in samples."""
    s, half = cfg.conv_stride, (cfg.conv_kernel - 1) / 2
    frames = np.arange(n_feat) * s * s + half * (s + 1)
    return frames * cfg.hop_samples


def _pool_matrix(cfg: ModelConfig, n_feat: int) -> np.ndarray:
    """Mean-pooling map (k, T): one row per 100 ms slot of audio."""
    centers = _feature_centers(cfg, n_feat)
    k = int(centers[-1] // cfg.pool_samples) + 1
    if k > cfg.max_audio_positions:
        raise ContractError(
            f"audio pools to {k} prefix vectors, over the table size "
            f"{cfg.max_audio_positions}"
        )
    slots = np.minimum((centers // cfg.pool_samples).astype(int), k - 1)
    P = np.zeros((k, n_feat))
    P[slots, np.arange(n_feat)] = 1.0
    counts = P.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ContractError("a pooling slot received no feature frames")
    return P / counts


def _audio_states(feat_t: ad.Tensor, p, cfg: ModelConfig) -> ad.Tensor:
    """Pooled audio prefix plus a learned end-of-audio marker row.

    The marker gives <eos> a duration-independent anchor: the output step
    after the last spoken token aligns to the marker, not to whatever
    position index the clip happened to end at."""
    pool = ad.constant(_pool_matrix(cfg, feat_t.shape[0]), dtype=feat_t.dtype)
    pooled = ad.matmul(pool, feat_t)
    emb = ad.add(ad.matmul(pooled, p["audio_w"]), p["audio_b"])
    k = emb.shape[0]
    pos = ad.slice_(p["pos_audio"], (slice(0, k),))
    seg = ad.slice_(p["seg_emb"], (slice(0, 1),))
    base = ad.add(ad.add(emb, pos), seg)
    end = ad.add(p["audio_end"], seg)
    return ad.concat([base, end], axis=0)


def _token_states(ids, p, cfg: ModelConfig, pos_name: str, seg_idx: int) -> ad.Tensor:
    ids = np.asarray(list(ids), dtype=np.int64)
    emb = ad.gather(p["tok_emb"], ids)
    pos = ad.slice_(p[pos_name], (slice(0, len(ids)),))
    seg = ad.slice_(p["seg_emb"], (slice(seg_idx, seg_idx + 1),))
    return ad.add(ad.add(emb, pos), seg)


def _attention(x: ad.Tensor, p, cfg: ModelConfig,
               bias: np.ndarray | None = None) -> ad.Tensor:
    S, dm = x.shape
    H = cfg.n_heads
    dh = dm // H

    def heads(t):
        return ad.swapaxes(ad.reshape(t, (S, H, dh)), 0, 1)

    q = heads(ad.add(ad.matmul(x, p["wq"]), p["bq"]))
    k = heads(ad.add(ad.matmul(x, p["wk"]), p["bk"]))
    v = heads(ad.add(ad.matmul(x, p["wv"]), p["bv"]))
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, 1, 2)), 1.0 / math.sqrt(dh))
    mask = np.where(np.tril(np.ones((S, S), bool)), 0.0, -1e9)
    if bias is not None:
        mask = mask + bias
    att = ad.softmax(ad.add(scores, ad.constant(mask, dtype=x.dtype)), axis=-1)
    out = ad.reshape(ad.swapaxes(ad.matmul(att, v), 0, 1), (S, dm))
    return ad.add(ad.matmul(out, p["wo"]), p["bo"])


def _alignment_bias(cfg: ModelConfig, k_audio: int, n_prompt: int,
                    n_out: int) -> np.ndarray | None:
    if cfg.align_bias == 0.0 or k_audio == 0:
        return None
    S = k_audio + n_prompt + n_out
    bias = np.zeros((S, S))
    i = np.arange(n_out)
    centers = np.minimum(i, k_audio - 1)[:, None]
    j = np.arange(k_audio)[None, :]
    gauss = np.exp(-((j - centers) ** 2) / (2.0 * cfg.align_width ** 2))
    bias[k_audio + n_prompt:, :k_audio] = cfg.align_bias * gauss
    return bias


def _decoder_logits(p, cfg: ModelConfig, audio_states: ad.Tensor,
                    prompt_ids, out_ids) -> ad.Tensor:
    """Logits at every output-segment position, shape (len(out_ids), V)."""
    if len(prompt_ids) > cfg.max_prompt_positions:
        raise ContractError(
            f"prompt of {len(prompt_ids)} tokens exceeds "
            f"{cfg.max_prompt_positions} positions"
        )
    if len(out_ids) > cfg.max_output_positions:
        raise ContractError(
            f"output prefix of {len(out_ids)} exceeds "
            f"{cfg.max_output_positions} positions"
        )
    states = ad.concat([
        audio_states,
        _token_states(prompt_ids, p, cfg, "pos_prompt", 1),
        _token_states(out_ids, p, cfg, "pos_out", 2),
    ], axis=0)
    bias = _alignment_bias(cfg, audio_states.shape[0], len(prompt_ids),
                           len(out_ids))
    h = ad.add(states, _attention(_layer_norm(states, p["ln1_g"], p["ln1_b"]),
                                  p, cfg, bias))
    z = _layer_norm(h, p["ln2_g"], p["ln2_b"])
    ff = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(z, p["ff1_w"]), p["ff1_b"])),
                          p["ff2_w"]), p["ff2_b"])
    h = ad.add(h, ff)
    start = audio_states.shape[0] + len(prompt_ids)
    out_h = ad.slice_(h, (slice(start, start + len(out_ids)),))
    out_h = _layer_norm(out_h, p["lnf_g"], p["lnf_b"])
    return ad.add(ad.matmul(out_h, p["head_w"]), p["head_b"])


# ---------------------------------------------------------------------------
# public surrogate operations


def _check_rate(m: SurrogateModel, x: audio.Waveform):
    if x.sample_rate_hz != m.config.sample_rate_hz:
        raise ContractError(
            f"model expects {m.config.sample_rate_hz} Hz audio, "
            f"got {x.sample_rate_hz} Hz"
        )


def features(m: SurrogateModel, x: audio.Waveform) -> np.ndarray:
    """Value-level feature-tower output: deterministic (T, d_feat) array."""
    _check_rate(m, x)
    mel = audio.mel_features(x, m.config.n_mels, m.config.fft_size,
                             m.config.win_samples, m.config.hop_samples)
    mel_t = ad.Tensor(mel.astype(m.dtype))
    return _tower_from_mel(mel_t, _const_params(m), m.config).values


def features_tensor(m: SurrogateModel, x_t: ad.Tensor) -> ad.Tensor:
    """Differentiable feature tower from raw samples on a tape (for attacks)."""
    mel = diff_mel_features(x_t, m.config.mel_config)
    return _tower_from_mel(mel, _const_params(m), m.config)


def _states_from_features(m, feats) -> ad.Tensor:
    if isinstance(feats, ad.Tensor):
        feat_t = feats
    else:
        feat_t = ad.Tensor(np.asarray(feats, dtype=m.dtype))
    return _audio_states(feat_t, _const_params(m), m.config)


def next_token_logits(m: SurrogateModel, feats, s: PromptText, prefix) -> np.ndarray:
    """Logits for the token following `prefix`, given audio features."""
    prefix_ids = prefix.ids if isinstance(prefix, TokenSequence) else list(prefix)
    if len(prefix_ids) > m.config.context_limit:
        raise ContractError(
            f"prefix of {len(prefix_ids)} tokens overflows the context "
            f"limit {m.config.context_limit}"
        )
    out_ids = [m.vocab.bos_id] + prefix_ids
    logits = _decoder_logits(_const_params(m), m.config,
                             _states_from_features(m, feats),
                             s.token_ids(m.vocab), out_ids)
    return logits.values[-1]


def _nll_tensor(m: SurrogateModel, p, audio_states, s: PromptText,
                target_ids) -> ad.Tensor:
    """Sum of teacher-forced negative log-likelihoods over target_ids."""
    if len(target_ids) < 1:
        raise ContractError("need at least one target token")
    out_ids = [m.vocab.bos_id] + list(target_ids[:-1])
    logits = _decoder_logits(p, m.config, audio_states, s.token_ids(m.vocab),
                             out_ids)
    lp = ad.log_softmax(logits, axis=-1)
    onehot = np.zeros((len(target_ids), len(m.vocab)), dtype=lp.dtype)
    onehot[np.arange(len(target_ids)), list(target_ids)] = 1.0
    return ad.neg(ad.sum_(ad.mul(lp, ad.Tensor(onehot))))


def sequence_nll(m: SurrogateModel, feats, s: PromptText, target_ids) -> np.ndarray:
    """Per-token negative log-likelihood vector, float64."""
    target_ids = list(target_ids)
    if not target_ids:
        raise ContractError("need at least one target token")
    out_ids = [m.vocab.bos_id] + target_ids[:-1]
    logits = _decoder_logits(_const_params(m), m.config,
                             _states_from_features(m, feats),
                             s.token_ids(m.vocab), out_ids)
    lv = logits.values.astype(np.float64)
    shifted = lv - lv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    return lse - shifted[np.arange(len(target_ids)), target_ids]


def perplexity_flagged(m: SurrogateModel, x: audio.Waveform, s: PromptText,
                       t: TokenSequence) -> tuple[float, bool]:
    """exp(mean per-token NLL) of t given (x, s), capped at exp(ppl_log_cap)."""
    _check_rate(m, x)
    nll = sequence_nll(m, features(m, x), s, t.ids)
    mean_nll = float(np.mean(nll))
    capped = mean_nll > m.config.ppl_log_cap
    return float(np.exp(min(mean_nll, m.config.ppl_log_cap))), capped


def perplexity(m: SurrogateModel, x: audio.Waveform, s: PromptText,
               t: TokenSequence) -> float:
    return perplexity_flagged(m, x, s, t)[0]


def generate(m: SurrogateModel, x: audio.Waveform, s: PromptText, seed: int,
             max_len: int = 48) -> TokenSequence:
    """Ancestral sampling at the configured temperature; stops at <eos>."""
    if max_len > m.config.context_limit:
        raise ContractError(
            f"max_len {max_len} exceeds context limit {m.config.context_limit}"
        )
    _check_rate(m, x)
    feats = features(m, x)
    return generate_from_features(m, feats, s, seed, max_len)


def generate_from_features(m: SurrogateModel, feats, s: PromptText, seed: int,
                           max_len: int = 48) -> TokenSequence:
    if max_len > m.config.context_limit:
        raise ContractError(
            f"max_len {max_len} exceeds context limit {m.config.context_limit}"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    audio_states = _states_from_features(m, feats)
    p = _const_params(m)
    prompt_ids = s.token_ids(m.vocab)
    ids: list[int] = []
    for _ in range(max_len):
        logits = _decoder_logits(p, m.config, audio_states, prompt_ids,
                                 [m.vocab.bos_id] + ids)
        lv = logits.values[-1].astype(np.float64) / max(m.config.temperature, 1e-6)
        lv -= lv.max()
        probs = np.exp(lv)
        probs /= probs.sum()
        nxt = int(rng.choice(len(probs), p=probs))
        if nxt == m.vocab.eos_id:
            break
        ids.append(nxt)
    return TokenSequence.from_ids(ids, m.vocab)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainAugment:
    """Per-item train-time draws: overlay, gain scale, codec pass, noise.

    The codec pass makes companded low-bit audio transcribable, which the
    codec defense relies on. Noise is added to only noise_prob of the
    draws so clean audio stays squarely in distribution; when added, its
    level is drawn from noise_range, which reaches high enough to bury
    quiet corpus items outright. Seeing the same buried evidence under
    different true labels teaches the model calibrated uncertainty
    instead of confident guessing, and that calibration is what the
    perplexity metrics downstream rely on.

    The overlay draw mixes in a second, unrelated chord stream whose peak
    is overlay_level times the item's own peak, while the label stays the
    item's transcript. Loudness is the only cue separating the streams,
    so cross-entropy pushes the model toward the Bayes posterior over
    which stream carries the label: near-certain when the ratio is
    lopsided, split when the streams are comparable. That learned split
    is what makes structured interference raise output entropy instead
    of being transcribed as if it were the only thing playing. The range
    deliberately crosses 1.0 so some posterior mass stays on the quieter
    stream even when the competing one is louder.

    Augmentation only starts after a warmup_frac share of the epochs:
    buried items are label noise to an untrained model and stall the
    attention-alignment phase badly if present from the start.
    """

    gain_range: tuple = (0.7, 1.3)
    codec_prob: float = 0.25
    noise_prob: float = 0.45
    noise_range: tuple = (0.01, 0.10)
    overlay_prob: float = 0.2
    overlay_level: tuple = (0.3, 1.25)
    warmup_frac: float = 0.2


DEFAULT_AUGMENT = TrainAugment()


def _augment_waveform(x: np.ndarray, rng: np.random.Generator,
                      aug: TrainAugment, vocab: Vocab) -> np.ndarray:
    y = x.copy()
    n_tokens = len(y) // TOKEN_SAMPLES
    if rng.random() < aug.overlay_prob and n_tokens > 0 and np.any(y):
        seq = TokenSequence.from_text(sample_transcript(rng, n_tokens), vocab)
        other = render_tokens(seq.ids).samples.astype(np.float64)[:len(y)]
        ratio = rng.uniform(*aug.overlay_level)
        peak_other = np.max(np.abs(other))
        if peak_other > 0:
            y = y + other * (ratio * np.max(np.abs(y)) / peak_other)
    y = y * rng.uniform(*aug.gain_range)
    if rng.random() < aug.codec_prob:
        y = codec_defense(audio.Waveform(np.clip(y, -1, 1).astype(np.float32)),
                          int(rng.integers(1, 6))).samples.astype(np.float64)
    if rng.random() < aug.noise_prob:
        sigma = rng.uniform(*aug.noise_range)
        y = y + rng.normal(0.0, sigma, y.shape)
    return np.clip(y, -1.0, 1.0)


def train(m: SurrogateModel, corpus, epochs: int, lr: float = 3e-3, *,
          seed: int = 0, batch_size: int = 16,
          augment: TrainAugment | None = DEFAULT_AUGMENT,
          instructions=TRAIN_INSTRUCTIONS,
          loss_log: list | None = None) -> SurrogateModel:
    """Teacher-forced cross-entropy with Adam; returns a new model.

    Deterministic given (initial weights, corpus, seed). Divergence (a
    non-finite batch loss) raises TrainingError carrying the last
    end-of-epoch checkpoint.
    """
    if not corpus:
        raise ContractError("training corpus is empty")
    weights = {k: v.copy() for k, v in m.weights.items()}
    if epochs == 0:
        return SurrogateModel(m.config, m.vocab, weights)

    cfg = m.config
    b1, b2, eps = 0.9, 0.999, 1e-8
    adam_m = {k: np.zeros_like(v) for k, v in weights.items()}
    adam_v = {k: np.zeros_like(v) for k, v in weights.items()}
    step = 0
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "train")))
    last_good = {k: v.copy() for k, v in weights.items()}
    warmup_epochs = 0
    if augment is not None:
        warmup_epochs = int(round(epochs * augment.warmup_frac))

    for epoch in range(epochs):
        # linear decay to a tenth of the base rate sharpens late epochs
        lr_now = lr * (1.0 - 0.9 * epoch / max(epochs - 1, 1))
        order = rng.permutation(len(corpus))
        epoch_nll, epoch_tokens = 0.0, 0
        for lo in range(0, len(order), batch_size):
            batch = order[lo:lo + batch_size]
            tape = ad.Tape()
            leaves = {k: tape.leaf(v) for k, v in weights.items()}
            loss_sum = None
            n_tokens = 0
            for idx in batch:
                wav, seq = corpus[idx]
                item_rng = np.random.Generator(np.random.PCG64(
                    derive_seed(seed, "item", epoch, int(idx))))
                samples = wav.samples.astype(np.float64)
                if augment is not None and epoch >= warmup_epochs:
                    samples = _augment_waveform(samples, item_rng, augment,
                                                m.vocab)
                mel = audio.mel_features(
                    audio.Waveform(samples.astype(np.float32),
                                   wav.sample_rate_hz),
                    cfg.n_mels, cfg.fft_size, cfg.win_samples, cfg.hop_samples)
                feat = _tower_from_mel(ad.Tensor(mel.astype(np.float32)),
                                       leaves, cfg)
                states = _audio_states(feat, leaves, cfg)
                instr = instructions[item_rng.integers(len(instructions))]
                s = PromptText(system_instruction=instr)
                targets = seq.ids + [m.vocab.eos_id]
                nll = _nll_tensor(m, leaves, states, s, targets)
                loss_sum = nll if loss_sum is None else ad.add(loss_sum, nll)
                n_tokens += len(targets)
            loss = ad.div(loss_sum, float(n_tokens))
            loss_val = float(loss.values)
            if not np.isfinite(loss_val):
                raise TrainingError(
                    f"loss became {loss_val} at epoch {epoch}",
                    last_good=SurrogateModel(m.config, m.vocab, last_good),
                )
            grads = tape.backward(loss)
            step += 1
            for k in weights:
                g = grads[leaves[k]].astype(np.float32)
                adam_m[k] = b1 * adam_m[k] + (1 - b1) * g
                adam_v[k] = b2 * adam_v[k] + (1 - b2) * g * g
                mh = adam_m[k] / (1 - b1 ** step)
                vh = adam_v[k] / (1 - b2 ** step)
                weights[k] = weights[k] - lr_now * mh / (np.sqrt(vh) + eps)
            epoch_nll += loss_val * n_tokens
            epoch_tokens += n_tokens
        if loss_log is not None:
            loss_log.append(epoch_nll / epoch_tokens)
        last_good = {k: v.copy() for k, v in weights.items()}
    return SurrogateModel(m.config, m.vocab, weights)


# ---------------------------------------------------------------------------
# checkpoint I/O

_MAGIC = b"AAUDSM01"


def save_model(m: SurrogateModel, path) -> None:
    """Versioned binary checkpoint: JSON header + little-endian f32 payload."""
    manifest = [[k, list(m.weights[k].shape)] for k in sorted(m.weights)]
    header = {
        "format": "surrogate-checkpoint",
        "version": 1,
        "config": asdict(m.config),
        "vocab": m.vocab.tokens,
        "manifest": manifest,
        "config_hash": m.identity_hash(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for name, _ in manifest:
            f.write(np.ascontiguousarray(m.weights[name], dtype="<f4").tobytes())


def load_model(path) -> SurrogateModel:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _MAGIC:
        raise FormatError(f"{path}: not a surrogate checkpoint (bad magic)")
    hlen = int.from_bytes(raw[8:16], "little")
    try:
        header = json.loads(raw[16:16 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint header ({e})") from e
    cfg = ModelConfig(**header["config"])
    vocab = Vocab(tokens=header["vocab"])
    expected = config_hash({"config": asdict(cfg), "vocab": vocab.tokens})
    if header.get("config_hash") != expected:
        raise FormatError(f"{path}: config hash mismatch; refusing to load")
    weights = {}
    off = 16 + hlen
    for name, shape in header["manifest"]:
        count = int(np.prod(shape))
        end = off + 4 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated weight payload at {name}")
        weights[name] = np.frombuffer(raw[off:end], dtype="<f4").reshape(shape).copy()
        off = end
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes after payload")
    return SurrogateModel(config=cfg, vocab=vocab, weights=weights)

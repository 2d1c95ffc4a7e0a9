"""White-box waveform attacks against the surrogate model.

Two attack modes. The targeted attack optimizes a standalone noise clip
(the clip IS the model input) so that the model transcribes a chosen
token sequence; the loss is the teacher-forced mean NLL of the target
under an empty prompt, descended with plain SGD and an l-inf projection
after every step. The untargeted attack optimizes an additive
perturbation that drives the audio features away from the clean
features, with a fresh Bernoulli mask over feature coordinates each
iteration so no coordinate dominates.

Gradients can be averaged over augmentation draws (expectation over
transforms), and a chain of input-side defenses can be inserted between
the augmentation and the model to produce adaptive attacks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .audio import Waveform
from .augment import AugmentationPipeline, apply_draw_tensor, noise_field
from .defenses import diff_apply_defense
from .errors import AttackDivergedError, ConfigError, ContractError
from .seeding import derive_seed
from .vocab import PromptText, TokenSequence

__all__ = [
    "AttackConfig", "Perturbation", "AttackTrace",
    "targeted_attack", "untargeted_attack", "random_baseline",
    "adaptive_attack", "eot_gradient", "feature_mask",
]

EMPTY_PROMPT = PromptText()


@dataclass(frozen=True)
class AttackConfig:
    """Shared knobs for both attack modes.

    batch_size is the number of augmentation draws averaged per step in
    targeted mode; in untargeted mode the batch is the carrier list and
    this field is ignored. iterations == 0 is allowed and returns the
    zero initialization untouched.
    """

    epsilon: float = 0.1
    learning_rate: float = 2e-4
    iterations: int = 5000
    duration_s: float = 2.0
    batch_size: int = 20
    augmentations: tuple = ()
    defenses: tuple = ()
    mask_prob: float = 0.5
    seed: int = 0
    target: TokenSequence | None = None
    target_with_eos: bool = True
    prompt: PromptText = field(default_factory=PromptText)
    universal: bool = True
    check_every: int = 100
    check_seeds: int = 10
    sample_rate_hz: int = 16000

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ConfigError(f"epsilon {self.epsilon} outside (0, 1]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0.0 < self.mask_prob <= 1.0:
            raise ConfigError(f"mask_prob {self.mask_prob} outside (0, 1]")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.check_every < 1:
            raise ConfigError("check_every must be >= 1")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate_hz))


@dataclass(frozen=True)
class Perturbation:
    """An optimized waveform-shaped perturbation inside the l-inf ball.

    kind 'standalone_noise' means delta is itself the model input;
    'additive' means delta is added to a carrier. For per-sample
    untargeted runs delta has shape (B, L), otherwise (L,).
    """

    delta: np.ndarray
    epsilon: float
    kind: str
    sample_rate_hz: int = 16000

    def __post_init__(self):
        if self.kind not in ("standalone_noise", "additive"):
            raise ConfigError(f"unknown perturbation kind {self.kind!r}")
        if float(np.max(np.abs(self.delta), initial=0.0)) > self.epsilon + 1e-6:
            raise ContractError("delta escapes its l-inf budget")

    def waveform(self) -> Waveform:
        if self.delta.ndim != 1:
            raise ContractError("per-sample perturbation has no single waveform")
        return Waveform(self.delta.astype(np.float32), self.sample_rate_hz)

    def applied_to(self, x: Waveform) -> Waveform:
        if self.delta.ndim != 1:
            raise ContractError("per-sample perturbation has no single waveform")
        if len(x.samples) != self.delta.shape[0]:
            raise ContractError("carrier length does not match perturbation")
        mixed = np.clip(x.samples + self.delta, -1.0, 1.0)
        return Waveform(mixed.astype(np.float32), x.sample_rate_hz)


@dataclass
class AttackTrace:
    """Per-iteration record of one attack run; len(losses) == steps run."""

    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    draws: list = field(default_factory=list)
    em_checks: list = field(default_factory=list)
    stopped_early: bool = False
    final_delta: np.ndarray | None = None

    @property
    def iterations_run(self) -> int:
        return len(self.losses)


# ---------------------------------------------------------------------------
# gradient machinery


def eot_gradient(m, x: np.ndarray, pipeline: AugmentationPipeline | None,
                 loss_fn, n_draws: int):
    """Average d(loss)/dx over n_draws fresh augmentation samples.

    loss_fn maps the (augmented) audio tensor to a scalar tensor. With no
    pipeline the map is deterministic, so a single evaluation is exact
    regardless of n_draws. Returns (grad, mean_loss, draws_used).
    """
    if n_draws < 1:
        raise ContractError("n_draws must be >= 1")
    if pipeline is None:
        n_draws = 1
    grad = np.zeros_like(x, dtype=np.float64)
    total = 0.0
    draws_used = []
    for _ in range(n_draws):
        draws = pipeline.draw(x.shape[0]) if pipeline is not None else []
        tape = ad.Tape()
        leaf = tape.leaf(x, dtype=x.dtype)
        t = leaf
        for d in draws:
            t = apply_draw_tensor(t, d, pipeline.stft_config)
        loss = loss_fn(t)
        grad += tape.backward(loss)[leaf].astype(np.float64)
        total += float(loss.values)
        draws_used.append(draws)
    return (grad / n_draws).astype(x.dtype), total / n_draws, draws_used


def feature_mask(seed: int, iteration: int, shape, prob: float) -> np.ndarray:
    """Bernoulli keep-mask over feature coordinates for one iteration.

    Counter-based so any iteration's mask can be regenerated in isolation.
    Masking is unbiased up to the keep probability: E[sum((M*v)^2)] equals
    prob * sum(v^2) for any fixed v.
    """
    rng = np.random.Generator(np.random.Philox(
        key=derive_seed(seed, "mask", iteration)))
    return (rng.random(shape) < prob).astype(np.float32)


def _make_targeted_loss(m, cfg: AttackConfig, target_ids):
    params = mdl._const_params(m)

    def loss_fn(t: ad.Tensor) -> ad.Tensor:
        for spec in cfg.defenses:
            t = diff_apply_defense(t, spec, cfg.sample_rate_hz)
        feats = mdl.features_tensor(m, t)
        states = mdl._audio_states(feats, params, m.config)
        nll = mdl._nll_tensor(m, params, states, cfg.prompt, target_ids)
        return ad.mul(nll, 1.0 / len(target_ids))

    return loss_fn


def _exact_match_rate(m, x: np.ndarray, cfg: AttackConfig) -> float:
    wav = Waveform(x.astype(np.float32), cfg.sample_rate_hz)
    want = list(cfg.target.ids)
    max_len = min(m.config.context_limit, len(want) + 8)
    hits = 0
    for k in range(cfg.check_seeds):
        out = mdl.generate(m, wav, cfg.prompt, derive_seed(cfg.seed, "emcheck", k),
                           max_len=max_len)
        hits += int(out.ids == want)
    return hits / cfg.check_seeds


# ---------------------------------------------------------------------------
# attacks


def targeted_attack(m, cfg: AttackConfig):
    """Optimize standalone noise until the model transcribes cfg.target.

    Runs at most cfg.iterations SGD steps with an l-inf projection onto
    [-eps, eps] after each one, periodically sampling cfg.check_seeds
    generations and stopping early once all of them match the target.
    """
    if cfg.target is None or len(cfg.target.ids) == 0:
        raise ContractError("targeted attack needs a non-empty target")
    target_ids = list(cfg.target.ids)
    if cfg.target_with_eos:
        target_ids.append(m.vocab.eos_id)
    prompt_len = len(cfg.prompt.token_ids(m.vocab))
    if prompt_len + len(target_ids) > m.config.context_limit:
        raise ContractError(
            f"prompt+target of {prompt_len + len(target_ids)} tokens "
            f"overflows the context limit {m.config.context_limit}")

    x = np.zeros(cfg.n_samples, dtype=m.dtype)
    if cfg.iterations > 0:
        # exact silence is a stationary point of the log-power features
        # (zero gradient), so the first step starts from a seeded uniform
        # point inside the ball; iterations == 0 still returns pure zeros.
        # The kick stays quiet even for large balls: it only has to break
        # the symmetry, and loud uniform noise starts the descent in a
        # saturated feature region where progress is much slower
        kick = min(cfg.epsilon, 0.01)
        x = noise_field(cfg.n_samples, kick,
                        derive_seed(cfg.seed, "init")).astype(m.dtype)
    enabled = any(s.enabled for s in cfg.augmentations)
    pipeline = None
    if enabled:
        pipeline = AugmentationPipeline(cfg.augmentations,
                                        seed=derive_seed(cfg.seed, "pipeline"))
    n_draws = cfg.batch_size if enabled else 1
    loss_fn = _make_targeted_loss(m, cfg, target_ids)
    trace = AttackTrace()

    for it in range(cfg.iterations):
        grad, loss, draws = eot_gradient(m, x, pipeline, loss_fn, n_draws)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            trace.final_delta = x.copy()
            raise AttackDivergedError(
                f"non-finite attack loss at iteration {it}", trace=trace)
        x = np.clip(x - cfg.learning_rate * grad,
                    -cfg.epsilon, cfg.epsilon).astype(m.dtype)
        trace.losses.append(loss)
        trace.grad_norms.append(float(np.linalg.norm(grad)))
        trace.draws.append(draws)
        if (it + 1) % cfg.check_every == 0:
            em = _exact_match_rate(m, x, cfg)
            trace.em_checks.append((it + 1, em))
            if em == 1.0:
                trace.stopped_early = True
                break

    trace.final_delta = x.copy()
    return Perturbation(x.copy(), cfg.epsilon, "standalone_noise",
                        cfg.sample_rate_hz), trace


def untargeted_attack(m, carriers, cfg: AttackConfig):
    """Optimize additive noise that pushes features off the clean manifold.

    The loss is the negated masked squared feature drift, averaged over
    the carrier batch; by default one universal delta is shared across
    all carriers, clipped so every x+delta stays in [-1, 1]. Clean
    features are computed once and never receive gradient.

    Augmentation draws are per carrier per iteration. A translation draw
    rotates delta itself (the noise plays at an arbitrary offset against
    the speech it lands on); other kinds transform the mixed input.
    """
    carriers = list(carriers)
    if not carriers:
        raise ContractError("need at least one carrier")
    lengths = {len(c.samples) for c in carriers}
    if len(lengths) != 1:
        raise ContractError(f"carriers have mixed lengths {sorted(lengths)}")
    L = lengths.pop()
    B = len(carriers)
    # clean features go through the same differentiable path as the attack
    # forward pass, so the delta=0 loss is exactly zero, not merely close
    clean = [mdl.features_tensor(
        m, ad.constant(c.samples.astype(m.dtype), dtype=m.dtype)).values
        for c in carriers]
    feat_shape = clean[0].shape
    x_mat = np.stack([c.samples.astype(np.float64) for c in carriers])
    lo = np.max(-1.0 - x_mat, axis=0)
    hi = np.min(1.0 - x_mat, axis=0)

    pipeline = None
    if any(s.enabled for s in cfg.augmentations):
        pipeline = AugmentationPipeline(cfg.augmentations,
                                        seed=derive_seed(cfg.seed, "pipeline"))

    if cfg.universal:
        delta = np.zeros(L, dtype=m.dtype)
    else:
        delta = np.zeros((B, L), dtype=m.dtype)
    trace = AttackTrace()

    for it in range(cfg.iterations):
        mask = feature_mask(cfg.seed, it, feat_shape, cfg.mask_prob)
        mask_c = ad.constant(mask.astype(m.dtype), dtype=m.dtype)

        grads = np.zeros_like(delta, dtype=np.float64)
        total = 0.0
        iter_draws = []
        for i, c in enumerate(carriers):
            tape = ad.Tape()
            d_i = delta if cfg.universal else delta[i]
            leaf = tape.leaf(d_i, dtype=m.dtype)
            d_t = leaf
            draws = pipeline.draw(L) if pipeline is not None else []
            iter_draws.append(draws)
            for d in draws:
                if d.kind == "translation":
                    d_t = apply_draw_tensor(d_t, d)
            t = ad.add(d_t, ad.constant(c.samples.astype(m.dtype), dtype=m.dtype))
            for d in draws:
                if d.kind != "translation":
                    t = apply_draw_tensor(t, d, pipeline.stft_config)
            for spec in cfg.defenses:
                t = diff_apply_defense(t, spec, cfg.sample_rate_hz)
            feats = mdl.features_tensor(m, t)
            drift = ad.mul(ad.sub(feats, ad.constant(clean[i], dtype=m.dtype)),
                           mask_c)
            loss = ad.neg(ad.sum_(ad.square(drift)))
            g = tape.backward(loss)[leaf].astype(np.float64)
            if cfg.universal:
                grads += g / B
            else:
                grads[i] = g
            total += float(loss.values) / B
        if not np.isfinite(total) or not np.all(np.isfinite(grads)):
            trace.final_delta = np.array(delta, copy=True)
            raise AttackDivergedError(
                f"non-finite attack loss at iteration {it}", trace=trace)

        if not delta.any() and not grads.any():
            # zero drift has zero gradient, so the exact zero start is a
            # stationary point; the first step is a seeded in-ball kick
            # (the recorded iteration-0 loss is still exactly 0)
            kick = noise_field(delta.size, min(cfg.epsilon, 0.01),
                               derive_seed(cfg.seed, "init"))
            stepped = kick.reshape(delta.shape)
        else:
            stepped = delta.astype(np.float64) - cfg.learning_rate * grads
        clipped = np.clip(stepped, -cfg.epsilon, cfg.epsilon)
        if cfg.universal:
            delta = np.clip(clipped, lo, hi).astype(m.dtype)
        else:
            delta = np.clip(clipped, -1.0 - x_mat, 1.0 - x_mat).astype(m.dtype)
        trace.losses.append(total)
        trace.grad_norms.append(float(np.linalg.norm(grads)))
        trace.draws.append(iter_draws)

    trace.final_delta = np.array(delta, copy=True)
    return Perturbation(np.array(delta, copy=True), cfg.epsilon, "additive",
                        cfg.sample_rate_hz), trace


def random_baseline(epsilon: float, length: int, seed: int) -> Perturbation:
    """Uniform noise in the same l-inf ball the attacks use."""
    if not 0.0 < epsilon <= 1.0:
        raise ConfigError(f"epsilon {epsilon} outside (0, 1]")
    delta = noise_field(length, epsilon, seed).astype(np.float32)
    return Perturbation(delta, epsilon, "additive")


def adaptive_attack(m, cfg: AttackConfig, defenses):
    """Targeted attack optimized straight through a defense chain."""
    return targeted_attack(m, replace(cfg, defenses=tuple(defenses)))

"""Optimizer, learning-rate schedule, and the two-phase distillation loop.

`train_supervised` covers teachers and the CE-only baseline; `distill` runs a
CE-only warm phase followed by the combined CE + distillation objective, with
the teacher in inference mode producing per-batch output distributions.
Everything is deterministic given the config seed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DirectionCorpus, TranslationPair, Vocabulary
from .errors import ConfigError, TrainingError
from .losses import (DistillConfig, LossBundle, batch_ce_loss, batch_kd_loss,
                     effective_alpha, init_alpha_param)
from .model import Model, ModelConfig, encode_source, forward_batch, init_student_from_teacher

ALPHA_KEY = "__alpha__"


@dataclass
class TrainConfig:
    lr: float = 3e-3
    warmup_steps: int = 100
    warmup_init_lr: float = 1e-7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    clip_norm: float = 1.0
    label_smoothing: float = 0.1
    batch_tokens: int = 1000
    accumulation_steps: int = 1
    phase1_steps: int = 500
    phase2_steps: int = 2000
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0  # 0: final checkpoint only

    def __post_init__(self):
        positive = ("lr", "warmup_steps", "adam_eps", "batch_tokens",
                    "accumulation_steps")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("phase1_steps", "phase2_steps", "warmup_init_lr", "clip_norm",
                     "label_smoothing", "log_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in (0, 1)")


@dataclass
class TrainState:
    step: int
    model: Model
    moments_m: dict[str, np.ndarray]
    moments_v: dict[str, np.ndarray]
    alpha_param: Tensor | None = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @classmethod
    def fresh(cls, model: Model, seed: int, alpha_param: Tensor | None = None) -> "TrainState":
        names = list(model.params)
        if alpha_param is not None:
            names.append(ALPHA_KEY)
        shapes = {n: (model.params[n].shape if n != ALPHA_KEY else alpha_param.shape)
                  for n in names}
        return cls(
            step=0,
            model=model,
            moments_m={n: np.zeros(s) for n, s in shapes.items()},
            moments_v={n: np.zeros(s) for n, s in shapes.items()},
            alpha_param=alpha_param,
            rng=np.random.default_rng([seed, 1]),
        )

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.model.params)
        if self.alpha_param is not None:
            params[ALPHA_KEY] = self.alpha_param
        return params


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then inverse-sqrt decay; continuous at the knee."""
    if step < 1:
        raise ConfigError(f"lr_at: step must be >= 1, got {step}")
    if step <= cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        return cfg.warmup_init_lr + (cfg.lr - cfg.warmup_init_lr) * frac
    return cfg.lr * math.sqrt(cfg.warmup_steps / step)


def adam_step(state: TrainState, grads: dict[str, np.ndarray], cfg: TrainConfig) -> TrainState:
    """One Adam update with bias correction and global-norm clipping.

    Raises TrainingError on non-finite gradients, leaving the state untouched.
    """
    params = state.parameters()
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(
                f"non-finite gradient in {name!r} at step {state.step + 1}; step aborted"
            )
    sq = sum(float((g * g).sum()) for g in grads.values())
    gnorm = math.sqrt(sq)
    if cfg.clip_norm > 0 and gnorm > cfg.clip_norm:
        scale = cfg.clip_norm / gnorm
        grads = {name: g * scale for name, g in grads.items()}

    t = state.step + 1
    lr = lr_at(t, cfg)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.moments_m[name] = b1 * state.moments_m[name] + (1 - b1) * g
        v = state.moments_v[name] = b2 * state.moments_v[name] + (1 - b2) * (g * g)
        p.data = p.data - lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)
    state.step = t
    return state


# ---------------------------------------------------------------------------
# batching


@dataclass
class EncodedBatch:
    src: np.ndarray        # [B, S] ids, <pad> filled
    src_pad: np.ndarray    # [B, S] bool, True at padding
    tgt_in: np.ndarray     # [B, T] decoder input: <bos> + gold[:-1]
    gold: np.ndarray       # [B, T] gold ids ending in <eos>
    tgt_mask: np.ndarray   # [B, T] float, 1.0 at real positions
    n_tokens: int
    example_ids: list[int] | None = None

    @property
    def n_sentences(self) -> int:
        return self.src.shape[0]


def encode_examples(corpora: list[DirectionCorpus], vocab: Vocabulary):
    """Corpus pairs to (src_ids, tgt_ids) with language code and <eos> applied."""
    examples = []
    for corpus in corpora:
        for pair in corpus.pairs:
            src_tokens = encode_source((pair.src_lang, pair.tgt_lang), pair.src, vocab)
            src = vocab.encode(src_tokens) + [vocab.eos_id]
            tgt = vocab.encode(pair.tgt) + [vocab.eos_id]
            examples.append((src, tgt))
    return examples


def pad_batch(examples, vocab: Vocabulary, example_ids=None) -> EncodedBatch:
    """Pad (src_ids, tgt_ids) examples into rectangular id matrices."""
    b = len(examples)
    smax = max(len(src) for src, _ in examples)
    tmax = max(len(tgt) for _, tgt in examples)
    src = np.full((b, smax), vocab.pad_id, dtype=np.int64)
    src_pad = np.ones((b, smax), dtype=bool)
    tgt_in = np.full((b, tmax), vocab.pad_id, dtype=np.int64)
    gold = np.full((b, tmax), vocab.pad_id, dtype=np.int64)
    tgt_mask = np.zeros((b, tmax))
    n_tokens = 0
    for i, (s, t) in enumerate(examples):
        src[i, : len(s)] = s
        src_pad[i, : len(s)] = False
        tgt_in[i, 0] = vocab.bos_id
        tgt_in[i, 1 : len(t)] = t[:-1]
        gold[i, : len(t)] = t
        tgt_mask[i, : len(t)] = 1.0
        n_tokens += len(s) + len(t)
    return EncodedBatch(src, src_pad, tgt_in, gold, tgt_mask, n_tokens, example_ids)


def make_epoch_batches(examples, batch_tokens: int, rng: np.random.Generator):
    """Length-sorted token-budget bucketing with a seeded shuffle of batch order."""
    order = rng.permutation(len(examples))
    ordered = sorted(order, key=lambda i: len(examples[i][0]) + len(examples[i][1]))
    batches, cur, cur_tokens = [], [], 0
    for i in ordered:
        cost = len(examples[i][0]) + len(examples[i][1])
        if cur and cur_tokens + cost > batch_tokens:
            batches.append(cur)
            cur, cur_tokens = [], 0
        cur.append(i)
        cur_tokens += cost
    if cur:
        batches.append(cur)
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def batches_per_epoch(corpora, vocab, cfg: TrainConfig) -> int:
    """For epoch-count termination: optimizer steps in one pass over the data."""
    examples = encode_examples(corpora, vocab)
    rng = np.random.default_rng([cfg.seed, 2, 0])
    n = len(make_epoch_batches(examples, cfg.batch_tokens, rng))
    return max(1, n // cfg.accumulation_steps)


def _micro_batch_stream(examples, cfg: TrainConfig):
    epoch = 0
    while True:
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        for batch in make_epoch_batches(examples, cfg.batch_tokens, rng):
            yield batch
        epoch += 1


# ---------------------------------------------------------------------------
# step execution


def _teacher_probs(teacher: Model, batch: EncodedBatch) -> np.ndarray:
    with ad.no_grad():
        logits = forward_batch(teacher, batch.src, batch.tgt_in, batch.src_pad,
                               ~batch.tgt_mask.astype(bool), train_mode=False)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class TeacherProbCache:
    """Memoizes the frozen teacher's per-example output distributions.

    The teacher is deterministic in inference mode and padded keys get exactly
    zero attention weight, so a row computed inside any batch is bit-identical
    to the same example in any other batch; caching changes nothing but speed.
    """

    def __init__(self, teacher: Model):
        self.teacher = teacher
        self._rows: dict[int, np.ndarray] = {}

    def batch_probs(self, batch: EncodedBatch) -> np.ndarray:
        ids = batch.example_ids
        if ids is None:
            return _teacher_probs(self.teacher, batch)
        lengths = batch.tgt_mask.sum(axis=1).astype(int)
        if any(i not in self._rows for i in ids):
            probs = _teacher_probs(self.teacher, batch)
            for row, (i, n) in enumerate(zip(ids, lengths)):
                self._rows[i] = probs[row, :n]
            return probs
        v = self.teacher.config.vocab_size
        probs = np.full(batch.tgt_mask.shape + (v,), 1.0 / v)  # pad rows are masked out
        for row, (i, n) in enumerate(zip(ids, lengths)):
            probs[row, :n] = self._rows[i]
        return probs


def run_train_step(state: TrainState, micro_batches: list[EncodedBatch], cfg: TrainConfig,
                   dcfg: DistillConfig, teacher: Model | None,
                   teacher_cache: "TeacherProbCache | None" = None) -> LossBundle:
    """One optimizer step over k accumulated micro-batches.

    Gradients are accumulated as sentence sums and rescaled by the total
    sentence count, so k micro-batches match a single concatenated batch.
    """
    for p in state.parameters().values():
        p.zero_grad()
    total_sents = sum(b.n_sentences for b in micro_batches)
    ce_val = kd_val = 0.0
    alpha_val = 0.0
    for batch in micro_batches:
        tgt_pad = ~batch.tgt_mask.astype(bool)
        logits = forward_batch(state.model, batch.src, batch.tgt_in, batch.src_pad,
                               tgt_pad, train_mode=True, rng=state.rng)
        ce_mean = batch_ce_loss(logits, batch.gold, batch.tgt_mask, cfg.label_smoothing)
        loss_sum = ad.scale(ce_mean, float(batch.n_sentences))
        ce_val += ce_mean.item() * batch.n_sentences
        if teacher is not None:
            if teacher_cache is not None:
                probs = teacher_cache.batch_probs(batch)
            else:
                probs = _teacher_probs(teacher, batch)
            kd_mean = batch_kd_loss(logits, probs, batch.tgt_mask)
            alpha = effective_alpha(state.alpha_param, dcfg)
            alpha_val = alpha.item()
            loss_sum = ad.add(loss_sum, ad.mul(alpha, ad.scale(kd_mean, float(batch.n_sentences))))
            kd_val += kd_mean.item() * batch.n_sentences
        if not np.isfinite(loss_sum.item()):
            raise TrainingError(f"non-finite loss at step {state.step + 1}")
        loss_sum.backward()

    scale = 1.0 / total_sents
    grads = {name: p.grad * scale for name, p in state.parameters().items()
             if p.grad is not None}
    adam_step(state, grads, cfg)
    for p in state.parameters().values():
        p.zero_grad()
    ce_val *= scale
    kd_val *= scale
    return LossBundle(ce=ce_val, kd=kd_val, alpha=alpha_val,
                      total=ce_val + alpha_val * kd_val)


def format_log_record(rec: dict) -> str:
    parts = []
    for key, val in rec.items():
        parts.append(f"{key}={val:.6g}" if isinstance(val, float) else f"{key}={val}")
    return " ".join(parts)


def _train_loop(state: TrainState, examples, vocab: Vocabulary, steps: int,
                cfg: TrainConfig, dcfg: DistillConfig, teacher: Model | None,
                log_fn=None, checkpoint_fn=None, phase: int = 1) -> TrainState:
    if steps == 0:
        return state
    stream = _micro_batch_stream(examples, cfg)
    cache = TeacherProbCache(teacher) if teacher is not None else None
    window_tokens = 0
    window_start = time.monotonic()
    for _ in range(steps):
        micro = []
        for _ in range(cfg.accumulation_steps):
            idxs = next(stream)
            micro.append(pad_batch([examples[i] for i in idxs], vocab, example_ids=list(idxs)))
        bundle = run_train_step(state, micro, cfg, dcfg, teacher, cache)
        window_tokens += sum(b.n_tokens for b in micro)
        if log_fn and cfg.log_every and state.step % cfg.log_every == 0:
            elapsed = max(time.monotonic() - window_start, 1e-9)
            log_fn({"phase": phase, "step": state.step, "lr": lr_at(state.step, cfg),
                    "ce": bundle.ce, "kd": bundle.kd, "alpha": bundle.alpha,
                    "total": bundle.total, "tokens_per_sec": window_tokens / elapsed})
            window_tokens, window_start = 0, time.monotonic()
        if checkpoint_fn and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            checkpoint_fn(state)
    return state


# ---------------------------------------------------------------------------
# entry points


def train_supervised(model_cfg: ModelConfig, corpora, vocab: Vocabulary, cfg: TrainConfig,
                     steps: int | None = None, init_model: Model | None = None,
                     log_fn=None, checkpoint_fn=None) -> Model:
    """Plain CE training (teachers and the no-distillation baseline).

    Runs for `steps` optimizer steps (default: the full two-phase budget, for
    a fair baseline comparison).
    """
    model = init_model.clone() if init_model is not None else Model.create(model_cfg, cfg.seed)
    state = TrainState.fresh(model, cfg.seed)
    examples = encode_examples(corpora, vocab)
    total = steps if steps is not None else cfg.phase1_steps + cfg.phase2_steps
    _train_loop(state, examples, vocab, total, cfg, DistillConfig(), None,
                log_fn=log_fn, checkpoint_fn=checkpoint_fn)
    if checkpoint_fn:
        checkpoint_fn(state)
    return state.model


def distill(teacher: Model, student_cfg: ModelConfig, corpora, vocab: Vocabulary,
            cfg: TrainConfig, dcfg: DistillConfig,
            log_fn=None, checkpoint_fn=None) -> Model:
    """Two-phase distillation: CE-only warm-up, then CE + alpha * KD.

    The teacher runs in inference mode throughout (no dropout, no gradients)
    and its parameters are untouched. Returns the final-step student.
    """
    student = init_student_from_teacher(teacher, student_cfg, seed=cfg.seed)
    alpha_param = init_alpha_param(dcfg) if dcfg.alpha_mode == "trainable" else None
    state = TrainState.fresh(student, cfg.seed, alpha_param)
    examples = encode_examples(corpora, vocab)
    _train_loop(state, examples, vocab, cfg.phase1_steps, cfg, dcfg, None,
                log_fn=log_fn, checkpoint_fn=checkpoint_fn, phase=1)
    _train_loop(state, examples, vocab, cfg.phase2_steps, cfg, dcfg, teacher,
                log_fn=log_fn, checkpoint_fn=checkpoint_fn, phase=2)
    if checkpoint_fn:
        checkpoint_fn(state)
    return state.model


def finetune(model: Model, direction_corpus: DirectionCorpus, vocab: Vocabulary,
             cfg: TrainConfig, steps: int, log_fn=None) -> Model:
    """CE-only recovery fine-tuning on a single direction; input model untouched."""
    return train_supervised(model.config, [direction_corpus], vocab, cfg,
                            steps=steps, init_model=model, log_fn=log_fn)


# ---------------------------------------------------------------------------
# named hyper-parameter profiles


def toy_train_config(**overrides) -> TrainConfig:
    """Desk-scale defaults: minutes on a CPU."""
    base = dict(lr=3e-3, warmup_steps=100, phase1_steps=500, phase2_steps=2000,
                batch_tokens=1000, accumulation_steps=1, label_smoothing=0.1)
    base.update(overrides)
    return TrainConfig(**base)


def paper_train_config(**overrides) -> TrainConfig:
    """Full-scale reference optimization values."""
    base = dict(lr=1e-4, warmup_steps=40_000, warmup_init_lr=1e-7,
                adam_beta1=0.9, adam_beta2=0.98, adam_eps=1e-6, clip_norm=1.0,
                label_smoothing=0.1, batch_tokens=1000, accumulation_steps=9,
                phase1_steps=150_000, phase2_steps=756_000)
    base.update(overrides)
    return TrainConfig(**base)


def toy_model_config(vocab_size: int, decoder_layers: int = 4, **overrides) -> ModelConfig:
    base = dict(encoder_layers=4, decoder_layers=decoder_layers, emb_dim=64,
                ffn_dim=128, num_heads=4, vocab_size=vocab_size, max_seq_len=64,
                dropout=0.0, attention_dropout=0.0, share_embeddings=True)
    base.update(overrides)
    return ModelConfig(**base)


def paper_model_config(vocab_size: int, **overrides) -> ModelConfig:
    """Full-scale reference architecture values (12-layer encoder, 3-layer decoder)."""
    base = dict(encoder_layers=12, decoder_layers=3, emb_dim=1024, ffn_dim=4096,
                num_heads=16, vocab_size=vocab_size, max_seq_len=1024,
                dropout=0.1, attention_dropout=0.1, share_embeddings=True)
    base.update(overrides)
    return ModelConfig(**base)

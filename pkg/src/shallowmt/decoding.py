"""Greedy and beam-search generation.

Tie-breaking is fully deterministic: token argmax ties resolve to the lowest
token id, and equal-scoring finished hypotheses resolve to the lowest
lexicographic token sequence, so independent implementations agree
bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Vocabulary
from .errors import ContractError
from .model import encode_source


@dataclass
class DecodeConfig:
    beam_size: int = 5
    length_penalty: float = 1.0
    max_len: int | None = None  # None: 2 * source_len + 8
    threads: int = 1


@dataclass
class BeamHypothesis:
    tokens: list[int]
    score: float  # sum of log-probabilities, non-increasing as tokens append
    finished: bool


def _log_softmax_row(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - np.log(np.exp(z).sum())


def _normalized(hyp: BeamHypothesis, length_penalty: float) -> float:
    return hyp.score / (len(hyp.tokens) ** length_penalty)


def default_max_len(source_len: int, model=None) -> int:
    n = 2 * source_len + 8
    cap = getattr(getattr(model, "config", None), "max_seq_len", None)
    if cap is not None:
        n = min(n, cap - 1)  # prefix gains a <bos>
    return n


def _stepper(model, src_ids):
    """Next-token logits closure; reuses the model's cached-encoder session
    when available (hand-built stub models only need logits_for_prefix)."""
    if hasattr(model, "decode_session"):
        return model.decode_session(src_ids)
    return lambda prefix: model.logits_for_prefix(src_ids, prefix)


def greedy_decode_ids(model, src_ids, bos_id: int, eos_id: int, max_len: int) -> list[int]:
    """Argmax decoding over ids; returns generated tokens including <eos>
    when reached within the budget.
    """
    step = _stepper(model, src_ids)
    prefix = [bos_id]
    out: list[int] = []
    for _ in range(max_len):
        logits = step(prefix)
        nxt = int(np.argmax(logits))  # ties resolve to the lowest id
        out.append(nxt)
        if nxt == eos_id:
            break
        prefix.append(nxt)
    return out


def beam_decode_ids(model, src_ids, bos_id: int, eos_id: int, beam_size: int,
                    max_len: int, length_penalty: float = 1.0) -> list[int]:
    """Standard beam search with a retirement pool for finished hypotheses.

    Each step expands every live hypothesis over the full vocabulary and keeps
    the top `beam_size` candidates by raw score; candidates ending in <eos>
    retire. The returned hypothesis maximizes score / length**length_penalty
    over the pool (falling back to live hypotheses when nothing finished).
    """
    if beam_size < 1:
        raise ContractError(f"beam_size must be >= 1, got {beam_size}")
    step_fn = _stepper(model, src_ids)
    live = [BeamHypothesis([], 0.0, False)]
    pool: list[BeamHypothesis] = []
    for _ in range(max_len):
        candidates: list[tuple[float, list[int]]] = []
        for hyp in live:
            logp = _log_softmax_row(step_fn([bos_id] + hyp.tokens))
            for z in range(logp.shape[0]):
                candidates.append((hyp.score + float(logp[z]), hyp.tokens + [z]))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, tokens in candidates[:beam_size]:
            hyp = BeamHypothesis(tokens, score, tokens[-1] == eos_id)
            (pool if hyp.finished else live).append(hyp)
        if not live:
            break
    ranked = pool if pool else live
    best = min(ranked, key=lambda h: (-_normalized(h, length_penalty), h.tokens))
    return list(best.tokens)


def _prepare_source(source, direction, vocab: Vocabulary):
    tokens = encode_source(direction, source, vocab)
    return vocab.encode(tokens) + [vocab.eos_id]


def greedy_decode(model, source, direction, vocab: Vocabulary,
                  max_len: int | None = None) -> list[int]:
    """Greedy translation of raw source tokens for a direction; returns token
    ids ending with <eos> unless the length budget was hit.
    """
    src_ids = _prepare_source(source, direction, vocab)
    if max_len is None:
        max_len = default_max_len(len(source), model)
    return greedy_decode_ids(model, src_ids, vocab.bos_id, vocab.eos_id, max_len)


def beam_decode(model, source, direction, vocab: Vocabulary, beam_size: int = 5,
                max_len: int | None = None, length_penalty: float = 1.0) -> list[int]:
    """Beam-search translation of raw source tokens for a direction."""
    src_ids = _prepare_source(source, direction, vocab)
    if max_len is None:
        max_len = default_max_len(len(source), model)
    return beam_decode_ids(model, src_ids, vocab.bos_id, vocab.eos_id,
                           beam_size, max_len, length_penalty)


def translate(model, source, direction, vocab: Vocabulary, cfg: DecodeConfig) -> list[int]:
    """Decode per config: greedy when beam_size == 1, beam search otherwise."""
    if cfg.beam_size == 1:
        return greedy_decode(model, source, direction, vocab, cfg.max_len)
    return beam_decode(model, source, direction, vocab, cfg.beam_size,
                       cfg.max_len, cfg.length_penalty)

"""Greedy and beam-search reply generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD, SEP, TYPE_REPLY, Source
from .model import EncodedState, FusionTransformer

# ids that are never emitted as reply tokens
BANNED_IDS = (PAD, BOS, SEP)
DEFAULT_LENGTH_PENALTY = 0.6


@dataclass(frozen=True)
class Hypothesis:
    tokens: Tuple[int, ...]
    log_prob: float
    finished: bool = False

    def score(self, penalty_exponent: float) -> float:
        return length_penalized_score(self.log_prob, len(self.tokens), penalty_exponent)


def length_penalized_score(log_prob: float, length: int, penalty_exponent: float) -> float:
    """``log_prob / ((5 + length) / 6) ** penalty_exponent``."""
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    if penalty_exponent == 0:
        return log_prob
    return log_prob / ((5.0 + length) / 6.0) ** penalty_exponent


StepFn = Callable[[Sequence[int]], np.ndarray]


def encode_context(model: FusionTransformer, persona: Source, history: Source) -> Tuple[EncodedState, EncodedState]:
    with T.no_grad():
        enc_p = model.encode_source(persona.tokens, persona.positions, persona.types, "persona")
        enc_h = model.encode_source(history.tokens, history.positions, history.types, "history")
    return enc_p, enc_h


def model_step_fn(model: FusionTransformer, persona: Source, history: Source) -> StepFn:
    """Next-token log-probabilities for a generated prefix (BOS is prepended)."""
    if model.training:
        raise RuntimeError("decode with the model in eval mode (call model.eval())")
    enc_p, enc_h = encode_context(model, persona, history)
    banned = [i for i in BANNED_IDS if i < model.config.vocab_size]

    def step(prefix: Sequence[int]) -> np.ndarray:
        lp = model.next_token_logprobs([BOS, *prefix], enc_p, enc_h).copy()
        lp[banned] = -np.inf
        return lp

    return step


def beam_search_steps(step: StepFn, beam_size: int, max_len: int, penalty_exponent: float,
                      eos_id: int = EOS) -> Hypothesis:
    """Beam search over an arbitrary next-token log-probability function.

    Candidates are pruned by raw log-probability; a candidate is retired when
    it emits ``eos_id`` or reaches ``max_len``.  The retired hypothesis with
    the best length-penalized score wins, ties going to the lexicographically
    smallest token sequence.
    """
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    live = [Hypothesis((), 0.0)]
    finished: List[Hypothesis] = []
    for _ in range(max_len):
        candidates = []
        for hyp in live:
            lp = step(hyp.tokens)
            for tok in np.flatnonzero(np.isfinite(lp)):
                candidates.append((hyp.log_prob + float(lp[tok]), hyp.tokens + (int(tok),)))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for log_prob, tokens in candidates[:beam_size]:
            done = tokens[-1] == eos_id or len(tokens) == max_len
            hyp = Hypothesis(tokens, log_prob, done)
            (finished if done else live).append(hyp)
        if not live:
            break
    return min(finished, key=lambda h: (-h.score(penalty_exponent), h.tokens))


def beam_search(
    model: FusionTransformer,
    persona: Source,
    history: Source,
    beam_size: int = 3,
    max_len: int = 20,
    penalty_exponent: float = DEFAULT_LENGTH_PENALTY,
    return_hypothesis: bool = False,
):
    """Generated reply ids (ending in EOS unless ``max_len`` was hit)."""
    hyp = beam_search_steps(model_step_fn(model, persona, history), beam_size, max_len, penalty_exponent)
    return hyp if return_hypothesis else list(hyp.tokens)


def greedy_steps(step: StepFn, max_len: int, eos_id: int = EOS) -> Tuple[List[int], float]:
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    tokens: List[int] = []
    log_prob = 0.0
    while len(tokens) < max_len:
        lp = step(tokens)
        tok = int(np.argmax(lp))  # first maximum = smallest id on ties
        tokens.append(tok)
        log_prob += float(lp[tok])
        if tok == eos_id:
            break
    return tokens, log_prob


def greedy_decode(model: FusionTransformer, persona: Source, history: Source, max_len: int = 20) -> List[int]:
    tokens, _ = greedy_steps(model_step_fn(model, persona, history), max_len)
    return tokens


def strip_eos(tokens: Sequence[int]) -> List[int]:
    out = []
    for t in tokens:
        if t == EOS:
            break
        out.append(int(t))
    return out

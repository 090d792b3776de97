"""Beam search over any next-token scorer, plus an exhaustive reference search.

A scorer is any object with

    start(input) -> state
    step(state, prev_token_id) -> (new_state, log_probs)

where ``log_probs`` is a length-V array. States are treated as immutable values.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

from .corpus import END_ID, START_ID

MAX_ENUMERATION = 10 ** 6


class BeamError(Exception):
    pass


class EmptyVocab(BeamError):
    pass


class SearchSpaceTooLarge(BeamError):
    pass


class DegenerateWidth(UserWarning):
    pass


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    state: Any = field(default=None, repr=False, compare=False)
    complete: bool = False
    # reached max_len without emitting <end>
    forced: bool = False

    def key(self):
        # max score first, then lexicographically smaller ids
        return (-self.score, self.tokens)


@dataclass
class BeamConfig:
    k: int = 4
    max_len: int = 50
    start_id: int = START_ID
    # None disables termination: every hypothesis runs to max_len
    end_id: int | None = END_ID
    length_normalize: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("beam width k must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def _rank_score(hyp: Hypothesis, cfg: BeamConfig) -> float:
    if cfg.length_normalize and hyp.tokens:
        return hyp.score / len(hyp.tokens)
    return hyp.score


def _best(hyps: list[Hypothesis], cfg: BeamConfig) -> Hypothesis:
    return min(hyps, key=lambda h: (-_rank_score(h, cfg), h.tokens))


def _check_vocab(log_probs: np.ndarray, cfg: BeamConfig) -> int:
    V = len(log_probs)
    if V == 0:
        raise EmptyVocab("scorer returned an empty distribution")
    if cfg.end_id is not None and not 0 <= cfg.end_id < V:
        raise EmptyVocab(f"end id {cfg.end_id} not in vocabulary of size {V}")
    return V


def beam_search(scorer, input, cfg: BeamConfig) -> tuple[Hypothesis, list[Hypothesis]]:
    """Keep the top-k prefixes by cumulative log-probability at every step.

    A hypothesis that emits ``<end>`` leaves the beam and the live width drops by
    one. Search stops once k hypotheses have finished or ``max_len`` steps have
    run; survivors at that point are returned with ``forced=True``.
    Returns the best finished hypothesis and every finished one, best first.
    """
    live = [Hypothesis((), 0.0, scorer.start(input))]
    done: list[Hypothesis] = []
    width = cfg.k
    for step in range(cfg.max_len):
        candidates = []
        for hyp in live:
            prev = hyp.tokens[-1] if hyp.tokens else cfg.start_id
            state, log_probs = scorer.step(hyp.state, prev)
            log_probs = np.asarray(log_probs, dtype=np.float64)
            if step == 0:
                V = _check_vocab(log_probs, cfg)
                if width > V:
                    # only V seeds exist; later steps still keep up to k prefixes
                    warnings.warn(f"beam width {width} exceeds vocabulary size {V}; "
                                  f"seeding {V} hypotheses", DegenerateWidth, stacklevel=2)
            for tok, lp in enumerate(log_probs.tolist()):
                candidates.append(Hypothesis(hyp.tokens + (tok,), hyp.score + lp, state))
        candidates.sort(key=Hypothesis.key)
        live = []
        for hyp in candidates[:width]:
            if cfg.end_id is not None and hyp.tokens[-1] == cfg.end_id:
                hyp.complete = True
                done.append(hyp)
            else:
                live.append(hyp)
        width = cfg.k - len(done)
        if not live or width == 0:
            break
    for hyp in live:
        hyp.forced = True
        done.append(hyp)
    done.sort(key=lambda h: (-_rank_score(h, cfg), h.tokens))
    return done[0], done


def greedy_decode(scorer, input, cfg: BeamConfig) -> Hypothesis:
    """Stepwise argmax rollout (lowest id wins ties)."""
    state = scorer.start(input)
    tokens: tuple[int, ...] = ()
    score = 0.0
    for _ in range(cfg.max_len):
        prev = tokens[-1] if tokens else cfg.start_id
        state, log_probs = scorer.step(state, prev)
        tok = int(np.argmax(log_probs))
        tokens += (tok,)
        score += float(log_probs[tok])
        if cfg.end_id is not None and tok == cfg.end_id:
            return Hypothesis(tokens, score, state, complete=True)
    return Hypothesis(tokens, score, state, forced=True)


def count_sequences(V: int, max_len: int, with_end: bool = True) -> int:
    if not with_end:
        return V ** max_len
    # sequences ending in <end> at each length, plus unterminated ones at max_len
    open_ = V - 1
    return sum(open_ ** (m - 1) for m in range(1, max_len + 1)) + open_ ** max_len


def enumerate_sequences(scorer, input, cfg: BeamConfig) -> Iterator[Hypothesis]:
    """Every terminated or length-capped sequence with its summed log-probability."""
    root = scorer.start(input)
    _, first = scorer.step(root, cfg.start_id)
    V = _check_vocab(np.asarray(first), cfg)
    n = count_sequences(V, cfg.max_len, cfg.end_id is not None)
    if n > MAX_ENUMERATION:
        raise SearchSpaceTooLarge(f"{n} sequences exceed the enumeration limit of {MAX_ENUMERATION}")

    stack = [((), 0.0, root)]
    while stack:
        tokens, score, state = stack.pop()
        prev = tokens[-1] if tokens else cfg.start_id
        new_state, log_probs = scorer.step(state, prev)
        for tok, lp in enumerate(np.asarray(log_probs, dtype=np.float64).tolist()):
            seq = tokens + (tok,)
            total = score + lp
            if cfg.end_id is not None and tok == cfg.end_id:
                yield Hypothesis(seq, total, new_state, complete=True)
            elif len(seq) == cfg.max_len:
                yield Hypothesis(seq, total, new_state, forced=True)
            else:
                stack.append((seq, total, new_state))


def exhaustive_oracle(scorer, input, cfg: BeamConfig) -> Hypothesis:
    """Global optimum over all sequences, same tie rule as :func:`beam_search`."""
    return _best(list(enumerate_sequences(scorer, input, cfg)), cfg)


def rescore(scorer, input, tokens, start_id: int = START_ID) -> float:
    """Replay ``tokens`` through the scorer and sum their log-probabilities."""
    state = scorer.start(input)
    prev = start_id
    total = 0.0
    for tok in tokens:
        state, log_probs = scorer.step(state, prev)
        total += float(log_probs[tok])
        prev = tok
    return total

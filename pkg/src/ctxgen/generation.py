"""Decoding text from contexts: temperature sampling, greedy and beam search."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .corpus import BOS, EOS, PAD, UNK, DEFAULT_MAX_WORDS
from .model import Model
from .numerics import log_softmax, sample_categorical, softmax_with_temperature


@dataclass
class SamplingConfig:
    temperature: float = 0.7
    max_len: int = DEFAULT_MAX_WORDS
    seed: int = 0
    num_samples: int = 1
    mask_unk: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


@dataclass
class GeneratedText:
    tokens: list                      # emitted ids, EOS included when it was drawn
    contexts: tuple
    step_probs: list                  # model probability (T = 1) of each emitted token
    terminated_by: str                # "EOS" or "max_len"
    gates: list | None = field(default=None, repr=False)
    text: str = ""

    @property
    def logprob(self) -> float:
        return math.fsum(math.log(p) for p in self.step_probs)

    @property
    def words(self) -> list:
        return [t for t in self.tokens if t != EOS]

    def to_record(self, vocab=None, schema=None) -> dict:
        rec: dict = {}
        if schema is not None:
            for t, c in zip(schema.types, self.contexts):
                value = t.values[c]
                rec[t.name] = int(value) if t.name == "rating" else value
        else:
            rec["contexts"] = list(self.contexts)
        rec["text"] = self.text if vocab is None else vocab.decode(self.tokens)
        rec["logprob"] = self.logprob
        rec["terminated_by"] = self.terminated_by
        return rec

    def to_json(self, vocab=None, schema=None) -> str:
        return json.dumps(self.to_record(vocab, schema), sort_keys=True)


def _banned(mask_unk: bool) -> list[int]:
    return [PAD, BOS, UNK] if mask_unk else [PAD, BOS]


def _decode(model: Model, contexts, max_len: int, choose: Callable, vocab=None) -> GeneratedText:
    state, h_c = model.start(contexts)
    token = BOS
    out, probs, gates = [], [], []
    terminated = "max_len"
    for _ in range(max_len):
        logits, state, m = model.step(token, state, h_c)
        token = choose(logits)
        probs.append(float(softmax_with_temperature(logits, 1.0)[token]))
        if m is not None:
            gates.append(m)
        out.append(token)
        if token == EOS:
            terminated = "EOS"
            break
    g = np.array(gates) if gates else None
    res = GeneratedText(out, tuple(int(c) for c in np.atleast_1d(contexts)), probs, terminated,
                        None if g is None else g)
    if vocab is not None:
        res.text = vocab.decode(out)
    return res


def sample_sequence(model: Model, contexts, config: SamplingConfig,
                    rng: np.random.Generator, vocab=None) -> GeneratedText:
    """Ancestral sampling at ``config.temperature``; PAD and BOS are never drawn."""
    banned = _banned(config.mask_unk)

    def choose(logits):
        p = softmax_with_temperature(logits, config.temperature)
        p[banned] = 0.0
        return sample_categorical(p / p.sum(), rng)

    return _decode(model, contexts, config.max_len, choose, vocab)


def greedy_decode(model: Model, contexts, max_len: int = DEFAULT_MAX_WORDS,
                  mask_unk: bool = False, vocab=None) -> GeneratedText:
    """Arg-max decoding; ties go to the lowest token id."""
    banned = _banned(mask_unk)

    def choose(logits):
        z = np.array(logits, dtype=np.float64)
        z[banned] = -np.inf
        return int(np.argmax(z))

    return _decode(model, contexts, max_len, choose, vocab)


def beam_search_generic(step: Callable, init_state, beam_width: int, max_len: int,
                        banned=(PAD, BOS)):
    """Beam search over summed log-probabilities without length normalisation.

    ``step(state, token)`` returns ``(logprobs over vocabulary, new_state)``.
    Finished hypotheses stay in the beam and compete with open ones.
    Returns ``[(logprob, tokens, step_logprobs, terminated_by)]`` best first.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    # (score, tokens, step logprobs, state, finished)
    beams = [(0.0, (), (), init_state, False)]
    for _ in range(max_len):
        cands = []
        for score, toks, lps, state, done in beams:
            if done:
                cands.append((score, toks, lps, state, True))
                continue
            last = toks[-1] if toks else BOS
            logp, new_state = step(state, last)
            for j in range(len(logp)):
                if j in banned:
                    continue
                lp = float(logp[j])
                cands.append((score + lp, toks + (j,), lps + (lp,), new_state, j == EOS))
        cands.sort(key=lambda c: (-c[0], c[1]))
        beams = cands[:beam_width]
        if all(b[4] for b in beams):
            break
    return [(s, list(t), list(l), "EOS" if d else "max_len") for s, t, l, _, d in beams]


def beam_search(model: Model, contexts, beam_width: int = 5, max_len: int = DEFAULT_MAX_WORDS,
                vocab=None) -> list[GeneratedText]:
    """Top ``beam_width`` sequences by model log-probability, best first."""
    state0, h_c = model.start(contexts)

    def step(state, token):
        logits, new, _ = model.step(token, state, h_c)
        return log_softmax(logits), new

    ctx = tuple(int(c) for c in np.atleast_1d(contexts))
    out = []
    for _, toks, lps, term in beam_search_generic(step, state0, beam_width, max_len):
        g = GeneratedText(toks, ctx, [math.exp(lp) for lp in lps], term)
        if vocab is not None:
            g.text = vocab.decode(toks)
        out.append(g)
    return out

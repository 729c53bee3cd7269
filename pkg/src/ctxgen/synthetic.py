"""Small generated corpora with known structure, for sanity checks and demos."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .corpus import BOS, EOS, SPECIAL_TOKENS, ContextSchema, Example, Vocabulary


@dataclass
class SyntheticTask:
    vocab: Vocabulary
    schema: ContextSchema
    train: list
    valid: list
    test: list
    info: dict


def _vocab(words: list[str]) -> Vocabulary:
    return Vocabulary(list(SPECIAL_TOKENS) + words)


def _gen(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def memorization_task(n: int = 50, length: int = 10, n_words: int = 20,
                      cardinalities=(5, 10), seed: int = 0) -> SyntheticTask:
    """``n`` random fixed-length sequences, each with its own context pair."""
    cards = tuple(cardinalities)
    if int(np.prod(cards)) < n:
        raise ValueError("not enough distinct contexts for every sequence")
    rng = _gen(seed)
    vocab = _vocab([f"w{i}" for i in range(n_words)])
    examples = []
    for k in range(n):
        ctx = tuple(int(c) for c in np.unravel_index(k, cards))
        words = rng.integers(4, 4 + n_words, size=length)
        examples.append(Example((BOS, *map(int, words), EOS), ctx))
    schema = ContextSchema.from_cardinalities(cards)
    return SyntheticTask(vocab, schema, examples, examples, examples, {})


def context_selection_task(copies: int = 20, length: int = 8, n_words: int = 12,
                           seed: int = 0) -> SyntheticTask:
    """Context pair (a, b) in {0,1} x {0,1,2} picks one of six fixed sequences."""
    rng = _gen(seed)
    vocab = _vocab([f"w{i}" for i in range(n_words)])
    targets = {}
    while len(targets) < 6:
        seq = tuple(int(w) for w in rng.integers(4, 4 + n_words, size=length))
        if seq not in targets.values():
            targets[divmod(len(targets), 3)] = seq
    examples = [Example((BOS, *seq, EOS), ctx) for ctx, seq in targets.items() for _ in range(copies)]
    order = rng.permutation(len(examples))
    examples = [examples[i] for i in order]
    schema = ContextSchema.from_cardinalities((2, 3), ["a", "b"])
    held = [Example((BOS, *seq, EOS), ctx) for ctx, seq in targets.items()]
    return SyntheticTask(vocab, schema, examples, held, held, {"targets": targets})


def long_range_task(n_train: int = 600, n_test: int = 120, length: int = 60,
                    n_fillers: int = 60, min_key_pos: int = 40, seed: int = 0) -> SyntheticTask:
    """Filler noise with one context-determined key token late in the sequence.

    Every sequence has ``length`` words drawn uniformly from filler tokens,
    except a marker at some position ``p - 1`` and, at position
    ``p >= min_key_pos``, the key token selected by the context pair
    (a, b) in {0,1} x {0,1,2}.  Only a model that carries the context to
    position ``p`` can predict the key.
    """
    rng = _gen(seed)
    words = [f"f{i}" for i in range(n_fillers)] + ["<mark>"] + [f"key{j}" for j in range(6)]
    vocab = _vocab(words)
    marker = 4 + n_fillers
    keys = [marker + 1 + j for j in range(6)]

    def make(n):
        out = []
        for _ in range(n):
            a, b = int(rng.integers(2)), int(rng.integers(3))
            seq = rng.integers(4, 4 + n_fillers, size=length)
            p = int(rng.integers(min_key_pos, length))
            seq[p - 1] = marker
            seq[p] = keys[3 * a + b]
            out.append(Example((BOS, *map(int, seq), EOS), (a, b)))
        return out

    train, valid, test = make(n_train), make(max(n_test // 2, 1)), make(n_test)
    schema = ContextSchema.from_cardinalities((2, 3), ["a", "b"])
    return SyntheticTask(vocab, schema, train, valid, test,
                         {"marker": marker, "keys": keys, "min_key_pos": min_key_pos})


_SENTIMENT = {
    1: ["terrible", "awful", "broke", "waste", "refund"],
    2: ["poor", "disappointing", "flimsy", "meh", "returned"],
    3: ["okay", "average", "decent", "fine", "mixed"],
    4: ["good", "solid", "nice", "recommend", "happy"],
    5: ["excellent", "amazing", "perfect", "love", "best"],
}
_PRODUCTS = {
    "B001": ["battery", "charger", "cable"],
    "B002": ["novel", "author", "chapters"],
    "B003": ["headphones", "bass", "volume"],
    "B004": ["movie", "actors", "plot"],
    "B005": ["room", "staff", "breakfast"],
}
_FILLER = ["the", "this", "it", "was", "and", "i", "a", "is", "very", "really", "for", "with", "."]


def toy_review_records(n: int = 400, seed: int = 0, min_words: int = 6, max_words: int = 30) -> list[dict]:
    """Review-shaped JSON records whose wording depends on rating and product."""
    rng = _gen(seed)
    products = sorted(_PRODUCTS)
    out = []
    for _ in range(n):
        rating = int(rng.integers(1, 6))
        product = products[int(rng.integers(len(products)))]
        length = int(rng.integers(min_words, max_words + 1))
        toks = []
        for _ in range(length):
            u = rng.random()
            if u < 0.25:
                pool = _SENTIMENT[rating]
            elif u < 0.45:
                pool = _PRODUCTS[product]
            else:
                pool = _FILLER
            toks.append(pool[int(rng.integers(len(pool)))])
        out.append({"text": " ".join(toks), "rating": rating, "product": product})
    return out


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")

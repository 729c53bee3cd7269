"""Reading context-annotated reviews, building vocabularies, splitting and batching."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

DEFAULT_VOCAB_SIZE = 20000
DEFAULT_MAX_WORDS = 100
DEFAULT_BUCKET_WIDTH = 10

# user-facing context names -> record field
CONTEXT_FIELDS = {"sentiment": "rating", "rating": "rating", "product": "product"}
RATING_VALUES = ("1", "2", "3", "4", "5")


def words(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with <pad>, <bos>, <eos>, <unk>")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")

    pad = PAD
    bos = BOS
    eos = EOS
    unk = UNK

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def specials(self) -> dict[str, int]:
        return {"PAD": PAD, "BOS": BOS, "EOS": EOS, "UNK": UNK}

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            with open(path, encoding="utf-8") as fh:
                tokens = [line.rstrip("\n") for line in fh]
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from exc
        return cls(tokens)

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if skip_special and i in (PAD, BOS, EOS):
                continue
            out.append(self.tokens[i])
        return " ".join(out)


@dataclass(frozen=True)
class ContextType:
    name: str
    values: tuple[str, ...]

    @property
    def cardinality(self) -> int:
        return len(self.values)

    def index_of(self, value) -> int:
        try:
            return self.values.index(str(value))
        except ValueError:
            raise DataError(f"unknown value {value!r} for context {self.name!r}") from None


@dataclass(frozen=True)
class ContextSchema:
    """Ordered context types; the encoder concatenates embeddings in this order."""

    types: tuple[ContextType, ...]

    def __post_init__(self):
        if len(self.types) < 1:
            raise DataError("a context schema needs at least one context type")
        for t in self.types:
            if t.cardinality < 1:
                raise DataError(f"context {t.name!r} has no values")

    @property
    def K(self) -> int:
        return len(self.types)

    @property
    def cardinalities(self) -> list[int]:
        return [t.cardinality for t in self.types]

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.types]

    def encode(self, values: dict) -> tuple[int, ...]:
        return tuple(t.index_of(values[t.name]) for t in self.types)

    def to_dict(self) -> list:
        return [{"name": t.name, "values": list(t.values)} for t in self.types]

    @classmethod
    def from_dict(cls, data: list) -> "ContextSchema":
        return cls(tuple(ContextType(d["name"], tuple(d["values"])) for d in data))

    @classmethod
    def from_cardinalities(cls, cards: Sequence[int], names=None) -> "ContextSchema":
        names = names or [f"ctx{i}" for i in range(len(cards))]
        return cls(tuple(
            ContextType(n, tuple(str(v) for v in range(k))) for n, k in zip(names, cards)
        ))

    @classmethod
    def infer(cls, records: Iterable["Record"], fields: Sequence[str]) -> "ContextSchema":
        """Schema over ``fields``; ratings always get all five levels, products are sorted."""
        seen: dict[str, set] = {f: set() for f in fields}
        for r in records:
            for f in fields:
                seen[f].add(str(r.contexts[f]))
        types = []
        for f in fields:
            values = RATING_VALUES if f == "rating" else tuple(sorted(seen[f]))
            types.append(ContextType(f, values))
        return cls(tuple(types))


@dataclass(frozen=True)
class Record:
    text: str
    contexts: dict
    line: int = 0


class RecordStream:
    """Iterator over parsed records; ``skipped`` and ``filtered`` fill in as it is consumed."""

    def __init__(self, path, schema: ContextSchema | None = None,
                 max_words: int | None = DEFAULT_MAX_WORDS):
        self.path = os.fspath(path)
        self.schema = schema
        self.max_words = max_words
        self.skipped = 0
        self.filtered = 0
        try:
            self._fh = open(self.path, encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read corpus {self.path}: {exc}") from exc

    def __iter__(self) -> Iterator[Record]:
        with self._fh as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                rec = self._parse(line, lineno)
                if rec is None:
                    self.skipped += 1
                    continue
                if self.max_words is not None and len(words(rec.text)) > self.max_words:
                    self.filtered += 1
                    continue
                yield rec
        if self.skipped:
            log.warning("%s: skipped %d malformed line(s)", self.path, self.skipped)

    def _parse(self, line: str, lineno: int) -> Record | None:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            return None
        if not isinstance(obj, dict) or not isinstance(obj.get("text"), str):
            return None
        rating = obj.get("rating")
        if not isinstance(rating, int) or isinstance(rating, bool):
            return None
        product = obj.get("product")
        if not isinstance(product, str):
            return None
        ctx = {"rating": str(rating), "product": product}
        if self.schema is not None:
            for t in self.schema.types:
                if ctx[t.name] not in t.values:
                    raise DataError(
                        f"{self.path}:{lineno}: unknown value {ctx[t.name]!r} "
                        f"for context field {t.name!r}"
                    )
        elif rating not in range(1, 6):
            raise DataError(f"{self.path}:{lineno}: rating {rating} outside 1-5")
        return Record(obj["text"], ctx, lineno)


def load_examples(path, schema: ContextSchema | None = None,
                  max_words: int | None = DEFAULT_MAX_WORDS) -> RecordStream:
    """Stream records from a JSON-lines corpus in file order.

    Malformed lines are skipped and counted on the returned stream's
    ``skipped`` attribute; records longer than ``max_words`` are dropped and
    counted in ``filtered``.
    """
    return RecordStream(path, schema, max_words)


def build_vocab(records: Iterable, max_size: int = DEFAULT_VOCAB_SIZE) -> Vocabulary:
    """Keep the ``max_size`` most frequent lowercased words; ties go to the smaller string."""
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    counts: Counter = Counter()
    for r in records:
        text = r if isinstance(r, str) else r.text
        counts.update(words(text))
    for s in SPECIAL_TOKENS:
        counts.pop(s, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(SPECIAL_TOKENS) + [t for t, _ in ranked[:max_size]])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    idx = vocab.index
    return [BOS] + [idx.get(w, UNK) for w in words(text)] + [EOS]


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    contexts: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) < 2:
            raise DataError("an example needs at least BOS and EOS")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def num_targets(self) -> int:
        return len(self.tokens) - 1

    @property
    def num_words(self) -> int:
        return len(self.tokens) - 2


def encode_records(records: Iterable[Record], vocab: Vocabulary, schema: ContextSchema,
                   drop_unknown: bool = False) -> list[Example]:
    """Tokenize records into examples.  ``drop_unknown`` removes any record with an OOV word."""
    out = []
    for r in records:
        ids = tokenize(r.text, vocab)
        if drop_unknown and UNK in ids:
            continue
        out.append(Example(tuple(ids), schema.encode(r.contexts)))
    return out


def split_dataset(examples: Sequence, seed: int):
    """Seeded 18:1:1 train/valid/test partition; remainders go to train."""
    n = len(examples)
    if n < 20:
        raise DataError(f"need at least 20 examples for an 18:1:1 split, got {n}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    order = rng.permutation(n)
    n_valid = n_test = n // 20
    n_train = n - n_valid - n_test
    train = [examples[i] for i in order[:n_train]]
    valid = [examples[i] for i in order[n_train:n_train + n_valid]]
    test = [examples[i] for i in order[n_train + n_valid:]]
    return train, valid, test


@dataclass
class Batch:
    """Padded examples.  ``loss_mask`` is aligned with ``token_matrix[:, 1:]`` (the targets)."""

    token_matrix: np.ndarray
    lengths: np.ndarray
    loss_mask: np.ndarray
    context_matrix: np.ndarray
    indices: np.ndarray

    @property
    def size(self) -> int:
        return self.token_matrix.shape[0]

    @property
    def num_targets(self) -> int:
        return int(self.loss_mask.sum())


def collate(examples: Sequence[Example], indices=None) -> Batch:
    lengths = np.array([len(e) for e in examples], dtype=np.int64)
    L = int(lengths.max())
    tok = np.full((len(examples), L), PAD, dtype=np.int64)
    for r, e in enumerate(examples):
        tok[r, : len(e)] = e.tokens
    ctx = np.array([e.contexts for e in examples], dtype=np.int64).reshape(len(examples), -1)
    mask = (tok[:, 1:] != PAD).astype(np.float64)
    if indices is None:
        indices = np.arange(len(examples))
    return Batch(tok, lengths, mask, ctx, np.asarray(indices, dtype=np.int64))


def make_batches(examples: Sequence[Example], batch_size: int, rng,
                 bucket_width: int = DEFAULT_BUCKET_WIDTH) -> list[Batch]:
    """One epoch of length-bucketed batches in seeded random order.

    ``rng`` is a ``numpy.random.Generator`` (its state advances, so successive
    epochs differ) or an int seed.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(rng))))
    buckets: dict[int, list[int]] = {}
    for i, e in enumerate(examples):
        buckets.setdefault(len(e) // bucket_width, []).append(i)
    groups = []
    for key in sorted(buckets):
        members = np.array(buckets[key])[rng.permutation(len(buckets[key]))]
        for s in range(0, len(members), batch_size):
            groups.append(members[s:s + batch_size])
    order = rng.permutation(len(groups))
    return [collate([examples[i] for i in groups[g]], groups[g]) for g in order]

"""Perplexity reports, gate attribution and the n-gram logistic-regression classifier."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from .corpus import Example, collate, words
from .errors import FingerprintMismatchError
from .model import Model

# Full-scale language-modelling perplexities (Amazon/TripAdvisor, hidden 512).
# Kept for reference in reports; desk-scale runs are not expected to match.
REFERENCE_PERPLEXITY = {
    "Book": {"RNN": 27.5, "C2S(P)": 27.1, "C2S(S)": 27.2, "C2S(P+S)": 26.6,
             "gC2S(P)": 25.2, "gC2S(S)": 25.8, "gC2S(P+S)": 24.9},
    "Electronic": {"RNN": 27.4, "C2S(P)": 26.2, "C2S(S)": 27.3, "C2S(P+S)": 25.8,
                   "gC2S(P)": 24.4, "gC2S(S)": 25.6, "gC2S(P+S)": 24.1},
    "Movie": {"RNN": 28.8, "C2S(P)": 27.2, "C2S(S)": 28.2, "C2S(P+S)": 26.9,
              "gC2S(P)": 25.3, "gC2S(S)": 27.1, "gC2S(P+S)": 24.8},
    "Hotel": {"RNN": 23.6, "C2S(P)": 23.2, "C2S(S)": 23.4, "C2S(P+S)": 23.1,
              "gC2S(P)": 21.3, "gC2S(S)": 22.4, "gC2S(P+S)": 21.2},
}


def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in headers]] + [
        [f"{v:.4g}" if isinstance(v, float) else str(v) for v in row] for row in rows
    ]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    line = lambda r: " | ".join(c.rjust(w) for c, w in zip(r, widths))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(cells[0]), sep] + [line(r) for r in cells[1:]])


def _canonical_order(examples: Sequence[Example]) -> list[int]:
    # content-based so any permutation of the dataset yields the same batches
    return sorted(range(len(examples)),
                  key=lambda i: (len(examples[i]), examples[i].tokens, examples[i].contexts))


def _scored_rows(model: Model, examples: Sequence[Example], batch_size: int):
    order = _canonical_order(examples)
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        res = model.forward(collate([examples[i] for i in idx], idx), train=False, keep_cache=False)
        for r, i in enumerate(idx):
            yield i, res, r


# -- perplexity -------------------------------------------------------------------------

@dataclass
class PerplexityReport:
    perplexity: float
    mean_loss: float
    total_loss: float
    num_tokens: int
    num_examples: int
    bucket_width: int
    buckets: list = field(default_factory=list)   # dicts: lo, hi, perplexity, loss, tokens, examples
    label: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def table(self) -> str:
        rows = [(f"[{b['lo']},{b['hi']})", b["examples"], b["tokens"], b["perplexity"])
                for b in self.buckets]
        rows.append(("all", self.num_examples, self.num_tokens, self.perplexity))
        title = f"Perplexity{' - ' + self.label if self.label else ''}"
        return title + "\n" + format_table(["words", "examples", "tokens", "ppl"], rows)


def perplexity(examples: Sequence[Example], model: Model, bucket_width: int = 20,
               batch_size: int = 128, vocab_fingerprint: str | None = None,
               model_fingerprint: str | None = None, label: str = "") -> PerplexityReport:
    """Eval-mode perplexity overall and per bucket of example length (in words)."""
    if vocab_fingerprint is not None and model_fingerprint is not None \
            and vocab_fingerprint != model_fingerprint:
        raise FingerprintMismatchError("dataset vocabulary differs from the model's")
    if not examples:
        raise ValueError("cannot compute perplexity of an empty dataset")
    per_bucket: dict[int, list] = {}
    losses = []
    ntok_total = 0
    for i, res, r in _scored_rows(model, examples, batch_size):
        loss = -float(np.sum(res.token_logprobs[r]))
        ntok = int(res.mask[r].sum())
        b = examples[i].num_words // bucket_width
        slot = per_bucket.setdefault(b, [[], 0, 0])
        slot[0].append(loss)
        slot[1] += ntok
        slot[2] += 1
        losses.append(loss)
        ntok_total += ntok
    total = math.fsum(losses)
    buckets = []
    for b in sorted(per_bucket):
        bl, bt, bn = per_bucket[b]
        bloss = math.fsum(bl)
        buckets.append({"lo": b * bucket_width, "hi": (b + 1) * bucket_width,
                        "perplexity": math.exp(bloss / bt), "loss": bloss / bt,
                        "tokens": bt, "examples": bn})
    mean = total / ntok_total
    return PerplexityReport(math.exp(mean), mean, total, ntok_total, len(examples),
                            bucket_width, buckets, label)


def position_losses(model: Model, examples: Sequence[Example], batch_size: int = 128):
    """Mean negative log-likelihood at each target position, with occurrence counts."""
    L = max(len(e) for e in examples) - 1
    sums = np.zeros(L)
    counts = np.zeros(L, dtype=np.int64)
    for _, res, r in _scored_rows(model, examples, batch_size):
        n = res.mask.shape[1]
        sums[:n] -= res.token_logprobs[r]
        counts[:n] += res.mask[r].astype(np.int64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / counts, counts


# -- gate attribution ---------------------------------------------------------------------

@dataclass
class GateAttributionReport:
    entries: list          # dicts: token_id, token, mean_gate, count (descending mean_gate)
    min_count: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def rank_of(self, token_id: int) -> int | None:
        for k, e in enumerate(self.entries):
            if e["token_id"] == token_id:
                return k
        return None

    def table(self, top: int | None = None) -> str:
        rows = [(k + 1, e["token"], e["mean_gate"], e["count"])
                for k, e in enumerate(self.entries[:top])]
        return "Largest mean gate values\n" + format_table(["rank", "token", "mean gate", "count"], rows)


def gate_attribution(examples: Sequence[Example], model: Model, min_count: int = 1,
                     vocab=None, batch_size: int = 128) -> GateAttributionReport:
    """Average of mean(m_t) over every occurrence of each target token, ranked."""
    if model.variant != "gc2s":
        raise ValueError(f"gate attribution requires a gC2S model, got {model.variant}")
    per_token: dict[int, list] = {}
    for _, res, r in _scored_rows(model, examples, batch_size):
        keep = res.mask[r] > 0
        means = res.gates[r].mean(axis=1)
        for tok, g in zip(res.targets[r][keep], means[keep]):
            per_token.setdefault(int(tok), []).append(float(g))
    entries = []
    for tok, vals in per_token.items():
        if len(vals) < min_count:
            continue
        entries.append({
            "token_id": tok,
            "token": vocab.tokens[tok] if vocab is not None else str(tok),
            "mean_gate": math.fsum(vals) / len(vals),
            "count": len(vals),
        })
    entries.sort(key=lambda e: (-e["mean_gate"], e["token_id"]))
    return GateAttributionReport(entries, min_count)


# -- n-gram classifier --------------------------------------------------------------------

def ngrams(text: str) -> list[str]:
    w = words(text)
    return w + [f"{a} {b}" for a, b in zip(w, w[1:])]


@dataclass
class NgramClassifier:
    features: dict          # n-gram -> column
    classes: list
    weights: np.ndarray     # (F,) for two classes, (F, C) otherwise
    bias: np.ndarray
    l2: float
    binary: bool = True     # presence features; False uses counts
    converged: bool = True

    def transform(self, texts: Sequence[str]) -> sp.csr_matrix:
        return _featurize(texts, self.features, self.binary)

    def decision(self, texts: Sequence[str]) -> np.ndarray:
        return self.transform(texts) @ self.weights + self.bias

    def predict_proba(self, texts: Sequence[str]) -> np.ndarray:
        s = self.decision(texts)
        if len(self.classes) == 2:
            p1 = 1.0 / (1.0 + np.exp(-s))
            return np.column_stack([1.0 - p1, p1])
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, texts: Sequence[str]) -> list:
        if len(self.classes) == 2:
            # a score of exactly 0 goes to the second class
            idx = (self.decision(texts) >= 0).astype(int)
        else:
            idx = np.argmax(self.decision(texts), axis=1)
        return [self.classes[i] for i in idx]


def _featurize(texts, fmap, binary) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for r, t in enumerate(texts):
        counts: dict[int, int] = {}
        for g in ngrams(t):
            j = fmap.get(g)
            if j is not None:
                counts[j] = counts.get(j, 0) + 1
        for j in sorted(counts):
            rows.append(r)
            cols.append(j)
            vals.append(1.0 if binary else float(counts[j]))
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(texts), len(fmap)))


def train_ngram_classifier(texts: Sequence[str], labels: Sequence, classes=None, l2: float = 1e-4,
                           binary: bool = True, max_iter: int = 2000, tol: float = 1e-5) -> NgramClassifier:
    """L2-regularised logistic regression on unigram + bigram features.

    Minimises mean log-loss + ``l2/2 * ||W||^2`` (bias unpenalised) with
    L-BFGS until the gradient norm drops below ``tol``.  Two classes use a
    sigmoid, more use a softmax.
    """
    classes = sorted(set(labels)) if classes is None else list(classes)
    if len(set(labels)) < 2:
        raise ValueError("need examples from at least two classes")
    fmap: dict[str, int] = {}
    for t in texts:
        for g in ngrams(t):
            fmap.setdefault(g, len(fmap))
    X = _featurize(texts, fmap, binary)
    n, F = X.shape
    y = np.array([classes.index(lab) for lab in labels])
    C = len(classes)

    if C == 2:
        def objective(theta):
            w, b = theta[:F], theta[F]
            s = X @ w + b
            # log(1 + exp(-s)) for positives, log(1 + exp(s)) for negatives
            signed = np.where(y == 1, -s, s)
            loss = np.mean(np.logaddexp(0.0, signed)) + 0.5 * l2 * w @ w
            p = 1.0 / (1.0 + np.exp(-s))
            r = (p - y) / n
            return loss, np.concatenate([X.T @ r + l2 * w, [r.sum()]])
        theta0 = np.zeros(F + 1)
    else:
        Y = np.eye(C)[y]

        def objective(theta):
            W = theta[:F * C].reshape(F, C)
            b = theta[F * C:]
            s = X @ W + b
            s = s - s.max(axis=1, keepdims=True)
            lse = np.log(np.exp(s).sum(axis=1, keepdims=True))
            logp = s - lse
            loss = -np.sum(Y * logp) / n + 0.5 * l2 * np.sum(W * W)
            R = (np.exp(logp) - Y) / n
            return loss, np.concatenate([(X.T @ R + l2 * W).ravel(), R.sum(axis=0)])
        theta0 = np.zeros(F * C + C)

    res = minimize(objective, theta0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0})
    theta = res.x
    grad_norm = float(np.linalg.norm(objective(theta)[1]))
    if C == 2:
        w, b = theta[:F], np.array(theta[F])
    else:
        w, b = theta[:F * C].reshape(F, C), theta[F * C:]
    return NgramClassifier(fmap, classes, w, b, l2, binary, grad_norm < tol or res.success)


@dataclass
class ConfusionReport:
    classes: list
    matrix: list            # rows: true class, columns: predicted class
    precision: list
    recall: list
    f1: list
    accuracy: float
    positive: object = None
    TP: float | None = None  # binary only, percentages
    FN: float | None = None
    TN: float | None = None
    FP: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=str)

    def table(self) -> str:
        if self.TP is not None:
            return format_table(["TP", "FN", "TN", "FP", "accuracy"],
                                [(self.TP, self.FN, self.TN, self.FP, 100.0 * self.accuracy)])
        rows = [(c, self.precision[k], self.recall[k], self.f1[k]) for k, c in enumerate(self.classes)]
        return format_table(["class", "precision", "recall", "F1"], rows)


def confusion_report(true: Sequence, pred: Sequence, classes: Sequence, positive=None) -> ConfusionReport:
    classes = list(classes)
    C = len(classes)
    M = np.zeros((C, C), dtype=np.int64)
    for t, p in zip(true, pred):
        M[classes.index(t), classes.index(p)] += 1
    tp = np.diag(M).astype(float)
    col, row = M.sum(axis=0), M.sum(axis=1)
    precision = np.divide(tp, col, out=np.zeros(C), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros(C), where=row > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(C), where=denom > 0)
    rep = ConfusionReport(classes, M.tolist(), precision.tolist(), recall.tolist(), f1.tolist(),
                          float(tp.sum() / max(M.sum(), 1)))
    if C == 2:
        pos = classes[1] if positive is None else positive
        pi = classes.index(pos)
        ni = 1 - pi
        npos, nneg = M[pi].sum(), M[ni].sum()
        rep.positive = pos
        rep.TP = 100.0 * M[pi, pi] / npos if npos else 0.0
        rep.FN = 100.0 * M[pi, ni] / npos if npos else 0.0
        rep.TN = 100.0 * M[ni, ni] / nneg if nneg else 0.0
        rep.FP = 100.0 * M[ni, pi] / nneg if nneg else 0.0
    return rep


def classify_corpus(classifier: NgramClassifier, texts: Sequence[str], labels: Sequence,
                    positive=None) -> ConfusionReport:
    return confusion_report(labels, classifier.predict(texts), classifier.classes, positive)


def detection_experiment(real: Sequence[str], fake: Sequence[str], seed: int = 0,
                         test_fraction: float = 0.5, l2: float = 1e-4, binary: bool = True):
    """Train real-vs-generated detector on one part of the data, report on the rest.

    When both sides have the same length they are treated as pairs (fake i was
    generated for the context of real i) and split by pair index.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    if len(real) < 2 or len(fake) < 2:
        raise ValueError("need at least two real and two fake texts")

    def cut(n, perm):
        k = min(max(int(round(n * test_fraction)), 1), n - 1)
        return perm[k:], perm[:k]

    if len(real) == len(fake):
        perm = rng.permutation(len(real))
        (rtr, rte), (ftr, fte) = cut(len(real), perm), cut(len(fake), perm)
    else:
        rtr, rte = cut(len(real), rng.permutation(len(real)))
        ftr, fte = cut(len(fake), rng.permutation(len(fake)))
    train_x = [real[i] for i in rtr] + [fake[i] for i in ftr]
    train_y = ["real"] * len(rtr) + ["fake"] * len(ftr)
    test_x = [real[i] for i in rte] + [fake[i] for i in fte]
    test_y = ["real"] * len(rte) + ["fake"] * len(fte)
    clf = train_ngram_classifier(train_x, train_y, classes=["fake", "real"], l2=l2, binary=binary)
    return clf, classify_corpus(clf, test_x, test_y, positive="real")

"""Dense kernels, parameter storage, seeded randomness and gradient checking.

Tensors are plain ``numpy.ndarray`` values (float64 unless the caller opts
into float32).  Backward passes are written by hand in :mod:`ctxgen.model`;
:func:`grad_check` is the independent finite-difference oracle used to
verify them.
"""
from __future__ import annotations

import zlib
from collections import OrderedDict
from typing import Callable, Iterator

import numpy as np

from .errors import NumericError

RNG_ALGORITHM = "numpy.PCG64/SeedSequence"

# named streams fanned out of one seed; adding a consumer never shifts another
STREAM_NAMES = ("init", "dropout", "batching", "sampling", "split")


def check_finite(name: str, arr) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


def affine(x: np.ndarray, Wt: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``W @ x + b`` for a weight matrix ``Wt`` of shape (out, in).

    ``x`` may also be a batch of row vectors, shape (B, in).
    """
    x = np.asarray(x)
    Wt = np.asarray(Wt)
    b = np.asarray(b)
    if Wt.ndim != 2 or x.shape[-1] != Wt.shape[1] or b.shape != (Wt.shape[0],):
        raise ValueError(
            f"affine shape mismatch: W{Wt.shape} x{x.shape} b{b.shape}"
        )
    return x @ Wt.T + b


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax_with_temperature(logits: np.ndarray, T: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis, max-shifted for stability."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Per-row negative log-likelihood and its gradient w.r.t. ``logits``."""
    logp = log_softmax(logits)
    rows = np.arange(logits.shape[0])
    nll = -logp[rows, targets]
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    return nll, dlogits


class ParamStore:
    """Named parameter tensors, each paired with a gradient buffer of equal shape."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self) -> float:
        total = 0.0
        for g in self.grads.values():
            total += float(np.sum(g * g))
        return float(np.sqrt(total))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "ParamStore":
        other = ParamStore(self.dtype)
        for name, p in self.params.items():
            other.params[name] = p.copy()
            other.grads[name] = self.grads[name].copy()
        return other

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.copy()) for k, v in self.params.items())


def clip_global_norm(store: ParamStore, threshold: float) -> float:
    """Rescale all gradients jointly so their global L2 norm is at most ``threshold``.

    Returns the scale factor that was applied (1.0 when no clipping happened).
    """
    if not threshold > 0:
        raise ValueError("clip threshold must be positive")
    for name, g in store.grads.items():
        check_finite(f"gradient {name}", g)
    norm = store.grad_norm()
    if norm <= threshold:
        return 1.0
    factor = threshold / norm
    for g in store.grads.values():
        g *= factor
    return factor


class RngStreams:
    """One independent generator per purpose, all derived from a single seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: dict[str, np.random.Generator] = {}

    def _make(self, name: str) -> np.random.Generator:
        key = zlib.crc32(name.encode("utf-8"))
        ss = np.random.SeedSequence(self.seed, spawn_key=(key,))
        return np.random.Generator(np.random.PCG64(ss))

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._gens:
            self._gens[name] = self._make(name)
        return self._gens[name]

    def state(self) -> dict:
        return {
            "algorithm": RNG_ALGORITHM,
            "seed": self.seed,
            "streams": {k: g.bit_generator.state for k, g in sorted(self._gens.items())},
        }

    @classmethod
    def from_state(cls, state: dict) -> "RngStreams":
        if state.get("algorithm") != RNG_ALGORITHM:
            raise ValueError(f"unknown rng algorithm {state.get('algorithm')!r}")
        rs = cls(state["seed"])
        for name, st in state["streams"].items():
            gen = rs[name]
            gen.bit_generator.state = st
        return rs


def sample_categorical(p: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from ``p`` using exactly one uniform variate."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("invalid probability vector")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {p.sum()}, not 1")
    u = rng.random()
    cdf = np.cumsum(p)
    j = int(np.searchsorted(cdf, u, side="right"))
    if j >= p.size:
        # u landed in float slack above the final cdf value
        j = int(np.flatnonzero(p > 0)[-1])
    return j


def grad_check(
    loss_and_grad: Callable[[ParamStore], tuple[float, dict]],
    params: ParamStore,
    eps: float = 1e-5,
    detail: bool = False,
):
    """Compare analytic gradients against central finite differences.

    ``loss_and_grad(params)`` must return ``(loss, {name: grad})`` and be
    deterministic.  Returns the maximum relative error
    ``|a - n| / max(|a|, |n|, 1e-8)`` over every parameter component, or a
    ``{name: max error}`` dict when ``detail`` is true.
    """
    loss, analytic = loss_and_grad(params)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss in grad_check")
    analytic = {k: np.array(v, dtype=np.float64) for k, v in analytic.items()}

    def loss_only() -> float:
        val = loss_and_grad(params)[0]
        if not np.isfinite(val):
            raise NumericError("non-finite loss in grad_check")
        return val

    per_param = {}
    for name in params.names():
        theta = params[name]
        numeric = np.zeros_like(theta, dtype=np.float64)
        flat = theta.reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            lp = loss_only()
            flat[k] = old - eps
            lm = loss_only()
            flat[k] = old
            nflat[k] = (lp - lm) / (2.0 * eps)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        per_param[name] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
    if detail:
        return per_param
    return max(per_param.values(), default=0.0)

"""Context encoder, LSTM decoder and the three model variants.

Variants
--------
``rnn``
    plain LSTM language model, zero initial state, contexts ignored.
``c2s``
    contexts are embedded, concatenated and squashed into ``h_C``, which
    becomes the decoder's initial hidden state.
``gc2s``
    C2S plus a gated skip-connection: the output layer sees
    ``h_t + m_t * h_C`` with ``m_t = sigmoid(V h_t + b)``.

Gradients are computed by explicit backpropagation through time.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .corpus import EOS, Batch, Example, collate
from .errors import NumericError
from .numerics import (ParamStore, affine, check_finite, log_softmax, sigmoid,
                       softmax_with_temperature)

VARIANTS = ("rnn", "c2s", "gc2s")
GATES = ("z", "i", "f", "o")


@dataclass
class ModelConfig:
    variant: str
    vocab_size: int
    hidden_size: int = 512
    context_cardinalities: tuple = ()
    context_names: tuple = ()
    context_dim: int | None = None      # d; defaults to hidden_size
    embed_dim: int | None = None        # input word embedding size; defaults to hidden_size
    dropout: float = 0.5
    shared_recurrent: bool = False      # one recurrent matrix W_h shared by all four gates
    context_seeds_cell: bool = False    # also set c_0 = h_C
    gc2s_context_init: bool = True      # gC2S keeps h_0 = h_C
    dtype: str = "float64"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        self.context_cardinalities = tuple(int(k) for k in self.context_cardinalities)
        self.context_names = tuple(self.context_names)
        if self.context_dim is None:
            self.context_dim = self.hidden_size
        if self.embed_dim is None:
            self.embed_dim = self.hidden_size
        if self.hidden_size < 1 or self.context_dim < 1 or self.embed_dim < 1:
            raise ValueError("hidden_size, context_dim and embed_dim must be >= 1")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must be >= 5 (four specials plus one word)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.uses_context:
            if not self.context_cardinalities:
                raise ValueError(f"variant {self.variant} needs at least one context type")
            if any(k < 1 for k in self.context_cardinalities):
                raise ValueError("context cardinalities must be >= 1")

    @property
    def uses_context(self) -> bool:
        return self.variant != "rnn"

    @property
    def K(self) -> int:
        return len(self.context_cardinalities) if self.uses_context else 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context_cardinalities"] = list(self.context_cardinalities)
        d["context_names"] = list(self.context_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    N, D, V, d = cfg.hidden_size, cfg.embed_dim, cfg.vocab_size, cfg.context_dim
    shapes: dict[str, tuple] = {}
    if cfg.uses_context:
        for i, k in enumerate(cfg.context_cardinalities):
            shapes[f"ctx.E{i}"] = (d, k)
        shapes["ctx.W"] = (N, cfg.K * d)
        shapes["ctx.b"] = (N,)
    shapes["emb"] = (D, V)
    for g in GATES:
        shapes[f"lstm.W_{g}"] = (N, D)
    if cfg.shared_recurrent:
        shapes["lstm.U_h"] = (N, N)
    else:
        for g in GATES:
            shapes[f"lstm.U_{g}"] = (N, N)
    for g in GATES:
        shapes[f"lstm.b_{g}"] = (N,)
    if cfg.variant == "gc2s":
        shapes["gate.V"] = (N, N)
        shapes["gate.b"] = (N,)
    shapes["out.O"] = (V, N)
    shapes["out.b"] = (V,)
    return shapes


def is_bias(name: str) -> bool:
    return name.endswith(".b") or ".b_" in name


class LstmState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


class StepTrace(NamedTuple):
    pre: dict          # pre-activations keyed by gate name
    z: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    c: np.ndarray
    h: np.ndarray
    m: np.ndarray | None = None


@dataclass
class GateTrace:
    """Gate vectors recorded at every target position of one sequence."""

    tokens: np.ndarray       # target token ids, shape (T,)
    gates: np.ndarray        # m_t, shape (T, N)

    @property
    def means(self) -> np.ndarray:
        return self.gates.mean(axis=1)


# -- single-step operations ----------------------------------------------------

def encode_context(contexts, params, cardinalities: Sequence[int]) -> np.ndarray:
    """Embed each context (column lookup in ``E_i``), concatenate, then tanh(W x + b).

    ``contexts`` is one index per context type, or a (B, K) matrix.
    """
    ctx = np.asarray(contexts, dtype=np.int64)
    single = ctx.ndim == 1
    ctx = ctx.reshape(-1, len(cardinalities))
    for i, k in enumerate(cardinalities):
        if np.any(ctx[:, i] < 0) or np.any(ctx[:, i] >= k):
            raise IndexError(f"context {i} index out of range 0..{k - 1}")
    parts = [params[f"ctx.E{i}"][:, ctx[:, i]].T for i in range(len(cardinalities))]
    concat = np.concatenate(parts, axis=1)
    h_c = np.tanh(affine(concat, params["ctx.W"], params["ctx.b"]))
    return h_c[0] if single else h_c


def _recurrent_blocks(params) -> list[np.ndarray]:
    if "lstm.U_h" in params:
        return [params["lstm.U_h"]] * 4
    return [params[f"lstm.U_{g}"] for g in GATES]


def lstm_step(x_emb: np.ndarray, prev: LstmState, params) -> tuple[LstmState, StepTrace]:
    """One LSTM update with the z / i / f / o gate layout."""
    check_finite("lstm input", x_emb)
    check_finite("lstm state", prev.h)
    check_finite("lstm memory", prev.c)
    U = _recurrent_blocks(params)
    pre = {}
    for g, Ug in zip(GATES, U):
        pre[g] = affine(x_emb, params[f"lstm.W_{g}"], params[f"lstm.b_{g}"]) + prev.h @ Ug.T
    z = np.tanh(pre["z"])
    i = sigmoid(pre["i"])
    f = sigmoid(pre["f"])
    o = sigmoid(pre["o"])
    c = f * prev.c + i * z
    h = o * np.tanh(c)
    return LstmState(h, c), StepTrace(pre, z, i, f, o, c, h)


def gate(h: np.ndarray, params) -> np.ndarray:
    if "gate.V" not in params:
        raise ValueError("gate() requires gC2S parameters")
    return sigmoid(affine(h, params["gate.V"], params["gate.b"]))


def output_distribution(h, h_c, m, params, T: float = 1.0) -> np.ndarray:
    """Next-token distribution from ``h`` (and ``h + m * h_C`` for gC2S)."""
    if (h_c is None) != (m is None):
        raise ValueError("gC2S output needs both h_C and m; other variants need neither")
    s = h if h_c is None else h + m * h_c
    return softmax_with_temperature(affine(s, params["out.O"], params["out.b"]), T)


# -- batched sequence model ------------------------------------------------------

@dataclass
class ForwardResult:
    total_loss: float
    num_tokens: int
    token_logprobs: np.ndarray        # (B, T), zero where masked
    mask: np.ndarray                  # (B, T)
    gates: np.ndarray | None          # (B, T, N) for gC2S
    targets: np.ndarray
    cache: dict = field(repr=False, default_factory=dict)


class Model:
    """A config plus its parameters, with batched forward and BPTT backward."""

    def __init__(self, config: ModelConfig, params: ParamStore | None = None):
        self.config = config
        if params is None:
            params = ParamStore(np.dtype(config.dtype))
            for name, shape in param_shapes(config).items():
                params.add(name, np.zeros(shape))
        expected = param_shapes(config)
        if list(params.names()) != list(expected):
            raise ValueError(f"parameter names {params.names()} do not match config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.params = params

    @property
    def variant(self) -> str:
        return self.config.variant

    # stacked views so one matmul serves all four gates
    def _stacked(self):
        p = self.params
        Wx = np.concatenate([p[f"lstm.W_{g}"] for g in GATES], axis=0)
        U = np.concatenate(_recurrent_blocks(p), axis=0)
        b = np.concatenate([p[f"lstm.b_{g}"] for g in GATES])
        return Wx, U, b

    def context_embedding(self, contexts) -> np.ndarray | None:
        if not self.config.uses_context:
            return None
        return encode_context(contexts, self.params, self.config.context_cardinalities)

    def initial_state(self, h_c: np.ndarray | None, batch: int) -> LstmState:
        N = self.config.hidden_size
        dt = self.params.dtype
        zeros = np.zeros((batch, N), dtype=dt)
        seeds_h = h_c is not None and (self.variant == "c2s" or self.config.gc2s_context_init)
        h0 = h_c.copy() if seeds_h else zeros
        c0 = h_c.copy() if (seeds_h and self.config.context_seeds_cell) else zeros.copy()
        return LstmState(h0, c0)

    def forward(self, batch: Batch, train: bool = False, rng: np.random.Generator | None = None,
                keep_cache: bool = True) -> ForwardResult:
        cfg, p = self.config, self.params
        N, D = cfg.hidden_size, cfg.embed_dim
        tok = batch.token_matrix
        inputs, targets = tok[:, :-1], tok[:, 1:]
        mask = batch.loss_mask.astype(p.dtype)
        B, T = inputs.shape
        if T < 1:
            raise ValueError("sequences must have length >= 2")

        h_c = self.context_embedding(batch.context_matrix)
        state = self.initial_state(h_c, B)

        x = p["emb"][:, inputs].transpose(1, 2, 0)            # (B, T, D)
        mx = mh = None
        if train and cfg.dropout > 0:
            if rng is None:
                raise ValueError("train mode with dropout needs an rng")
            keep = 1.0 - cfg.dropout
            mx = (rng.random((B, T, D)) < keep).astype(p.dtype) / keep
            mh = (rng.random((B, T, N)) < keep).astype(p.dtype) / keep
            x = x * mx

        Wx, U, bias = self._stacked()
        xa = x @ Wx.T + bias                                    # input part of every gate
        H = np.empty((B, T + 1, N), dtype=p.dtype)
        C = np.empty((B, T + 1, N), dtype=p.dtype)
        A = np.empty((B, T, 4 * N), dtype=p.dtype)              # gate activations z|i|f|o
        TC = np.empty((B, T, N), dtype=p.dtype)
        H[:, 0], C[:, 0] = state.h, state.c
        for t in range(T):
            a = xa[:, t] + H[:, t] @ U.T
            z = np.tanh(a[:, :N])
            ifo = sigmoid(a[:, N:])
            A[:, t, :N] = z
            A[:, t, N:] = ifo
            i, f, o = ifo[:, :N], ifo[:, N:2 * N], ifo[:, 2 * N:]
            C[:, t + 1] = f * C[:, t] + i * z
            TC[:, t] = np.tanh(C[:, t + 1])
            H[:, t + 1] = o * TC[:, t]

        Hout = H[:, 1:]
        M = None
        S = Hout if mh is None else Hout * mh
        if cfg.variant == "gc2s":
            M = sigmoid(Hout @ p["gate.V"].T + p["gate.b"])
            S = S + M * h_c[:, None, :]

        logits = S @ p["out.O"].T + p["out.b"]
        logp = log_softmax(logits)
        tlp = np.take_along_axis(logp, targets[:, :, None], axis=2)[:, :, 0] * mask
        total = -float(np.sum(tlp))
        if not np.isfinite(total):
            raise NumericError("non-finite sequence loss")

        cache = {}
        if keep_cache:
            cache = dict(inputs=inputs, x=x, mx=mx, mh=mh, H=H, C=C, A=A, TC=TC, M=M,
                         S=S, h_c=h_c, probs=np.exp(logp), contexts=batch.context_matrix,
                         Wx=Wx, U=U)
        return ForwardResult(total, int(mask.sum()), tlp, mask, M, targets, cache)

    def backward(self, fwd: ForwardResult, scale: float = 1.0) -> None:
        """Accumulate ``scale * d(total_loss)/d(theta)`` into ``params.grads``."""
        if not fwd.cache:
            raise ValueError("backward needs a forward result computed with keep_cache=True")
        cfg, p, grads = self.config, self.params, self.params.grads
        c = fwd.cache
        N = cfg.hidden_size
        B, T = fwd.targets.shape
        H, C, A, TC, M, S = c["H"], c["C"], c["A"], c["TC"], c["M"], c["S"]
        h_c, mh = c["h_c"], c["mh"]

        dlogits = c["probs"].copy()
        np.put_along_axis(
            dlogits, fwd.targets[:, :, None],
            np.take_along_axis(dlogits, fwd.targets[:, :, None], axis=2) - 1.0, axis=2)
        dlogits *= (fwd.mask * scale)[:, :, None]
        V = dlogits.shape[2]
        flat_dl = dlogits.reshape(-1, V)
        grads["out.O"] += flat_dl.T @ S.reshape(-1, N)
        grads["out.b"] += flat_dl.sum(axis=0)
        dS = dlogits @ p["out.O"]                                 # (B, T, N)

        dHout = dS if mh is None else dS * mh
        dhc = None
        if cfg.variant == "gc2s":
            dhc = np.sum(dS * M, axis=1)
            dam = dS * h_c[:, None, :] * M * (1.0 - M)
            grads["gate.V"] += dam.reshape(-1, N).T @ H[:, 1:].reshape(-1, N)
            grads["gate.b"] += dam.reshape(-1, N).sum(axis=0)
            dHout = dHout + dam @ p["gate.V"]

        U = c["U"]
        dA = np.empty_like(A)
        dh_next = np.zeros((B, N), dtype=p.dtype)
        dc_next = np.zeros((B, N), dtype=p.dtype)
        for t in range(T - 1, -1, -1):
            dh = dHout[:, t] + dh_next
            z, i, f, o = (A[:, t, k * N:(k + 1) * N] for k in range(4))
            tc = TC[:, t]
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dA[:, t, :N] = dc * i * (1.0 - z * z)
            dA[:, t, N:2 * N] = dc * z * i * (1.0 - i)
            dA[:, t, 2 * N:3 * N] = dc * C[:, t] * f * (1.0 - f)
            dA[:, t, 3 * N:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dA[:, t] @ U

        flat_dA = dA.reshape(-1, 4 * N)
        dWx = flat_dA.T @ c["x"].reshape(-1, cfg.embed_dim)
        dU = flat_dA.T @ H[:, :-1].reshape(-1, N)
        db = flat_dA.sum(axis=0)
        for k, g in enumerate(GATES):
            grads[f"lstm.W_{g}"] += dWx[k * N:(k + 1) * N]
            grads[f"lstm.b_{g}"] += db[k * N:(k + 1) * N]
        if cfg.shared_recurrent:
            grads["lstm.U_h"] += sum(dU[k * N:(k + 1) * N] for k in range(4))
        else:
            for k, g in enumerate(GATES):
                grads[f"lstm.U_{g}"] += dU[k * N:(k + 1) * N]

        dx = dA @ c["Wx"]
        if c["mx"] is not None:
            dx = dx * c["mx"]
        np.add.at(grads["emb"].T, c["inputs"].reshape(-1), dx.reshape(-1, cfg.embed_dim))

        if not cfg.uses_context:
            return
        seeds_h = cfg.variant == "c2s" or cfg.gc2s_context_init
        if seeds_h:
            dhc = dh_next if dhc is None else dhc + dh_next
            if cfg.context_seeds_cell:
                dhc = dhc + dc_next
        if dhc is None:
            return
        self._encoder_backward(c["contexts"], h_c, dhc)

    def _encoder_backward(self, contexts, h_c, dhc) -> None:
        cfg, p, grads = self.config, self.params, self.params.grads
        d = cfg.context_dim
        parts = [p[f"ctx.E{i}"][:, contexts[:, i]].T for i in range(cfg.K)]
        concat = np.concatenate(parts, axis=1)
        da = dhc * (1.0 - h_c * h_c)
        grads["ctx.W"] += da.T @ concat
        grads["ctx.b"] += da.sum(axis=0)
        dconcat = da @ p["ctx.W"]
        for i in range(cfg.K):
            np.add.at(grads[f"ctx.E{i}"].T, contexts[:, i], dconcat[:, i * d:(i + 1) * d])

    # -- incremental decoding --------------------------------------------------

    def start(self, contexts):
        """Decoder state for one sequence: (LstmState with batch dim 1, h_C or None)."""
        h_c = None
        if self.config.uses_context:
            h_c = self.context_embedding(np.asarray(contexts).reshape(1, -1))
        return self.initial_state(h_c, 1), h_c

    def step(self, token: int, state: LstmState, h_c):
        """Feed one token; returns (logits, new state, gate vector or None)."""
        p = self.params
        new, _ = lstm_step(p["emb"][:, token][None, :], state, p)
        m = None
        s = new.h
        if self.variant == "gc2s":
            m = gate(new.h, p)
            s = s + m * h_c
        logits = affine(s, p["out.O"], p["out.b"])[0]
        return logits, new, (None if m is None else m[0])


# -- whole-sequence helpers ----------------------------------------------------------

def forward_sequence(example: Example, model: Model, mode: str = "eval",
                     rng: np.random.Generator | None = None):
    """Loss of one example under teacher forcing.

    Returns ``(total_loss, per_token_logprobs, gate_trace_or_None, forward_result)``.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if len(example.tokens) < 2:
        raise ValueError("example must contain at least BOS and EOS")
    res = model.forward(collate([example]), train=(mode == "train"), rng=rng)
    trace = None
    if res.gates is not None:
        trace = GateTrace(res.targets[0].copy(), res.gates[0].copy())
    return res.total_loss, res.token_logprobs[0].copy(), trace, res


def backward_sequence(model: Model, cached: ForwardResult | None, scale: float = 1.0) -> None:
    if cached is None:
        raise ValueError("backward_sequence needs the cached forward result")
    model.backward(cached, scale)


def loss_and_grad(model: Model, batches: Sequence[Batch], per_token: bool = False):
    """Deterministic (eval-mode) loss and gradient over ``batches``; used for gradient checks."""
    model.params.zero_grad()
    results = [model.forward(b, train=False) for b in batches]
    total = sum(r.total_loss for r in results)
    ntok = sum(r.num_tokens for r in results)
    scale = 1.0 / ntok if per_token else 1.0
    for r in results:
        model.backward(r, scale)
    grads = {k: v.copy() for k, v in model.params.grads.items()}
    return total * scale, grads


def sequence_logprob(model: Model, tokens: Sequence[int], contexts) -> float:
    """Log-probability of a full BOS..EOS (or truncated) token sequence."""
    ex = Example(tuple(int(t) for t in tokens), tuple(int(c) for c in np.atleast_1d(contexts)))
    return float(np.sum(forward_sequence(ex, model)[1]))


__all__ = [
    "VARIANTS", "ModelConfig", "Model", "LstmState", "StepTrace", "GateTrace", "ForwardResult",
    "encode_context", "lstm_step", "gate", "output_distribution", "forward_sequence",
    "backward_sequence", "loss_and_grad", "sequence_logprob", "param_shapes", "is_bias", "EOS",
]

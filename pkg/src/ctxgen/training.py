"""SGD training recipe, learning-rate halving and checkpoint files."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import Example, collate, make_batches
from .errors import (CheckpointVersionError, CorruptCheckpointError,
                     FingerprintMismatchError, NumericError)
from .model import Model, ModelConfig, is_bias, param_shapes
from .numerics import ParamStore, RngStreams, check_finite, clip_global_norm

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CTXGCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 128
    initial_lr: float = 1.0
    clip_threshold: float = 5.0
    init_range: float = 0.1
    max_epochs: int = 10
    seed: int = 0
    dropout: float = 0.5
    hidden_size: int = 512
    bucket_width: int = 10
    min_lr: float = 1e-6
    lr_schedule: str = "halve"   # "halve" on non-improving validation perplexity, or "constant"
    lr_compare: str = "last"     # "last": previous epoch only; "best": best so far
    loss_normalization: str = "sequence"   # divide batch loss by "sequence" count, "token" count, or "none"

    def __post_init__(self):
        for name in ("batch_size", "initial_lr", "clip_threshold", "init_range",
                     "max_epochs", "hidden_size", "bucket_width"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_schedule not in ("halve", "constant"):
            raise ValueError("lr_schedule must be 'halve' or 'constant'")
        if self.lr_compare not in ("last", "best"):
            raise ValueError("lr_compare must be 'last' or 'best'")
        if self.loss_normalization not in ("token", "sequence", "none"):
            raise ValueError("loss_normalization must be 'token', 'sequence' or 'none'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    valid_ppl: float
    lr: float
    lr_halved: bool
    wall_time: float = field(default=0.0, compare=False)

    def log_line(self) -> str:
        # wall time stays out of the file so reruns produce identical logs
        d = asdict(self)
        d.pop("wall_time")
        return json.dumps(d, sort_keys=True)


def init_params(config: ModelConfig, rng: np.random.Generator, init_range: float = 0.1) -> ParamStore:
    """Weights ~ U(-init_range, init_range) in parameter order; biases start at 0."""
    store = ParamStore(np.dtype(config.dtype))
    for name, shape in param_shapes(config).items():
        if is_bias(name):
            store.add(name, np.zeros(shape))
        else:
            store.add(name, rng.uniform(-init_range, init_range, size=shape))
    return store


def sgd_step(params: ParamStore, lr: float) -> None:
    """theta <- theta - lr * grad, all or nothing."""
    updated = {}
    for name, p in params.params.items():
        new = p - lr * params.grads[name]
        check_finite(f"updated {name}", new)
        updated[name] = new
    for name, new in updated.items():
        params.params[name][...] = new


def update_lr(history: Sequence[float], lr: float, compare: str = "last") -> float:
    """Halve ``lr`` when the newest validation perplexity is not below the reference.

    The reference is the previous epoch (``compare="last"``) or the best earlier
    epoch (``compare="best"``).
    """
    if len(history) < 2:
        return lr
    ref = history[-2] if compare == "last" else min(history[:-1])
    return lr / 2.0 if history[-1] >= ref else lr


def evaluate_loss(model: Model, examples: Sequence[Example], batch_size: int = 128):
    """Eval-mode total loss and token count, in a fixed (length-sorted) order."""
    order = sorted(range(len(examples)), key=lambda i: (len(examples[i]), i))
    total, ntok = 0.0, 0
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        res = model.forward(collate([examples[i] for i in idx], idx), train=False, keep_cache=False)
        total += res.total_loss
        ntok += res.num_tokens
    return total, ntok


def perplexity_of(model: Model, examples: Sequence[Example], batch_size: int = 128) -> float:
    total, ntok = evaluate_loss(model, examples, batch_size)
    return math.exp(total / ntok)


def _loss_scale(config: TrainConfig, num_tokens: int, num_sequences: int) -> float:
    if config.loss_normalization == "token":
        return 1.0 / num_tokens
    if config.loss_normalization == "sequence":
        return 1.0 / num_sequences
    return 1.0


def run_epoch(model: Model, examples: Sequence[Example], config: TrainConfig,
              streams: RngStreams, lr: float,
              on_batch: Callable[[int, float, float], None] | None = None) -> float:
    """One pass of forward / backward / clip / SGD over seeded batches.

    Returns the token-averaged training loss.  ``on_batch`` receives
    ``(batch_index, pre_clip_norm, clip_factor)``.
    """
    batches = make_batches(examples, config.batch_size, streams["batching"], config.bucket_width)
    total, ntok = 0.0, 0
    for bi, batch in enumerate(batches):
        model.params.zero_grad()
        try:
            res = model.forward(batch, train=True, rng=streams["dropout"])
            model.backward(res, scale=_loss_scale(config, res.num_tokens, batch.size))
            norm = model.params.grad_norm()
            factor = clip_global_norm(model.params, config.clip_threshold)
            sgd_step(model.params, lr)
        except NumericError as exc:
            raise NumericError(f"batch {bi}: {exc}") from exc
        if on_batch is not None:
            on_batch(bi, norm, factor)
        total += res.total_loss
        ntok += res.num_tokens
    return total / ntok


class Trainer:
    """Epoch loop with validation, lr halving and resumable state."""

    def __init__(self, model: Model, config: TrainConfig, streams: RngStreams | None = None,
                 vocab_fingerprint: str = "", extra: dict | None = None):
        self.model = model
        self.config = config
        self.streams = streams if streams is not None else RngStreams(config.seed)
        self.vocab_fingerprint = vocab_fingerprint
        self.extra = dict(extra or {})
        self.epoch = 0
        self.lr = config.initial_lr
        self.history: list[float] = []
        self.reports: list[EpochReport] = []

    @classmethod
    def create(cls, model_config: ModelConfig, config: TrainConfig, **kw) -> "Trainer":
        streams = RngStreams(config.seed)
        params = init_params(model_config, streams["init"], config.init_range)
        return cls(Model(model_config, params), config, streams, **kw)

    @property
    def finished(self) -> bool:
        return self.epoch >= self.config.max_epochs or self.lr < self.config.min_lr

    def train_epoch(self, train: Sequence[Example], valid: Sequence[Example],
                    verbose: bool = False) -> EpochReport:
        t0 = time.perf_counter()
        on_batch = None
        if verbose:
            def on_batch(bi, norm, factor):
                log.info("epoch %d batch %d grad norm %.4g -> %.4g",
                         self.epoch + 1, bi, norm, norm * factor)
        lr_used = self.lr
        loss = run_epoch(self.model, train, self.config, self.streams, lr_used, on_batch)
        ppl = perplexity_of(self.model, valid, self.config.batch_size)
        self.history.append(ppl)
        if self.config.lr_schedule == "halve":
            self.lr = update_lr(self.history, self.lr, self.config.lr_compare)
        self.epoch += 1
        rep = EpochReport(self.epoch, loss, ppl, lr_used, self.lr < lr_used,
                          time.perf_counter() - t0)
        self.reports.append(rep)
        return rep

    def fit(self, train, valid, log_path=None, checkpoint_path=None, verbose=False):
        while not self.finished:
            rep = self.train_epoch(train, valid, verbose)
            log.info("epoch %d train loss %.4f valid ppl %.3f lr %g%s", rep.epoch,
                     rep.train_loss, rep.valid_ppl, rep.lr, " (halved)" if rep.lr_halved else "")
            if log_path is not None:
                with open(log_path, "a", encoding="utf-8", newline="\n") as fh:
                    fh.write(rep.log_line() + "\n")
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, self.to_checkpoint())
        return self.reports

    def to_checkpoint(self) -> "Checkpoint":
        return Checkpoint(
            model_config=self.model.config,
            train_config=self.config,
            epoch=self.epoch,
            lr=self.lr,
            vocab_fingerprint=self.vocab_fingerprint,
            params=self.model.params.state_dict(),
            rng_state=self.streams.state(),
            history=list(self.history),
            extra=dict(self.extra),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint") -> "Trainer":
        model = ckpt.build_model()
        tr = cls(model, ckpt.train_config, RngStreams.from_state(ckpt.rng_state),
                 ckpt.vocab_fingerprint, ckpt.extra)
        tr.epoch = ckpt.epoch
        tr.lr = ckpt.lr
        tr.history = list(ckpt.history)
        return tr


# -- checkpoint container -----------------------------------------------------------

@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int
    lr: float
    vocab_fingerprint: str
    params: dict
    rng_state: dict
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def build_model(self) -> Model:
        store = ParamStore(np.dtype(self.model_config.dtype))
        for name, arr in self.params.items():
            store.add(name, arr)
        return Model(self.model_config, store)


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    buf.write(struct.pack("<Q", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<Q", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write header + tensors to ``path`` atomically (temp file, then rename)."""
    payload = io.BytesIO()
    for name, arr in ckpt.params.items():
        _write_tensor(payload, name, np.asarray(arr))
    body = payload.getvalue()
    header = {
        "format_version": ckpt.version,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "lr": ckpt.lr,
        "history": ckpt.history,
        "rng_state": ckpt.rng_state,
        "vocab_fingerprint": ckpt.vocab_fingerprint,
        "extra": ckpt.extra,
        "num_tensors": len(ckpt.params),
        "payload_bytes": len(body),
        "payload_sha256": hashlib.sha256(body).hexdigest(),
    }
    hb = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(body)
    os.replace(tmp, path)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptCheckpointError("checkpoint is truncated")
    return data


def load_checkpoint(path, vocab_fingerprint: str | None = None) -> Checkpoint:
    """Read a checkpoint; verifies format version, payload hash and (optionally) vocabulary."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CorruptCheckpointError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", _read_exact(fh, 8))
        try:
            header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptCheckpointError(f"unreadable checkpoint header: {exc}") from exc
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint format {header.get('format_version')}, "
                f"this library reads {CHECKPOINT_VERSION}")
        body = _read_exact(fh, header["payload_bytes"])
        if fh.read(1):
            raise CorruptCheckpointError("trailing bytes after checkpoint payload")
    if hashlib.sha256(body).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpointError("checkpoint payload hash mismatch")
    if vocab_fingerprint is not None and vocab_fingerprint != header["vocab_fingerprint"]:
        raise FingerprintMismatchError("vocabulary does not match the one used for training")

    buf = io.BytesIO(body)
    params = {}
    for _ in range(header["num_tensors"]):
        (nlen,) = struct.unpack("<Q", buf.read(8))
        name = buf.read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", buf.read(8))
        shape = struct.unpack(f"<{rank}Q", buf.read(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(buf.read(8 * count), dtype="<f8").reshape(shape).copy()
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        train_config=TrainConfig.from_dict(header["train_config"]),
        epoch=header["epoch"],
        lr=header["lr"],
        vocab_fingerprint=header["vocab_fingerprint"],
        params=params,
        rng_state=header["rng_state"],
        history=header["history"],
        extra=header["extra"],
        version=header["format_version"],
    )

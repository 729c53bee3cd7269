"""``ctxgen`` command line: build-vocab, train, sample, eval, inspect-gates, detect.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

from . import __version__
from .corpus import (CONTEXT_FIELDS, DEFAULT_MAX_WORDS, DEFAULT_VOCAB_SIZE, ContextSchema,
                     Vocabulary, build_vocab, encode_records, load_examples, split_dataset)
from .errors import CheckpointError, DataError, NumericError
from .evaluation import detection_experiment, gate_attribution, perplexity
from .generation import SamplingConfig, beam_search, greedy_decode, sample_sequence
from .model import ModelConfig
from .numerics import RngStreams
from .training import Trainer, TrainConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("ctxgen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_file(path, what):
    if not os.path.isfile(path):
        raise DataError(f"{what} not found: {path}")


def parse_contexts(spec: str) -> list[str]:
    """'sentiment,product' / 'both' / 'none' -> ordered record field names."""
    spec = spec.strip().lower()
    if spec in ("", "none"):
        return []
    if spec == "both":
        spec = "sentiment,product"
    fields = []
    for part in spec.split(","):
        part = part.strip()
        if part not in CONTEXT_FIELDS:
            raise UsageError(f"unknown context {part!r} (choose from sentiment, product, both, none)")
        f = CONTEXT_FIELDS[part]
        if f in fields:
            raise UsageError(f"context {part!r} given twice")
        fields.append(f)
    return fields


# -- subcommands ---------------------------------------------------------------------

def cmd_build_vocab(args) -> int:
    _require_file(args.corpus, "corpus")
    records = list(load_examples(args.corpus, max_words=args.max_words))
    vocab = build_vocab(records, args.size)
    vocab.save(args.out)
    print(f"wrote {len(vocab)} tokens ({len(vocab) - 4} words) to {args.out}")
    return EXIT_OK


def _configs(args, schema) -> tuple[ModelConfig, TrainConfig]:
    tc = TrainConfig(
        batch_size=args.batch_size, initial_lr=args.lr, clip_threshold=args.clip,
        init_range=args.init_range, max_epochs=args.epochs, seed=args.seed,
        dropout=args.dropout, hidden_size=args.hidden, bucket_width=args.bucket_width,
        lr_schedule=args.lr_schedule, lr_compare=args.lr_compare,
        loss_normalization=args.loss_normalization,
    )
    mc = ModelConfig(
        variant=args.variant, vocab_size=args.vocab_size, hidden_size=args.hidden,
        context_cardinalities=tuple(schema.cardinalities) if schema else (),
        context_names=tuple(schema.names) if schema else (),
        context_dim=args.context_dim, embed_dim=args.embed_dim, dropout=args.dropout,
        shared_recurrent=args.shared_recurrent, context_seeds_cell=args.context_seeds_cell,
        gc2s_context_init=not args.no_gc2s_context_init, dtype=args.dtype,
    )
    return mc, tc


def cmd_train(args) -> int:
    fields = parse_contexts(args.contexts)
    if args.variant == "rnn" and fields:
        log.warning("--variant rnn ignores contexts %s", ",".join(fields))
        fields = []
    if args.variant != "rnn" and not fields and not args.resume:
        raise UsageError(f"--variant {args.variant} needs at least one context")
    _require_file(args.corpus, "corpus")
    _require_file(args.vocab, "vocabulary")
    if args.resume:
        _require_file(args.resume, "checkpoint")
    vocab = Vocabulary.load(args.vocab)

    ckpt = None
    if args.resume:
        # data handling follows the original run, not the current flags
        ckpt = load_checkpoint(args.resume, vocab.fingerprint())
        schema_d = ckpt.extra.get("schema")
        schema = ContextSchema.from_dict(schema_d) if schema_d else None
        fields = schema.names if schema else []
        args.max_words = ckpt.extra.get("max_words", args.max_words)
        args.drop_unknown = ckpt.extra.get("drop_unknown", args.drop_unknown)
        seed = ckpt.train_config.seed
        stream = load_examples(args.corpus, schema, max_words=args.max_words)
        records = list(stream)
    else:
        seed = args.seed
        stream = load_examples(args.corpus, max_words=args.max_words)
        records = list(stream)
        schema = ContextSchema.infer(records, fields) if fields else None
    examples = encode_records(records, vocab, schema or _NO_CONTEXT, args.drop_unknown)
    train, valid, test = split_dataset(examples, seed)

    if ckpt is not None:
        if args.epochs is not None:
            ckpt.train_config.max_epochs = args.epochs
        trainer = Trainer.from_checkpoint(ckpt)
    else:
        args.vocab_size = len(vocab)
        if args.epochs is None:
            args.epochs = 10
        mc, tc = _configs(args, schema)
        trainer = Trainer.create(mc, tc, vocab_fingerprint=vocab.fingerprint(), extra={
            "schema": schema.to_dict() if schema else None,
            "max_words": args.max_words,
            "drop_unknown": args.drop_unknown,
        })

    os.makedirs(args.out, exist_ok=True)
    manifest = {
        "tool": "ctxgen", "version": __version__, "command": "train",
        "model_config": trainer.model.config.to_dict(),
        "train_config": trainer.config.to_dict(),
        "seed": trainer.config.seed,
        "contexts": fields,
        "max_words": args.max_words, "drop_unknown": args.drop_unknown,
        "inputs": {"corpus": {"path": args.corpus, "sha256": _sha256(args.corpus)},
                   "vocab": {"path": args.vocab, "sha256": _sha256(args.vocab)},
                   "resume": args.resume},
        "split_sizes": [len(train), len(valid), len(test)],
        "skipped_lines": stream.skipped, "filtered_long": stream.filtered,
        "artifacts": {"epoch_log": "epochs.jsonl", "checkpoints": "epoch-NNN.ckpt",
                      "final": "final.ckpt"},
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    log_path = os.path.join(args.out, "epochs.jsonl")
    if not args.resume and os.path.exists(log_path):
        os.remove(log_path)
    while not trainer.finished:
        rep = trainer.train_epoch(train, valid, verbose=args.verbose)
        with open(log_path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(rep.log_line() + "\n")
        path = os.path.join(args.out, f"epoch-{rep.epoch:03d}.ckpt")
        save_checkpoint(path, trainer.to_checkpoint())
        print(f"epoch {rep.epoch}: train loss {rep.train_loss:.4f}  valid ppl {rep.valid_ppl:.3f}"
              f"  lr {rep.lr:g}{'  (lr halved)' if rep.lr_halved else ''}")
    final = os.path.join(args.out, "final.ckpt")
    save_checkpoint(final, trainer.to_checkpoint())
    print(f"wrote {final}")
    return EXIT_OK


class _NoContext:
    """Stand-in schema for the context-free baseline."""

    def encode(self, values):
        return ()


_NO_CONTEXT = _NoContext()


def _load_model(args):
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.vocab, "vocabulary")
    vocab = Vocabulary.load(args.vocab)
    ckpt = load_checkpoint(args.checkpoint, vocab.fingerprint())
    schema_d = ckpt.extra.get("schema")
    schema = ContextSchema.from_dict(schema_d) if schema_d else None
    return ckpt, ckpt.build_model(), vocab, schema


def _dataset(path, vocab, schema, max_words):
    _require_file(path, "dataset")
    records = list(load_examples(path, schema, max_words=max_words))
    return encode_records(records, vocab, schema or _NO_CONTEXT)


def cmd_sample(args) -> int:
    if args.rating is not None and args.rating not in range(1, 6):
        raise UsageError(f"--rating must be 1-5, got {args.rating}")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if not args.temperature > 0:
        raise UsageError("--temperature must be positive")
    ckpt, model, vocab, schema = _load_model(args)
    contexts = ()
    if schema is not None:
        given = {"rating": None if args.rating is None else str(args.rating), "product": args.product}
        idx = []
        for t in schema.types:
            if given[t.name] is None:
                raise UsageError(f"this model needs --{t.name}")
            if given[t.name] not in t.values:
                raise UsageError(f"unknown {t.name} {given[t.name]!r}")
            idx.append(t.values.index(given[t.name]))
        contexts = tuple(idx)
    max_len = args.max_len or ckpt.extra.get("max_words") or DEFAULT_MAX_WORDS
    cfg = SamplingConfig(args.temperature, max_len, args.seed, args.n, args.mask_unk)
    rng = RngStreams(args.seed)["sampling"]
    if args.method == "sample":
        outs = [sample_sequence(model, contexts, cfg, rng, vocab) for _ in range(args.n)]
    elif args.method == "greedy":
        outs = [greedy_decode(model, contexts, max_len, args.mask_unk, vocab)]
    else:
        outs = beam_search(model, contexts, args.beam_width, max_len, vocab)[: args.n]
    lines = [g.to_json(vocab, schema) for g in outs]
    _emit(args.out, lines)
    return EXIT_OK


def _emit(path, lines):
    text = "".join(line + "\n" for line in lines)
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def cmd_eval(args) -> int:
    ckpt, model, vocab, schema = _load_model(args)
    data = _dataset(args.dataset, vocab, schema, args.max_words)
    rep = perplexity(data, model, args.bucket_width, label=model.variant)
    print(rep.table(), file=sys.stderr)
    _emit(args.out, [rep.to_json()])
    return EXIT_OK


def cmd_inspect_gates(args) -> int:
    ckpt, model, vocab, schema = _load_model(args)
    if model.variant != "gc2s":
        raise UsageError(f"inspect-gates requires gC2S, checkpoint is {model.variant}")
    data = _dataset(args.dataset, vocab, schema, args.max_words)
    rep = gate_attribution(data, model, args.min_count, vocab)
    print(rep.table(args.top), file=sys.stderr)
    _emit(args.out, [rep.to_json()])
    return EXIT_OK


def _read_texts(path) -> list[str]:
    _require_file(path, "text file")
    texts = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                texts.append(obj["text"] if isinstance(obj, dict) else line.strip())
            except (json.JSONDecodeError, KeyError):
                texts.append(line.strip())
    return texts


def cmd_detect(args) -> int:
    real, fake = _read_texts(args.real), _read_texts(args.fake)
    if not 0 < args.test_fraction < 1:
        raise UsageError("--test-fraction must be in (0, 1)")
    _, rep = detection_experiment(real, fake, args.seed, args.test_fraction, args.l2,
                                  binary=not args.counts)
    print(rep.table(), file=sys.stderr)
    _emit(args.out, [rep.to_json()])
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="ctxgen", description="Context-conditioned review generation (C2S / gC2S).",
                formatter_class=fmt)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-batch gradient norms")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build-vocab", help="most frequent words of a corpus", formatter_class=fmt)
    s.add_argument("--corpus", required=True, help="JSON-lines corpus (text, rating, product)")
    s.add_argument("--size", type=int, default=DEFAULT_VOCAB_SIZE, help="number of words kept")
    s.add_argument("--max-words", type=int, default=DEFAULT_MAX_WORDS, help="drop longer reviews")
    s.add_argument("--out", required=True, help="vocabulary file, one token per line")
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("train", help="train RNN / C2S / gC2S", formatter_class=fmt)
    s.add_argument("--corpus", required=True, help="JSON-lines corpus")
    s.add_argument("--vocab", required=True, help="vocabulary file from build-vocab")
    s.add_argument("--variant", choices=["rnn", "c2s", "gc2s"], default="gc2s",
                   help="model variant")
    s.add_argument("--contexts", default="sentiment,product",
                   help="comma list of sentiment,product, or 'both' / 'none'")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--epochs", type=int, default=None,
                   help="max epochs; 10 for a fresh run, unchanged on --resume")
    s.add_argument("--batch-size", type=int, default=128, help="sequences per SGD step")
    s.add_argument("--lr", type=float, default=1.0, help="initial learning rate")
    s.add_argument("--clip", type=float, default=5.0, help="global gradient norm threshold")
    s.add_argument("--hidden", type=int, default=512, help="LSTM hidden size")
    s.add_argument("--context-dim", type=int, default=None,
                   help="context embedding size; hidden size when unset")
    s.add_argument("--embed-dim", type=int, default=None,
                   help="word embedding size; hidden size when unset")
    s.add_argument("--init-range", type=float, default=0.1, help="weights ~ U(-r, r)")
    s.add_argument("--dropout", type=float, default=0.5,
                   help="dropout rate on embeddings and LSTM outputs")
    s.add_argument("--seed", type=int, default=0, help="seed for every random stream")
    s.add_argument("--max-words", type=int, default=DEFAULT_MAX_WORDS,
                   help="drop reviews longer than this")
    s.add_argument("--bucket-width", type=int, default=10, help="batching length bucket")
    s.add_argument("--drop-unknown", action="store_true", help="remove reviews with OOV words")
    s.add_argument("--lr-schedule", choices=["halve", "constant"], default="halve",
                   help="halve lr when validation perplexity stops improving, or keep it")
    s.add_argument("--lr-compare", choices=["last", "best"], default="last",
                   help="compare with the previous epoch or the best so far")
    s.add_argument("--loss-normalization", choices=["sequence", "token", "none"], default="sequence",
                   help="divide the batch loss by sequences, tokens, or nothing")
    s.add_argument("--shared-recurrent", action="store_true",
                   help="one recurrent matrix for all gates")
    s.add_argument("--context-seeds-cell", action="store_true", help="also set c_0 = h_C")
    s.add_argument("--no-gc2s-context-init", action="store_true", help="gC2S starts from h_0 = 0")
    s.add_argument("--dtype", choices=["float64", "float32"], default="float64",
                   help="floating point precision")
    s.add_argument("--resume", default=None, help="continue from this checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate reviews for given contexts", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="trained checkpoint")
    s.add_argument("--vocab", required=True, help="vocabulary the model was trained with")
    s.add_argument("--rating", type=int, default=None, help="rating context, 1-5")
    s.add_argument("--product", default=None, help="product id context")
    s.add_argument("--n", type=int, default=1, help="number of samples (beams for --method beam)")
    s.add_argument("--temperature", type=float, default=0.7, help="softmax temperature")
    s.add_argument("--max-len", type=int, default=None,
                   help="longest sample; the training length cap when unset")
    s.add_argument("--method", choices=["sample", "greedy", "beam"], default="sample",
                   help="decoding method")
    s.add_argument("--beam-width", type=int, default=5, help="beam size for --method beam")
    s.add_argument("--mask-unk", action="store_true", help="never emit <unk>")
    s.add_argument("--seed", type=int, default=0, help="sampling seed")
    s.add_argument("--out", default="-", help="output JSON-lines file, '-' for stdout")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="perplexity overall and by length", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="trained checkpoint")
    s.add_argument("--vocab", required=True, help="vocabulary the model was trained with")
    s.add_argument("--dataset", required=True, help="JSON-lines reviews to score")
    s.add_argument("--bucket-width", type=int, default=20, help="length bucket width in words")
    s.add_argument("--max-words", type=int, default=DEFAULT_MAX_WORDS,
                   help="drop reviews longer than this")
    s.add_argument("--out", default="-", help="report file, '-' for stdout")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect-gates", help="tokens with the largest mean gate", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="trained gC2S checkpoint")
    s.add_argument("--vocab", required=True, help="vocabulary the model was trained with")
    s.add_argument("--dataset", required=True, help="JSON-lines reviews to run through the model")
    s.add_argument("--min-count", type=int, default=5, help="ignore tokens seen fewer times")
    s.add_argument("--top", type=int, default=30, help="rows shown in the printed table")
    s.add_argument("--max-words", type=int, default=DEFAULT_MAX_WORDS,
                   help="drop reviews longer than this")
    s.add_argument("--out", default="-", help="report file, '-' for stdout")
    s.set_defaults(func=cmd_inspect_gates)

    s = sub.add_parser("detect", help="n-gram LR real-vs-fake detector", formatter_class=fmt)
    s.add_argument("--real", required=True, help="real reviews (JSON lines or plain text)")
    s.add_argument("--fake", required=True, help="generated reviews (JSON lines or plain text)")
    s.add_argument("--seed", type=int, default=0, help="train/test split seed")
    s.add_argument("--test-fraction", type=float, default=0.5,
                   help="share of each side held out for testing")
    s.add_argument("--l2", type=float, default=1e-4, help="L2 penalty of the logistic regression")
    s.add_argument("--counts", action="store_true", help="n-gram counts instead of presence")
    s.add_argument("--out", default="-", help="report file, '-' for stdout")
    s.set_defaults(func=cmd_detect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"ctxgen {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"ctxgen {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"ctxgen {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

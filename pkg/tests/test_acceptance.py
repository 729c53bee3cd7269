"""Acceptance criteria 1-10, each at its stated tolerance.

Every test prints one ``criterion N PASS|FAIL`` line (visible with ``-s``); the
terminal summary repeats them all at the end of the run.
"""
import json
import math
import shutil
import time

import numpy as np
import pytest

from conftest import TINY_CARDS, tiny_batch, tiny_model
from ctxgen.cli import main
from ctxgen.corpus import Example, collate
from ctxgen.evaluation import (classify_corpus, gate_attribution, perplexity, position_losses,
                               train_ngram_classifier)
from ctxgen.generation import SamplingConfig, greedy_decode, sample_sequence
from ctxgen.model import Model, ModelConfig, loss_and_grad, sequence_logprob
from ctxgen.numerics import grad_check, softmax_with_temperature
from ctxgen.synthetic import (context_selection_task, long_range_task, memorization_task,
                              toy_review_records, write_jsonl)
from ctxgen.training import Trainer, TrainConfig, perplexity_of, update_lr

SEEDS = (0, 1, 2)


def report(request, n, ok, detail):
    request.node.criterion_detail = detail
    print(f"\ncriterion {n} {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


# -- 1 ---------------------------------------------------------------------------------------

@pytest.mark.criterion(1, "BPTT gradients match central differences (< 1e-4)")
def test_c1_gradient_correctness(request):
    t0 = time.perf_counter()
    errs = {}
    for variant in ("rnn", "c2s", "gc2s"):
        m = tiny_model(variant, seed=0, V=12, N=4)
        _, batch = tiny_batch(seed=0, n=4, length=6, V=12, cards=TINY_CARDS)
        assert m.params.dtype == np.float64
        per = grad_check(lambda ps: loss_and_grad(m, [batch]), m.params, eps=1e-5, detail=True)
        errs[variant] = max(per.values())
    elapsed = time.perf_counter() - t0
    ok = all(e < 1e-4 for e in errs.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; {elapsed:.1f}s"
    assert report(request, 1, ok, detail), detail


# -- 2 ---------------------------------------------------------------------------------------

@pytest.mark.criterion(2, "zero-initialised model has perplexity V = 20 (within 1e-6)")
def test_c2_uniform_perplexity(request):
    rng = np.random.default_rng(0)
    exs = [Example((1, *map(int, rng.integers(3, 20, int(rng.integers(1, 60)))), 2),
                   (int(rng.integers(2)), int(rng.integers(3)))) for _ in range(50)]
    ppls = {v: perplexity(exs, Model(ModelConfig(v, 20, 8, TINY_CARDS))).perplexity
            for v in ("rnn", "c2s", "gc2s")}
    ok = all(abs(p - 20.0) < 1e-6 for p in ppls.values())
    detail = ", ".join(f"{k} {v:.9f}" for k, v in ppls.items())
    assert report(request, 2, ok, detail), detail


# -- 3 ---------------------------------------------------------------------------------------

@pytest.mark.criterion(3, "gC2S (N=32) overfits 50 sequences to train perplexity < 1.5 in 200 epochs")
def test_c3_overfit_floor(request):
    t0 = time.perf_counter()
    task = memorization_task(n=50, length=10, seed=0)
    mc = ModelConfig("gc2s", len(task.vocab), 32, task.schema.cardinalities, dropout=0.0)
    tc = TrainConfig(batch_size=5, initial_lr=0.1, clip_threshold=5.0, init_range=0.1,
                     max_epochs=200, dropout=0.0, hidden_size=32, lr_schedule="constant")
    tr = Trainer.create(mc, tc)
    ppl, epoch = math.inf, 0
    while epoch < 200 and ppl >= 1.5:
        tr.train_epoch(task.train, task.valid)
        epoch = tr.epoch
        ppl = perplexity_of(tr.model, task.train)
    elapsed = time.perf_counter() - t0
    ok = ppl < 1.5 and elapsed < 120
    detail = f"train ppl {ppl:.3f} after {epoch} epochs; {elapsed:.1f}s"
    assert report(request, 3, ok, detail), detail


# -- 4 ---------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def selection_model():
    task = context_selection_task(seed=0)
    mc = ModelConfig("gc2s", len(task.vocab), 32, task.schema.cardinalities, dropout=0.0)
    tc = TrainConfig(batch_size=10, initial_lr=0.1, max_epochs=30, dropout=0.0, hidden_size=32)
    tr = Trainer.create(mc, tc)
    tr.fit(task.train, task.valid)
    return task, tr.model


@pytest.mark.criterion(4, "context selects its sequence: log-prob, greedy, and T=0.1 sampling >= 95%")
def test_c4_context_conditioning(request, selection_model):
    task, model = selection_model
    targets = task.info["targets"]
    ctxs = sorted(targets)
    margin = math.inf
    for c in ctxs:
        seq = (1, *targets[c], 2)
        own = sequence_logprob(model, seq, c)
        others = max(sequence_logprob(model, seq, o) for o in ctxs if o != c)
        margin = min(margin, own - others)
    greedy_ok = sum(greedy_decode(model, c, max_len=20).tokens == [*targets[c], 2] for c in ctxs)
    rng = np.random.default_rng(0)
    cfg = SamplingConfig(temperature=0.1, max_len=20)
    hits = 0
    for k in range(200):
        c = ctxs[k % 6]
        hits += sample_sequence(model, c, cfg, rng).tokens == [*targets[c], 2]
    ok = margin > 0 and greedy_ok == 6 and hits / 200 >= 0.95
    detail = f"min log-prob margin {margin:.2f}, greedy {greedy_ok}/6, sampling {hits}/200"
    assert report(request, 4, ok, detail), detail


# -- 5 and 7 ----------------------------------------------------------------------------------

def train_long_range(variant, task, seed):
    mc = ModelConfig(variant, len(task.vocab), 32, task.schema.cardinalities, dropout=0.0)
    tc = TrainConfig(batch_size=20, initial_lr=0.1, max_epochs=10, dropout=0.0, hidden_size=32,
                     seed=seed, lr_schedule="constant")
    tr = Trainer.create(mc, tc)
    tr.fit(task.train, task.valid)
    return tr.model


@pytest.fixture(scope="module")
def long_range_runs():
    runs = {}
    for s in SEEDS:
        task = long_range_task(seed=s)
        runs[s] = (task, train_long_range("c2s", task, s), train_long_range("gc2s", task, s))
    return runs


@pytest.mark.criterion(5, "gC2S beats C2S and its advantage grows at positions >= 40 (3 of 3 seeds)")
def test_c5_long_range(request, long_range_runs):
    rows, wins = [], 0
    for s, (task, c2s, gc2s) in long_range_runs.items():
        p_c = perplexity(task.test, c2s).perplexity
        p_g = perplexity(task.test, gc2s).perplexity
        lc, _ = position_losses(c2s, task.test)
        lg, cnt = position_losses(gc2s, task.test)
        gap = lc - lg
        early = float(np.mean(gap[:10]))
        late = float(np.mean(gap[40:60][cnt[40:60] > 0]))
        win = p_g < p_c and late - early > 0
        wins += win
        rows.append(f"seed {s}: ppl {p_c:.2f}/{p_g:.2f} gap<10 {early:+.3f} gap>=40 {late:+.3f}")
    ok = wins == len(SEEDS)
    detail = f"{wins}/3 seeds; " + "; ".join(rows)
    assert report(request, 5, ok, detail), detail


@pytest.mark.criterion(7, "context-determined token types rank in the top 10% by mean gate")
def test_c7_gate_attribution(request, long_range_runs):
    worst, n_types = 0, 0
    all_ok = True
    for s, (task, _, gc2s) in long_range_runs.items():
        rep = gate_attribution(task.test, gc2s, min_count=1, vocab=task.vocab)
        n_types = len(rep.entries)
        cutoff = math.ceil(0.10 * n_types)
        ranks = [rep.rank_of(k) for k in task.info["keys"]]
        all_ok &= all(r is not None and r < cutoff for r in ranks)
        worst = max([worst] + [r for r in ranks if r is not None])
    detail = f"worst key rank {worst + 1} of {n_types} types (top-10% cutoff {math.ceil(0.1 * n_types)})"
    assert report(request, 7, all_ok, detail), detail


# -- 6 ---------------------------------------------------------------------------------------

@pytest.mark.criterion(6, "gate bias -50 reduces gC2S to C2S-style output (within 1e-9)")
def test_c6_gate_reduction(request):
    worst = 0.0
    for seed in range(3):
        g = tiny_model("gc2s", seed=seed)
        c = Model(ModelConfig("c2s", 12, 4, TINY_CARDS, dropout=0.0))
        for k in c.params.names():
            c.params[k][...] = g.params[k]
        g.params["gate.b"][...] = -50.0
        exs, _ = tiny_batch(seed=seed, n=4, length=8)
        for ex in exs:
            sg, hg = g.start(ex.contexts)
            sc, hc = c.start(ex.contexts)
            for tok in ex.tokens[:-1]:
                lg, sg, _ = g.step(tok, sg, hg)
                lc, sc, _ = c.step(tok, sc, hc)
                diff = np.abs(softmax_with_temperature(lg) - softmax_with_temperature(lc)).max()
                worst = max(worst, float(diff))
        pg = g.forward(collate(exs)).cache["probs"]
        pc = c.forward(collate(exs)).cache["probs"]
        worst = max(worst, float(np.abs(pg - pc).max()))
    ok = worst < 1e-9
    detail = f"max |p_gC2S - p_C2S| = {worst:.1e}"
    assert report(request, 6, ok, detail), detail


# -- 8 ---------------------------------------------------------------------------------------

@pytest.mark.criterion(8, "validation perplexities [30, 28, 28, 29] give lr multipliers [1, 1, 1/2, 1/4]")
def test_c8_lr_schedule(request, monkeypatch):
    scripted = [30.0, 28.0, 28.0, 29.0]
    lr, mult = 1.0, []
    for k in range(1, len(scripted) + 1):
        lr = update_lr(scripted[:k], lr)
        mult.append(lr)

    # the same sequence driven through the trainer's epoch loop
    import ctxgen.training as training
    it = iter(scripted)
    monkeypatch.setattr(training, "perplexity_of", lambda *a, **k: next(it))
    exs, _ = tiny_batch(seed=0)
    tr = Trainer(tiny_model("c2s", scale=0.1), TrainConfig(batch_size=4, initial_lr=1.0,
                                                         max_epochs=4, dropout=0.0))
    reps = tr.fit(exs, exs)
    trainer_mult = [r.lr * (0.5 if r.lr_halved else 1.0) for r in reps]
    ok = mult == [1.0, 1.0, 0.5, 0.25] and trainer_mult == mult
    detail = f"update_lr {mult}, trainer {trainer_mult}"
    assert report(request, 8, ok, detail), detail


# -- 9 ---------------------------------------------------------------------------------------

@pytest.mark.criterion(9, "detector: 100% train accuracy when separable, 50% +- 5% on identical files")
def test_c9_detector(request, tmp_path, capsys):
    rng = np.random.default_rng(0)
    filler = ["the", "item", "was", "and", "it", "really", "this", "one"]
    texts, labels = [], []
    for k in range(100):
        words = list(rng.choice(filler, 6))
        label = "A" if k % 2 else "B"
        words.insert(int(rng.integers(7)), "good" if label == "A" else "bad")
        texts.append(" ".join(words))
        labels.append(label)
    clf = train_ngram_classifier(texts, labels)
    train_acc = classify_corpus(clf, texts, labels).accuracy

    corpus = tmp_path / "real.jsonl"
    write_jsonl(corpus, toy_review_records(200, seed=1))
    shutil.copy(corpus, tmp_path / "fake.jsonl")
    code = main(["detect", "--real", str(corpus), "--fake", str(tmp_path / "fake.jsonl"),
                 "--out", str(tmp_path / "rep.json")])
    same_acc = json.loads((tmp_path / "rep.json").read_text())["accuracy"]
    ok = train_acc == 1.0 and code == 0 and abs(same_acc - 0.5) <= 0.05
    detail = f"separable train accuracy {100 * train_acc:.0f}%, identical files {100 * same_acc:.1f}%"
    assert report(request, 9, ok, detail), detail


# -- 10 --------------------------------------------------------------------------------------

@pytest.mark.criterion(10, "cmd_train reruns are byte-identical; resume matches uninterrupted training")
def test_c10_reproducibility(request, tmp_path):
    corpus = tmp_path / "reviews.jsonl"
    write_jsonl(corpus, toy_review_records(240, seed=2))
    vocab = tmp_path / "vocab.txt"
    assert main(["build-vocab", "--corpus", str(corpus), "--out", str(vocab)]) == 0
    flags = ["--corpus", str(corpus), "--vocab", str(vocab), "--hidden", "8", "--epochs", "2",
             "--batch-size", "16", "--lr", "0.5", "--seed", "7"]
    for run in ("a", "b"):
        assert main(["train", *flags, "--out", str(tmp_path / run)]) == 0
    files = ["epochs.jsonl", "epoch-001.ckpt", "epoch-002.ckpt", "final.ckpt"]
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]

    # resume run a from its first checkpoint into a fresh directory
    res = tmp_path / "resumed"
    res.mkdir()
    (res / "epochs.jsonl").write_text((tmp_path / "a" / "epochs.jsonl").read_text().splitlines()[0] + "\n")
    assert main(["train", *flags, "--out", str(res),
                 "--resume", str(tmp_path / "a" / "epoch-001.ckpt")]) == 0
    resumed = [(res / f).read_bytes() == (tmp_path / "a" / f).read_bytes()
               for f in ("epochs.jsonl", "epoch-002.ckpt")]
    ok = all(same) and all(resumed)
    detail = f"rerun identical {sum(same)}/{len(same)} files, resume identical {sum(resumed)}/2"
    assert report(request, 10, ok, detail), detail

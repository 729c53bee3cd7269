import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import TINY_CARDS, tiny_batch, tiny_model
from ctxgen.corpus import Example, collate
from ctxgen.errors import (CheckpointVersionError, CorruptCheckpointError, FingerprintMismatchError,
                           NumericError)
from ctxgen.model import Model, ModelConfig, is_bias, loss_and_grad
from ctxgen.numerics import ParamStore, RngStreams
from ctxgen.synthetic import memorization_task
from ctxgen.training import (Checkpoint, EpochReport, TrainConfig, Trainer, evaluate_loss,
                             init_params, load_checkpoint, perplexity_of, run_epoch,
                             save_checkpoint, sgd_step, update_lr)

CFG = ModelConfig("gc2s", 12, 4, TINY_CARDS, dropout=0.0)


class TestInit:
    def test_biases_zero_weights_in_range(self):
        p = init_params(CFG, np.random.default_rng(0), 0.1)
        for name in p.names():
            if is_bias(name):
                assert not p[name].any(), name
            else:
                assert np.all(np.abs(p[name]) <= 0.1) and p[name].any(), name

    def test_same_seed_identical(self):
        a = init_params(CFG, RngStreams(3)["init"])
        b = init_params(CFG, RngStreams(3)["init"])
        for k in a.names():
            assert a[k].tobytes() == b[k].tobytes()


class TestSgd:
    def test_zero_lr(self):
        p = ParamStore()
        p.add("w", np.array([1.0, 2.0]))
        p.grads["w"][...] = 3.0
        sgd_step(p, 0.0)
        np.testing.assert_array_equal(p["w"], [1, 2])

    def test_arithmetic(self):
        p = ParamStore()
        p.add("w", np.array([1.0]))
        p.grads["w"][...] = 2.0
        sgd_step(p, 0.5)
        assert p["w"][0] == 0.0

    def test_nonfinite_keeps_params(self):
        p = ParamStore()
        p.add("a", np.array([1.0]))
        p.add("b", np.array([1.0]))
        p.grads["a"][...] = 1.0
        p.grads["b"][...] = np.inf
        with pytest.raises(NumericError):
            sgd_step(p, 0.1)
        assert p["a"][0] == 1.0 and p["b"][0] == 1.0

    def test_half_batches_sum_to_full_step(self):
        exs, batch = tiny_batch(seed=2)
        m1, m2 = tiny_model("c2s", seed=4), tiny_model("c2s", seed=4)
        loss_and_grad(m1, [batch])
        sgd_step(m1.params, 0.1)
        loss_and_grad(m2, [collate(exs[:2]), collate(exs[2:])])
        sgd_step(m2.params, 0.1)
        for k in m1.params.names():
            np.testing.assert_allclose(m1.params[k], m2.params[k], atol=1e-14)


class TestUpdateLr:
    @pytest.mark.parametrize("hist, want", [([30, 28], 1.0), ([28, 28], 0.5), ([28, 29], 0.5),
                                            ([30], 1.0)])
    def test_examples(self, hist, want):
        assert update_lr(hist, 1.0) == want

    def test_best_compare(self):
        assert update_lr([20, 30, 25], 1.0, "last") == 1.0
        assert update_lr([20, 30, 25], 1.0, "best") == 0.5

    @given(st.lists(st.floats(1, 100), min_size=1, max_size=12))
    def test_monotone(self, ppls):
        lr, lrs = 1.0, []
        for k in range(1, len(ppls) + 1):
            lr = update_lr(ppls[:k], lr)
            lrs.append(lr)
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def small_task():
    task = memorization_task(seed=0)
    cfg = ModelConfig("gc2s", len(task.vocab), 16, task.schema.cardinalities, dropout=0.0)
    return task, cfg


class TestRunEpoch:
    def test_no_update_consistency(self):
        m = tiny_model("gc2s", seed=1, scale=0.1)
        ex = [Example((1, 5, 2), (1, 1))]
        loss = run_epoch(m, ex, TrainConfig(batch_size=1, initial_lr=1.0, dropout=0.0),
                         RngStreams(0), lr=0.0)
        total, ntok = evaluate_loss(m, ex)
        assert loss == total / ntok

    def test_decreasing_over_three_epochs(self):
        task, cfg = small_task()
        tc = TrainConfig(batch_size=10, initial_lr=0.1, dropout=0.0)
        tr = Trainer.create(cfg, tc)
        losses = [run_epoch(tr.model, task.train, tc, tr.streams, 0.1) for _ in range(3)]
        assert losses[0] > losses[1] > losses[2]
        # regression value from a seeded run
        assert losses[0] == pytest.approx(REGRESSION_FIRST_EPOCH, rel=1e-9)

    def test_deterministic(self):
        task, cfg = small_task()
        tc = TrainConfig(batch_size=10, initial_lr=0.1, dropout=0.5)
        cfg.dropout = 0.5
        a, b = Trainer.create(cfg, tc), Trainer.create(cfg, tc)
        la = run_epoch(a.model, task.train, tc, a.streams, 0.1)
        lb = run_epoch(b.model, task.train, tc, b.streams, 0.1)
        assert la == lb
        for k in a.model.params.names():
            assert a.model.params[k].tobytes() == b.model.params[k].tobytes()

    def test_numeric_error_names_batch(self):
        m = tiny_model("c2s", seed=1)
        m.params["out.b"][0] = np.nan
        with pytest.raises(NumericError, match="batch 0"):
            run_epoch(m, tiny_batch()[0], TrainConfig(batch_size=4, dropout=0.0), RngStreams(0), 0.1)


REGRESSION_FIRST_EPOCH = 3.163365165633959


class TestTrainer:
    def test_halving_and_reports(self):
        task, cfg = small_task()
        tr = Trainer.create(cfg, TrainConfig(batch_size=10, initial_lr=0.1, max_epochs=4,
                                             dropout=0.0))
        reps = tr.fit(task.train, task.valid)
        assert [r.epoch for r in reps] == [1, 2, 3, 4]
        lrs = [r.lr for r in reps]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        for prev, cur in zip(reps, reps[1:]):
            assert cur.lr == (prev.lr / 2 if prev.lr_halved else prev.lr)

    def test_stops_on_lr_underflow(self):
        task, cfg = small_task()
        tr = Trainer.create(cfg, TrainConfig(batch_size=10, initial_lr=1e-7, max_epochs=50))
        assert tr.finished and tr.fit(task.train, task.valid) == []

    def test_log_line_has_no_wall_time(self):
        line = EpochReport(1, 2.0, 3.0, 0.5, False, 12.3).log_line()
        assert "wall_time" not in line and '"epoch": 1' in line

    def test_resume_matches_uninterrupted(self, tmp_path):
        task, cfg = small_task()
        tc = TrainConfig(batch_size=10, initial_lr=0.1, max_epochs=2, dropout=0.3)
        cfg.dropout = 0.3
        full = Trainer.create(cfg, tc, vocab_fingerprint=task.vocab.fingerprint())
        full.fit(task.train, task.valid)

        half = Trainer.create(cfg, tc, vocab_fingerprint=task.vocab.fingerprint())
        half.train_epoch(task.train, task.valid)
        save_checkpoint(tmp_path / "e1.ckpt", half.to_checkpoint())
        resumed = Trainer.from_checkpoint(load_checkpoint(tmp_path / "e1.ckpt"))
        resumed.fit(task.train, task.valid)
        assert resumed.reports[-1] == full.reports[-1]
        for k in full.model.params.names():
            assert full.model.params[k].tobytes() == resumed.model.params[k].tobytes()


def make_ckpt():
    model = tiny_model("gc2s", seed=9)
    tr = Trainer(model, TrainConfig(), RngStreams(5), vocab_fingerprint="abc", extra={"k": 1})
    tr.history = [12.0, 11.5]
    return tr.to_checkpoint()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        ck = make_ckpt()
        save_checkpoint(tmp_path / "a.ckpt", ck)
        back = load_checkpoint(tmp_path / "a.ckpt", vocab_fingerprint="abc")
        assert back.model_config == ck.model_config and back.train_config == ck.train_config
        assert back.history == ck.history and back.extra == ck.extra
        for k, v in ck.params.items():
            assert back.params[k].tobytes() == np.asarray(v, "<f8").tobytes()
        assert RngStreams.from_state(back.rng_state)["sampling"].random() == \
            RngStreams(5)["sampling"].random()

    def test_layout(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", make_ckpt())
        raw = (tmp_path / "a.ckpt").read_bytes()
        assert raw[:8] == b"CTXGCKPT"
        hlen = int.from_bytes(raw[8:16], "little")
        assert raw[16:16 + hlen].decode().lstrip().startswith("{")

    def test_fingerprint(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", make_ckpt())
        with pytest.raises(FingerprintMismatchError):
            load_checkpoint(tmp_path / "a.ckpt", vocab_fingerprint="other")

    @pytest.mark.parametrize("cut", [4, 12, 40, -3])
    def test_truncated(self, tmp_path, cut):
        save_checkpoint(tmp_path / "a.ckpt", make_ckpt())
        raw = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "b.ckpt").write_bytes(raw[:cut])
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "b.ckpt")

    def test_flipped_byte(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", make_ckpt())
        raw = bytearray((tmp_path / "a.ckpt").read_bytes())
        raw[-5] ^= 0xFF
        (tmp_path / "b.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "b.ckpt")

    def test_version(self, tmp_path):
        ck = make_ckpt()
        ck.version = 99
        save_checkpoint(tmp_path / "a.ckpt", ck)
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(tmp_path / "a.ckpt")

    def test_error_kinds_are_distinct(self):
        kinds = {CheckpointVersionError, FingerprintMismatchError, CorruptCheckpointError}
        assert len(kinds) == 3 and not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


def test_config_validation():
    for kw in (dict(batch_size=0), dict(lr_schedule="cosine"), dict(loss_normalization="mean")):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

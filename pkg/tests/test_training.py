from pathlib import Path

import numpy as np
import pytest

from bitexit import tensor
from bitexit.checkpoint import (CheckpointError, load_checkpoint,
                                read_header, save_checkpoint)
from bitexit.layers import DropoutSchedule
from bitexit.model import VARIANTS, ModelConfig, build_model, forward_full
from bitexit.tensor import ComputeGraph, Tensor
from bitexit.tokenizer import PAD, load_corpus, tokenize
from bitexit.training import (AdamW, LossBreakdown, TrainConfig, adamw_state,
                              adamw_step, clip_gradients, cross_entropy,
                              early_exit_loss, exit_weights, lr_at, train)

from helpers import ref_cross_entropy

DATA = Path(__file__).resolve().parent.parent / "data" / "sample_corpus.txt"


def toy_cfg(variant="baseline", layers=2, hidden=32, heads=4, kv_heads=2,
            ffn=48, vocab=259, seq=32, seed=0, p_max=0.5):
    return ModelConfig(layers=layers, hidden=hidden, heads=heads,
                       kv_heads=kv_heads, ffn_dim=ffn, vocab_size=vocab,
                       max_seq_len=seq,
                       schedule=DropoutSchedule(p_max, "raw", layers),
                       variant=VARIANTS[variant], seed=seed)


def toy_train_cfg(**kw):
    base = dict(lr_peak=1e-3, warmup_steps=20, max_steps=50, batch_size=2,
                grad_accum_steps=1, weight_decay=0.1, clip_norm=1.0,
                lam=0.3, p_max=0.5, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((3, 4), dtype=np.float32))
        ce = cross_entropy(logits, [0, 1, 3])
        assert ce.item() == pytest.approx(np.log(4), rel=1e-6)

    def test_confident_limit(self):
        logits = np.full((1, 4), -30.0, dtype=np.float32)
        logits[0, 2] = 30.0
        ce = cross_entropy(Tensor(logits), [2])
        assert ce.item() < 1e-6

    def test_matches_float64_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(scale=3, size=(40, 17)).astype(np.float32)
        targets = rng.integers(0, 17, size=40)
        got = cross_entropy(Tensor(logits), targets).item()
        assert got == pytest.approx(ref_cross_entropy(logits, targets), abs=1e-5)

    def test_padding_excluded(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(6, 5)).astype(np.float32)
        targets = rng.integers(0, 5, size=6)
        mask = np.array([True, True, False, True, False, True])
        got = cross_entropy(Tensor(logits), targets, mask).item()
        assert got == pytest.approx(
            ref_cross_entropy(logits, targets, mask), abs=1e-5)

    def test_all_masked_is_error(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((2, 3), dtype=np.float32)),
                          [0, 1], np.zeros(2, dtype=bool))

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(2)
        lv = rng.normal(size=(4, 6)).astype(np.float32)
        logits = Tensor(lv, requires_grad=True)
        targets = np.array([1, 0, 5, 2])
        with ComputeGraph() as g:
            loss = cross_entropy(logits, targets)
        g.backward(loss)
        z = lv.astype(np.float64) - lv.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        p[np.arange(4), targets] -= 1
        np.testing.assert_allclose(logits.grad, p / 4, atol=1e-6)


class TestObjective:
    def test_exit_weights_hand_case(self):
        np.testing.assert_allclose(exit_weights(4), [2 / 9, 3 / 9, 4 / 9])

    def test_exit_weights_sum_to_one(self):
        for L in range(2, 30):
            assert exit_weights(L).sum() == pytest.approx(1.0, abs=1e-6)

    def test_lambda_zero_total_is_main(self):
        model = build_model(toy_cfg())
        toks = np.array([[1, 2, 3, 4, 5]])
        trace = forward_full(model, toks[:, :-1])
        total, bd = early_exit_loss(trace, toks[:, 1:], model, lam=0.0)
        assert bd.total == bd.main_loss
        assert len(bd.exit_losses) == 1  # reported even when unweighted

    def test_identical_exits_scale_total(self):
        # skipping every layer leaves h_l equal to the embedding state, so
        # every exit shares the final layer's logits: total = main*(1+lam)
        model = build_model(toy_cfg(layers=3))
        toks = np.array([[3, 1, 4, 1, 5]])
        trace = forward_full(model, toks[:, :-1], phase="train",
                             skip_mask=[True, True, True])
        total, bd = early_exit_loss(trace, toks[:, 1:], model, lam=0.3)
        assert bd.total == pytest.approx(bd.main_loss * 1.3, rel=1e-5)

    def test_breakdown_identity(self):
        model = build_model(toy_cfg(layers=3))
        rng = np.random.default_rng(3)
        toks = rng.integers(0, 259, size=(2, 9))
        trace = forward_full(model, toks[:, :-1])
        total, bd = early_exit_loss(trace, toks[:, 1:], model, lam=0.3)
        recomputed = bd.main_loss + bd.lam * float(
            np.dot(bd.weights, bd.exit_losses))
        assert bd.total == pytest.approx(recomputed, abs=1e-5)
        assert sum(bd.weights) == pytest.approx(1.0, abs=1e-6)


class TestScheduleAndClip:
    def test_lr_endpoints(self):
        cfg = toy_train_cfg(lr_peak=6e-4, warmup_steps=1000, max_steps=50_000)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(1000, cfg) == pytest.approx(6e-4)
        assert lr_at(50_000, cfg) == 0.0

    def test_lr_decay_midpoint(self):
        cfg = toy_train_cfg(lr_peak=1.0, warmup_steps=100, max_steps=1100)
        # halfway through the decay span of 1000 steps
        assert lr_at(600, cfg) == pytest.approx(0.5)

    def test_lr_out_of_range(self):
        cfg = toy_train_cfg(max_steps=10)
        with pytest.raises(ValueError):
            lr_at(11, cfg)

    def test_clip_below_threshold(self):
        p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        p.grad = np.array([0.3, 0.0, 0.0], dtype=np.float32)
        norm = clip_gradients({"p": p}, 1.0)
        assert norm == pytest.approx(0.3)
        np.testing.assert_allclose(p.grad, [0.3, 0, 0])

    def test_clip_scales_to_norm(self):
        p = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
        p.grad = np.array([2.0, 0.0], dtype=np.float32)
        norm = clip_gradients({"p": p}, 1.0)
        assert norm == pytest.approx(2.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0, abs=1e-6)

    def test_clip_zero_grads(self):
        p = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
        assert clip_gradients({"p": p}, 1.0) == 0.0


class TestAdamW:
    def test_first_step_hand_value(self):
        p = Tensor(np.array([[1.0]], dtype=np.float32), requires_grad=True)
        p.grad = np.array([[1.0]], dtype=np.float32)
        state = adamw_state({"p": p})
        adamw_step({"p": p}, state, lr=0.1, weight_decay=0.0)
        # mhat = vhat = 1 after bias correction: update = 0.1/(1+1e-8)
        assert p.data[0, 0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), rel=1e-6)

    def test_zero_grads_no_decay_is_noop(self):
        p = Tensor(np.array([[2.0]], dtype=np.float32), requires_grad=True)
        state = adamw_state({"p": p})
        adamw_step({"p": p}, state, lr=0.1, weight_decay=0.0)
        assert p.data[0, 0] == 2.0

    def test_decay_only_shrinks_matrices(self):
        w = Tensor(np.array([[2.0]], dtype=np.float32), requires_grad=True)
        gain = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
        params = {"w": w, "gain": gain}
        state = adamw_state(params)
        adamw_step(params, state, lr=0.1, weight_decay=0.5)
        assert w.data[0, 0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), rel=1e-6)
        assert gain.data[0] == 2.0  # norm gains exempt from decay

    def test_state_shape_mismatch(self):
        p = Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)
        state = adamw_state({"p": p})
        state["m"]["p"] = np.zeros((3, 3), dtype=np.float32)
        with pytest.raises(ValueError):
            adamw_step({"p": p}, state, lr=0.1, weight_decay=0.0)


@pytest.fixture(scope="module")
def corpus():
    return load_corpus(DATA)


class TestTrainLoop:
    def test_smoke_loss_drops_below_uniform(self, corpus):
        model = build_model(toy_cfg())
        cfg = toy_train_cfg(max_steps=200, warmup_steps=40, lr_peak=2e-3,
                            batch_size=4)
        log = train(model, corpus, cfg, early_exit=True)
        assert len(log.records) == 200
        assert log.records[-1].breakdown.main_loss < np.log(259)

    def test_objective_identity_every_step(self, corpus):
        model = build_model(toy_cfg())
        cfg = toy_train_cfg(max_steps=25)
        log = train(model, corpus, cfg, early_exit=True)
        for r in log.records:
            bd = r.breakdown
            assert sum(bd.weights) == pytest.approx(1.0, abs=1e-6)
            expect = bd.main_loss + bd.lam * float(np.dot(bd.weights, bd.exit_losses))
            assert bd.total == pytest.approx(expect, abs=1e-5)

    def test_phase1_reports_unweighted_exits(self, corpus):
        model = build_model(toy_cfg())
        cfg = toy_train_cfg(max_steps=3)
        log = train(model, corpus, cfg, early_exit=False)
        bd = log.records[-1].breakdown
        assert bd.lam == 0.0 and bd.total == bd.main_loss
        assert len(bd.exit_losses) == 1 and bd.exit_losses[0] > 0

    def test_deterministic_replay(self, corpus):
        runs = []
        for _ in range(2):
            model = build_model(toy_cfg())
            log = train(model, corpus, toy_train_cfg(max_steps=8), early_exit=True)
            runs.append([(r.breakdown.total, r.grad_norm) for r in log.records])
        assert runs[0] == runs[1]

    def test_grad_accumulation_equivalence(self, corpus):
        cfgs = [toy_train_cfg(max_steps=1, batch_size=2, grad_accum_steps=2),
                toy_train_cfg(max_steps=1, batch_size=4, grad_accum_steps=1)]
        finals = []
        for cfg in cfgs:
            model = build_model(toy_cfg())
            train(model, corpus, cfg, early_exit=True)
            finals.append({k: v.data.copy() for k, v in model.params.items()})
        for k in finals[0]:
            np.testing.assert_allclose(finals[0][k], finals[1][k], atol=1e-5)

    def test_resume_continues_identically(self, corpus, tmp_path):
        cfg = toy_train_cfg(max_steps=12)
        model_a = build_model(toy_cfg())
        log_a = train(model_a, corpus, cfg, early_exit=True)

        model_b = build_model(toy_cfg())
        opt_b = AdamW(model_b.params, weight_decay=cfg.weight_decay)
        train(model_b, corpus, TrainConfig(**{**cfg.__dict__, "max_steps": 6}),
              early_exit=True, optimizer=opt_b)
        path = tmp_path / "mid.ckpt"
        save_checkpoint(model_b, opt_b.state, 6, path)

        model_c, opt_state, step = load_checkpoint(path)
        opt_c = AdamW(model_c.params, weight_decay=cfg.weight_decay, state=opt_state)
        log_c = train(model_c, corpus, cfg, early_exit=True,
                      start_step=step, optimizer=opt_c)
        tail_a = [r.breakdown.total for r in log_a.records[6:]]
        tail_c = [r.breakdown.total for r in log_c.records]
        assert tail_a == tail_c

    def test_corpus_too_small(self):
        tiny = tokenize(b"hello")
        model = build_model(toy_cfg())
        with pytest.raises(Exception):
            train(model, tiny, toy_train_cfg(max_steps=1), early_exit=True)

    def test_csv_written(self, corpus, tmp_path):
        model = build_model(toy_cfg())
        cfg = toy_train_cfg(max_steps=10)
        log = train(model, corpus, cfg, early_exit=True, out_dir=tmp_path,
                    log_every=5, checkpoint_every=5)
        text = log.csv_path.read_text().splitlines()
        assert text[0] == "step,lr,grad_norm,main,total,exit_1"
        assert len(text) == 11
        assert (tmp_path / "checkpoints" / "step_000005.ckpt").exists()
        assert log.final_checkpoint.exists()

    def test_phase1_smoothed_loss_decreases(self, corpus):
        model = build_model(toy_cfg())
        cfg = toy_train_cfg(max_steps=500, warmup_steps=50, lr_peak=2e-3,
                            batch_size=4)
        log = train(model, corpus, cfg, early_exit=False)
        losses = np.array([r.breakdown.total for r in log.records])
        smooth = np.convolve(losses, np.ones(50) / 50, mode="valid")
        # monotone non-increasing up to 5% transient upticks
        assert (smooth[1:] <= smooth[:-1] * 1.05).all()
        assert smooth[-1] < smooth[0]


class TestCheckpoint:
    def _probe(self, model):
        return forward_full(model, [[1, 2, 3, 4]]).logits.data

    def test_round_trip_bit_identical(self, tmp_path):
        model = build_model(toy_cfg(variant="v1"))
        opt = AdamW(model.params)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, opt.state, 17, path)
        loaded, state, step = load_checkpoint(path)
        assert step == 17 and state["t"] == 0
        assert self._probe(loaded).tobytes() == self._probe(model).tobytes()

    def test_header_readable(self, tmp_path):
        model = build_model(toy_cfg(variant="v3", ffn=32))
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, None, 5, path)
        h = read_header(path)
        assert h["variant"] == "v3" and h["model"]["layers"] == 2

    def test_corrupt_magic_rejected(self, tmp_path):
        model = build_model(toy_cfg())
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, None, 0, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        model = build_model(toy_cfg())
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, None, 0, path)
        path.write_bytes(path.read_bytes()[:200])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_variant_mismatch_rejected(self, tmp_path):
        model = build_model(toy_cfg(variant="v1"))
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, None, 0, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected_variant="v2")
        load_checkpoint(path, expected_variant="v1")

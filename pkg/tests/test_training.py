import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from promptmoe import synth
from promptmoe import tensor as T
from promptmoe.backbone import ModelConfig
from promptmoe.model import MoEModel, checksum, load_checkpoint, save_checkpoint
from promptmoe.training import (FROZEN, PFT, RFPROMPT, AdamW, PretextConfig, Regime, TrainConfig, adamw_step,
                                adapt, expert_accuracy, lr_schedule, pretext_pretrain, select_trainable,
                                smoothed_cross_entropy, smoothed_targets)
from conftest import TINY, toy_set

FAST = TrainConfig(max_epochs=4, warmup_epochs=1, router_warmup_epochs=1, early_stop_patience=10, batch_size=8)


class TestLoss:
    def test_target_values(self):
        t = smoothed_targets(np.array([2]), 5, 0.1)[0]
        np.testing.assert_allclose(t, [0.02, 0.02, 0.92, 0.02, 0.02], atol=1e-15)
        assert t.sum() == pytest.approx(1.0, abs=1e-15)

    def test_eps_zero_is_cross_entropy(self):
        logits = np.array([[1.0, 2.0, 0.5]])
        ce = -np.log(np.exp(2.0) / np.exp(logits).sum())
        assert float(smoothed_cross_entropy(T.tensor(logits), [1], 0.0).data) == pytest.approx(ce, rel=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 0.99), st.integers(2, 12), st.data())
    def test_targets_sum_to_one(self, eps, c, data):
        y = data.draw(st.integers(0, c - 1))
        assert smoothed_targets(np.array([y]), c, eps).sum() == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 0.99), st.integers(2, 12))
    def test_uniform_logits_give_log_c(self, eps, c):
        with T.precision(np.float64):
            loss = smoothed_cross_entropy(T.tensor(np.full((3, c), 0.7)), [0, 1, c - 1], eps, c)
        assert abs(float(loss.data) - math.log(c)) <= 1e-6

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, (4, 5), elements=st.floats(-50, 50, width=32)), st.floats(0, 0.99))
    def test_non_negative(self, logits, eps):
        assert float(smoothed_cross_entropy(T.tensor(logits), [0, 1, 2, 4], eps).data) >= 0

    def test_invalid_label(self):
        with pytest.raises(ValueError):
            smoothed_cross_entropy(T.tensor(np.zeros((1, 3))), [3])

    def test_invalid_eps(self):
        with pytest.raises(ValueError):
            smoothed_targets(np.array([0]), 3, 1.0)


class TestAdamW:
    def test_zero_grad_zero_decay(self):
        w = np.array([1.0, -2.0])
        adamw_step(w, np.zeros(2), None, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(w, [1.0, -2.0])

    def test_decoupled_decay(self):
        w = np.array([1.0, -2.0])
        adamw_step(w, np.zeros(2), None, lr=0.1, weight_decay=0.01)
        np.testing.assert_array_equal(w, np.array([1.0, -2.0]) * (1 - 0.1 * 0.01))

    def test_hand_step(self):
        w = np.array([0.5])
        st_ = adamw_step(w, np.array([1.0]), None, lr=0.1, weight_decay=0.0)
        # m = 0.1, v = 0.001; bias-corrected both are 1
        assert w[0] == pytest.approx(0.5 - 0.1 / (1 + 1e-8), abs=1e-15)
        assert st_.t == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adamw_step(np.zeros(2), np.zeros(3), None, 0.1, 0.0)

    def test_state_only_for_stepped(self):
        ps = {"a": T.parameter(np.ones((2, 2))), "b": T.parameter(np.ones(2))}
        ps["a"].grad = np.ones((2, 2), np.float32)
        opt = AdamW(ps)
        opt.step(["a", "b"], lambda _: 0.1)
        assert set(opt.state) == {"a"}

    def test_non_finite_grad(self):
        ps = {"a": T.parameter(np.ones(2))}
        ps["a"].grad = np.array([np.nan, 0.0], np.float32)
        with pytest.raises(T.NumericError):
            AdamW(ps).step(["a"], lambda _: 0.1)

    def test_decay_filter(self):
        m = MoEModel(TINY, with_prompts=True)
        opt = AdamW(m.named_parameters())
        decayed = {n for n, p in m.named_parameters().items() if opt.decay_filter(n, p)}
        assert "expert.0.layer.0.attn.q.weight" in decayed
        assert not any(n.startswith("prompts.") or n.endswith("bias") or "pos_embed" in n for n in decayed)


class TestSchedule:
    def test_mid_warmup(self):
        assert lr_schedule(2.5, 100, 1e-3, 5) == pytest.approx(0.5e-3)

    def test_warmup_end(self):
        assert lr_schedule(5.0, 100, 1e-3, 5) == pytest.approx(1e-3, abs=1e-18)

    def test_end(self):
        assert abs(lr_schedule(100.0, 100, 1e-3, 5)) <= 1e-12

    def test_cosine_midpoint(self):
        assert lr_schedule(52.5, 100, 1e-3, 5) == pytest.approx(0.5e-3)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(5, 99.9), st.floats(0, 0.1))
    def test_monotone_after_warmup(self, p, dp):
        assert lr_schedule(p + dp, 100, 1e-3, 5) <= lr_schedule(p, 100, 1e-3, 5) + 1e-18


class TestRegimes:
    def test_parse(self):
        assert Regime.parse("FrozenExpert") == FROZEN
        assert Regime.parse("rfp", 8) == Regime("rfprompt", 8)
        with pytest.raises(ValueError):
            Regime.parse("lora")

    def test_frozen_set(self):
        m = MoEModel(TINY)
        names = select_trainable(m, FROZEN)
        assert names and all(n.startswith(("router.", "head.")) for n in names)

    def test_pft_set(self):
        m = MoEModel(ModelConfig(d_model=16, n_heads=2, n_layers=12, router_hidden=8, head_hidden=16))
        names = select_trainable(m, PFT)
        backbone = {n for n in names if n.startswith("expert.")}
        assert {tuple(n.split(".")[1:4:2]) for n in backbone} == {(e, l) for e in "012" for l in ("10", "11")}
        expected = {n for n in m.named_parameters() if n.startswith("expert.") and n.split(".")[3] in ("10", "11")
                    and n.split(".")[2] == "layer"}
        assert backbone == expected

    def test_rfprompt_count_full_size(self):
        # 73,728 prompts + 16,899 router + 35,335 head (C = 7)
        m = MoEModel(ModelConfig(n_classes=7), with_prompts=True)
        names = select_trainable(m, RFPROMPT)
        assert sum(m.named_parameters()[n].size for n in names) == 125_962

    def test_rfprompt_needs_bank(self):
        with pytest.raises(ValueError):
            select_trainable(MoEModel(TINY), RFPROMPT)

    def test_differential_lr_ratio(self):
        m = MoEModel(replace(TINY, n_layers=3))
        params = m.named_parameters()
        names = sorted(select_trainable(m, PFT))
        bb, hd = "expert.0.layer.2.attn.q.bias", "head.fc2.bias"
        assert bb in names and hd in names
        before = {n: params[n].data.copy() for n in (bb, hd)}
        for n in names:
            params[n].grad = np.ones_like(params[n].data)
        cfg = TrainConfig()
        AdamW(params, 0.0).step(names, lambda n: cfg.lr_backbone if n.startswith("expert.") else cfg.lr_adapt)
        d_bb = np.abs(params[bb].data - before[bb]).max()
        d_hd = np.abs(params[hd].data - before[hd]).max()
        assert d_hd / d_bb == pytest.approx(100, rel=1e-3)


def _frozen_checksums(model, regime):
    trainable = select_trainable(model, regime) if (not regime.uses_prompts or model.prompts) else set()
    return {n: checksum({n: p}) for n, p in model.named_parameters().items() if n not in trainable}


@pytest.fixture(scope="module")
def data():
    return toy_set(8, seed=1), toy_set(4, seed=2, offset=100)


@pytest.fixture(scope="module")
def slices():
    specs = synth.default_source_specs(per_class_count=10, seed=7)
    return [synth.build_dataset(s) for s in specs]


class TestAdapt:
    @pytest.mark.parametrize("regime", [FROZEN, PFT, Regime("rfprompt", 4)])
    def test_frozen_purity(self, data, regime):
        m = MoEModel(TINY, seed=1)
        if regime.uses_prompts:
            m.add_prompts(4)
        before = _frozen_checksums(m, regime)
        _, hist = adapt(m, regime, data[0], data[1], FAST)
        assert len(hist.epoch) == 4
        after = {n: checksum({n: p}) for n, p in m.named_parameters().items() if n in before}
        assert after == before

    def test_trainable_params_move(self, data):
        m = MoEModel(TINY, seed=1)
        m.add_prompts(4)
        before = checksum(m.named_parameters(), "prompts.")
        adapt(m, Regime("rfprompt", 4), data[0], data[1], FAST)
        assert checksum(m.named_parameters(), "prompts.") != before

    def test_zero_shot_is_noop(self, data):
        m = MoEModel(TINY, seed=1)
        before = checksum(m.named_parameters())
        state, hist = adapt(m, FROZEN, data[0].subset(np.zeros(0, int)), data[1], FAST)
        assert state == {} and hist.epoch == []
        assert checksum(m.named_parameters()) == before

    def test_best_epoch_has_min_val_loss(self, data):
        m = MoEModel(TINY, seed=2)
        cfg = replace(FAST, max_epochs=6, early_stop_patience=2, lr_adapt=5e-2)
        _, hist = adapt(m, FROZEN, data[0], data[1], cfg)
        assert len(hist.epoch) <= 6
        assert hist.val_loss[hist.best_epoch] == min(hist.val_loss)

    def test_restores_best_weights(self, data):
        m = MoEModel(TINY, seed=2)
        cfg = replace(FAST, max_epochs=5, lr_adapt=5e-2)
        state, hist = adapt(m, FROZEN, data[0], data[1], cfg)
        for n, v in state.items():
            assert m.named_parameters()[n].data.tobytes() == v.tobytes()

    def test_early_stopping(self, data):
        m = MoEModel(TINY, seed=2)
        cfg = replace(FAST, max_epochs=50, early_stop_patience=1, lr_adapt=1e-9)
        _, hist = adapt(m, FROZEN, data[0], data[1], cfg)
        assert len(hist.epoch) < 50
        assert hist.stale[-1] == 1

    def test_router_warmup_only_touches_router_and_head(self, data):
        m = MoEModel(TINY, seed=3)
        m.add_prompts(4)
        before = checksum(m.named_parameters(), "prompts.")
        cfg = replace(FAST, max_epochs=1, router_warmup_epochs=1)
        adapt(m, Regime("rfprompt", 4), data[0], data[1], cfg)
        assert checksum(m.named_parameters(), "prompts.") == before

    def test_history_deterministic(self, data):
        csvs = []
        for _ in range(2):
            m = MoEModel(TINY, seed=4)
            _, hist = adapt(m, PFT, data[0], data[1], FAST)
            csvs.append(hist.to_csv())
        assert csvs[0] == csvs[1]
        assert csvs[0].splitlines()[0] == "epoch,train_loss,val_loss,val_acc,lr_backbone,lr_adapt"

    def test_loss_decreases_on_separable_task(self):
        # a wider random init keeps class information in the frozen CLS features
        train, val = toy_set(20, seed=5), toy_set(10, seed=6, offset=1000)
        m = MoEModel(replace(TINY, init_std=0.2), seed=1)
        cfg = replace(TrainConfig(), max_epochs=5)
        _, hist = adapt(m, FROZEN, train, val, cfg)
        assert all(b < a for a, b in zip(hist.train_loss, hist.train_loss[1:]))

    def test_prompt_gradient_liveness(self, data):
        m = MoEModel(TINY, seed=6, with_prompts=True)
        names = [n for n in m.named_parameters() if n.startswith("prompts.")]
        m.set_trainable(names)
        r = m.forward(data[0].specs[:8])
        T.backward(smoothed_cross_entropy(r.logits, data[0].labels[:8]))
        used = set(np.unique(r.decision.selected).tolist())
        for e in used:
            for l in range(TINY.n_layers):
                g = m.prompts.for_expert(e)[l].grad
                assert g is not None and np.abs(g).max() > 0

    def test_empty_val_rejected(self, data):
        with pytest.raises(ValueError):
            adapt(MoEModel(TINY), FROZEN, data[0], data[1].subset(np.zeros(0, int)), FAST)


class TestPretext:
    def test_experts_diverge_and_reload(self, slices, tmp_path_factory):
        m = MoEModel(replace(TINY, n_classes=5), seed=0)
        rep = pretext_pretrain(m, slices, PretextConfig(epochs=2, batch_size=16))
        assert len(rep["val_acc"]) == 3
        sums = {checksum(m.named_parameters(), f"expert.{i}.") for i in range(3)}
        assert len(sums) == 3
        path = tmp_path_factory.mktemp("ck") / "pre"
        save_checkpoint(m, path)
        back, _ = load_checkpoint(path)
        for i, (head, ds) in enumerate(zip(rep["heads"], slices)):
            assert expert_accuracy(back, i, head, ds.val) == expert_accuracy(m, i, head, ds.val)

    def test_pretext_freezes_afterwards(self, slices):
        m = MoEModel(replace(TINY, n_classes=5), seed=0)
        pretext_pretrain(m, slices, PretextConfig(epochs=1, batch_size=32))
        assert all(not p.requires_grad for n, p in m.named_parameters().items() if n.startswith("expert."))

    def test_slice_count_checked(self, slices):
        with pytest.raises(ValueError):
            pretext_pretrain(MoEModel(TINY), slices[:2], PretextConfig(epochs=1))


def test_expert_memorizes_real_spectrograms():
    # capacity check on synthetic source spectrograms: a small expert + head fits 20 records
    from promptmoe.backbone import ExpertEncoder, expert_forward
    from promptmoe.router import ClassifierHead, classify

    tr = synth.build_dataset(synth.default_source_specs(per_class_count=10, seed=5)[1]).train
    x, y = tr.specs[:20], tr.labels[:20]
    cfg = ModelConfig(d_model=32, n_layers=2, n_heads=2, head_hidden=64)
    enc = ExpertEncoder(cfg, np.random.default_rng(0), 0)
    head = ClassifierHead(cfg, np.random.default_rng(1))
    params = {**{f"e.{n}": p for n, p in enc.named_parameters()}, **{f"h.{n}": p for n, p in head.named_parameters()}}
    names = list(params)
    opt = AdamW(params, 0.0)
    for _ in range(150):
        loss = smoothed_cross_entropy(classify(head, expert_forward(enc, x)[1]), y, 0.0, 5)
        T.backward(loss)
        opt.step(names, lambda _: 3e-3)
        opt.zero_grad(names)
    with T.no_grad():
        pred = classify(head, expert_forward(enc, x)[1]).data.argmax(axis=1)
    assert (pred == y).mean() >= 0.95

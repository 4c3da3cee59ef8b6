import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptmoe import tensor as T
from promptmoe.backbone import ExpertEncoder, ModelConfig, layer_forward
from promptmoe.prompts import (attention_scores_to_prompts, count_prompt_params, init_prompt_bank, inject,
                               layer_prompt_scores, strip)


class TestBank:
    def test_default_count(self):
        bank = init_prompt_bank(16, 128, 12, 3, 0.02, seed=0)
        assert count_prompt_params(bank) == 73_728
        assert count_prompt_params(m=16) == 73_728

    @pytest.mark.parametrize("m,expected", [(8, 36_864), (12, 55_296), (16, 73_728), (20, 92_160), (32, 147_456)])
    def test_sweep_counts_by_enumeration(self, m, expected):
        bank = init_prompt_bank(m, 128, 12, 3, seed=1)
        assert bank.num_params() == expected == 3 * 12 * m * 128
        assert sum(1 for _ in bank.named_parameters()) == 36

    def test_sigma(self):
        bank = init_prompt_bank(16, 128, 12, 3, 0.02, seed=2)
        vals = np.concatenate([p.data.ravel() for _, p in bank.named_parameters()])
        assert 0.018 <= vals.std() <= 0.022

    def test_deterministic(self):
        a = init_prompt_bank(4, 8, 2, 3, seed=5)
        b = init_prompt_bank(4, 8, 2, 3, seed=5)
        for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
            assert x.data.tobytes() == y.data.tobytes()

    def test_all_trainable(self):
        bank = init_prompt_bank(2, 4, 2, 2)
        assert all(p.requires_grad for _, p in bank.named_parameters())

    @pytest.mark.parametrize("args", [(0, 8, 2, 3), (4, 0, 2, 3), (4, 8, 0, 3), (4, 8, 2, 0)])
    def test_rejects_empty_dims(self, args):
        with pytest.raises(ValueError):
            init_prompt_bank(*args)

    def test_rejects_bad_sigma(self):
        with pytest.raises(ValueError):
            init_prompt_bank(4, 8, 2, 3, sigma=0.0)

    def test_names(self):
        names = [n for n, _ in init_prompt_bank(1, 2, 2, 2).named_parameters()]
        assert names[:2] == ["prompts.expert.0.layer.0", "prompts.expert.0.layer.1"]


class TestInjectStrip:
    def test_row_counts(self):
        p = T.tensor(np.ones((16, 8)))
        x = T.tensor(np.zeros((2, 65, 8)))
        aug = inject(p, x)
        assert aug.shape == (2, 81, 8)
        assert strip(aug, 16).shape == (2, 65, 8)

    def test_cls_lands_at_row_m(self):
        x = T.tensor(np.random.default_rng(0).standard_normal((65, 8)))
        aug = inject(T.tensor(np.ones((16, 8))), x)
        assert aug.data[16].tobytes() == x.data[0].tobytes()

    def test_zero_length_identity(self):
        x = T.tensor(np.random.default_rng(0).standard_normal((65, 8)))
        assert inject(T.tensor(np.zeros((0, 8))), x) is x
        assert strip(x, 0) is x

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            inject(T.tensor(np.ones((2, 4))), T.tensor(np.ones((65, 8))))

    def test_strip_too_many(self):
        with pytest.raises(ValueError):
            strip(T.tensor(np.ones((5, 4))), 5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 32), st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
    def test_round_trip_bitwise(self, m, b, seed):
        rng = np.random.default_rng(seed)
        x = T.tensor(rng.standard_normal((b, 65, 8)))
        p = T.tensor(rng.standard_normal((m, 8)))
        assert strip(inject(p, x), m).data.tobytes() == x.data.tobytes()

    def test_prompt_gradient_through_attention_only(self):
        # prompts reach the kept rows only as keys/values, so their gradient is nonzero
        cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2)
        layer = ExpertEncoder(cfg, np.random.default_rng(0)).layers[0]
        p = T.parameter(np.random.default_rng(1).standard_normal((3, 8)))
        x = T.tensor(np.random.default_rng(2).standard_normal((1, 65, 8)))
        out = strip(layer_forward(layer, inject(p, x)), 3)
        T.backward((out * out).sum())
        assert np.abs(p.grad).max() > 0


class TestScores:
    def test_zero_prompt_keys(self):
        assert not attention_scores_to_prompts(np.ones(32), np.zeros((4, 32))).any()

    def test_self_alignment(self):
        q = np.random.default_rng(0).standard_normal(32)
        s = attention_scores_to_prompts(q, q[None])
        assert s[0] == pytest.approx(q @ q / np.sqrt(32), rel=1e-12)

    def test_direct_dot_products(self):
        rng = np.random.default_rng(1)
        q, k = rng.standard_normal(32), rng.standard_normal((5, 32))
        ref = [sum(q[i] * k[p, i] for i in range(32)) / np.sqrt(32) for p in range(5)]
        np.testing.assert_allclose(attention_scores_to_prompts(q, k), ref, atol=1e-6)

    def test_layer_scores_shape(self):
        cfg = ModelConfig(d_model=16, n_layers=1, n_heads=4)
        layer = ExpertEncoder(cfg, np.random.default_rng(0)).layers[0]
        rng = np.random.default_rng(1)
        s = layer_prompt_scores(layer, rng.standard_normal((65, 16)), rng.standard_normal((6, 16)))
        assert s.shape == (4, 65, 6)

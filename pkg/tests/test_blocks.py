import numpy as np
import pytest

from stagemask import nn
from stagemask.blocks import FusionBlock, SABlock, Stage, TCNBlock, receptive_field

from reference import (
    randomize_params,
    ref_fusion,
    ref_sa_block,
    ref_softmax_columns,
    ref_stage,
    ref_tcn_block,
)


def _sa(f, seed=0):
    store = nn.ParamStore()
    return SABlock(store, "sa", f, np.random.default_rng(seed)), store


def _tcn(b, h, p, d, seed=0):
    store = nn.ParamStore()
    return TCNBlock(store, "blk", b, h, p, d, np.random.default_rng(seed)), store


class TestReceptiveField:
    def test_reference_values(self):
        assert receptive_field(3, 5) == 63
        assert receptive_field(3, 8) == 511
        assert receptive_field(1, 7) == 1

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            receptive_field(0, 3)

    def test_empirical_propagation_matches(self):
        # one stack of L blocks, eval mode (fresh running stats make the
        # batch norms pure per-channel affine maps, so reach is conv-only)
        p_taps, l_blocks, width = 3, 5, 4
        rf = receptive_field(p_taps, l_blocks)
        half = (rf - 1) // 2
        t_len = 4 * rf
        store = nn.ParamStore()
        rng = np.random.default_rng(11)
        blocks = [
            TCNBlock(store, f"b{l}", width, 6, p_taps, 2 ** l, rng)
            for l in range(l_blocks)
        ]

        def run(x):
            h = [x]
            for blk in blocks:
                h = blk.forward(h, "eval")
            return h[0]

        rng_x = np.random.default_rng(12)
        x = rng_x.standard_normal((width, t_len))
        base = run(x)
        t0 = t_len // 2
        bumped = x.copy()
        bumped[:, t0] += 10.0
        diff = np.abs(run(bumped) - base).max(axis=0)
        changed = np.nonzero(diff > 1e-12)[0]
        assert changed.min() == t0 - half
        assert changed.max() == t0 + half


class TestSABlock:
    def test_delta_zero_is_identity(self):
        block, _ = _sa(6, seed=3)
        x = np.random.default_rng(4).standard_normal((6, 9))
        np.testing.assert_array_equal(block.forward([x])[0], x)

    def test_zero_input_zero_bias_gives_zero(self):
        block, store = _sa(5, seed=5)
        block.delta.value = np.array([0.7])
        for name, p in store.params():
            if name.endswith(".bias"):
                p.value = np.zeros_like(p.value)
        x = np.zeros((5, 4))
        np.testing.assert_array_equal(block.forward([x])[0], np.zeros((5, 4)))

    def test_identity_projections_formula(self):
        block, _ = _sa(3, seed=6)
        block.wq.weight.value = np.eye(3)
        block.wk.weight.value = np.eye(3)
        block.wv.weight.value = np.eye(3)
        for conv in (block.wq, block.wk, block.wv):
            conv.bias.value = np.zeros(3)
        block.delta.value = np.array([1.0])
        x = np.random.default_rng(7).standard_normal((3, 2))
        expected = x + ref_softmax_columns(x @ x.T / np.sqrt(3.0)) @ x
        np.testing.assert_allclose(block.forward([x])[0], expected, atol=1e-10)

    def test_matches_scalar_oracle(self):
        block, store = _sa(4, seed=8)
        rng = np.random.default_rng(9)
        randomize_params(store, rng)
        x = rng.standard_normal((4, 5))
        np.testing.assert_allclose(
            block.forward([x])[0], ref_sa_block(x, block), atol=1e-10
        )

    def test_grad_full_block(self):
        block, store = _sa(3, seed=10)
        rng = np.random.default_rng(11)
        randomize_params(store, rng)
        c = rng.standard_normal((3, 4))

        def fn(x):
            cache = {}
            y = block.forward([x], cache)[0]
            store.zero_grads()
            dx = block.backward([c], cache)[0]
            return float((c * y).sum()), dx

        assert nn.finite_diff_check(fn, rng.standard_normal((3, 4))) < 1e-4

    def test_grad_delta(self):
        block, store = _sa(3, seed=12)
        rng = np.random.default_rng(13)
        randomize_params(store, rng)
        x = rng.standard_normal((3, 4))
        c = rng.standard_normal((3, 4))

        def fn(delta):
            block.delta.value = delta
            cache = {}
            y = block.forward([x], cache)[0]
            store.zero_grads()
            block.backward([c], cache)
            return float((c * y).sum()), block.delta.grad.copy()

        assert nn.finite_diff_check(fn, np.array([0.4])) < 1e-5


class TestTCNBlock:
    def test_zero_out_conv_is_identity(self):
        block, _ = _tcn(4, 6, 3, 2, seed=14)
        block.out_conv.weight.value = np.zeros((4, 6))
        block.out_conv.bias.value = np.zeros(4)
        x = np.random.default_rng(15).standard_normal((4, 10))
        np.testing.assert_array_equal(block.forward([x], "train")[0], x)

    @pytest.mark.parametrize("dilation", [1, 2, 8])
    def test_output_shape_preserved(self, dilation):
        block, _ = _tcn(4, 6, 3, dilation, seed=16)
        x = np.random.default_rng(17).standard_normal((4, 7))
        assert block.forward([x], "eval")[0].shape == (4, 7)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_matches_scalar_oracle(self, mode):
        block, store = _tcn(4, 6, 3, 2, seed=18)
        rng = np.random.default_rng(19)
        randomize_params(store, rng)
        x = rng.standard_normal((4, 9))
        expected = ref_tcn_block(x, block, mode)
        np.testing.assert_allclose(block.forward([x], mode)[0], expected, atol=1e-10)

    def test_grad_full_block(self):
        block, store = _tcn(4, 6, 3, 2, seed=20)
        rng = np.random.default_rng(21)
        randomize_params(store, rng)
        c = rng.standard_normal((4, 8))

        def fn(x):
            cache = {}
            y = block.forward([x], "train", cache)[0]
            store.zero_grads()
            dx = block.backward([c], cache)[0]
            return float((c * y).sum()), dx

        assert nn.finite_diff_check(fn, rng.standard_normal((4, 8))) < 1e-3


class TestStage:
    def _stage(self, seed=22):
        store = nn.ParamStore()
        stage = Stage(store, "stage1", 9, 4, 6, 3, 2, 3, np.random.default_rng(seed))
        return stage, store

    def test_mask_strictly_in_unit_interval(self):
        stage, store = self._stage()
        rng = np.random.default_rng(23)
        randomize_params(store, rng)
        mask = stage.forward([np.abs(rng.standard_normal((9, 6)))], "eval")[0]
        assert np.all(mask > 0.0)
        assert np.all(mask < 1.0)

    def test_zero_out_proj_gives_half(self):
        stage, _ = self._stage(seed=24)
        stage.out_proj.weight.value = np.zeros((9, 4))
        stage.out_proj.bias.value = np.zeros(9)
        x = np.abs(np.random.default_rng(25).standard_normal((9, 5)))
        np.testing.assert_array_equal(stage.forward([x], "eval")[0], np.full((9, 5), 0.5))

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_matches_scalar_oracle(self, mode):
        stage, store = self._stage(seed=26)
        rng = np.random.default_rng(27)
        randomize_params(store, rng, scale=0.2)
        x = np.abs(rng.standard_normal((9, 4)))
        expected = ref_stage(x, stage, mode)
        np.testing.assert_allclose(stage.forward([x], mode)[0], expected, atol=1e-10)

    def test_dilations_restart_per_stack(self):
        stage, _ = self._stage()
        assert [b.dilation for b in stage.blocks] == [1, 2, 4, 1, 2, 4]


class TestFusionBlock:
    def _fusion(self, f=5, seed=28):
        store = nn.ParamStore()
        return FusionBlock(store, "fusion3", f, np.random.default_rng(seed)), store

    def test_zero_inputs_zero_biases_gives_zero(self):
        fusion, store = self._fusion()
        for name, p in store.params():
            if name.endswith(".bias") or name.endswith(".beta"):
                p.value = np.zeros_like(p.value)
        y = fusion.forward([np.zeros((5, 4))], [np.zeros((5, 4))])[0]
        np.testing.assert_array_equal(y, np.zeros((5, 4)))

    def test_output_shape(self):
        fusion, _ = self._fusion()
        rng = np.random.default_rng(29)
        y = fusion.forward([rng.standard_normal((5, 7))], [rng.standard_normal((5, 7))])[0]
        assert y.shape == (5, 7)

    def test_shape_mismatch_rejected(self):
        fusion, _ = self._fusion()
        with pytest.raises(ValueError):
            fusion.forward([np.zeros((5, 4))], [np.zeros((5, 3))])

    def test_matches_scalar_oracle(self):
        fusion, store = self._fusion(seed=30)
        rng = np.random.default_rng(31)
        randomize_params(store, rng)
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((5, 4))
        np.testing.assert_allclose(
            fusion.forward([a], [b])[0], ref_fusion(a, b, fusion), atol=1e-10
        )

    def test_grad_both_inputs(self):
        fusion, store = self._fusion(f=4, seed=32)
        rng = np.random.default_rng(33)
        randomize_params(store, rng)
        b = rng.standard_normal((4, 5))
        c = rng.standard_normal((4, 5))

        def fn_a(a):
            cache = {}
            y = fusion.forward([a], [b], cache)[0]
            store.zero_grads()
            da, _ = fusion.backward([c], cache)
            return float((c * y).sum()), da[0]

        assert nn.finite_diff_check(fn_a, rng.standard_normal((4, 5))) < 1e-4

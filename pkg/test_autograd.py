"""
Tensor engine, differentiable ops, layers, AdamW and checkpoints
"""

import numpy as np
import pytest

from src.autograd import functional as F
from src.autograd import nn
from src.autograd.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from src.autograd.gradcheck import END_TO_END_STEP, GRAD_TOLERANCE, OP_SUITE, finite_diff_check, run_op_suite
from src.autograd.optim import AdamW
from src.autograd.tensor import Tensor, cat, no_grad, set_default_dtype
from src.core.errors import CheckpointError, ConfigurationError, ContractError, DimensionError


class TestTensor:
    def test_broadcast_add_reduces_gradient(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        (a + b).sum().backward()
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))

    def test_gradients_accumulate_over_backward_calls(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * 3.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_shared_subexpression(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        assert x.grad[0] == pytest.approx(8.0)

    def test_sum_of_matrix_is_zero_dimensional(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        total = x.sum()
        assert total.shape == ()
        total.backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_matmul_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert y.creator is None and not y.requires_grad

    def test_numpy_on_the_left_defers_to_tensor(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = np.full(3, 2.0) * x
        assert isinstance(y, Tensor)
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_default_dtype_switch(self):
        set_default_dtype("float32")
        assert Tensor([1.0]).dtype == np.float32
        set_default_dtype("float64")
        assert Tensor([1.0]).dtype == np.float64

    def test_cat_splits_gradient(self):
        a = Tensor(np.ones((1, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        (cat([a, b], axis=0) * Tensor(np.arange(6.0).reshape(3, 2))).sum().backward()
        np.testing.assert_array_equal(a.grad, [[0.0, 1.0]])
        np.testing.assert_array_equal(b.grad, [[2.0, 3.0], [4.0, 5.0]])


class TestGradientSuite:
    @pytest.mark.parametrize("name", sorted(OP_SUITE))
    def test_op_matches_finite_differences(self, name):
        assert run_op_suite(names=[name])[name] < GRAD_TOLERANCE

    def test_small_step_resolves_activations_near_a_kink(self):
        x = Tensor(np.array([3e-6, -4e-6, 1.0]), requires_grad=True)
        assert finite_diff_check(lambda t: t.relu().sum(), x) > 0.1
        assert finite_diff_check(lambda t: t.relu().sum(), x, h=END_TO_END_STEP) < 1e-6

    def test_float32_is_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True, dtype=np.float32)
        with pytest.raises(ContractError):
            finite_diff_check(lambda t: t.sum(), x)


class TestOracles:
    def test_conv2d_matches_nested_loops(self, rng):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 2))
        b = rng.standard_normal(4)
        stride, pad = 2, 1
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data

        padded = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
        ho = (padded.shape[2] - 3) // stride + 1
        wo = (padded.shape[3] - 2) // stride + 1
        expected = np.zeros((2, 4, ho, wo))
        for n in range(2):
            for o in range(4):
                for i in range(ho):
                    for j in range(wo):
                        patch = padded[n, :, i * stride:i * stride + 3, j * stride:j * stride + 2]
                        expected[n, o, i, j] = np.sum(patch * w[o]) + b[o]
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_deconv_is_adjoint_of_conv(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        y = rng.standard_normal((1, 3, 3, 3))
        conv = F.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        # <conv(x), y> == <x, deconv(y)> with the same weights read as [C_in, C_out, K]
        deconv = F.deconv2d(Tensor(y), Tensor(w), stride=2, padding=1).data
        assert np.sum(conv * y) == pytest.approx(np.sum(x * deconv), rel=1e-12)

    def test_scatter_add_matches_brute_force(self, rng):
        features = rng.standard_normal((50, 3))
        index = rng.integers(-1, 8, size=50)
        out = F.scatter_add(Tensor(features), index, 8).data
        expected = np.zeros((8, 3))
        for row, target in enumerate(index):
            if target >= 0:
                expected[target] += features[row]
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_scatter_index_out_of_range(self):
        with pytest.raises(ContractError):
            F.scatter_add(Tensor(np.ones((2, 1))), np.array([0, 3]), 3)

    def test_conv_output_extent_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            F.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    def test_resize_identity_and_constant(self):
        x = Tensor(np.full((1, 2, 3, 4), 5.0))
        assert F.resize_linear(x, (3, 4)) is x
        np.testing.assert_allclose(F.resize_linear(x, (6, 8)).data, 5.0)

    def test_softmax_large_logits_do_not_overflow(self, rng):
        probs = F.softmax(Tensor([1000.0, 0.0]), axis=0).data
        assert np.all(np.isfinite(probs))
        assert probs[0] == pytest.approx(1.0) and probs[1] == pytest.approx(0.0, abs=1e-300)
        x = rng.uniform(-1e3, 1e3, size=(5, 7))
        np.testing.assert_allclose(F.softmax(Tensor(x), axis=1).data.sum(axis=1), 1.0, atol=1e-6)

    def test_softmax_closed_form(self):
        probs = F.softmax(Tensor(np.log([1.0, 2.0, 3.0])), axis=0).data
        np.testing.assert_allclose(probs, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_all_ones_kernel_sums_the_image(self):
        out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3)))).data
        assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 9.0

    def test_upsampling_keeps_affine_field_in_the_interior(self):
        z, y, x = np.meshgrid(np.arange(2.0), np.arange(4.0), np.arange(4.0), indexing="ij")
        ramp = 1.0 + 2.0 * z + 3.0 * y - x
        out = F.resize_linear(Tensor(ramp[None, None]), (4, 8, 8)).data[0, 0]
        # Output voxel j samples source coordinate j / 2 - 0.25
        zs, ys, xs = np.meshgrid(np.arange(4) / 2 - 0.25, np.arange(8) / 2 - 0.25, np.arange(8) / 2 - 0.25,
                                 indexing="ij")
        expected = 1.0 + 2.0 * zs + 3.0 * ys - xs
        np.testing.assert_allclose(out[1:-1, 1:-1, 1:-1], expected[1:-1, 1:-1, 1:-1], atol=1e-12)

    def test_softmax_rejects_bad_axis(self):
        with pytest.raises(ContractError):
            F.softmax(Tensor(np.ones((2, 2))), axis=3)

    def test_cross_entropy_label_range(self):
        with pytest.raises(ContractError):
            F.cross_entropy(Tensor(np.zeros((3, 2))), np.array([0, 3]))


class TestModules:
    def test_shared_parameters_listed_once(self):
        shared = nn.Linear(2, 2)
        outer = nn.Sequential(shared, nn.ReLU(), shared)
        assert len(outer.parameters()) == 2
        assert [name for name, _ in outer.named_parameters()] == ["0.weight", "0.bias"]

    def test_state_dict_round_trip(self):
        layer = nn.conv_bn_relu(2, 3, 3, padding=1)
        state = {k: v.copy() for k, v in layer.state_dict().items()}
        nn.manual_seed(5)
        other = nn.conv_bn_relu(2, 3, 3, padding=1)
        other.load_state_dict(state)
        for name, value in other.state_dict().items():
            np.testing.assert_array_equal(value, state[name])

    def test_load_state_dict_strict(self):
        layer = nn.Linear(2, 2)
        with pytest.raises(CheckpointError):
            layer.load_state_dict({"weight": np.zeros((2, 2))})
        with pytest.raises(CheckpointError):
            layer.load_state_dict({"weight": np.zeros((3, 2)), "bias": np.zeros(2)})

    def test_freeze_stops_gradients(self):
        layer = nn.Linear(3, 1).freeze()
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        layer(x).sum().backward()
        assert layer.weight.grad is None
        assert x.grad is not None

    def test_batchnorm_running_statistics(self, rng):
        bn = nn.BatchNorm2d(2)
        x = rng.standard_normal((4, 2, 3, 3)) * 2.0 + 1.0
        bn(Tensor(x))
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(bn.running_mean, 0.1 * mean)
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * var)
        assert bn.num_batches_tracked[0] == 1

    def test_batchnorm_frozen_stats(self, rng):
        bn = nn.BatchNorm2d(2, freeze_stats=True)
        bn(Tensor(rng.standard_normal((2, 2, 2, 2))))
        np.testing.assert_array_equal(bn.running_mean, 0.0)

    def test_unbatched_conv_and_bn(self, rng):
        block = nn.conv_bn_relu(2, 4, 3, padding=1)
        assert block(Tensor(rng.standard_normal((2, 5, 5)))).shape == (4, 5, 5)

    def test_manual_seed_reproduces_init(self):
        nn.manual_seed(3)
        a = nn.Linear(4, 4).weight.data.copy()
        nn.manual_seed(3)
        np.testing.assert_array_equal(nn.Linear(4, 4).weight.data, a)


class TestAdamW:
    def test_first_step_is_sign_sized(self):
        p = nn.Parameter(np.array([1.0, -2.0]))
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = np.array([0.5, -3.0])
        opt.step()
        np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-6)

    def test_decoupled_weight_decay(self):
        p = nn.Parameter(np.array([2.0]))
        opt = AdamW([p], lr=0.1, weight_decay=0.5)
        p.grad = np.array([0.0])
        opt.step()
        # zero gradient: only the decay acts
        np.testing.assert_allclose(p.data, [2.0 * (1 - 0.1 * 0.5)])

    def test_groups_and_lr_changes(self):
        a, b = nn.Parameter(np.ones(1)), nn.Parameter(np.ones(1))
        opt = AdamW([{"params": [a], "name": "forecasting", "lr": 1e-3},
                     {"params": [b], "name": "base", "lr": 1e-5}])
        opt.set_lr("forecasting", 1e-4)
        assert opt.learning_rates() == {"forecasting": 1e-4, "base": 1e-5}
        with pytest.raises(ConfigurationError):
            opt.set_lr("missing", 1.0)

    def test_frozen_parameters_are_skipped(self):
        p = nn.Parameter(np.ones(2))
        opt = AdamW([p], lr=0.1)
        p.requires_grad_(False)
        opt.step()
        np.testing.assert_array_equal(p.data, 1.0)

    def test_parameter_in_two_groups(self):
        p = nn.Parameter(np.ones(1))
        with pytest.raises(ConfigurationError):
            AdamW([{"params": [p]}, {"params": [p]}])

    def test_minimises_quadratic(self):
        p = nn.Parameter(np.array([3.0, -4.0]))
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        for _ in range(300):
            opt.zero_grad()
            (p * p).sum().backward()
            opt.step()
        assert np.all(np.abs(p.data) < 0.1)


class TestCheckpoint:
    def test_encode_decode(self, rng):
        state = {"a.weight": rng.standard_normal((2, 3)), "b.bias": np.zeros(4)}
        decoded, meta = decode_checkpoint(encode_checkpoint(state, {"preset": "micro"}))
        assert meta == {"preset": "micro"}
        for name in state:
            np.testing.assert_array_equal(decoded[name], state[name])

    def test_bad_magic_and_truncation(self):
        payload = encode_checkpoint({"w": np.ones(3)})
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"NOTACKPT" + payload[8:])
        with pytest.raises(CheckpointError, match="truncated"):
            decode_checkpoint(payload[:-4])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_preset_mismatch(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", {"w": np.ones(1)}, {"preset": "toy"})
        with pytest.raises(ConfigurationError):
            load_checkpoint(path, expected_preset="micro")
        state, meta = load_checkpoint(path, expected_preset="toy")
        assert meta["preset"] == "toy" and state["w"][0] == 1.0

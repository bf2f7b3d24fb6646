"""
Unit tests for the autodiff engine.

Tests tape recording, gradients against finite differences, MLP shape
checks, the Adam update and the checkpoint format.
"""

import numpy as np
import pytest

import autodiff_nn as ad
from errors import ArchitectureMismatchError, DimensionError, FormatError, NumericError, TrainingError, UsageError


def mlp_loss_fn(params_template, x, target):
    """Squared error of an MLP, returned as (loss, grads) for gradient_check."""
    def loss_fn(arrays):
        params = params_template.replaced("net", arrays)
        tape = ad.Tape()
        out = ad.mlp_forward(params, x, tape, "net")
        loss = ((out - target) * (out - target)).sum()
        return float(loss.data), ad.backward(tape)
    return loss_fn


class TestTape:
    """Test suite for Tensor arithmetic and the reverse pass."""

    def test_product_rule(self):
        """Test d(a*b)/da = b and d(a*b)/db = a."""
        tape = ad.Tape()
        a = tape.watch("a", 3.0)
        b = tape.watch("b", -2.0)
        a * b
        grads = ad.backward(tape)
        assert grads["a"] == pytest.approx(-2.0)
        assert grads["b"] == pytest.approx(3.0)

    def test_broadcast_gradient_is_summed(self):
        """Test a bias broadcast over a batch receives the summed gradient."""
        tape = ad.Tape()
        bias = tape.watch("bias", np.zeros(3))
        x = ad.Tensor(np.ones((4, 3)))
        (x + bias).sum()
        grads = ad.backward(tape)
        np.testing.assert_allclose(grads["bias"], np.full(3, 4.0))

    def test_unused_parameter_gets_zero_gradient(self):
        """Test parameters the output does not depend on get zeros."""
        tape = ad.Tape()
        used = tape.watch("used", np.array([1.0, 2.0]))
        tape.watch("unused", np.array([5.0]))
        used.square().sum()
        grads = ad.backward(tape)
        np.testing.assert_allclose(grads["used"], [2.0, 4.0])
        np.testing.assert_array_equal(grads["unused"], [0.0])

    def test_watch_is_idempotent(self):
        """Test watching the same name twice reuses the slot."""
        tape = ad.Tape()
        first = tape.watch("w", 1.0)
        second = tape.watch("w", 99.0)
        assert first.slot == second.slot
        assert float(second.data) == 1.0

    def test_backward_on_empty_tape(self):
        """Test backward without any recorded operation raises UsageError."""
        tape = ad.Tape()
        tape.watch("w", 1.0)
        with pytest.raises(UsageError, match="empty tape"):
            ad.backward(tape)

    def test_constants_are_not_recorded(self):
        """Test operations on constant tensors leave no tape."""
        out = ad.Tensor([1.0, 2.0]) * 3.0
        assert out.tape is None
        np.testing.assert_allclose(out.data, [3.0, 6.0])

    def test_where_and_clip_route_gradients(self):
        """Test masked primitives pass gradients only through selected entries."""
        tape = ad.Tape()
        a = tape.watch("a", np.array([-2.0, 0.5, 3.0]))
        ad.clip(a, -1.0, 1.0).sum()
        grads = ad.backward(tape)
        np.testing.assert_array_equal(grads["a"], [0.0, 1.0, 0.0])

        tape = ad.Tape()
        a = tape.watch("a", np.array([1.0, 2.0]))
        b = tape.watch("b", np.array([3.0, 4.0]))
        ad.where(np.array([True, False]), a, b).sum()
        grads = ad.backward(tape)
        np.testing.assert_array_equal(grads["a"], [1.0, 0.0])
        np.testing.assert_array_equal(grads["b"], [0.0, 1.0])


class TestMlp:
    """Test suite for MLP construction and evaluation."""

    def test_dims(self):
        """Test mlp_dims gives num_layers layers of hidden width."""
        assert ad.mlp_dims(5, 4, hidden_dim=8, num_layers=3) == [5, 8, 8, 4]

    def test_forward_matches_apply(self, rng):
        """Test the taped forward pass equals the tape-free evaluation."""
        params = ad.init_mlp([3, 8, 2], rng)
        x = rng.standard_normal((5, 3))
        taped = ad.mlp_forward(params, x, ad.Tape(), "net").data
        np.testing.assert_array_equal(taped, ad.mlp_apply(params, x))

    def test_input_dim_mismatch(self, rng):
        """Test a wrong input width raises DimensionError naming the layer."""
        params = ad.init_mlp([3, 8, 2], rng)
        with pytest.raises(DimensionError, match="layer 0"):
            ad.mlp_apply(params, np.zeros((2, 4)))

    def test_layers_must_chain(self):
        """Test mismatched consecutive layers are rejected."""
        with pytest.raises(DimensionError, match="does not chain"):
            ad.MlpParams([(np.zeros((4, 3)), np.zeros(4)), (np.zeros((2, 5)), np.zeros(2))])

    def test_frozen_network_has_no_parameters(self, rng):
        """Test an unnamed forward pass watches nothing."""
        params = ad.init_mlp([2, 4, 1], rng)
        tape = ad.Tape()
        x = tape.watch("x", rng.standard_normal((3, 2)))
        ad.mlp_forward(params, x, tape).sum()
        grads = ad.backward(tape)
        assert list(grads) == ["x"]

    def test_named_parameters_round_trip(self, rng):
        """Test replaced() with the named arrays reproduces the network."""
        params = ad.init_mlp([2, 4, 1], rng)
        named = params.named_parameters("enc")
        assert sorted(named) == ["enc.0.bias", "enc.0.weight", "enc.1.bias", "enc.1.weight"]
        assert params.replaced("enc", named).equals(params)


class TestGradientCheck:
    """Test suite for the finite-difference gradient checker."""

    def test_mlp_gradients_agree(self, rng):
        """Test autodiff agrees with central differences on an MLP loss."""
        params = ad.init_mlp([3, 6, 2], rng)
        x = rng.standard_normal((4, 3))
        target = rng.standard_normal((4, 2))
        error = ad.gradient_check(mlp_loss_fn(params, x, target), params.named_parameters("net"))
        assert error < 1e-5

    def test_wrong_gradient_is_detected(self):
        """Test a deliberately wrong gradient gives a large relative error."""
        def loss_fn(arrays):
            w = arrays["w"]
            return float(np.sum(w ** 2)), {"w": 3.0 * w}
        assert ad.gradient_check(loss_fn, {"w": np.array([1.0, -2.0])}) > 0.4

    def test_per_entry_quadratic(self):
        """Test the per-entry score of an exact quadratic gradient is roundoff."""
        def loss_fn(arrays):
            w = arrays["w"]
            return 0.5 * float(np.sum(w ** 2)), {"w": w.copy()}
        params = {"w": np.array([[1.0, -2.0], [0.5, 3.0]])}
        assert ad.gradient_check(loss_fn, params, per_entry=True) < 1e-7

    def test_per_entry_flags_small_components(self):
        """Test an error on a near-zero component shows per entry but not per array."""
        def loss_fn(arrays):
            w = arrays["w"]
            return 0.5 * float(np.sum(w ** 2)), {"w": w + np.array([0.0, 1e-3])}
        params = {"w": np.array([100.0, 0.01])}
        assert ad.gradient_check(loss_fn, params) < 1e-4
        assert ad.gradient_check(loss_fn, params, per_entry=True) > 0.05

    def test_empty_parameters(self):
        """Test an empty parameter array scores zero in both modes."""
        def loss_fn(arrays):
            return 1.0, {"w": np.zeros(0)}
        assert ad.gradient_check(loss_fn, {"w": np.zeros(0)}) == 0.0
        assert ad.gradient_check(loss_fn, {"w": np.zeros(0)}, per_entry=True) == 0.0

    def test_non_finite_loss(self):
        """Test a non-finite loss raises NumericError."""
        def loss_fn(arrays):
            return float("nan"), {"w": np.zeros(1)}
        with pytest.raises(NumericError):
            ad.gradient_check(loss_fn, {"w": np.zeros(1)})


class TestAdam:
    """Test suite for the Adam optimizer."""

    def test_first_step_moves_by_learning_rate(self):
        """Test the bias-corrected first step has magnitude lr per entry."""
        params = {"w": np.array([1.0, -1.0])}
        grads = {"w": np.array([0.5, -4.0])}
        new, state = ad.adam_step(params, grads, ad.OptimState(learning_rate=0.1))
        np.testing.assert_allclose(new["w"], [0.9, -0.9], atol=1e-6)
        assert state.step == 1

    def test_minimises_quadratic(self):
        """Test repeated steps approach the minimum of a quadratic."""
        params = {"w": np.array([3.0, -2.0])}
        state = ad.OptimState(learning_rate=0.05)
        for _ in range(1000):
            params, state = ad.adam_step(params, {"w": 2.0 * params["w"]}, state)
        assert np.max(np.abs(params["w"])) < 0.1

    def test_non_finite_gradient(self):
        """Test a NaN gradient raises TrainingError naming the parameter."""
        with pytest.raises(TrainingError, match="enc.0.weight"):
            ad.adam_step({"enc.0.weight": np.zeros(2)}, {"enc.0.weight": np.array([np.nan, 0.0])}, ad.OptimState())


class TestCheckpoint:
    """Test suite for the binary checkpoint format."""

    def test_save_load(self, tmp_path, rng):
        """Test weights and metadata survive a save/load cycle bit for bit."""
        nets = {"a": ad.init_mlp([2, 3, 1], rng), "b": ad.init_mlp([4, 2], rng)}
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint(nets, path, {"kind": "test", "latent_dim": 2})
        loaded, meta = ad.load_checkpoint(path, {"kind": "test"})
        assert meta == {"kind": "test", "latent_dim": 2}
        assert loaded["a"].equals(nets["a"])
        assert loaded["b"].equals(nets["b"])

    def test_bad_magic(self, tmp_path):
        """Test a foreign file raises FormatError."""
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(FormatError, match="magic"):
            ad.load_checkpoint(path)

    def test_truncated(self, tmp_path, rng):
        """Test a truncated weight section raises FormatError."""
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint({"a": ad.init_mlp([2, 3], rng)}, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError, match="truncated"):
            ad.load_checkpoint(path)

    def test_architecture_mismatch(self, tmp_path, rng):
        """Test a metadata mismatch raises ArchitectureMismatchError."""
        path = tmp_path / "model.ckpt"
        ad.save_checkpoint({"a": ad.init_mlp([2, 3], rng)}, path, {"latent_dim": 2})
        with pytest.raises(ArchitectureMismatchError, match="latent_dim"):
            ad.load_checkpoint(path, {"latent_dim": 3})

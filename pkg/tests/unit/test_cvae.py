"""
Unit tests for the CVAE forecaster.

Tests encoding, decoding and sampling shapes, the ELBO and its gradients,
the KL schedule, training and checkpoints.
"""

import dataclasses

import numpy as np
import pytest

import autodiff_nn as ad
from cvae import (
    DiagonalGaussian,
    decode,
    decode_from_noise,
    elbo_loss,
    elbo_objective,
    encode_posterior,
    encode_prior,
    kl_diag_gaussians,
    kl_schedule,
    load_cvae,
    reparameterize,
    sample_forecasts,
    save_cvae,
    train_cvae,
)
from errors import ArchitectureMismatchError, TrainingError, UsageError
from tests.conftest import FUTURE_STEPS, PAST_STEPS


class TestDiagonalGaussian:
    """Test suite for latent Gaussians and the KL divergence."""

    def test_kl_of_identical_is_zero(self):
        """Test KL(q || q) = 0."""
        g = DiagonalGaussian(np.array([0.3, -1.0]), np.array([0.2, -0.5]))
        assert kl_diag_gaussians(g, g) == pytest.approx(0.0, abs=1e-12)

    def test_kl_closed_form(self):
        """Test KL(N(1, 1) || N(0, 1)) = 1/2 in one dimension."""
        q = DiagonalGaussian(np.array([1.0]), np.array([0.0]))
        p = DiagonalGaussian(np.array([0.0]), np.array([0.0]))
        assert kl_diag_gaussians(q, p) == pytest.approx(0.5)

    def test_log_var_is_clipped(self):
        """Test extreme log-variances are bounded."""
        g = DiagonalGaussian(np.zeros(2), np.array([-50.0, 50.0]))
        np.testing.assert_array_equal(g.log_var, [-10.0, 10.0])

    def test_shape_mismatch(self):
        """Test mu and log_var of different shapes are rejected."""
        with pytest.raises(UsageError, match="differ in shape"):
            DiagonalGaussian(np.zeros(2), np.zeros(3))

    def test_reparameterize(self):
        """Test z = mu + std * noise."""
        g = DiagonalGaussian(np.array([1.0, 2.0]), np.log(np.array([4.0, 1.0])))
        np.testing.assert_allclose(reparameterize(g, np.array([1.0, -1.0])), [3.0, 1.0])

    def test_reparameterize_dim_mismatch(self):
        """Test noise of the wrong dimension raises UsageError."""
        with pytest.raises(UsageError, match="latent dim"):
            reparameterize(DiagonalGaussian(np.zeros(2), np.zeros(2)), np.zeros(3))


class TestForecasting:
    """Test suite for encoding, decoding and sampling."""

    def test_encoder_shapes(self, tiny_cvae, tiny_dataset):
        """Test prior and posterior give one latent Gaussian per scene."""
        prior = encode_prior(tiny_cvae, tiny_dataset.x)
        post = encode_posterior(tiny_cvae, tiny_dataset.x, tiny_dataset.y)
        assert prior.mu.shape == post.mu.shape == (len(tiny_dataset), 2)

    def test_sample_shape(self, tiny_cvae, tiny_dataset, rng):
        """Test K samples for one past have shape (K, F, 2)."""
        assert sample_forecasts(tiny_cvae, tiny_dataset.x[0], 5, rng).shape == (5, FUTURE_STEPS, 2)

    def test_batched_noise(self, tiny_cvae, tiny_dataset, rng):
        """Test batched decoding matches decoding scene by scene."""
        noise = rng.standard_normal((4, 3, 2))
        batched = decode_from_noise(tiny_cvae, tiny_dataset.x[:4], noise)
        assert batched.shape == (4, 3, FUTURE_STEPS, 2)
        for b in range(4):
            np.testing.assert_allclose(batched[b], decode_from_noise(tiny_cvae, tiny_dataset.x[b], noise[b]), atol=1e-12)

    def test_translation_equivariance(self, tiny_cvae, tiny_dataset, rng):
        """Test shifting the past shifts every forecast by the same offset."""
        z = rng.standard_normal((3, 2))
        x = tiny_dataset.x[0]
        offset = np.array([5.0, -2.0])
        np.testing.assert_allclose(decode(tiny_cvae, x + offset, z), decode(tiny_cvae, x, z) + offset, atol=1e-9)

    def test_zero_samples(self, tiny_cvae, tiny_dataset, rng):
        """Test asking for no forecasts raises UsageError."""
        with pytest.raises(UsageError, match="at least 1"):
            sample_forecasts(tiny_cvae, tiny_dataset.x[0], 0, rng)

    def test_wrong_past_length(self, tiny_cvae):
        """Test a past of the wrong length raises UsageError."""
        with pytest.raises(UsageError, match="past trajectory"):
            encode_prior(tiny_cvae, np.zeros((PAST_STEPS + 1, 2)))


class TestElbo:
    """Test suite for the training objective."""

    def test_taped_matches_tape_free(self, tiny_cvae, tiny_dataset, rng):
        """Test the taped and tape-free losses agree."""
        noise = rng.standard_normal((len(tiny_dataset), 2))
        terms, _ = elbo_objective(tiny_cvae, tiny_dataset.x, tiny_dataset.y, noise, 0.7)
        assert terms.loss == pytest.approx(elbo_loss(tiny_cvae, tiny_dataset.x, tiny_dataset.y, noise, 0.7), rel=1e-10)
        assert terms.loss == pytest.approx(terms.recon + 0.7 * terms.kl, rel=1e-10)

    def test_gradients(self, tiny_cvae, tiny_dataset, rng):
        """Test ELBO gradients agree with finite differences."""
        x, y = tiny_dataset.x[:6], tiny_dataset.y[:6]
        noise = rng.standard_normal((6, 2))

        def loss_fn(arrays):
            terms, grads = elbo_objective(tiny_cvae.with_parameters(arrays), x, y, noise)
            return terms.loss, grads

        assert ad.gradient_check(loss_fn, tiny_cvae.parameters()) < 1e-4

    def test_non_finite_weights(self, tiny_cvae, tiny_dataset, rng):
        """Test NaN weights raise TrainingError."""
        params = {k: np.full_like(v, np.nan) for k, v in tiny_cvae.parameters().items()}
        with pytest.raises(TrainingError, match="not finite"):
            elbo_objective(tiny_cvae.with_parameters(params), tiny_dataset.x, tiny_dataset.y, rng.standard_normal((16, 2)))

    def test_kl_schedule(self, cvae_config):
        """Test the KL weight warms up linearly and then stays at its target."""
        config = dataclasses.replace(cvae_config, kl_weight=2.0, kl_warmup_fraction=0.1)
        assert kl_schedule(0, 100, config) == pytest.approx(0.2)
        assert kl_schedule(4, 100, config) == pytest.approx(1.0)
        assert kl_schedule(50, 100, config) == pytest.approx(2.0)
        assert kl_schedule(0, 100, dataclasses.replace(config, kl_warmup_fraction=0.0)) == pytest.approx(2.0)


class TestTraining:
    """Test suite for training and checkpoints."""

    def test_curve(self, tiny_dataset, cvae_config):
        """Test training returns one curve row per epoch."""
        model, curve = train_cvae(tiny_dataset, cvae_config, seed=0)
        assert list(curve.columns) == ["epoch", "loss", "kl", "recon"]
        assert curve["epoch"].tolist() == [0, 1]
        assert np.isfinite(curve["loss"]).all()
        assert model.future_steps == FUTURE_STEPS

    def test_reproducible(self, tiny_dataset, cvae_config):
        """Test the same seed gives the same weights."""
        a, _ = train_cvae(tiny_dataset, cvae_config, seed=3)
        b, _ = train_cvae(tiny_dataset, cvae_config, seed=3)
        assert a.fingerprint() == b.fingerprint()

    def test_loss_decreases(self, tiny_dataset, cvae_config):
        """Test a few dozen epochs reduce the negative ELBO."""
        config = dataclasses.replace(cvae_config, epochs=40, learning_rate=1e-2, kl_warmup_fraction=0.0, log_interval=100)
        _, curve = train_cvae(tiny_dataset, config, seed=1)
        assert curve["loss"].iloc[-1] < curve["loss"].iloc[0]

    def test_empty_dataset(self, tiny_dataset, cvae_config):
        """Test training on no scenes raises UsageError."""
        with pytest.raises(UsageError, match="empty"):
            train_cvae(tiny_dataset.subset(slice(0, 0)), cvae_config, seed=0)

    def test_checkpoint_round_trip(self, tmp_path, tiny_cvae):
        """Test a saved model loads with identical weights."""
        path = tmp_path / "cvae.ckpt"
        save_cvae(tiny_cvae, path)
        loaded = load_cvae(path)
        assert loaded.fingerprint() == tiny_cvae.fingerprint()
        assert loaded.dt == tiny_cvae.dt

    def test_checkpoint_mismatch(self, tmp_path, tiny_cvae):
        """Test loading with a different latent size raises ArchitectureMismatchError."""
        path = tmp_path / "cvae.ckpt"
        save_cvae(tiny_cvae, path)
        with pytest.raises(ArchitectureMismatchError):
            load_cvae(path, {"latent_dim": 5})

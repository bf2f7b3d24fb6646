# Conditional variational autoencoder for pedestrian forecasting
# Inferred prior q(z|x), posterior q(z|x,y) and decoder g(z,x), trained by
# maximising the ELBO with the reparameterisation trick. Trajectories are
# expressed relative to the last observed position and flattened.

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd

import autodiff_nn as ad
from autodiff_nn import MlpParams
from didactic_sim import Dataset
from errors import TrainingError, UsageError, require
from streams import scene_rng

logger = logging.getLogger(__name__)

LOG_VAR_BOUND = 10.0


# ============================================================================
# DATA MODELS
# ============================================================================

@dataclass(frozen=True)
class CvaeConfig:
    """Architecture and training budget of the forecaster."""
    hidden_dim: int = 64
    num_layers: int = 3
    latent_dim: int = 2
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    kl_weight: float = 1.0  # beta
    kl_warmup_fraction: float = 0.1  # linear beta warm-up over this share of steps
    log_interval: int = 10  # epochs between INFO lines

    def __post_init__(self):
        for name in ("hidden_dim", "num_layers", "latent_dim", "epochs", "batch_size", "log_interval"):
            require(getattr(self, name) >= 1, name, f"must be at least 1, got {getattr(self, name)}")
        require(self.learning_rate >= 0, "learning_rate", f"must be non-negative, got {self.learning_rate}")
        require(self.kl_weight >= 0, "kl_weight", f"must be non-negative, got {self.kl_weight}")
        require(0.0 <= self.kl_warmup_fraction <= 1.0, "kl_warmup_fraction",
                f"must lie in [0, 1], got {self.kl_warmup_fraction}")


@dataclass
class DiagonalGaussian:
    """Latent Gaussian with diagonal covariance; arrays of shape (..., latent_dim)."""
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.clip(np.asarray(self.log_var, dtype=np.float64), -LOG_VAR_BOUND, LOG_VAR_BOUND)
        if self.mu.shape != self.log_var.shape:
            raise UsageError(f"mu {self.mu.shape} and log_var {self.log_var.shape} differ in shape")

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)


@dataclass
class CvaeModel:
    """Prior encoder, posterior encoder and decoder of the forecaster."""
    prior: MlpParams  # x -> (mu, log_var)
    posterior: MlpParams  # (x, y) -> (mu, log_var)
    decoder: MlpParams  # (x, z) -> y
    latent_dim: int
    past_steps: int
    future_steps: int
    dt: float = 0.1  # s per step of the trajectories the model was trained on

    NAMES = ("prior", "posterior", "decoder")

    def __post_init__(self):
        p, f, lat = 2 * self.past_steps, 2 * self.future_steps, self.latent_dim
        expected = {
            "prior": (p, 2 * lat),
            "posterior": (p + f, 2 * lat),
            "decoder": (p + lat, f),
        }
        for name, (n_in, n_out) in expected.items():
            dims = getattr(self, name).dims
            if dims[0] != n_in or dims[-1] != n_out:
                raise UsageError(f"{name} network maps {dims[0]} -> {dims[-1]}, expected {n_in} -> {n_out}")

    def parameters(self) -> Dict[str, np.ndarray]:
        named: Dict[str, np.ndarray] = {}
        for name in self.NAMES:
            named.update(getattr(self, name).named_parameters(name))
        return named

    def with_parameters(self, arrays: Mapping[str, np.ndarray]) -> "CvaeModel":
        return CvaeModel(
            prior=self.prior.replaced("prior", arrays),
            posterior=self.posterior.replaced("posterior", arrays),
            decoder=self.decoder.replaced("decoder", arrays),
            latent_dim=self.latent_dim,
            past_steps=self.past_steps,
            future_steps=self.future_steps,
            dt=self.dt,
        )

    def fingerprint(self) -> str:
        """SHA-256 over every parameter name and value."""
        digest = hashlib.sha256()
        for name, value in sorted(self.parameters().items()):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return digest.hexdigest()

    def meta(self) -> Dict:
        return {
            "kind": "cvae",
            "latent_dim": self.latent_dim,
            "past_steps": self.past_steps,
            "future_steps": self.future_steps,
            "dt": self.dt,
            "hidden_dim": self.prior.dims[1] if len(self.prior.dims) > 2 else 0,
            "num_layers": len(self.prior.layers),
        }


def init_cvae(config: CvaeConfig, past_steps: int, future_steps: int, rng: np.random.Generator, dt: float = 0.1) -> CvaeModel:
    p, f, lat = 2 * past_steps, 2 * future_steps, config.latent_dim
    h, n = config.hidden_dim, config.num_layers
    return CvaeModel(
        prior=ad.init_mlp(ad.mlp_dims(p, 2 * lat, h, n), rng),
        posterior=ad.init_mlp(ad.mlp_dims(p + f, 2 * lat, h, n), rng),
        decoder=ad.init_mlp(ad.mlp_dims(p + lat, f, h, n), rng),
        latent_dim=lat,
        past_steps=past_steps,
        future_steps=future_steps,
        dt=dt,
    )


# ============================================================================
# INPUT FLATTENING
# ============================================================================

def _check_past(model: CvaeModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2:] != (model.past_steps, 2):
        raise UsageError(f"past trajectory must have shape (..., {model.past_steps}, 2), got {x.shape}")
    return x


def flatten_past(x: np.ndarray) -> np.ndarray:
    """(..., P, 2) past -> (..., 2P) positions relative to the last one."""
    rel = x - x[..., -1:, :]
    return rel.reshape(rel.shape[:-2] + (-1,))


def flatten_future(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    rel = y - x[..., -1:, :]
    return rel.reshape(rel.shape[:-2] + (-1,))


def _split_gaussian(out: np.ndarray, latent_dim: int) -> DiagonalGaussian:
    return DiagonalGaussian(out[..., :latent_dim], out[..., latent_dim:])


# ============================================================================
# ENCODE / SAMPLE / DECODE (tape-free)
# ============================================================================

def encode_prior(model: CvaeModel, x: np.ndarray) -> DiagonalGaussian:
    x = _check_past(model, x)
    return _split_gaussian(ad.mlp_apply(model.prior, flatten_past(x)), model.latent_dim)


def encode_posterior(model: CvaeModel, x: np.ndarray, y: np.ndarray) -> DiagonalGaussian:
    x = _check_past(model, x)
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-2:] != (model.future_steps, 2):
        raise UsageError(f"future trajectory must have shape (..., {model.future_steps}, 2), got {y.shape}")
    inputs = np.concatenate([flatten_past(x), flatten_future(x, y)], axis=-1)
    return _split_gaussian(ad.mlp_apply(model.posterior, inputs), model.latent_dim)


def reparameterize(g: DiagonalGaussian, noise: np.ndarray) -> np.ndarray:
    """z = mu + exp(log_var / 2) * noise."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != g.mu.shape[-1]:
        raise UsageError(f"noise dim {noise.shape[-1]} does not match latent dim {g.mu.shape[-1]}")
    return g.mu + g.std * noise


def decode(model: CvaeModel, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Absolute future positions (..., F, 2); x and z leading dims broadcast."""
    x = _check_past(model, x)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.latent_dim:
        raise UsageError(f"latent dim {z.shape[-1]} does not match model latent dim {model.latent_dim}")
    x_flat = flatten_past(x)
    lead = np.broadcast_shapes(x_flat.shape[:-1], z.shape[:-1])
    inputs = np.concatenate([
        np.broadcast_to(x_flat, lead + x_flat.shape[-1:]),
        np.broadcast_to(z, lead + z.shape[-1:]),
    ], axis=-1)
    out = ad.mlp_apply(model.decoder, inputs).reshape(lead + (model.future_steps, 2))
    return out + x[..., -1:, :]


def sample_forecasts(model: CvaeModel, x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """K forecasts (K, F, 2) for one past trajectory x (P, 2)."""
    if k < 1:
        raise UsageError(f"number of forecasts must be at least 1, got {k}")
    noise = rng.standard_normal((k, model.latent_dim))
    return decode_from_noise(model, x, noise)


def decode_from_noise(model: CvaeModel, x: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Forecasts decode(x, reparameterize(prior(x), noise)).

    x (P, 2) with noise (K, L) gives (K, F, 2); x (B, P, 2) with noise
    (B, K, L) gives (B, K, F, 2).
    """
    x = _check_past(model, x)
    prior = encode_prior(model, x)
    if x.ndim == 3:
        prior = DiagonalGaussian(prior.mu[:, None, :], prior.log_var[:, None, :])
        return decode(model, x[:, None], reparameterize(prior, noise))
    return decode(model, x, reparameterize(prior, noise))


# ============================================================================
# ELBO
# ============================================================================

def kl_diag_gaussians(q: DiagonalGaussian, p: DiagonalGaussian) -> Union[float, np.ndarray]:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.mu.shape[-1] != p.mu.shape[-1]:
        raise UsageError("KL between Gaussians of different dimension")
    kl = 0.5 * np.sum(
        p.log_var - q.log_var + (np.exp(q.log_var) + (q.mu - p.mu) ** 2) / np.exp(p.log_var) - 1.0,
        axis=-1,
    )
    kl = np.maximum(kl, 0.0)
    return float(kl) if np.ndim(kl) == 0 else kl


def kl_tensor(mu_q: ad.Tensor, lv_q: ad.Tensor, mu_p: ad.Tensor, lv_p: ad.Tensor) -> ad.Tensor:
    """Differentiable KL(q || p), shape (...)."""
    diff = mu_q - mu_p
    terms = lv_p - lv_q + (ad.exp(lv_q) + diff * diff) / ad.exp(lv_p) - 1.0
    return terms.sum(axis=-1) * 0.5


def encode_tensor(params: MlpParams, inputs, tape: ad.Tape, name: Optional[str], latent_dim: int) -> Tuple[ad.Tensor, ad.Tensor]:
    """Encoder on the tape; returns (mu, clipped log_var)."""
    out = ad.mlp_forward(params, inputs, tape, name)
    return out[..., :latent_dim], ad.clip(out[..., latent_dim:], -LOG_VAR_BOUND, LOG_VAR_BOUND)


def decode_tensor(model: CvaeModel, x_flat: np.ndarray, z: ad.Tensor, tape: ad.Tape, name: Optional[str]) -> ad.Tensor:
    """Relative future positions (..., F, 2) on the tape; x_flat broadcast to z."""
    lead = z.data.shape[:-1]
    x_part = ad.Tensor(np.broadcast_to(x_flat, lead + x_flat.shape[-1:]).copy())
    out = ad.mlp_forward(model.decoder, ad.concat([x_part, z], axis=-1), tape, name)
    return out.reshape(*(lead + (model.future_steps, 2)))


@dataclass
class ElboTerms:
    loss: float
    kl: float
    recon: float


def elbo_objective(model: CvaeModel, x: np.ndarray, y: np.ndarray, noise: np.ndarray, kl_weight: float = 1.0) -> Tuple[ElboTerms, Dict[str, np.ndarray]]:
    """Negative ELBO on a batch with frozen noise, and its parameter gradients.

    loss = mean_b [ 0.5 * ||y_hat - y||^2 + beta * KL(q(z|x,y) || q(z|x)) ]
    """
    x = _check_past(model, x)
    y = np.asarray(y, dtype=np.float64)
    x_flat = flatten_past(x)
    y_flat = flatten_future(x, y)
    batch = x_flat.shape[0]

    tape = ad.Tape()
    mu_p, lv_p = encode_tensor(model.prior, x_flat, tape, "prior", model.latent_dim)
    mu_q, lv_q = encode_tensor(model.posterior, np.concatenate([x_flat, y_flat], axis=-1), tape, "posterior", model.latent_dim)
    z = mu_q + ad.exp(lv_q * 0.5) * noise
    y_hat = decode_tensor(model, x_flat, z, tape, "decoder").reshape(batch, -1)
    err = y_hat - y_flat
    recon = (err * err).sum(axis=-1) * 0.5
    kl = kl_tensor(mu_q, lv_q, mu_p, lv_p)
    loss = (recon + kl * kl_weight).mean()

    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"ELBO loss is not finite: {value}")
    grads = ad.backward(tape, output=loss)
    return ElboTerms(loss=value, kl=float(kl.data.mean()), recon=float(recon.data.mean())), grads


def elbo_loss(model: CvaeModel, x: np.ndarray, y: np.ndarray, noise: np.ndarray, kl_weight: float = 1.0) -> float:
    """Scalar negative ELBO on a batch with frozen noise (tape-free)."""
    x = _check_past(model, x)
    post = encode_posterior(model, x, y)
    prior = encode_prior(model, x)
    y_hat = decode(model, x, reparameterize(post, noise))
    recon = 0.5 * np.sum((y_hat - np.asarray(y)) ** 2, axis=(-2, -1))
    kl = 0.5 * np.sum(
        prior.log_var - post.log_var + (np.exp(post.log_var) + (post.mu - prior.mu) ** 2) / np.exp(prior.log_var) - 1.0,
        axis=-1,
    )
    value = float(np.mean(recon + kl_weight * kl))
    if not math.isfinite(value):
        raise TrainingError(f"ELBO loss is not finite: {value}")
    return value


# ============================================================================
# TRAINING
# ============================================================================

def kl_schedule(step: int, total_steps: int, config: CvaeConfig) -> float:
    warmup = math.ceil(config.kl_warmup_fraction * total_steps)
    if warmup <= 0:
        return config.kl_weight
    return config.kl_weight * min(1.0, (step + 1) / warmup)


def train_cvae(dataset: Dataset, config: CvaeConfig, seed: int) -> Tuple[CvaeModel, pd.DataFrame]:
    """Adam on the negative ELBO; returns the model and a curve (epoch, loss, kl, recon)."""
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    model = init_cvae(config, dataset.x.shape[1], dataset.y.shape[1], scene_rng(seed, "cvae", "init"), dataset.dt)
    params = model.parameters()
    state = ad.OptimState(learning_rate=config.learning_rate)
    n_batches = math.ceil(len(dataset) / config.batch_size)
    total_steps = config.epochs * n_batches
    rows = []
    step = 0
    for epoch in range(config.epochs):
        rng = scene_rng(seed, "cvae", "epoch", epoch)
        sums = np.zeros(3)
        for idx in dataset.batches(config.batch_size, rng):
            noise = rng.standard_normal((len(idx), config.latent_dim))
            beta = kl_schedule(step, total_steps, config)
            try:
                terms, grads = elbo_objective(model, dataset.x[idx], dataset.y[idx], noise, beta)
            except TrainingError as exc:
                raise TrainingError(f"CVAE training diverged at epoch {epoch}: {exc}") from exc
            params, state = ad.adam_step(params, grads, state)
            model = model.with_parameters(params)
            sums += len(idx) * np.array([terms.loss, terms.kl, terms.recon])
            step += 1
        loss, kl, recon = sums / len(dataset)
        if not math.isfinite(loss):
            raise TrainingError(f"CVAE training diverged at epoch {epoch}")
        rows.append({"epoch": epoch, "loss": loss, "kl": kl, "recon": recon})
        if epoch % config.log_interval == 0 or epoch == config.epochs - 1:
            logger.info("cvae epoch %d loss %.4f kl %.4f recon %.4f", epoch, loss, kl, recon)
    return model, pd.DataFrame(rows, columns=["epoch", "loss", "kl", "recon"])


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_cvae(model: CvaeModel, path: Union[str, Path]):
    ad.save_checkpoint({name: getattr(model, name) for name in CvaeModel.NAMES}, path, model.meta())


def load_cvae(path: Union[str, Path], expected_meta: Optional[Mapping] = None) -> CvaeModel:
    mlps, meta = ad.load_checkpoint(path, {"kind": "cvae", **dict(expected_meta or {})})
    return CvaeModel(
        prior=mlps["prior"],
        posterior=mlps["posterior"],
        decoder=mlps["decoder"],
        latent_dim=meta["latent_dim"],
        past_steps=meta["past_steps"],
        future_steps=meta["future_steps"],
        dt=meta["dt"],
    )

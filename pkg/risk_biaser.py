# Risk-biased latent encoder
# Learns q(z | x, sigma, robot) so that the plain mean of the TTC cost under
# the biased forecasts matches the CVaR of the cost under the unbiased ones,
# while staying close (in KL) to the frozen inferred prior. Also hosts the
# diagnostics around that construction: degenerate (single latent point)
# solutions, Jacobian determinants of decoders, latent cost maps and exact
# mixture arithmetic on weighted samples.

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import autodiff_nn as ad
from autodiff_nn import MlpParams
from cvae import (
    LOG_VAR_BOUND,
    CvaeModel,
    DiagonalGaussian,
    decode,
    decode_from_noise,
    decode_tensor,
    encode_prior,
    flatten_past,
    kl_diag_gaussians,
    kl_tensor,
    reparameterize,
)
from didactic_sim import Dataset
from errors import (
    ArchitectureMismatchError,
    DomainError,
    SearchFailureError,
    TrainingError,
    UsageError,
    require,
)
from risk_measures import cvar_mc_rows
from streams import scene_rng
from ttc_cost import TtcParams, batch_trajectory_cost, trajectory_cost_tensor

logger = logging.getLogger(__name__)

ROBOT_FEATURE_SCALE = 0.1
ILL_CONDITIONED = 1e8


# ============================================================================
# DATA MODELS
# ============================================================================

class RobotConditioning(Enum):
    """Which part of the robot trajectory the biased encoder sees."""
    FUTURE = "future"  # full planned future (didactic setting)
    PAST = "past"  # observed past only


@dataclass(frozen=True)
class BiasTrainConfig:
    """Training scheme of the biased encoder.

    The risk constraint is a quadratic penalty. Risk targets use
    ``target_samples_phase1`` unbiased samples for the first
    ``phase_split`` share of epochs, then ``target_samples_phase2``.
    """
    hidden_dim: int = 64
    num_layers: int = 3
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    penalty_weight: float = 50.0
    penalty_warmup_fraction: float = 0.0  # linear ramp of the penalty over this share of epochs
    target_samples_phase1: int = 64
    target_samples_phase2: int = 256
    phase_split: float = 0.5
    inner_samples: int = 16  # reparameterised samples of the biased expectation
    sigma_uniform_prob: float = 0.8
    sigma_grid: Tuple[float, ...] = (0.0, 0.3, 0.5, 0.8, 0.95, 1.0)
    robot_conditioning: RobotConditioning = RobotConditioning.FUTURE
    log_interval: int = 1

    def __post_init__(self):
        for name in ("hidden_dim", "num_layers", "epochs", "batch_size", "target_samples_phase1",
                     "target_samples_phase2", "inner_samples", "log_interval"):
            require(getattr(self, name) >= 1, name, f"must be at least 1, got {getattr(self, name)}")
        require(self.penalty_weight >= 0, "penalty_weight", f"must be non-negative, got {self.penalty_weight}")
        require(self.learning_rate >= 0, "learning_rate", f"must be non-negative, got {self.learning_rate}")
        for name in ("penalty_warmup_fraction", "phase_split", "sigma_uniform_prob"):
            require(0.0 <= getattr(self, name) <= 1.0, name, f"must lie in [0, 1], got {getattr(self, name)}")
        require(len(self.sigma_grid) > 0 or self.sigma_uniform_prob == 1.0, "sigma_grid",
                "must not be empty unless sigma is always uniform")
        require(all(0.0 <= s <= 1.0 for s in self.sigma_grid), "sigma_grid", "entries must lie in [0, 1]")


@dataclass
class BiaserModel:
    """Biased encoder on top of a frozen CVAE.

    The encoder sees (flattened past, sigma, robot features) and outputs a
    residual over the inferred prior: mu_b = mu_prior + d_mu and
    log_var_b = log_var_prior + d_log_var.
    """
    encoder: MlpParams
    cvae: CvaeModel
    conditioning: RobotConditioning = RobotConditioning.FUTURE

    def __post_init__(self):
        expected_in = biaser_input_dim(self.cvae, self.conditioning)
        dims = self.encoder.dims
        if dims[0] != expected_in or dims[-1] != 2 * self.cvae.latent_dim:
            raise UsageError(
                f"biased encoder maps {dims[0]} -> {dims[-1]}, expected {expected_in} -> {2 * self.cvae.latent_dim}"
            )

    def parameters(self) -> Dict[str, np.ndarray]:
        return self.encoder.named_parameters("biaser")

    def with_parameters(self, arrays) -> "BiaserModel":
        return BiaserModel(self.encoder.replaced("biaser", arrays), self.cvae, self.conditioning)


@dataclass
class BiasTerms:
    loss: float
    kl: float
    penalty: float  # mean squared constraint residual (before the weight)


def biaser_input_dim(cvae: CvaeModel, conditioning: RobotConditioning) -> int:
    robot_steps = cvae.future_steps if conditioning is RobotConditioning.FUTURE else cvae.past_steps
    return 2 * cvae.past_steps + 1 + 2 * robot_steps


def init_biaser(cvae: CvaeModel, config: BiasTrainConfig, rng: np.random.Generator) -> BiaserModel:
    """Random hidden layers, zero output layer: training starts from the prior."""
    dims = ad.mlp_dims(biaser_input_dim(cvae, config.robot_conditioning), 2 * cvae.latent_dim,
                       config.hidden_dim, config.num_layers)
    encoder = ad.init_mlp(dims, rng)
    w_out, b_out = encoder.layers[-1]
    encoder.layers[-1] = (np.zeros_like(w_out), np.zeros_like(b_out))
    return BiaserModel(encoder, cvae, config.robot_conditioning)


# ============================================================================
# BIASED ENCODING
# ============================================================================

def robot_future(cvae: CvaeModel, y_robot: np.ndarray) -> np.ndarray:
    return np.asarray(y_robot, dtype=np.float64)[..., cvae.past_steps:, :]


def _check_robot(cvae: CvaeModel, y_robot: np.ndarray) -> np.ndarray:
    y_robot = np.asarray(y_robot, dtype=np.float64)
    expected = cvae.past_steps + cvae.future_steps
    if y_robot.ndim < 2 or y_robot.shape[-2:] != (expected, 2):
        raise UsageError(f"robot trajectory must have shape (..., {expected}, 2), got {y_robot.shape}")
    return y_robot


def biaser_inputs(biaser: BiaserModel, x: np.ndarray, sigma, y_robot: np.ndarray) -> np.ndarray:
    """Encoder input rows: flattened past, sigma, scaled robot positions.

    Robot positions are taken relative to the pedestrian's last observed
    position.
    """
    cvae = biaser.cvae
    x = np.asarray(x, dtype=np.float64)
    y_robot = _check_robot(cvae, y_robot)
    sigma_arr = np.asarray(sigma, dtype=np.float64)
    if np.any(~np.isfinite(sigma_arr)) or np.any(sigma_arr < 0) or np.any(sigma_arr > 1):
        raise DomainError(f"risk level sigma must lie in [0, 1], got {sigma}")
    if biaser.conditioning is RobotConditioning.FUTURE:
        robot = y_robot[..., cvae.past_steps:, :]
    else:
        robot = y_robot[..., :cvae.past_steps, :]
    robot_rel = (robot - x[..., -1:, :]) * ROBOT_FEATURE_SCALE
    x_flat = flatten_past(x)
    lead = x_flat.shape[:-1]
    sigma_col = np.broadcast_to(sigma_arr, lead)[..., None]
    return np.concatenate([x_flat, sigma_col, robot_rel.reshape(robot_rel.shape[:-2] + (-1,))], axis=-1)


def encode_biased(biaser: BiaserModel, x: np.ndarray, sigma, y_robot: np.ndarray) -> DiagonalGaussian:
    """Biased latent Gaussian q(z | x, sigma, robot); sigma in [0, 1]."""
    inputs = biaser_inputs(biaser, x, sigma, y_robot)
    prior = encode_prior(biaser.cvae, x)
    out = ad.mlp_apply(biaser.encoder, inputs)
    lat = biaser.cvae.latent_dim
    return DiagonalGaussian(prior.mu + out[..., :lat], prior.log_var + out[..., lat:])


def biased_forecasts(biaser: BiaserModel, x: np.ndarray, sigma: float, y_robot: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Decode biased samples.

    x (P, 2) with noise (K, L) gives (K, F, 2); x (B, P, 2) with noise
    (B, K, L) gives (B, K, F, 2).
    """
    x = np.asarray(x, dtype=np.float64)
    g = encode_biased(biaser, x, sigma, y_robot)
    if x.ndim == 3:
        g = DiagonalGaussian(g.mu[:, None, :], g.log_var[:, None, :])
        return decode(biaser.cvae, x[:, None], reparameterize(g, noise))
    return decode(biaser.cvae, x, reparameterize(g, noise))


def biased_risk_estimate(biaser: BiaserModel, x: np.ndarray, sigma: float, y_robot: np.ndarray, k: int,
                         rng: np.random.Generator, ttc: TtcParams = TtcParams()) -> float:
    """Mean TTC cost of K biased forecasts."""
    if k < 1:
        raise UsageError(f"number of samples must be at least 1, got {k}")
    noise = rng.standard_normal((k, biaser.cvae.latent_dim))
    forecasts = biased_forecasts(biaser, x, sigma, y_robot, noise)
    costs = batch_trajectory_cost(forecasts, robot_future(biaser.cvae, y_robot), biaser.cvae.dt, ttc)
    return float(costs.mean())


# ============================================================================
# RISK TARGETS
# ============================================================================

def unbiased_costs(cvae: CvaeModel, x: np.ndarray, y_robot: np.ndarray, noise: np.ndarray, ttc: TtcParams = TtcParams()) -> np.ndarray:
    """TTC costs of unbiased forecasts; noise (N, L) -> (N,), (B, N, L) -> (B, N)."""
    y_robot = _check_robot(cvae, y_robot)
    forecasts = decode_from_noise(cvae, x, noise)
    future = robot_future(cvae, y_robot)
    if forecasts.ndim == 4:
        future = future[:, None]
    return batch_trajectory_cost(forecasts, future, cvae.dt, ttc)


def risk_target(cvae: CvaeModel, x: np.ndarray, y_robot: np.ndarray, sigma: float, n: int,
                rng: np.random.Generator, ttc: TtcParams = TtcParams()) -> float:
    """CVaR at sigma of the costs of N unbiased forecasts against the robot future."""
    if n < 1:
        raise UsageError(f"number of samples must be at least 1, got {n}")
    costs = unbiased_costs(cvae, x, y_robot, rng.standard_normal((n, cvae.latent_dim)), ttc)
    return float(cvar_mc_rows(costs[None, :], sigma)[0])


def risk_targets(cvae: CvaeModel, x: np.ndarray, y_robot: np.ndarray, sigma: float, n: int,
                 rng: np.random.Generator, ttc: TtcParams = TtcParams()) -> np.ndarray:
    """Batched ``risk_target`` for x (B, P, 2); one sigma for the batch."""
    noise = rng.standard_normal((x.shape[0], n, cvae.latent_dim))
    return cvar_mc_rows(unbiased_costs(cvae, x, y_robot, noise, ttc), sigma)


# ============================================================================
# BIAS LOSS AND TRAINING
# ============================================================================

def bias_objective(biaser: BiaserModel, x: np.ndarray, y_robot: np.ndarray, sigma: float, targets: np.ndarray,
                   noise: np.ndarray, penalty_weight: float, ttc: TtcParams = TtcParams()) -> Tuple[BiasTerms, Dict[str, np.ndarray]]:
    """Penalised bias loss on a batch with frozen noise (B, M, L) and cached targets (B,).

    loss = mean_b [ KL(q_b || prior) + penalty_weight * (mean_m J(g(z_m, x), robot) - target)^2 ]
    """
    cvae = biaser.cvae
    lat = cvae.latent_dim
    x = np.asarray(x, dtype=np.float64)
    inputs = biaser_inputs(biaser, x, sigma, y_robot)
    prior = encode_prior(cvae, x)

    tape = ad.Tape()
    out = ad.mlp_forward(biaser.encoder, inputs, tape, "biaser")
    mu_b = out[..., :lat] + prior.mu
    lv_b = ad.clip(out[..., lat:] + prior.log_var, -LOG_VAR_BOUND, LOG_VAR_BOUND)
    kl = kl_tensor(mu_b, lv_b, ad.Tensor(prior.mu), ad.Tensor(prior.log_var))

    z = mu_b[:, None, :] + ad.exp(lv_b * 0.5)[:, None, :] * noise
    rel = decode_tensor(cvae, flatten_past(x)[:, None, :], z, tape, None)
    forecasts = rel + x[:, None, -1:, :]
    costs = trajectory_cost_tensor(forecasts, robot_future(cvae, y_robot)[:, None], cvae.dt, ttc)
    residual = costs.mean(axis=-1) - np.asarray(targets, dtype=np.float64)
    squared = residual * residual
    loss = (kl + squared * penalty_weight).mean()

    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"bias loss is not finite: {value}")
    grads = ad.backward(tape, output=loss)
    return BiasTerms(loss=value, kl=float(kl.data.mean()), penalty=float(squared.data.mean())), grads


def bias_loss(biaser: BiaserModel, x: np.ndarray, y_robot: np.ndarray, sigma: float, config: BiasTrainConfig,
              rng: np.random.Generator, n_target: Optional[int] = None, ttc: TtcParams = TtcParams()) -> float:
    """Bias loss with freshly drawn risk targets and inner noise."""
    n = n_target or config.target_samples_phase1
    targets = risk_targets(biaser.cvae, x, y_robot, sigma, n, rng, ttc)
    noise = rng.standard_normal((x.shape[0], config.inner_samples, biaser.cvae.latent_dim))
    terms, _ = bias_objective(biaser, x, y_robot, sigma, targets, noise, config.penalty_weight, ttc)
    return terms.loss


def draw_sigma(rng: np.random.Generator, config: BiasTrainConfig) -> float:
    """Uniform(0, 1) with probability sigma_uniform_prob, else a grid level."""
    pick_uniform = rng.random() < config.sigma_uniform_prob
    uniform = rng.random()
    index = int(rng.integers(0, max(len(config.sigma_grid), 1)))
    if pick_uniform or not config.sigma_grid:
        return float(uniform)
    return float(config.sigma_grid[index])


def target_samples_for_epoch(epoch: int, config: BiasTrainConfig) -> int:
    return config.target_samples_phase1 if epoch < config.phase_split * config.epochs else config.target_samples_phase2


def penalty_for_epoch(epoch: int, config: BiasTrainConfig) -> float:
    warmup = math.ceil(config.penalty_warmup_fraction * config.epochs)
    if warmup <= 0:
        return config.penalty_weight
    return config.penalty_weight * min(1.0, (epoch + 1) / warmup)


def train_biaser(cvae: CvaeModel, dataset: Dataset, config: BiasTrainConfig, seed: int,
                 ttc: TtcParams = TtcParams()) -> Tuple[BiaserModel, pd.DataFrame]:
    """Train the biased encoder against a frozen CVAE.

    Returns the model and a curve (epoch, loss, kl, penalty).
    """
    if len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")
    frozen = cvae.fingerprint()
    biaser = init_biaser(cvae, config, scene_rng(seed, "biaser", "init"))
    params = biaser.parameters()
    state = ad.OptimState(learning_rate=config.learning_rate)
    rows = []
    for epoch in range(config.epochs):
        rng = scene_rng(seed, "biaser", "epoch", epoch)
        n_target = target_samples_for_epoch(epoch, config)
        weight = penalty_for_epoch(epoch, config)
        sums = np.zeros(3)
        for idx in dataset.batches(config.batch_size, rng):
            sigma = draw_sigma(rng, config)
            x, y_robot = dataset.x[idx], dataset.y_robot[idx]
            targets = risk_targets(cvae, x, y_robot, sigma, n_target, rng, ttc)
            noise = rng.standard_normal((len(idx), config.inner_samples, cvae.latent_dim))
            try:
                terms, grads = bias_objective(biaser, x, y_robot, sigma, targets, noise, weight, ttc)
            except TrainingError as exc:
                raise TrainingError(f"biaser training diverged at epoch {epoch}: {exc}") from exc
            params, state = ad.adam_step(params, grads, state)
            biaser = biaser.with_parameters(params)
            sums += len(idx) * np.array([terms.loss, terms.kl, terms.penalty])
        loss, kl, penalty = sums / len(dataset)
        rows.append({"epoch": epoch, "loss": loss, "kl": kl, "penalty": penalty})
        if epoch % config.log_interval == 0 or epoch == config.epochs - 1:
            logger.info("biaser epoch %d loss %.4f kl %.4f penalty %.5f (targets from %d samples)",
                        epoch, loss, kl, penalty, n_target)
    if cvae.fingerprint() != frozen:
        raise TrainingError("CVAE parameters changed during biaser training")
    return biaser, pd.DataFrame(rows, columns=["epoch", "loss", "kl", "penalty"])


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_biaser(biaser: BiaserModel, path: Union[str, Path]):
    meta = {
        "kind": "biaser",
        "conditioning": biaser.conditioning.value,
        "cvae_fingerprint": biaser.cvae.fingerprint(),
        "latent_dim": biaser.cvae.latent_dim,
    }
    ad.save_checkpoint({"biaser": biaser.encoder}, path, meta)


def load_biaser(path: Union[str, Path], cvae: CvaeModel) -> BiaserModel:
    """Load a biased encoder; it must have been trained on top of ``cvae``."""
    mlps, meta = ad.load_checkpoint(path, {"kind": "biaser", "latent_dim": cvae.latent_dim})
    if meta.get("cvae_fingerprint") != cvae.fingerprint():
        raise ArchitectureMismatchError(f"{path}: biased encoder was trained on a different CVAE")
    return BiaserModel(mlps["biaser"], cvae, RobotConditioning(meta["conditioning"]))


# ============================================================================
# DEGENERATE SOLUTIONS - a single latent point meeting the risk target
# ============================================================================

@dataclass
class DegenerateSolution:
    z: np.ndarray
    cost: float
    residual: float
    method: str  # "prior_mean", "descent" or "bisection"


def latent_costs(cvae: CvaeModel, x: np.ndarray, y_robot: np.ndarray, z: np.ndarray, ttc: TtcParams = TtcParams()) -> np.ndarray:
    """Cost J(g(z, x), robot) for latent points z (..., L)."""
    forecasts = decode(cvae, x, z)
    return batch_trajectory_cost(forecasts, robot_future(cvae, y_robot), cvae.dt, ttc)


def degenerate_residual(cvae: CvaeModel, x: np.ndarray, y_robot: np.ndarray, target: float, z: np.ndarray,
                        ttc: TtcParams = TtcParams()) -> Tuple[float, Dict[str, np.ndarray]]:
    """(J(g(z, x)) - target)^2 and its gradient with respect to z."""
    x = np.asarray(x, dtype=np.float64)
    tape = ad.Tape()
    zt = tape.watch("z", np.asarray(z, dtype=np.float64))
    rel = decode_tensor(cvae, flatten_past(x), zt, tape, None)
    cost = trajectory_cost_tensor(rel + x[-1:, :], robot_future(cvae, y_robot), cvae.dt, ttc)
    residual = cost - target
    loss = residual * residual
    return float(loss.data), ad.backward(tape, output=loss)


def _latent_grid(center: np.ndarray, std: np.ndarray, span: float, size: int) -> Tuple[np.ndarray, np.ndarray]:
    axes = [np.linspace(c - span * s, c + span * s, size) for c, s in zip(center, std)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return mesh, np.stack(axes)


def find_degenerate_bias(cvae: CvaeModel, x: np.ndarray, y_robot: np.ndarray, target_risk: float, tol: float = 1e-3,
                         grid_size: int = 64, span: float = 4.0, n_starts: int = 16, max_iter: int = 100,
                         ttc: TtcParams = TtcParams()) -> DegenerateSolution:
    """Latent point z* whose decoded forecast has cost target_risk.

    A Dirac at z* meets the risk constraint. Search: the prior mean, then
    Gauss-Newton descent from the prior mean plus ``n_starts`` probe-grid
    points, then bisection between adjacent probe cells that bracket the
    target.
    """
    x = np.asarray(x, dtype=np.float64)
    prior = encode_prior(cvae, x)

    def cost_at(z):
        return float(latent_costs(cvae, x, y_robot, np.asarray(z)[None], ttc)[0])

    mu_cost = cost_at(prior.mu)
    if abs(mu_cost - target_risk) < tol:
        return DegenerateSolution(z=prior.mu.copy(), cost=mu_cost, residual=abs(mu_cost - target_risk), method="prior_mean")

    grid, _ = _latent_grid(prior.mu, prior.std, span, grid_size)
    grid_costs = latent_costs(cvae, x, y_robot, grid, ttc)
    gap = grid_costs - target_risk
    best = float(np.min(np.abs(gap)))
    if not (grid_costs.min() < target_risk < grid_costs.max()):
        raise SearchFailureError(
            f"target risk {target_risk:.6g} outside probe-grid cost range "
            f"[{grid_costs.min():.6g}, {grid_costs.max():.6g}]",
            min(best, abs(mu_cost - target_risk)),
        )

    flat_z = grid.reshape(-1, cvae.latent_dim)
    flat_gap = np.abs(gap.reshape(-1))
    starts = [prior.mu] + [flat_z[i] for i in np.argsort(flat_gap, kind="stable")[:n_starts]]
    step_cap = span * prior.std
    for start in starts:
        z = np.array(start, dtype=np.float64)
        for _ in range(max_iter):
            loss, grads = degenerate_residual(cvae, x, y_robot, target_risk, z, ttc)
            r = math.sqrt(loss)
            best = min(best, r)
            if r < tol:
                return DegenerateSolution(z=z, cost=cost_at(z), residual=r, method="descent")
            g = grads["z"]
            norm2 = float(g @ g)
            if norm2 < 1e-18:
                break
            # g = 2 r dJ/dz; Gauss-Newton step on J is -r dJ/dz / |dJ/dz|^2
            step = np.clip(-2.0 * loss * g / norm2, -step_cap, step_cap)
            moved = False
            for scale in (1.0, 0.5, 0.25, 0.125):
                candidate = z + scale * step
                if abs(cost_at(candidate) - target_risk) < r:
                    z, moved = candidate, True
                    break
            if not moved:
                break

    solution = _bisect_bracket(cvae, x, y_robot, target_risk, grid, gap, tol, ttc)
    if solution is not None:
        logger.warning("degenerate bias search fell back to bisection (residual %.2e)", solution.residual)
        return solution
    raise SearchFailureError(f"no start reached tolerance {tol} for target {target_risk:.6g}", best)


def _bisect_bracket(cvae, x, y_robot, target, grid, gap, tol, ttc, iterations: int = 60) -> Optional[DegenerateSolution]:
    """Bisection on the segment between the two adjacent probe cells with opposite signs nearest the centre."""
    size = grid.shape[0]
    centre = (size - 1) / 2.0
    pairs = []
    for axis in range(grid.ndim - 1):
        a = [slice(None)] * (grid.ndim - 1)
        b = [slice(None)] * (grid.ndim - 1)
        a[axis], b[axis] = slice(None, -1), slice(1, None)
        signs = np.sign(gap[tuple(a)]) * np.sign(gap[tuple(b)]) < 0
        for index in zip(*np.nonzero(signs)):
            other = list(index)
            other[axis] += 1
            dist = sum((i - centre) ** 2 for i in index)
            pairs.append((dist, tuple(index), tuple(other)))
    pairs.sort(key=lambda item: item[0])
    for _, ia, ib in pairs[:8]:
        za, zb = grid[ia].copy(), grid[ib].copy()
        ga = gap[ia]
        for _ in range(iterations):
            zm = 0.5 * (za + zb)
            cm = float(latent_costs(cvae, x, y_robot, zm[None], ttc)[0])
            gm = cm - target
            if abs(gm) < tol:
                return DegenerateSolution(z=zm, cost=cm, residual=abs(gm), method="bisection")
            if np.sign(gm) == np.sign(ga):
                za, ga = zm, gm
            else:
                zb = zm
    return None


# ============================================================================
# JACOBIAN DIAGNOSTICS
# ============================================================================

@dataclass
class JacobianDet:
    value: float  # |det J|
    condition: float
    warning: Optional[str] = None


def jacobian_det(decoder_fn: Callable[[np.ndarray], np.ndarray], z: np.ndarray, fd_step: float = 1e-5) -> JacobianDet:
    """|det| of the central finite-difference Jacobian of a square map at z."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    n = z.size
    columns = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = fd_step
        up = np.asarray(decoder_fn(z + e), dtype=np.float64).reshape(-1)
        down = np.asarray(decoder_fn(z - e), dtype=np.float64).reshape(-1)
        columns.append((up - down) / (2.0 * fd_step))
    jac = np.stack(columns, axis=1)
    if jac.shape != (n, n):
        raise UsageError(f"Jacobian is {jac.shape[0]} x {jac.shape[1]}; the map must be square")
    if not np.all(np.isfinite(jac)):
        message = "finite-difference Jacobian is not finite"
        logger.warning(message)
        return JacobianDet(value=float("nan"), condition=float("inf"), warning=message)
    condition = float(np.linalg.cond(jac))
    warning = None
    if not math.isfinite(condition) or condition > ILL_CONDITIONED:
        warning = f"Jacobian is singular or ill-conditioned (condition number {condition:.3e})"
        logger.warning(warning)
    return JacobianDet(value=float(abs(np.linalg.det(jac))), condition=condition, warning=warning)


def decoder_block_fn(cvae: CvaeModel, x: np.ndarray, output_indices: Sequence[int]) -> Callable[[np.ndarray], np.ndarray]:
    """Square restriction z -> decode(x, z).flat[output_indices] of the decoder."""
    indices = np.asarray(output_indices, dtype=int)
    if indices.size != cvae.latent_dim:
        raise UsageError(f"need {cvae.latent_dim} output indices for a square block, got {indices.size}")
    if np.any(indices < 0) or np.any(indices >= 2 * cvae.future_steps):
        raise UsageError("output index outside the decoder output")
    return lambda z: decode(cvae, x, z).reshape(-1)[indices]


# ============================================================================
# LATENT COST MAPS
# ============================================================================

@dataclass(frozen=True)
class LatentGrid:
    z1_min: float
    z1_max: float
    z2_min: float
    z2_max: float
    size: int = 64

    @classmethod
    def around(cls, g: DiagonalGaussian, span: float = 3.0, size: int = 64) -> "LatentGrid":
        mu, std = g.mu.reshape(-1), g.std.reshape(-1)
        return cls(mu[0] - span * std[0], mu[0] + span * std[0], mu[1] - span * std[1], mu[1] + span * std[1], size)


@dataclass
class LatentCostMap:
    z1: np.ndarray  # (n,)
    z2: np.ndarray  # (n,)
    costs: np.ndarray  # (n, n), row-major over z2 then z1
    ellipses: List[Dict] = field(default_factory=list)  # ordered by sigma

    def to_frame(self) -> pd.DataFrame:
        g1, g2 = np.meshgrid(self.z1, self.z2)
        return pd.DataFrame({"z1": g1.reshape(-1), "z2": g2.reshape(-1), "cost": self.costs.reshape(-1)})

    def ellipses_json(self) -> str:
        return json.dumps(self.ellipses, indent=2, sort_keys=True)


def latent_cost_map(cvae: CvaeModel, x: np.ndarray, y_robot: np.ndarray, grid: LatentGrid,
                    biaser: Optional[BiaserModel] = None, sigmas: Sequence[float] = (),
                    ttc: TtcParams = TtcParams()) -> LatentCostMap:
    """Cost of the decoded forecast over a 2-D latent grid, plus one-std ellipses of the biased encoder."""
    if cvae.latent_dim != 2:
        raise UsageError(f"latent cost maps need a 2-D latent space, got {cvae.latent_dim}")
    if grid.size < 1:
        raise UsageError("latent grid must have at least one cell per axis")
    z1 = np.linspace(grid.z1_min, grid.z1_max, grid.size)
    z2 = np.linspace(grid.z2_min, grid.z2_max, grid.size)
    g1, g2 = np.meshgrid(z1, z2)
    costs = latent_costs(cvae, x, y_robot, np.stack([g1, g2], axis=-1), ttc)
    ellipses = []
    if biaser is not None:
        for sigma in sorted(sigmas):
            g = encode_biased(biaser, x, sigma, y_robot)
            ellipses.append({"sigma": float(sigma), "mu": g.mu.tolist(), "std": g.std.tolist()})
    return LatentCostMap(z1=z1, z2=z2, costs=costs, ellipses=ellipses)


def biased_kl_from_prior(biaser: BiaserModel, x: np.ndarray, sigma: float, y_robot: np.ndarray):
    return kl_diag_gaussians(encode_biased(biaser, x, sigma, y_robot), encode_prior(biaser.cvae, x))


# ============================================================================
# WEIGHTED SAMPLES - exact arithmetic for mixtures of feasible distributions
# ============================================================================

@dataclass(frozen=True)
class WeightedSample:
    """Finite discrete distribution over costs with non-negative rational weights."""
    costs: Tuple[Fraction, ...]
    weights: Tuple[Fraction, ...]

    def __post_init__(self):
        if len(self.costs) != len(self.weights) or not self.costs:
            raise UsageError("a weighted sample needs matching, non-empty costs and weights")
        if any(w < 0 for w in self.weights) or sum(self.weights) <= 0:
            raise DomainError("weights must be non-negative with positive total mass")


def expected_cost(sample: WeightedSample) -> Fraction:
    total = sum(sample.weights, Fraction(0))
    return sum((w * c for w, c in zip(sample.weights, sample.costs)), Fraction(0)) / total


def mix(a: WeightedSample, b: WeightedSample, alpha: Fraction) -> WeightedSample:
    """alpha * a + (1 - alpha) * b as a single weighted sample."""
    alpha = Fraction(alpha)
    if not (0 <= alpha <= 1):
        raise DomainError(f"mixture weight must lie in [0, 1], got {alpha}")
    total_a, total_b = sum(a.weights, Fraction(0)), sum(b.weights, Fraction(0))
    weights = tuple(alpha * w / total_a for w in a.weights) + tuple((1 - alpha) * w / total_b for w in b.weights)
    return WeightedSample(costs=a.costs + b.costs, weights=weights)

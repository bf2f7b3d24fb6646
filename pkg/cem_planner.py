# Cross-entropy-method planner over robot acceleration sequences
# Candidates are sampled around the current mean plan, scored by a risk term
# on pedestrian forecasts plus a quadratic tracking term, and the mean is
# refit to the elite candidates.

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Protocol, Union

import numpy as np

from cvae import CvaeModel, sample_forecasts
from didactic_sim import rollout_robot_batch
from errors import UsageError, require
from risk_biaser import BiaserModel, biased_forecasts
from risk_measures import cvar_mc, cvar_mc_rows
from trajectory import Trajectory, finite_difference_velocities
from ttc_cost import AgentState, TtcParams, batch_trajectory_cost

logger = logging.getLogger(__name__)


# ============================================================================
# DATA MODELS
# ============================================================================

@dataclass(frozen=True)
class CemConfig:
    """CEM sampling budget and plan constraints."""
    n_robot_samples: int = 100
    n_elites: int = 30
    n_iter: int = 10
    init_std: float = 1.0  # m/s^2
    std_floor: float = 0.05  # m/s^2
    n_pred_samples: int = 16  # K forecasts per episode
    accel_bound: float = 4.0  # m/s^2, plans are clipped to +/- this
    recondition: bool = False  # re-draw forecasts around every new mean plan
    tracking_weight: float = 0.05  # uniform diagonal Q per step
    desired_speed: float = 14.0  # m/s

    def __post_init__(self):
        require(self.n_robot_samples >= 1, "n_robot_samples", f"must be at least 1, got {self.n_robot_samples}")
        require(1 <= self.n_elites <= self.n_robot_samples, "n_elites",
                f"must lie in [1, n_robot_samples={self.n_robot_samples}], got {self.n_elites}")
        require(self.n_iter >= 1, "n_iter", f"must be at least 1, got {self.n_iter}")
        require(self.n_pred_samples >= 1, "n_pred_samples", f"must be at least 1, got {self.n_pred_samples}")
        require(self.init_std >= 0, "init_std", f"must be non-negative, got {self.init_std}")
        require(self.std_floor >= 0, "std_floor", f"must be non-negative, got {self.std_floor}")
        require(self.accel_bound > 0, "accel_bound", f"must be positive, got {self.accel_bound}")
        require(self.tracking_weight >= 0, "tracking_weight", f"must be non-negative, got {self.tracking_weight}")
        require(self.desired_speed >= 0, "desired_speed", f"must be non-negative, got {self.desired_speed}")


class PlanMode(Enum):
    """Risk term of the planning objective.

    - RISK_NEUTRAL_BIASED: mean cost over risk-biased forecasts drawn at sigma
    - RISK_SENSITIVE_UNBIASED: Monte-Carlo CVaR over unbiased forecasts
    - RISK_NEUTRAL_UNBIASED: mean cost over unbiased forecasts
    """
    RISK_NEUTRAL_BIASED = "risk_neutral_biased"
    RISK_SENSITIVE_UNBIASED = "risk_sensitive_unbiased"
    RISK_NEUTRAL_UNBIASED = "risk_neutral_unbiased"


@dataclass
class PlanObjectiveSpec:
    mode: PlanMode
    sigma: float
    q: np.ndarray  # (steps,) non-negative per-step position weights
    y_ref: Trajectory  # reference future (steps points)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        require(np.all(self.q >= 0), "q", "entries must be non-negative")
        require(0.0 <= self.sigma <= 1.0, "sigma", f"must lie in [0, 1], got {self.sigma}")
        if self.q.shape != (len(self.y_ref),):
            raise UsageError(f"Q has {self.q.shape} weights for a {len(self.y_ref)}-step reference")


@dataclass
class PlanScore:
    objective: float
    risk_term: float
    tracking_term: float


@dataclass
class PlanResult:
    trajectory: Trajectory  # executed robot future p[1..steps]
    accels: np.ndarray  # (steps,)
    objective: float
    risk_term: float
    tracking_term: float
    elite_history: List[float] = field(default_factory=list)  # mean elite objective per iteration
    forecasts: Optional[np.ndarray] = None  # (K, steps, 2) forecasts the final plan was scored on


# ============================================================================
# PREDICTORS
# ============================================================================

class Predictor(Protocol):
    def sample(self, x: np.ndarray, y_robot: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
        """K pedestrian forecasts (K, steps, 2) given its past and the robot trajectory."""
        ...


class UnbiasedPredictor:
    """Forecasts from the CVAE's inferred prior (ignores the robot)."""

    def __init__(self, cvae: CvaeModel):
        self.cvae = cvae

    def sample(self, x, y_robot, k, rng):
        return sample_forecasts(self.cvae, x, k, rng)


class BiasedPredictor:
    """Risk-biased forecasts at a fixed sigma, conditioned on the robot trajectory."""

    def __init__(self, biaser: BiaserModel, sigma: float):
        self.biaser = biaser
        self.sigma = sigma

    def sample(self, x, y_robot, k, rng):
        if k < 1:
            raise UsageError(f"number of forecasts must be at least 1, got {k}")
        noise = rng.standard_normal((k, self.biaser.cvae.latent_dim))
        return biased_forecasts(self.biaser, x, self.sigma, y_robot, noise)


def predictor_for(mode: PlanMode, sigma: float, cvae: CvaeModel, biaser: Optional[BiaserModel]) -> Predictor:
    if mode is PlanMode.RISK_NEUTRAL_BIASED:
        if biaser is None:
            raise UsageError("the risk-neutral biased planner needs a trained biased encoder")
        return BiasedPredictor(biaser, sigma)
    return UnbiasedPredictor(cvae)


# ============================================================================
# OBJECTIVE
# ============================================================================

def make_reference(init_state: AgentState, desired_speed: float, steps: int, dt: float) -> Trajectory:
    """Constant-speed reference p[k] = p0 + (v * k * dt, 0) for k = 1..steps."""
    if steps < 1:
        raise UsageError(f"reference needs at least one step, got {steps}")
    k = np.arange(1, steps + 1, dtype=np.float64)
    x0, y0 = init_state.position
    return Trajectory(np.stack([x0 + desired_speed * k * dt, np.full_like(k, y0)], axis=-1), dt)


def uniform_q(steps: int, weight: float) -> np.ndarray:
    return np.full(steps, float(weight))


def tracking_cost(y_robot: Union[Trajectory, np.ndarray], y_ref: Union[Trajectory, np.ndarray], q: np.ndarray) -> Union[float, np.ndarray]:
    """sum_t q_t * |p_t - ref_t|^2; batched over leading dims of y_robot."""
    robot = y_robot.positions if isinstance(y_robot, Trajectory) else np.asarray(y_robot, dtype=np.float64)
    ref = y_ref.positions if isinstance(y_ref, Trajectory) else np.asarray(y_ref, dtype=np.float64)
    if robot.shape[-2] != ref.shape[-2]:
        raise UsageError(f"trajectory lengths differ: {robot.shape[-2]} vs {ref.shape[-2]}")
    cost = np.sum(np.asarray(q) * np.sum((robot - ref) ** 2, axis=-1), axis=-1)
    return float(cost) if np.ndim(cost) == 0 else cost


def risk_terms(futures: np.ndarray, forecasts: np.ndarray, spec: PlanObjectiveSpec, ttc: TtcParams) -> np.ndarray:
    """Risk term of every candidate future (N, steps, 2) against shared forecasts (K, steps, 2)."""
    costs = batch_trajectory_cost(forecasts[None], futures[:, None], spec.y_ref.dt, ttc)
    if spec.mode is PlanMode.RISK_SENSITIVE_UNBIASED:
        return cvar_mc_rows(costs, spec.sigma)
    return costs.mean(axis=1)


def evaluate_plan(future: np.ndarray, forecasts: np.ndarray, spec: PlanObjectiveSpec, ttc: TtcParams = TtcParams()) -> PlanScore:
    """Objective of one robot future (steps, 2) on already drawn forecasts."""
    future = np.asarray(future, dtype=np.float64)
    costs = batch_trajectory_cost(forecasts, future, spec.y_ref.dt, ttc)
    if spec.mode is PlanMode.RISK_SENSITIVE_UNBIASED:
        risk_term = cvar_mc(costs, spec.sigma)
    else:
        risk_term = float(costs.mean())
    track = tracking_cost(future, spec.y_ref, spec.q)
    return PlanScore(objective=risk_term + track, risk_term=risk_term, tracking_term=track)


def plan_objective(y_robot: np.ndarray, spec: PlanObjectiveSpec, predictor: Predictor, x: np.ndarray, k: int,
                   rng: np.random.Generator, ttc: TtcParams = TtcParams()) -> float:
    """Risk term plus tracking term for a full robot trajectory (past + future)."""
    if k < 1:
        raise UsageError(f"number of forecasts must be at least 1, got {k}")
    y_robot = np.asarray(y_robot, dtype=np.float64)
    steps = len(spec.y_ref)
    forecasts = predictor.sample(x, y_robot, k, rng)
    return evaluate_plan(y_robot[-steps:], forecasts, spec, ttc).objective


# ============================================================================
# CEM
# ============================================================================

def robot_state_from_past(robot_past: np.ndarray, dt: float) -> AgentState:
    """Present position and finite-difference velocity at the end of the past."""
    robot_past = np.asarray(robot_past, dtype=np.float64)
    velocity = finite_difference_velocities(robot_past, dt)[-1]
    return AgentState(position=tuple(robot_past[-1]), velocity=tuple(velocity))


def cem_optimize(init_plan: np.ndarray, spec: PlanObjectiveSpec, config: CemConfig, predictor: Predictor,
                 x: np.ndarray, robot_past: np.ndarray, rng: np.random.Generator,
                 ttc: TtcParams = TtcParams()) -> PlanResult:
    """Optimise an acceleration plan; forecasts are drawn once around the initial plan.

    With ``config.recondition`` the forecasts are re-drawn around the mean
    plan at the start of every iteration.
    """
    init_plan = np.clip(np.asarray(init_plan, dtype=np.float64), -config.accel_bound, config.accel_bound)
    steps = len(spec.y_ref)
    if init_plan.shape != (steps,):
        raise UsageError(f"initial plan has {init_plan.shape} accelerations for a {steps}-step horizon")
    dt = spec.y_ref.dt
    robot_past = np.asarray(robot_past, dtype=np.float64)
    state = robot_state_from_past(robot_past, dt)
    start, speed = np.asarray(state.position), float(state.velocity[0])

    def rollout(plans: np.ndarray) -> np.ndarray:
        return rollout_robot_batch(start, speed, plans, dt)

    def draw_forecasts(plan: np.ndarray) -> np.ndarray:
        y_robot = np.concatenate([robot_past, rollout(plan[None])[0]])
        return predictor.sample(x, y_robot, config.n_pred_samples, rng)

    forecasts = draw_forecasts(init_plan)
    mean = init_plan.copy()
    std = np.full(steps, config.init_std)
    history: List[float] = []
    for iteration in range(config.n_iter):
        if config.recondition and iteration > 0:
            forecasts = draw_forecasts(mean)
        candidates = np.clip(mean + std * rng.standard_normal((config.n_robot_samples, steps)),
                             -config.accel_bound, config.accel_bound)
        futures = rollout(candidates)
        scores = risk_terms(futures, forecasts, spec, ttc) + tracking_cost(futures, spec.y_ref, spec.q)
        elite_idx = np.argsort(scores, kind="stable")[: config.n_elites]
        elites = candidates[elite_idx]
        history.append(float(scores[elite_idx].mean()))
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), config.std_floor)
        logger.debug("cem iteration %d: elite objective %.5f", iteration, history[-1])

    future = rollout(mean[None])[0]
    score = evaluate_plan(future, forecasts, spec, ttc)
    return PlanResult(
        trajectory=Trajectory(future, dt),
        accels=mean,
        objective=score.objective,
        risk_term=score.risk_term,
        tracking_term=score.tracking_term,
        elite_history=history,
        forecasts=forecasts,
    )


def plan_spec_for(mode: PlanMode, sigma: float, robot_past: np.ndarray, steps: int, dt: float, config: CemConfig) -> PlanObjectiveSpec:
    """Objective with the desired-speed reference from the robot's present position."""
    state = robot_state_from_past(robot_past, dt)
    reference = make_reference(state, config.desired_speed, steps, dt)
    return PlanObjectiveSpec(mode=mode, sigma=sigma, q=uniform_q(steps, config.tracking_weight), y_ref=reference)


def plan_trajectory_rows(result: PlanResult, robot_speed: float) -> List[dict]:
    """Rows t,x,y,vx,vy,ax of an executed plan (t in seconds after the present)."""
    dt = result.trajectory.dt
    speeds = robot_speed + np.concatenate([[0.0], np.cumsum(result.accels[:-1] * dt)])
    rows = []
    for k, (pos, v, a) in enumerate(zip(result.trajectory.positions, speeds + result.accels * dt, result.accels)):
        rows.append({"t": (k + 1) * dt, "x": pos[0], "y": pos[1], "vx": v, "vy": 0.0, "ax": a})
    return rows

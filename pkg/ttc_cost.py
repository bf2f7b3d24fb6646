# Time-to-collision (TTC) cost
# Closed-form closest-approach cost between two constant-velocity agents,
# its trajectory average, a differentiable tape version used in training,
# and grid cost maps for figures.

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import pandas as pd

import autodiff_nn as ad
from errors import DomainError, UsageError, require
from trajectory import Trajectory, finite_difference_velocities

logger = logging.getLogger(__name__)


# ============================================================================
# DATA MODELS
# ============================================================================

@dataclass(frozen=True)
class TtcParams:
    """Bandwidths of the TTC cost."""
    lambda_t: float = 0.2  # s^2, time bandwidth
    lambda_d: float = 2.0  # m^2, distance bandwidth
    epsilon: float = 0.01  # m/s, floor of the relative speed

    def __post_init__(self):
        for name in ("lambda_t", "lambda_d", "epsilon"):
            value = getattr(self, name)
            require(math.isfinite(value) and value > 0, name, f"must be strictly positive, got {value}")


@dataclass(frozen=True)
class RelativeState:
    """State of agent i relative to agent j (i minus j)."""
    dx: float  # m
    dy: float  # m
    dvx: float  # m/s
    dvy: float  # m/s


@dataclass(frozen=True)
class AgentState:
    position: Tuple[float, float]  # m
    velocity: Tuple[float, float]  # m/s


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned grid of cell centres, inclusive bounds."""
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    resolution: float

    def axes(self) -> Tuple[np.ndarray, np.ndarray]:
        if not self.resolution > 0:
            raise UsageError(f"grid resolution must be positive, got {self.resolution}")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise UsageError("grid is empty: max bound below min bound")
        nx = int(math.floor((self.x_max - self.x_min) / self.resolution + 1e-9)) + 1
        ny = int(math.floor((self.y_max - self.y_min) / self.resolution + 1e-9)) + 1
        return self.x_min + self.resolution * np.arange(nx), self.y_min + self.resolution * np.arange(ny)


@dataclass
class CostMap:
    xs: np.ndarray  # (nx,)
    ys: np.ndarray  # (ny,)
    costs: np.ndarray  # (ny, nx), row-major over y then x

    def to_frame(self) -> pd.DataFrame:
        gx, gy = np.meshgrid(self.xs, self.ys)
        return pd.DataFrame({"x": gx.reshape(-1), "y": gy.reshape(-1), "cost": self.costs.reshape(-1)})

    def write_csv(self, path: Union[str, Path]):
        self.to_frame().to_csv(path, index=False, float_format="%.10g")


# ============================================================================
# INSTANTANEOUS COST
# ============================================================================

def closest_approach(dx, dy, dvx, dvy, params: TtcParams):
    """Clamped closest-approach time and squared distance (numpy, broadcasting).

    Approaching states (dot < 0) use t = -dot/dv^2 and d^2 = cross^2/dv^2 with
    dv clamped below by epsilon; otherwise t = 0 and d^2 is the current
    squared distance.
    """
    dot = dvx * dx + dvy * dy
    cross = dvx * dy - dvy * dx
    dv2 = np.maximum(dvx * dvx + dvy * dvy, params.epsilon ** 2)
    approaching = dot < 0
    t = np.where(approaching, -dot / dv2, 0.0)
    d2 = np.where(approaching, cross * cross / dv2, dx * dx + dy * dy)
    return t, d2


def ttc_cost_array(dx, dy, dvx, dvy, params: TtcParams) -> np.ndarray:
    t, d2 = closest_approach(dx, dy, dvx, dvy, params)
    return np.exp(-t * t / (2.0 * params.lambda_t) - d2 / (2.0 * params.lambda_d))


def instantaneous_ttc_cost(rel: RelativeState, params: TtcParams = TtcParams()) -> float:
    """Cost in (0, 1] of one relative state."""
    values = (rel.dx, rel.dy, rel.dvx, rel.dvy)
    if not all(math.isfinite(v) for v in values):
        raise DomainError(f"relative state must be finite, got {rel}")
    return float(ttc_cost_array(*(np.float64(v) for v in values), params))


# ============================================================================
# TRAJECTORY COSTS
# ============================================================================

def trajectory_ttc_cost(agent: Trajectory, robot: Trajectory, params: TtcParams = TtcParams()) -> float:
    """Mean instantaneous cost over the aligned steps of two trajectories."""
    if len(agent) != len(robot):
        raise UsageError(f"trajectory lengths differ: {len(agent)} vs {len(robot)}")
    if agent.dt != robot.dt:
        raise UsageError(f"trajectory time steps differ: {agent.dt} vs {robot.dt}")
    return float(batch_trajectory_cost(agent.positions, robot.positions, agent.dt, params))


def batch_trajectory_cost(agent_positions: np.ndarray, robot_positions: np.ndarray, dt: float, params: TtcParams = TtcParams()) -> np.ndarray:
    """Trajectory-averaged cost for broadcastable (..., T, 2) position arrays."""
    agent_positions = np.asarray(agent_positions, dtype=np.float64)
    robot_positions = np.asarray(robot_positions, dtype=np.float64)
    if agent_positions.shape[-2] != robot_positions.shape[-2]:
        raise UsageError(
            f"trajectory lengths differ: {agent_positions.shape[-2]} vs {robot_positions.shape[-2]}"
        )
    rel = agent_positions - robot_positions
    rel_v = finite_difference_velocities(agent_positions, dt) - finite_difference_velocities(robot_positions, dt)
    costs = ttc_cost_array(rel[..., 0], rel[..., 1], rel_v[..., 0], rel_v[..., 1], params)
    return costs.mean(axis=-1)


def _tensor_velocities(positions: ad.Tensor, dt: float) -> ad.Tensor:
    diffs = (positions[..., 1:, :] - positions[..., :-1, :]) * (1.0 / dt)
    return ad.concat([diffs, diffs[..., -1:, :]], axis=-2)


def trajectory_cost_tensor(agent_positions: ad.Tensor, robot_positions: Union[ad.Tensor, np.ndarray], dt: float, params: TtcParams = TtcParams()) -> ad.Tensor:
    """Differentiable twin of ``batch_trajectory_cost``; returns shape (...)."""
    agent = ad.as_tensor(agent_positions)
    robot = ad.as_tensor(robot_positions)
    if agent.data.shape[-2] != robot.data.shape[-2]:
        raise UsageError(f"trajectory lengths differ: {agent.data.shape[-2]} vs {robot.data.shape[-2]}")
    rel = agent - robot
    rel_v = _tensor_velocities(agent, dt) - _tensor_velocities(robot, dt)
    dx, dy = rel[..., 0], rel[..., 1]
    dvx, dvy = rel_v[..., 0], rel_v[..., 1]

    dot = dvx * dx + dvy * dy
    cross = dvx * dy - dvy * dx
    dv2 = ad.maximum(dvx * dvx + dvy * dvy, params.epsilon ** 2)
    approaching = dot.data < 0
    t = ad.where(approaching, -dot / dv2, 0.0)
    d2 = ad.where(approaching, cross * cross / dv2, dx * dx + dy * dy)
    cost = ad.exp(-(t * t) * (1.0 / (2.0 * params.lambda_t)) - d2 * (1.0 / (2.0 * params.lambda_d)))
    return cost.mean(axis=-1)


# ============================================================================
# COST MAPS
# ============================================================================

def cost_map(robot_state: AgentState, probe_speed: float, probe_heading: float, grid: GridSpec, params: TtcParams = TtcParams()) -> CostMap:
    """Instantaneous cost of a probe agent placed at every grid cell."""
    xs, ys = grid.axes()
    gx, gy = np.meshgrid(xs, ys)
    rx, ry = robot_state.position
    rvx, rvy = robot_state.velocity
    pvx, pvy = probe_speed * math.cos(probe_heading), probe_speed * math.sin(probe_heading)
    costs = ttc_cost_array(gx - rx, gy - ry, np.full_like(gx, pvx - rvx), np.full_like(gx, pvy - rvy), params)
    logger.debug("cost map over %d x %d cells", len(ys), len(xs))
    return CostMap(xs=xs, ys=ys, costs=costs)

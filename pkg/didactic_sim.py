# Didactic road-crossing simulator
# A robot drives along +x on a straight road while one pedestrian crosses in
# front of it, walking at one of two speeds (slow or fast mode). Provides
# scene sampling, robot dynamics, dataset generation and dataset files,
# and the test-time speed shift.

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from errors import DomainError, FormatError, UsageError, require
from streams import parallel_map, scene_rng
from trajectory import Trajectory

logger = logging.getLogger(__name__)


# ============================================================================
# DATA MODELS - Simulator configuration and episode records
# ============================================================================

class PedestrianMode(Enum):
    """Walking mode of the pedestrian; the slow mode is the costly one."""
    SLOW = "slow"
    FAST = "fast"


class RobotKind(Enum):
    """Robot motion model used when generating scenes.

    - CONSTANT_VELOCITY: robot keeps the configured speed
    - DOUBLE_INTEGRATOR: random initial speed and per-step accelerations
    """
    CONSTANT_VELOCITY = "constant_velocity"
    DOUBLE_INTEGRATOR = "double_integrator"


@dataclass(frozen=True)
class SimConfig:
    """Road-crossing environment parameters.

    The robot's present position is the origin. The spawn region is the
    pedestrian's present (last observed) position.
    """
    dt: float = 0.1  # s per step
    past_steps: int = 10
    future_steps: int = 50
    robot_speed: float = 14.0  # m/s, desired and mean initial speed
    slow_speed: float = 1.0  # m/s
    fast_speed: float = 2.0  # m/s
    mode_prob_fast: float = 0.5
    speed_noise_std: float = 0.1  # m/s
    heading_mean: float = math.pi / 2  # rad, straight across the road
    heading_spread: float = 0.25  # rad, uniform half-width around the mean
    spawn_x_min: float = 25.0  # m
    spawn_x_max: float = 45.0
    spawn_y_min: float = -4.0
    spawn_y_max: float = -1.5
    speed_scale: float = 1.0  # test-time distribution shift multiplier
    robot_kind: RobotKind = RobotKind.CONSTANT_VELOCITY
    robot_speed_std: float = 2.0  # m/s, double-integrator initial speed spread
    accel_std: float = 1.0  # m/s^2, double-integrator per-step accelerations

    def __post_init__(self):
        require(self.dt > 0, "dt", f"must be positive, got {self.dt}")
        require(self.past_steps >= 2, "past_steps", f"must be at least 2, got {self.past_steps}")
        require(self.future_steps >= 1, "future_steps", f"must be at least 1, got {self.future_steps}")
        require(0.0 <= self.mode_prob_fast <= 1.0, "mode_prob_fast", f"must lie in [0, 1], got {self.mode_prob_fast}")
        require(self.speed_scale > 0, "speed_scale", f"must be positive, got {self.speed_scale}")
        for name in ("robot_speed", "slow_speed", "fast_speed", "speed_noise_std", "heading_spread",
                     "robot_speed_std", "accel_std"):
            require(getattr(self, name) >= 0, name, f"must be non-negative, got {getattr(self, name)}")
        require(self.spawn_x_min <= self.spawn_x_max, "spawn_x_max", "must not be below spawn_x_min")
        require(self.spawn_y_min <= self.spawn_y_max, "spawn_y_max", "must not be below spawn_y_min")

    @property
    def horizon(self) -> float:
        return self.future_steps * self.dt

    @property
    def total_steps(self) -> int:
        return self.past_steps + self.future_steps

    def to_dict(self) -> Dict:
        return {f.name: getattr(self, f.name).value if isinstance(getattr(self, f.name), Enum) else getattr(self, f.name)
                for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data: Dict) -> "SimConfig":
        values = dict(data)
        if "robot_kind" in values:
            values["robot_kind"] = RobotKind(values["robot_kind"])
        return cls(**values)


@dataclass
class RobotDynamics:
    """Planar robot moving along the road axis.

    The double integrator follows p[t+1] = p[t] + v[t]*dt, v[t+1] = v[t] + a[t]*dt.
    """
    kind: RobotKind
    position: np.ndarray = field(default_factory=lambda: np.zeros(2))  # m
    speed: float = 14.0  # m/s along +x
    accels: np.ndarray = field(default_factory=lambda: np.zeros(0))  # m/s^2 per step


@dataclass(eq=False)
class Scene:
    """One episode."""
    x: Trajectory  # pedestrian past, ends at the present
    y: Trajectory  # pedestrian future (ground truth)
    y_robot: Trajectory  # robot over past + future
    mode: PedestrianMode
    speed: float = 0.0  # pedestrian future speed, m/s
    heading: float = 0.0  # rad

    @property
    def robot_past(self) -> np.ndarray:
        return self.y_robot.positions[: len(self.x)]

    @property
    def robot_future(self) -> np.ndarray:
        return self.y_robot.positions[len(self.x):]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Scene)
            and self.x == other.x
            and self.y == other.y
            and self.y_robot == other.y_robot
            and self.mode is other.mode
        )


# ============================================================================
# ROBOT DYNAMICS
# ============================================================================

def rollout_robot(dyn: RobotDynamics, steps: int, dt: float) -> Trajectory:
    """Positions p[1..steps] of the robot (the initial position is excluded)."""
    if steps < 1:
        raise UsageError(f"rollout needs at least one step, got {steps}")
    position = np.asarray(dyn.position, dtype=np.float64).copy()
    if dyn.kind is RobotKind.CONSTANT_VELOCITY:
        accels = np.zeros(steps)
    else:
        accels = np.asarray(dyn.accels, dtype=np.float64)
        if accels.shape[0] < steps:
            raise UsageError(f"acceleration sequence has {accels.shape[0]} entries, rollout needs {steps}")
    speed = float(dyn.speed)
    out = np.empty((steps, 2))
    for t in range(steps):
        position[0] += speed * dt
        speed += accels[t] * dt
        out[t] = position
    return Trajectory(out, dt)


def rollout_robot_batch(start: np.ndarray, speed: float, accels: np.ndarray, dt: float) -> np.ndarray:
    """Vectorised double-integrator rollout of (N, steps) acceleration plans.

    Returns (N, steps, 2) positions p[1..steps]; same recursion as
    ``rollout_robot``.
    """
    accels = np.asarray(accels, dtype=np.float64)
    n, steps = accels.shape
    speeds = np.concatenate([np.full((n, 1), float(speed)), float(speed) + np.cumsum(accels[:, :-1] * dt, axis=1)], axis=1)
    xs = start[0] + np.cumsum(speeds * dt, axis=1)
    return np.stack([xs, np.full_like(xs, start[1])], axis=-1)


# ============================================================================
# SCENE SAMPLING
# ============================================================================

def sample_scene(config: SimConfig, rng: np.random.Generator) -> Scene:
    """Draw one road-crossing episode.

    Draw order is fixed whatever the robot kind: mode, speed noise, heading,
    spawn x, spawn y, robot initial speed, robot accelerations.
    """
    fast = rng.random() < config.mode_prob_fast
    noise = rng.standard_normal()
    heading = rng.uniform(config.heading_mean - config.heading_spread, config.heading_mean + config.heading_spread)
    spawn = np.array([
        rng.uniform(config.spawn_x_min, config.spawn_x_max),
        rng.uniform(config.spawn_y_min, config.spawn_y_max),
    ])
    robot_speed_draw = rng.standard_normal()
    accel_draws = rng.standard_normal(config.future_steps)

    mode = PedestrianMode.FAST if fast else PedestrianMode.SLOW
    mode_speed = config.fast_speed if fast else config.slow_speed
    speed = max(0.0, mode_speed * config.speed_scale + config.speed_noise_std * noise)
    past_speed = 0.5 * (config.slow_speed + config.fast_speed) * config.speed_scale
    direction = np.array([math.cos(heading), math.sin(heading)])

    past_k = np.arange(-(config.past_steps - 1), 1, dtype=np.float64)
    future_k = np.arange(1, config.future_steps + 1, dtype=np.float64)
    x = spawn + past_speed * config.dt * past_k[:, None] * direction
    y = spawn + speed * config.dt * future_k[:, None] * direction

    if config.robot_kind is RobotKind.CONSTANT_VELOCITY:
        v0 = config.robot_speed
        accels = np.zeros(config.future_steps)
    else:
        v0 = max(0.0, config.robot_speed + config.robot_speed_std * robot_speed_draw)
        accels = config.accel_std * accel_draws
    robot_past = np.stack([v0 * config.dt * past_k, np.zeros_like(past_k)], axis=-1)
    dyn = RobotDynamics(kind=config.robot_kind, position=np.zeros(2), speed=v0, accels=accels)
    robot_future = rollout_robot(dyn, config.future_steps, config.dt).positions

    return Scene(
        x=Trajectory(x, config.dt),
        y=Trajectory(y, config.dt),
        y_robot=Trajectory(np.concatenate([robot_past, robot_future]), config.dt),
        mode=mode,
        speed=speed,
        heading=heading,
    )


def shift_distribution(config: SimConfig, scale: float) -> SimConfig:
    """Multiply the pedestrian speed scale; everything else (bimodality included) stays."""
    if not (math.isfinite(scale) and scale > 0):
        raise DomainError(f"shift scale must be positive, got {scale}")
    return dataclasses.replace(config, speed_scale=config.speed_scale * scale)


def travel_distance(scene: Scene) -> float:
    """Distance walked by the pedestrian over the future horizon."""
    return float(np.linalg.norm(scene.y.final_position - scene.x.final_position))


# ============================================================================
# DATASET
# ============================================================================

@dataclass(eq=False)
class Dataset:
    """Stacked scenes: x (N, P, 2), y (N, F, 2), y_robot (N, P+F, 2)."""
    x: np.ndarray
    y: np.ndarray
    y_robot: np.ndarray
    modes: np.ndarray  # (N,) 1 for fast, 0 for slow
    config: SimConfig

    def __post_init__(self):
        n = self.x.shape[0]
        if not (self.y.shape[0] == self.y_robot.shape[0] == self.modes.shape[0] == n):
            raise UsageError("dataset arrays disagree on the number of scenes")
        if self.y_robot.shape[1] != self.x.shape[1] + self.y.shape[1]:
            raise UsageError("robot trajectory must cover past plus future")

    @classmethod
    def from_scenes(cls, scenes: Sequence[Scene], config: SimConfig) -> "Dataset":
        if not scenes:
            raise UsageError("a dataset needs at least one scene")
        return cls(
            x=np.stack([s.x.positions for s in scenes]),
            y=np.stack([s.y.positions for s in scenes]),
            y_robot=np.stack([s.y_robot.positions for s in scenes]),
            modes=np.array([1 if s.mode is PedestrianMode.FAST else 0 for s in scenes], dtype=np.int8),
            config=config,
        )

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dt(self) -> float:
        return self.config.dt

    @property
    def robot_future(self) -> np.ndarray:
        return self.y_robot[:, self.x.shape[1]:]

    def scene(self, index: int) -> Scene:
        mode = PedestrianMode.FAST if self.modes[index] else PedestrianMode.SLOW
        return Scene(
            x=Trajectory(self.x[index], self.dt),
            y=Trajectory(self.y[index], self.dt),
            y_robot=Trajectory(self.y_robot[index], self.dt),
            mode=mode,
        )

    def subset(self, indices: Union[Sequence[int], np.ndarray, slice]) -> "Dataset":
        return Dataset(self.x[indices], self.y[indices], self.y_robot[indices], self.modes[indices], self.config)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
        """Index batches; shuffled when an rng is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield order[start:start + batch_size]

    def travel_distances(self) -> np.ndarray:
        return np.linalg.norm(self.y[:, -1] - self.x[:, -1], axis=-1)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.config == other.config
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.y_robot, other.y_robot)
            and np.array_equal(self.modes, other.modes)
        )


def generate_dataset(n: int, config: SimConfig, seed: int, threads: Optional[int] = None) -> Dataset:
    """n i.i.d. scenes, scene i drawn from the stream (seed, "scene", i)."""
    if n < 1:
        raise UsageError(f"dataset size must be at least 1, got {n}")
    scenes = parallel_map(lambda i: sample_scene(config, scene_rng(seed, "scene", i)), range(n), threads)
    logger.info("generated %d scenes (robot %s, speed scale %.3g)", n, config.robot_kind.value, config.speed_scale)
    return Dataset.from_scenes(scenes, config)


def travel_distance_histogram(distances: np.ndarray, bins: int = 40, value_range: Optional[tuple] = None) -> pd.DataFrame:
    counts, edges = np.histogram(np.asarray(distances, dtype=np.float64), bins=bins, range=value_range)
    return pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts})


# ============================================================================
# DATASET FILES - magic, version, JSON header, length-prefixed records
# ============================================================================

DATASET_MAGIC = b"RBDATA\x00\x01"
DATASET_VERSION = 1


def save_dataset(dataset: Dataset, path: Union[str, Path]):
    header = json.dumps({
        "config": dataset.config.to_dict(),
        "n_scenes": len(dataset),
        "past_steps": int(dataset.x.shape[1]),
        "future_steps": int(dataset.y.shape[1]),
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(header)))
        fh.write(header)
        for i in range(len(dataset)):
            record = (
                struct.pack("<B", int(dataset.modes[i]))
                + np.ascontiguousarray(dataset.x[i], dtype="<f8").tobytes()
                + np.ascontiguousarray(dataset.y[i], dtype="<f8").tobytes()
                + np.ascontiguousarray(dataset.y_robot[i], dtype="<f8").tobytes()
            )
            fh.write(struct.pack("<I", len(record)))
            fh.write(record)
    logger.debug("wrote %d scenes to %s", len(dataset), path)


def load_dataset(path: Union[str, Path]) -> Dataset:
    blob = Path(path).read_bytes()
    prefix = len(DATASET_MAGIC)
    if blob[:prefix] != DATASET_MAGIC or len(blob) < prefix + 8:
        raise FormatError(f"{path}: not a dataset file")
    version, header_len = struct.unpack("<II", blob[prefix:prefix + 8])
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: dataset version {version}, expected {DATASET_VERSION}")
    offset = prefix + 8
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable dataset header ({exc})") from exc
    offset += header_len

    try:
        config = SimConfig.from_dict(header["config"])
        n, p, f = (int(header[key]) for key in ("n_scenes", "past_steps", "future_steps"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete dataset header ({type(exc).__name__}: {exc})") from exc
    if n < 1 or p < 1 or f < 1:
        raise FormatError(f"{path}: dataset header declares {n} scenes of {p}+{f} steps")
    expected = 1 + 8 * 2 * (p + f + p + f)
    modes: List[int] = []
    xs, ys, robots = [], [], []
    for i in range(n):
        if len(blob) < offset + 4:
            raise FormatError(f"{path}: truncated at record {i}")
        (length,) = struct.unpack("<I", blob[offset:offset + 4])
        offset += 4
        if length != expected or len(blob) < offset + length:
            raise FormatError(f"{path}: record {i} is truncated or has the wrong size")
        record = blob[offset:offset + length]
        offset += length
        modes.append(record[0])
        values = np.frombuffer(record, dtype="<f8", offset=1).astype(np.float64)
        xs.append(values[: 2 * p].reshape(p, 2))
        ys.append(values[2 * p: 2 * (p + f)].reshape(f, 2))
        robots.append(values[2 * (p + f):].reshape(p + f, 2))
    if offset != len(blob):
        raise FormatError(f"{path}: trailing bytes after {n} records")
    return Dataset(np.stack(xs), np.stack(ys), np.stack(robots), np.array(modes, dtype=np.int8), config)

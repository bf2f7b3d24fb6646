"""
Unit tests for the road-crossing simulator.

Tests scene sampling, robot dynamics, dataset generation and files, and the
test-time distribution shift.
"""

import dataclasses
import json
import math
import struct

import numpy as np
import pytest

from didactic_sim import (
    DATASET_MAGIC,
    DATASET_VERSION,
    Dataset,
    PedestrianMode,
    RobotDynamics,
    RobotKind,
    SimConfig,
    generate_dataset,
    load_dataset,
    rollout_robot,
    rollout_robot_batch,
    sample_scene,
    save_dataset,
    shift_distribution,
    travel_distance,
    travel_distance_histogram,
)
from errors import DomainError, FormatError, InvalidParameterError, UsageError
from streams import scene_rng
from trajectory import finite_difference_velocities

NOISELESS = SimConfig(speed_noise_std=0.0)


class TestSimConfig:
    """Test suite for simulator configuration."""

    def test_defaults(self):
        """Test the default horizon is five seconds after one second of past."""
        config = SimConfig()
        assert config.horizon == pytest.approx(5.0)
        assert config.total_steps == 60

    @pytest.mark.parametrize("field,value", [("dt", -1.0), ("past_steps", 1), ("mode_prob_fast", 1.5), ("speed_scale", 0.0)])
    def test_invalid(self, field, value):
        """Test invalid values raise InvalidParameterError naming the field."""
        with pytest.raises(InvalidParameterError, match=field):
            SimConfig(**{field: value})

    def test_dict_round_trip(self):
        """Test to_dict/from_dict preserve the configuration."""
        config = SimConfig(robot_kind=RobotKind.DOUBLE_INTEGRATOR, speed_scale=0.75)
        assert SimConfig.from_dict(config.to_dict()) == config


class TestSampleScene:
    """Test suite for scene sampling."""

    def test_shapes(self, tiny_sim):
        """Test trajectory lengths follow the configuration."""
        scene = sample_scene(tiny_sim, scene_rng(0, "scene", 0))
        assert len(scene.x) == 3
        assert len(scene.y) == 4
        assert len(scene.y_robot) == 7
        np.testing.assert_array_equal(scene.robot_past[-1], [0.0, 0.0])

    def test_slow_straight_travel(self):
        """Test a noiseless slow pedestrian walking straight covers slow_speed x horizon."""
        config = dataclasses.replace(NOISELESS, mode_prob_fast=0.0, heading_spread=0.0)
        scene = sample_scene(config, scene_rng(0, "scene", 1))
        assert scene.mode is PedestrianMode.SLOW
        assert travel_distance(scene) == pytest.approx(config.slow_speed * config.horizon, abs=1e-12)
        np.testing.assert_allclose(scene.y.velocities[:, 0], 0.0, atol=1e-12)

    def test_deterministic(self):
        """Test the same stream gives the same scene."""
        assert sample_scene(SimConfig(), scene_rng(5, "scene", 2)) == sample_scene(SimConfig(), scene_rng(5, "scene", 2))

    def test_mode_frequency(self):
        """Test the fast-mode fraction over 10,000 scenes is close to 0.5."""
        dataset = generate_dataset(10000, SimConfig(past_steps=2, future_steps=2), seed=11)
        assert 0.48 <= dataset.modes.mean() <= 0.52

    def test_noiseless_speeds(self):
        """Test future velocities match the mode speeds when noise is off."""
        dataset = generate_dataset(50, NOISELESS, seed=2, threads=1)
        speeds = np.linalg.norm(finite_difference_velocities(dataset.y, NOISELESS.dt), axis=-1)
        expected = np.where(dataset.modes == 1, NOISELESS.fast_speed, NOISELESS.slow_speed)
        np.testing.assert_allclose(speeds, np.broadcast_to(expected[:, None], speeds.shape), atol=1e-9)

    def test_bimodal_travel(self):
        """Test noiseless travel distances take exactly two values."""
        dataset = generate_dataset(200, NOISELESS, seed=3, threads=1)
        assert len(np.unique(np.round(dataset.travel_distances(), 9))) == 2


class TestRobotDynamics:
    """Test suite for robot rollouts."""

    def test_constant_speed(self):
        """Test 10 steps at 14 m/s cover 14 m."""
        dyn = RobotDynamics(kind=RobotKind.DOUBLE_INTEGRATOR, speed=14.0, accels=np.zeros(10))
        traj = rollout_robot(dyn, 10, 0.1)
        assert traj.final_position[0] == pytest.approx(14.0)

    def test_unit_acceleration(self):
        """Test the Euler recursion from rest under 1 m/s^2 for 10 steps."""
        dyn = RobotDynamics(kind=RobotKind.DOUBLE_INTEGRATOR, speed=0.0, accels=np.ones(10))
        traj = rollout_robot(dyn, 10, 0.1)
        assert traj.final_position[0] == pytest.approx(0.45)

    def test_constant_velocity_ignores_accels(self):
        """Test the constant-velocity kind ignores the acceleration input."""
        moving = RobotDynamics(kind=RobotKind.CONSTANT_VELOCITY, speed=3.0, accels=np.full(5, 2.0))
        plain = RobotDynamics(kind=RobotKind.CONSTANT_VELOCITY, speed=3.0)
        assert rollout_robot(moving, 5, 0.1) == rollout_robot(plain, 5, 0.1)

    def test_short_accels(self):
        """Test too few accelerations raise UsageError."""
        dyn = RobotDynamics(kind=RobotKind.DOUBLE_INTEGRATOR, speed=1.0, accels=np.zeros(3))
        with pytest.raises(UsageError, match="acceleration"):
            rollout_robot(dyn, 5, 0.1)

    def test_batch_matches_scalar(self, rng):
        """Test the vectorised rollout equals the step-by-step rollout."""
        accels = rng.normal(size=(4, 6))
        batch = rollout_robot_batch(np.array([1.0, 0.5]), 12.0, accels, 0.1)
        for plan, positions in zip(accels, batch):
            dyn = RobotDynamics(kind=RobotKind.DOUBLE_INTEGRATOR, position=np.array([1.0, 0.5]), speed=12.0, accels=plan)
            np.testing.assert_allclose(positions, rollout_robot(dyn, 6, 0.1).positions, atol=1e-12)


class TestDataset:
    """Test suite for dataset generation and files."""

    def test_thread_count_independent(self, tiny_sim):
        """Test datasets do not depend on the worker count."""
        assert generate_dataset(12, tiny_sim, seed=4, threads=1).equals(generate_dataset(12, tiny_sim, seed=4, threads=3))

    def test_size_validation(self, tiny_sim):
        """Test an empty dataset request raises UsageError."""
        with pytest.raises(UsageError):
            generate_dataset(0, tiny_sim, seed=0)

    def test_constant_velocity_flavor(self, tiny_dataset):
        """Test constant-velocity robots have zero finite-difference acceleration."""
        v = finite_difference_velocities(tiny_dataset.y_robot, tiny_dataset.dt)
        np.testing.assert_allclose(np.diff(v, axis=1), 0.0, atol=1e-9)

    def test_randomized_initial_speed(self):
        """Test the mean initial robot speed of the randomized flavor is 14 m/s within 3 standard errors."""
        config = SimConfig(past_steps=2, future_steps=3, robot_kind=RobotKind.DOUBLE_INTEGRATOR)
        dataset = generate_dataset(1000, config, seed=8)
        speeds = (dataset.y_robot[:, 1, 0] - dataset.y_robot[:, 0, 0]) / config.dt
        se = speeds.std(ddof=1) / math.sqrt(len(speeds))
        assert abs(speeds.mean() - config.robot_speed) < 3 * se

    def test_file_round_trip(self, tmp_path, tiny_dataset):
        """Test a dataset file reproduces the dataset exactly."""
        path = tmp_path / "scenes.rbd"
        save_dataset(tiny_dataset, path)
        assert load_dataset(path).equals(tiny_dataset)

    def test_single_scene_file(self, tmp_path, tiny_sim):
        """Test a one-scene dataset round-trips."""
        dataset = generate_dataset(1, tiny_sim, seed=0)
        path = tmp_path / "one.rbd"
        save_dataset(dataset, path)
        loaded = load_dataset(path)
        assert len(loaded) == 1
        assert loaded.scene(0) == dataset.scene(0)

    def test_bad_magic(self, tmp_path):
        """Test a foreign file raises FormatError."""
        path = tmp_path / "junk.rbd"
        path.write_bytes(b"hello world, not a dataset")
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_truncated_file(self, tmp_path, tiny_dataset):
        """Test a truncated record raises FormatError."""
        path = tmp_path / "scenes.rbd"
        save_dataset(tiny_dataset, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError, match="truncated"):
            load_dataset(path)

    @pytest.mark.parametrize("header", [
        {},
        {"config": {}, "past_steps": 3, "future_steps": 4},
        {"config": {"bogus": 1}, "n_scenes": 1, "past_steps": 3, "future_steps": 4},
        {"config": {"dt": -1.0}, "n_scenes": 1, "past_steps": 3, "future_steps": 4},
        {"config": {}, "n_scenes": "many", "past_steps": 3, "future_steps": 4},
        {"config": {}, "n_scenes": 0, "past_steps": 3, "future_steps": 4},
    ])
    def test_incomplete_header(self, tmp_path, header):
        """Test a header with missing or invalid entries raises FormatError."""
        text = json.dumps(header).encode("utf-8")
        path = tmp_path / "header.rbd"
        path.write_bytes(DATASET_MAGIC + struct.pack("<II", DATASET_VERSION, len(text)) + text)
        with pytest.raises(FormatError, match="header"):
            load_dataset(path)

    def test_batches_cover_dataset(self, tiny_dataset, rng):
        """Test shuffled batches visit every scene once."""
        seen = np.concatenate(list(tiny_dataset.batches(5, rng)))
        assert sorted(seen.tolist()) == list(range(len(tiny_dataset)))

    def test_subset(self, tiny_dataset):
        """Test subsets keep the selected scenes."""
        part = tiny_dataset.subset(slice(2, 5))
        assert len(part) == 3
        assert part.scene(0) == tiny_dataset.scene(2)

    def test_inconsistent_arrays(self, tiny_dataset):
        """Test arrays with different scene counts are rejected."""
        with pytest.raises(UsageError, match="number of scenes"):
            Dataset(tiny_dataset.x, tiny_dataset.y[:3], tiny_dataset.y_robot, tiny_dataset.modes, tiny_dataset.config)

    def test_histogram(self):
        """Test the travel-distance histogram counts every scene."""
        frame = travel_distance_histogram(np.array([0.5, 1.0, 1.5, 5.0]), bins=4, value_range=(0.0, 8.0))
        assert list(frame.columns) == ["bin_left", "bin_right", "count"]
        assert frame["count"].tolist() == [3, 0, 1, 0]


class TestDistributionShift:
    """Test suite for the test-time speed shift."""

    def test_scales_mean_travel(self):
        """Test a 0.75 shift scales the noiseless mean travel distance by 0.75."""
        nominal = generate_dataset(2000, NOISELESS, seed=6)
        shifted = generate_dataset(2000, shift_distribution(NOISELESS, 0.75), seed=6)
        ratio = shifted.travel_distances().mean() / nominal.travel_distances().mean()
        assert ratio == pytest.approx(0.75, rel=1e-9)

    def test_identity(self):
        """Test a unit shift leaves the configuration unchanged."""
        assert shift_distribution(SimConfig(), 1.0) == SimConfig()

    def test_inverse(self):
        """Test shifting by 0.75 then 1/0.75 recovers the original scale."""
        back = shift_distribution(shift_distribution(SimConfig(), 0.75), 1 / 0.75)
        assert back.speed_scale == pytest.approx(1.0)

    def test_keeps_bimodality(self):
        """Test the shift changes nothing but the speed scale."""
        shifted = shift_distribution(SimConfig(), 0.75)
        assert dataclasses.replace(shifted, speed_scale=1.0) == SimConfig()

    @pytest.mark.parametrize("scale", [0.0, -1.0])
    def test_non_positive(self, scale):
        """Test non-positive scales raise DomainError."""
        with pytest.raises(DomainError, match="positive"):
            shift_distribution(SimConfig(), scale)

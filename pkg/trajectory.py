# Fixed-rate planar trajectory value type

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from errors import UsageError, require


def finite_difference_velocities(positions: np.ndarray, dt: float) -> np.ndarray:
    """Forward differences along the time axis (axis -2); the last step repeats.

    Works for any leading batch dimensions: (..., T, 2) -> (..., T, 2).
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim < 2 or positions.shape[-1] != 2:
        raise UsageError(f"positions must have shape (..., T, 2), got {positions.shape}")
    if positions.shape[-2] < 2:
        raise UsageError("at least two positions are needed to derive velocities")
    diffs = np.diff(positions, axis=-2) / dt
    return np.concatenate([diffs, diffs[..., -1:, :]], axis=-2)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time sequence of planar positions for one agent."""
    positions: np.ndarray  # (T, 2) meters
    dt: float  # seconds per step

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 2:
            raise UsageError(f"trajectory positions must have shape (T, 2), got {positions.shape}")
        require(self.dt > 0, "dt", f"must be positive, got {self.dt}")
        object.__setattr__(self, "positions", positions)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, Trajectory) and self.dt == other.dt and np.array_equal(self.positions, other.positions)

    @property
    def velocities(self) -> np.ndarray:
        return finite_difference_velocities(self.positions, self.dt)

    @property
    def final_position(self) -> np.ndarray:
        return self.positions[-1]

    def flatten(self) -> np.ndarray:
        return self.positions.reshape(-1)

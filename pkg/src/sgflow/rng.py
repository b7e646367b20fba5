"""Counter-based random streams keyed by (seed, trajectory, scale)."""
from __future__ import annotations

import numpy as np


def stream(seed: int, traj: int = 0, scale: int = 0) -> np.random.Generator:
    """Independent Philox stream; draws never reach the (scale, traj) counter words."""
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, int(scale), int(traj)]))


def normals(seed: int, trajs, scale: int, shape) -> np.ndarray:
    """Stacked standard normals, one block of ``shape`` per trajectory id."""
    return np.stack([stream(seed, int(i), scale).standard_normal(shape) for i in trajs])

"""Group-normalized accuracy advantages and entropy-aware reshaping."""

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from aepo_desk.errors import ConfigError, UsageError
from aepo_desk.world.env import Trajectory

STD_FLOOR = 1e-8

Array = NDArray[np.float64]


class EntropyScope(str, Enum):
    TRAJECTORY = "trajectory"
    GROUP = "group"


@dataclass(frozen=True)
class GroupAdvantages:
    """Per-token advantages, one array per trajectory in group order."""

    acc: tuple[Array, ...]
    ent: tuple[Array, ...]
    reshaped: tuple[Array, ...]
    a_weight: float

    def summary(self) -> dict[str, float]:
        flat = np.concatenate(self.reshaped) if self.reshaped else np.zeros(0)
        if flat.size == 0:
            return {"min": 0.0, "mean": 0.0, "max": 0.0}
        return {"min": float(flat.min()), "mean": float(flat.mean()), "max": float(flat.max())}


def _standardize(values: Array) -> Array:
    """Population z-score; exactly zero when the values are constant."""
    if values.size == 0 or np.all(values == values[0]):
        return np.zeros_like(values)
    mean = values.mean()
    std = values.std()
    return (values - mean) / max(float(std), STD_FLOOR)


def accuracy_advantage(rewards: Sequence[float]) -> Array:
    """``(R_i - mean) / std`` over the group, one value per trajectory."""
    if len(rewards) < 2:
        raise UsageError(f"a group needs at least 2 trajectories, got {len(rewards)}")
    return _standardize(np.asarray(rewards, dtype=np.float64))


def entropy_advantage(entropies: Sequence[float], mask: Sequence[bool] | None = None) -> Array:
    """Standardize token entropies over the unmasked tokens.

    Masked tokens get 0. Fewer than two unmasked tokens also give all zeros.
    """
    values = np.asarray(entropies, dtype=np.float64)
    keep = np.ones(values.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != values.shape:
        raise UsageError(f"mask has {keep.size} entries for {values.size} entropies")

    out = np.zeros_like(values)
    if keep.sum() >= 2:
        out[keep] = _standardize(values[keep])
    return out


def reshape_advantage(acc: Array, ent: Array, a_weight: float) -> Array:
    """``acc * (1 + a * ent)`` element-wise."""
    acc = np.asarray(acc, dtype=np.float64)
    ent = np.asarray(ent, dtype=np.float64)
    if acc.shape != ent.shape:
        raise UsageError(f"advantage shapes differ: {acc.shape} vs {ent.shape}")
    return acc * (1.0 + a_weight * ent)


def group_advantages(
    trajectories: Sequence[Trajectory],
    a_weight: float = 0.2,
    scope: EntropyScope | str = EntropyScope.TRAJECTORY,
) -> GroupAdvantages:
    """Advantages for the ``G`` trajectories answering one query."""
    try:
        scope = EntropyScope(scope)
    except ValueError:
        raise ConfigError(f"entropy_adv_scope must be trajectory or group, got {scope!r}") from None

    per_traj = accuracy_advantage([t.reward for t in trajectories])
    acc = tuple(np.full(len(t.tokens), per_traj[i]) for i, t in enumerate(trajectories))

    if scope is EntropyScope.TRAJECTORY:
        ent = tuple(entropy_advantage(t.entropies, t.loss_mask) for t in trajectories)
    else:
        joined = entropy_advantage(
            [h for t in trajectories for h in t.entropies],
            [m for t in trajectories for m in t.loss_mask],
        )
        bounds = np.cumsum([0] + [len(t.tokens) for t in trajectories])
        ent = tuple(joined[bounds[i]:bounds[i + 1]] for i in range(len(trajectories)))

    reshaped = tuple(reshape_advantage(a, e, a_weight) for a, e in zip(acc, ent))
    return GroupAdvantages(acc=acc, ent=ent, reshaped=reshaped, a_weight=a_weight)

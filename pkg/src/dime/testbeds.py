"""Analytic test tasks with known Pareto fronts.

Two continuous bandits built from standard two-objective test functions
(rewards are the negated functions), a small tabular chain MDP where
progress conflicts with an action-magnitude penalty, and a generator for
offline datasets drawn from declared behavior mixtures.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import ContractError, RngStream, TradeOff, TransitionBatch, as_generator
from .priors import BehaviorSpec, OfflineDataset


def _schaffer(a):
    return np.stack([a**2, (a - 2.0) ** 2], axis=-1)


def _fonseca_fleming(a):
    return np.stack([1.0 - np.exp(-((a - 1.0) ** 2)), 1.0 - np.exp(-((a + 1.0) ** 2))], axis=-1)


# name -> (cost function, evaluation bounds, Pareto-optimal action interval, hypervolume reference)
_BANDITS = {
    "schaffer": (_schaffer, (-3.0, 5.0), (0.0, 2.0), (-5.0, -5.0)),
    "fonseca-fleming": (_fonseca_fleming, (-3.0, 3.0), (-1.0, 1.0), (-1.1, -1.1)),
}


@dataclass(frozen=True)
class BanditTask:
    """One-step task with a scalar continuous action and two rewards.

    ``scales`` multiplies each reward; it exists to test invariance to
    objective scaling and is 1 for the standard tasks.
    """

    name: str
    scales: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.name not in _BANDITS:
            raise ContractError(f"unknown bandit {self.name!r}; expected one of {sorted(_BANDITS)}")
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))

    n_objectives = 2
    n_states = 0
    action_dim = 1

    @property
    def bounds(self) -> tuple[float, float]:
        return _BANDITS[self.name][1]

    @property
    def pareto_interval(self) -> tuple[float, float]:
        return _BANDITS[self.name][2]

    @property
    def reference(self) -> tuple[float, float]:
        """Hypervolume reference point, scaled like the rewards."""
        return tuple(r * s for r, s in zip(_BANDITS[self.name][3], self.scales))

    def reward(self, action) -> np.ndarray:
        """Reward vectors, shape ``action.shape + (2,)`` for scalar actions.

        A trailing action axis of length one is dropped.
        """
        a = np.asarray(action, dtype=float)
        if a.ndim and a.shape[-1] == 1:
            a = a[..., 0]
        return -_BANDITS[self.name][0](a) * np.asarray(self.scales)

    def sample_states(self, n: int):
        return (0,) * n


def bandit_reward(task: BanditTask, action) -> np.ndarray:
    """``(-f_1(a), -f_2(a))`` for the named test function, times the task scales."""
    a = np.asarray(action, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ContractError("action must be finite")
    return task.reward(a)


def true_pareto_front(task: BanditTask, resolution: int = 201) -> np.ndarray:
    """Rewards along the Pareto-optimal action interval, ``(resolution, 2)``."""
    if resolution < 10:
        raise ContractError("resolution must be >= 10")
    lo, hi = task.pareto_interval
    return task.reward(np.linspace(lo, hi, resolution))


def scalarization_optima(task: BanditTask, tradeoff: TradeOff, step: float = 1e-4) -> np.ndarray:
    """Local maximizers of ``alpha . r(a)`` on a dense grid over the task bounds."""
    lo, hi = task.bounds
    grid = np.arange(lo, hi + 0.5 * step, step)
    val = task.reward(grid) @ tradeoff.as_array()
    interior = (val[1:-1] >= val[:-2]) & (val[1:-1] >= val[2:])
    idx = np.flatnonzero(interior) + 1
    if val[0] > val[1]:
        idx = np.r_[0, idx]
    if val[-1] > val[-2]:
        idx = np.r_[idx, grid.size - 1]
    return grid[idx]


# ---------------------------------------------------------------------------
# Chain MDP


@dataclass(frozen=True, eq=False)
class ChainMDP:
    """Chain of states with a goal at the right end.

    Action ``a`` in ``[-1, 1]`` moves right with probability ``(1 + a) / 2``
    and left otherwise (walls clamp). Objective 1 pays 1 for every step taken
    from the goal state; objective 2 is ``-|a|``. Continuous actions are
    snapped to the nearest grid point.
    """

    n_states: int = 5
    n_actions: int = 7
    gamma: float = 0.99

    n_objectives = 2
    action_dim = 1

    def __post_init__(self):
        if self.n_states < 2 or self.n_actions < 2:
            raise ContractError("need at least two states and two actions")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError("gamma must be in [0, 1)")

    @property
    def name(self) -> str:
        return f"chain{self.n_states}x{self.n_actions}"

    @cached_property
    def action_grid(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.n_actions)

    @cached_property
    def transitions(self) -> np.ndarray:
        """``P[s, a, s']`` as an ``(S, A, S)`` array."""
        s_n = self.n_states
        p_right = (1.0 + self.action_grid) / 2.0
        p = np.zeros((s_n, self.n_actions, s_n))
        for s in range(s_n):
            p[s, :, min(s + 1, s_n - 1)] += p_right
            p[s, :, max(s - 1, 0)] += 1.0 - p_right
        return p

    @cached_property
    def rewards(self) -> np.ndarray:
        """``R[k, s, a]`` as a ``(2, S, A)`` array."""
        r = np.zeros((2, self.n_states, self.n_actions))
        r[0, -1, :] = 1.0
        r[1] = -np.abs(self.action_grid)[None, :]
        return r

    def snap(self, action) -> np.ndarray:
        """Index of the nearest grid action."""
        a = np.asarray(action, dtype=float)
        if a.ndim and a.shape[-1] == 1:
            a = a[..., 0]
        grid = self.action_grid
        return np.abs(a[..., None] - grid).argmin(axis=-1)

    def sample_states(self, n: int):
        return tuple(int(s) for s in np.arange(n) % self.n_states)

    def step(self, state: int, action, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        ai = int(self.snap(action))
        nxt = int(rng.choice(self.n_states, p=self.transitions[state, ai]))
        return self.rewards[:, state, ai], nxt


# ---------------------------------------------------------------------------
# Offline data


def generate_offline_dataset(task, behavior: BehaviorSpec, size: int, rng: RngStream | int):
    """Draw ``size`` transitions with actions from ``behavior``."""
    if size < 1:
        raise ContractError("size must be >= 1")
    seed = rng.seed if isinstance(rng, RngStream) else int(rng)
    gen = as_generator(rng)
    actions = behavior.sample(gen, size)
    if isinstance(task, BanditTask):
        states = np.zeros(size, dtype=int)
        rewards = bandit_reward(task, actions)
        next_states = states.copy()
    else:
        states = gen.integers(task.n_states, size=size)
        rewards = np.empty((size, task.n_objectives))
        next_states = np.empty(size, dtype=int)
        for i in range(size):
            rewards[i], next_states[i] = task.step(int(states[i]), actions[i], gen)
    batch = TransitionBatch(states, actions[:, None], rewards, next_states)
    return OfflineDataset(batch, behavior, seed, task_id(task))


def task_id(task) -> str:
    if isinstance(task, BanditTask):
        if task.scales != (1.0, 1.0):
            return f"{task.name}@{task.scales[0]!r},{task.scales[1]!r}"
        return task.name
    return task.name

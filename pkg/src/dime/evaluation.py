"""Per-objective policy evaluation.

Every objective gets its own evaluator. Bandit rewards are exact; tabular
chains are solved exactly from the linear Bellman system under the current
policy; behavioral priors contribute a log-density-ratio objective; and
state values are Monte Carlo averages of any evaluator's Q.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .core import (
    ContractError,
    GaussianPolicy,
    TradeOff,
    as_generator,
    log_density,
    sample_actions,
)
from .testbeds import BanditTask, ChainMDP, bandit_reward, task_id

KINDS = ("bandit-exact", "tabular-exact", "monte-carlo-V", "log-density-ratio")


def eval_bandit(task: BanditTask, k: int, action) -> float | np.ndarray:
    """``r_k(a)``; ``k`` is zero-based."""
    if not isinstance(task, BanditTask):
        raise ContractError("eval_bandit needs a bandit task")
    r = bandit_reward(task, action)[..., k]
    return float(r) if np.ndim(r) == 0 else r


def tabular_q(mdp: ChainMDP, k: int, table: np.ndarray, gamma: float | None = None) -> np.ndarray:
    """Exact ``Q_k`` for a stochastic policy table ``(S, A)``.

    Solves ``V = r_pi + gamma P_pi V`` and returns
    ``Q(s, a) = r(s, a) + gamma sum_s' P(s'|s, a) V(s')``.
    """
    gamma = mdp.gamma if gamma is None else gamma
    if not 0.0 <= gamma < 1.0:
        raise ContractError("tabular evaluation needs gamma in [0, 1)")
    pi = np.asarray(table, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > 1e-9:
        raise ContractError("policy table must be (S, A) with rows summing to 1")
    p, r = mdp.transitions, mdp.rewards[k]
    r_pi = np.sum(pi * r, axis=1)
    p_pi = np.einsum("sa,sat->st", pi, p)
    try:
        v = np.linalg.solve(np.eye(mdp.n_states) - gamma * p_pi, r_pi)
    except np.linalg.LinAlgError as exc:
        raise ContractError(f"singular policy-evaluation system: {exc}") from exc
    return r + gamma * p @ v


def eval_tabular(mdp: ChainMDP, k: int, table: np.ndarray, state: int, action: int) -> float:
    """``Q_k(state, action)`` with ``action`` a grid index."""
    return float(tabular_q(mdp, k, table)[state, action])


def action_table(policy: GaussianPolicy, mdp: ChainMDP, tradeoff: TradeOff | None = None) -> np.ndarray:
    """Probability a Gaussian policy's sample snaps to each grid action, ``(S, A)``."""
    grid = mdp.action_grid
    edges = np.r_[-np.inf, 0.5 * (grid[1:] + grid[:-1]), np.inf]
    n = mdp.n_states
    t = None if tradeoff is None else np.tile(tradeoff.as_array(), (n, 1))
    phi = policy.feature_map.batch(n, np.arange(n), t if policy.feature_map.conditioned else None)
    mu, ls = policy.moments(phi)
    z = (edges[None, :] - mu[:, :1]) / np.exp(ls[:, :1])
    table = np.diff(ndtr(z), axis=1)
    return table / table.sum(axis=1, keepdims=True)


def deterministic_table(policy: GaussianPolicy, mdp: ChainMDP, tradeoff: TradeOff | None = None) -> np.ndarray:
    """One-hot table of the snapped mean action in each state."""
    n = mdp.n_states
    t = None if tradeoff is None else np.tile(tradeoff.as_array(), (n, 1))
    phi = policy.feature_map.batch(n, np.arange(n), t if policy.feature_map.conditioned else None)
    mu, _ = policy.moments(phi)
    table = np.zeros((n, mdp.n_actions))
    table[np.arange(n), mdp.snap(mu)] = 1.0
    return table


def eval_log_ratio(prior: GaussianPolicy, iterate: GaussianPolicy, state=None, action=None, conditioning=None):
    """``log pi_b(a|s) - log pi_i(a|s)``."""
    return log_density(prior, action, conditioning, state) - log_density(iterate, action, conditioning, state)


# Tabular solves are cached per (task, policy, objective, gamma, trade-off bin).
_CACHE: OrderedDict = OrderedDict()
_CACHE_LOCK = threading.Lock()
_CACHE_SIZE = 4096


def _cached_q(mdp: ChainMDP, policy: GaussianPolicy, k: int, gamma: float, tradeoff: TradeOff | None):
    key = (task_id(mdp), policy.identifier(), k, gamma, None if tradeoff is None else tradeoff.weights)
    with _CACHE_LOCK:
        hit = _CACHE.get(key)
        if hit is not None:
            _CACHE.move_to_end(key)
            return hit
    q = tabular_q(mdp, k, action_table(policy, mdp, tradeoff), gamma)
    q.setflags(write=False)
    with _CACHE_LOCK:
        _CACHE[key] = q
        if len(_CACHE) > _CACHE_SIZE:
            _CACHE.popitem(last=False)
    return q


def clear_cache() -> None:
    with _CACHE_LOCK:
        _CACHE.clear()


@dataclass(frozen=True, eq=False)
class ObjectiveEvaluator:
    """Evaluates one objective ``Q_k`` at sampled actions.

    Args:
        kind: one of :data:`KINDS`.
        task: the bandit or chain the objective belongs to.
        k: zero-based objective index.
        gamma: discount for tabular evaluation.
        prior: behavioral prior for ``log-density-ratio``.
        base: the evaluator averaged by ``monte-carlo-V``.
        sample_count: Monte Carlo sample count for ``monte-carlo-V``.
        n_bins: trade-off bins for conditioned tabular evaluation.
    """

    kind: str
    task: object = None
    k: int = 0
    gamma: float = 0.99
    prior: GaussianPolicy | None = None
    base: ObjectiveEvaluator | None = None
    sample_count: int = 30
    n_bins: int = 11

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown evaluator kind {self.kind!r}")
        if self.kind == "tabular-exact" and not 0.0 <= self.gamma < 1.0:
            raise ContractError("tabular-exact requires gamma < 1")
        if self.kind == "bandit-exact" and not isinstance(self.task, BanditTask):
            raise ContractError("bandit-exact needs a bandit task")
        if self.kind == "tabular-exact" and not isinstance(self.task, ChainMDP):
            raise ContractError("tabular-exact needs a chain MDP")
        if self.kind == "log-density-ratio" and self.prior is None:
            raise ContractError("log-density-ratio needs a prior policy")
        if self.kind == "monte-carlo-V" and (self.base is None or self.sample_count < 1):
            raise ContractError("monte-carlo-V needs a base evaluator and sample_count >= 1")

    def _bin(self, weights) -> TradeOff:
        a = float(np.round(weights[0] * (self.n_bins - 1)) / (self.n_bins - 1))
        return TradeOff.from_scalar(a)

    def q_values(self, policy: GaussianPolicy, states, actions: np.ndarray, tradeoffs=None) -> np.ndarray:
        """Objective values at ``actions`` ``(S, N, D)``; returns ``(S, N)``.

        ``policy`` is the iterate the actions were drawn from; ``tradeoffs``
        (``(S, K)``) are the per-row trade-offs for conditioned policies.
        """
        a = np.asarray(actions, dtype=float)
        if a.ndim == 2:
            a = a[:, :, None]
        if self.kind == "bandit-exact":
            return self.task.reward(a)[..., self.k]
        if self.kind == "tabular-exact":
            idx = self.task.snap(a)
            st = np.asarray(states, dtype=int)
            out = np.empty(idx.shape)
            if policy.feature_map.conditioned:
                if tradeoffs is None:
                    raise ContractError("conditioned tabular evaluation needs per-row trade-offs")
                for row in range(a.shape[0]):
                    q = _cached_q(self.task, policy, self.k, self.gamma, self._bin(tradeoffs[row]))
                    out[row] = q[st[row], idx[row]]
                return out
            q = _cached_q(self.task, policy, self.k, self.gamma, None)
            return q[st[:, None], idx]
        if self.kind == "log-density-ratio":
            fm = policy.feature_map
            n = a.shape[0]
            st = np.asarray(states) if fm.n_states else None
            phi = fm.batch(n, st, tradeoffs if fm.conditioned else None)
            mu_b, ls_b = self.prior.moments(self.prior.feature_map.batch(n, st, None))
            mu_i, ls_i = policy.moments(phi)
            zb = (a - mu_b[:, None, :]) * np.exp(-ls_b)[:, None, :]
            zi = (a - mu_i[:, None, :]) * np.exp(-ls_i)[:, None, :]
            # Difference of two log-densities, so the ratio is exactly antisymmetric.
            log_b = np.sum(-0.5 * zb**2 - ls_b[:, None, :], axis=2)
            log_i = np.sum(-0.5 * zi**2 - ls_i[:, None, :], axis=2)
            return log_b - log_i
        raise ContractError("monte-carlo-V estimates state values; use value()")

    def value(self, policy: GaussianPolicy, state, conditioning: TradeOff | None, rng) -> float:
        """Monte Carlo ``V(s)`` from ``sample_count`` policy samples."""
        base = self.base if self.kind == "monte-carlo-V" else self
        return eval_value_mc(policy, state, conditioning, base, self.sample_count, rng)


def eval_value_mc(policy, state, conditioning, evaluator: ObjectiveEvaluator, sample_count: int, rng) -> float:
    """``V(s) ~= mean_j Q(s, a_j)`` with ``a_j ~ pi(.|s)``."""
    if sample_count < 1:
        raise ContractError("sample_count must be >= 1")
    st = state if policy.feature_map.n_states else None
    acts = sample_actions(policy, sample_count, as_generator(rng), conditioning, st)
    t = None if conditioning is None else conditioning.as_array()[None, :]
    q = evaluator.q_values(policy, [state if state is not None else 0], acts[None], t)
    return float(np.mean(q))


def evaluators_for(task, gamma: float | None = None) -> list[ObjectiveEvaluator]:
    """One exact evaluator per objective of a bandit or chain task."""
    if isinstance(task, BanditTask):
        return [ObjectiveEvaluator("bandit-exact", task, k) for k in range(task.n_objectives)]
    if isinstance(task, ChainMDP):
        g = task.gamma if gamma is None else gamma
        return [ObjectiveEvaluator("tabular-exact", task, k, gamma=g) for k in range(task.n_objectives)]
    raise ContractError(f"no exact evaluators for {type(task).__name__}")


def deterministic_returns(task, policy: GaussianPolicy, tradeoff: TradeOff | None = None, start_state: int = 0):
    """Per-objective return of the mean action (bandit reward or chain value)."""
    cond = tradeoff if policy.feature_map.conditioned else None
    if isinstance(task, BanditTask):
        return bandit_reward(task, policy.mean(None, cond))
    if isinstance(task, ChainMDP):
        table = deterministic_table(policy, task, cond)
        out = []
        for k in range(task.n_objectives):
            q = tabular_q(task, k, table)
            out.append(float(np.sum(table[start_state] * q[start_state])))
        return np.array(out)
    raise ContractError(f"cannot evaluate task {type(task).__name__}")

"""Nonparametric policy improvement.

Each objective's improved distribution is represented by softmax weights
over N actions sampled from the current iterate. The temperature of each
softmax is the minimizer of the sample-based convex dual

    L(eta) = eta * eps + eta * mean_s log mean_j exp(Q[s, j] / eta)

whose stationarity condition is ``KL(w_s || uniform) = eps`` on average over
states. Trade-offs enter in one of three places:

* ``dime``: not at all (experts are independent; trade-offs are applied when
  distilling);
* ``ls``: objectives are linearly scalarized before a single solve;
* ``mompo``: each objective gets its own KL bound, which encodes preference.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import ContractError, DualVariables, ExpertWeights, GaussianPolicy, TradeOff

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ImprovementConfig:
    mode: str = "dime"
    epsilon: float = 0.1
    sample_count: int = 30
    eta_bounds: tuple[float, float] = (1e-6, 1e6)
    eta_tolerance: float = 1e-8
    # "solve" runs the dual to convergence; "step" takes one gradient step
    # from the previous temperature per call.
    dual_update: str = "solve"
    dual_step_size: float = 1e-2
    initial_eta: float = 10.0

    def __post_init__(self):
        if self.mode not in ("dime", "ls", "mompo"):
            raise ContractError(f"unknown improvement mode {self.mode!r}")
        if self.epsilon < 0:
            raise ContractError("epsilon must be >= 0")
        if self.sample_count < 2:
            raise ContractError("sample_count must be >= 2")
        lo, hi = self.eta_bounds
        if not 0 < lo < hi:
            raise ContractError("eta bounds must satisfy 0 < lo < hi")
        if self.dual_update not in ("solve", "step"):
            raise ContractError(f"unknown dual update {self.dual_update!r}")


@dataclass(frozen=True, eq=False)
class ObjectiveSamples:
    """Sampled actions and the K objective values at each of them.

    ``actions``: ``(S, N, D)``; ``values``: ``(K, S, N)``.
    """

    actions: np.ndarray
    values: np.ndarray
    states: tuple = ()
    tradeoffs: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=float)
        if a.ndim == 2:
            a = a[:, :, None]
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[1:] != a.shape[:2]:
            raise ContractError(f"values shape {v.shape} does not match actions {a.shape}")
        if not np.all(np.isfinite(v)):
            raise ContractError("objective values must be finite")
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "values", v)
        if not self.states:
            object.__setattr__(self, "states", tuple(range(a.shape[0])))

    @property
    def k(self) -> int:
        return self.values.shape[0]


class TemperatureSolution(NamedTuple):
    eta: float
    achieved_kl: float


def dual_value(q_values: np.ndarray, epsilon: float, eta: float) -> float:
    """Sample-based dual ``L(eta)`` for one objective, ``q_values`` ``(S, N)``."""
    q = np.atleast_2d(q_values)
    top = q.max(axis=1, keepdims=True)
    lme = np.log(np.mean(np.exp((q - top) / eta), axis=1))
    return float(eta * epsilon + np.mean(top[:, 0] + eta * lme))


def softmax_weights(q_values: np.ndarray, eta: float) -> np.ndarray:
    """Per-state softmax of ``Q / eta`` with max subtraction."""
    q = np.atleast_2d(q_values)
    z = (q - q.max(axis=1, keepdims=True)) / eta
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def kl_to_uniform(weights: np.ndarray) -> float:
    """Mean over states of ``sum_j w_j log(N w_j)``."""
    w = np.atleast_2d(weights)
    n = w.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, w * np.log(n * w), 0.0)
    return float(np.mean(terms.sum(axis=1)))


def solve_temperature(
    q_values: np.ndarray,
    epsilon: float,
    bounds: tuple[float, float] = (1e-6, 1e6),
    tol: float = 1e-8,
) -> TemperatureSolution:
    """Minimize the temperature dual by golden-section search on ``log eta``.

    If every state's values are constant the weights are uniform for any
    temperature; the upper bound is returned with zero KL.
    """
    q = np.atleast_2d(np.asarray(q_values, dtype=float))
    if epsilon <= 0:
        raise ContractError("epsilon must be > 0")
    if q.shape[1] < 2:
        raise ContractError("need at least two samples per state")
    if not np.all(np.isfinite(q)):
        raise ContractError("objective values must be finite")
    lo, hi = bounds
    if np.all(np.ptp(q, axis=1) == 0.0):
        return TemperatureSolution(float(hi), 0.0)

    def f(x: float) -> float:
        return dual_value(q, epsilon, math.exp(x))

    a, b = math.log(lo), math.log(hi)
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    # Snap to a bound when the minimum sits on it.
    if f(math.log(lo)) <= f(x):
        x = math.log(lo)
    elif f(math.log(hi)) < f(x):
        x = math.log(hi)
    eta = min(max(math.exp(x), lo), hi)
    return TemperatureSolution(eta, kl_to_uniform(softmax_weights(q, eta)))


def temperature_step(
    q_values: np.ndarray,
    epsilon: float,
    eta: float,
    step_size: float = 1e-2,
    bounds: tuple[float, float] = (1e-6, 1e6),
) -> TemperatureSolution:
    """One gradient step on the dual; ``dL/deta = eps - KL(w(eta) || uniform)``."""
    q = np.atleast_2d(np.asarray(q_values, dtype=float))
    grad = epsilon - kl_to_uniform(softmax_weights(q, eta))
    new_eta = min(max(eta - step_size * grad, bounds[0]), bounds[1])
    return TemperatureSolution(new_eta, kl_to_uniform(softmax_weights(q, new_eta)))


def _temperature(q, epsilon, config: ImprovementConfig, previous: float | None) -> TemperatureSolution:
    if epsilon == 0.0:
        # Zero divergence allowed: the expert is the iterate itself.
        return TemperatureSolution(float(config.eta_bounds[1]), 0.0)
    if config.dual_update == "step":
        eta0 = config.initial_eta if previous is None else previous
        return temperature_step(q, epsilon, eta0, config.dual_step_size, config.eta_bounds)
    return solve_temperature(q, epsilon, config.eta_bounds, config.eta_tolerance)


def _per_objective(samples, epsilons, config, iterate, previous_eta):
    k = samples.k
    weights = np.empty_like(samples.values)
    etas, kls = np.empty(k), np.empty(k)
    for i in range(k):
        prev = None if previous_eta is None else float(previous_eta[i])
        sol = _temperature(samples.values[i], float(epsilons[i]), config, prev)
        etas[i], kls[i] = sol.eta, sol.achieved_kl
        if epsilons[i] == 0.0:
            weights[i] = 1.0 / samples.values.shape[2]
        else:
            weights[i] = softmax_weights(samples.values[i], sol.eta)
    experts = ExpertWeights(samples.states, samples.actions, weights, iterate.identifier(), samples.tradeoffs)
    return experts, DualVariables(etas, np.asarray(epsilons, dtype=float), achieved_kl=kls)


def expert_weights_dime(
    samples: ObjectiveSamples,
    config: ImprovementConfig,
    iterate: GaussianPolicy,
    previous_eta: np.ndarray | None = None,
) -> tuple[ExpertWeights, DualVariables]:
    """Independent per-objective experts, all with the same KL bound."""
    if config.mode != "dime":
        raise ContractError("expert_weights_dime needs mode='dime'")
    eps = np.full(samples.k, config.epsilon)
    return _per_objective(samples, eps, config, iterate, previous_eta)


def expert_weights_ls(
    samples: ObjectiveSamples,
    config: ImprovementConfig,
    tradeoff: TradeOff,
    iterate: GaussianPolicy,
    previous_eta: np.ndarray | None = None,
) -> tuple[ExpertWeights, DualVariables]:
    """Single expert for the linearly scalarized objective.

    The weight matrix is replicated K times so downstream projection code
    can treat every mode alike.
    """
    if config.mode != "ls":
        raise ContractError("expert_weights_ls needs mode='ls'")
    if tradeoff.k != samples.k:
        raise ContractError(f"trade-off has {tradeoff.k} entries, samples have {samples.k} objectives")
    if samples.tradeoffs is not None:
        alpha = samples.tradeoffs.T[:, :, None]
    else:
        alpha = tradeoff.as_array()[:, None, None]
    scalar = np.sum(alpha * samples.values, axis=0)
    prev = None if previous_eta is None else float(np.atleast_1d(previous_eta)[0])
    sol = _temperature(scalar, config.epsilon, config, prev)
    w = softmax_weights(scalar, sol.eta) if config.epsilon > 0 else np.full(scalar.shape, 1.0 / scalar.shape[1])
    weights = np.broadcast_to(w, samples.values.shape)
    experts = ExpertWeights(samples.states, samples.actions, weights, iterate.identifier(), samples.tradeoffs)
    duals = DualVariables(
        np.full(samples.k, sol.eta), np.full(samples.k, config.epsilon), achieved_kl=np.full(samples.k, sol.achieved_kl)
    )
    return experts, duals


def expert_weights_mompo(
    samples: ObjectiveSamples,
    config: ImprovementConfig,
    tradeoff_as_bounds: Sequence[float],
    iterate: GaussianPolicy,
    previous_eta: np.ndarray | None = None,
) -> tuple[ExpertWeights, DualVariables]:
    """Per-objective experts whose KL bounds encode the preference."""
    if config.mode != "mompo":
        raise ContractError("expert_weights_mompo needs mode='mompo'")
    eps = np.asarray(tradeoff_as_bounds, dtype=float)
    if eps.shape != (samples.k,) or np.any(eps < 0):
        raise ContractError("need one nonnegative KL bound per objective")
    return _per_objective(samples, eps, config, iterate, previous_eta)


def mompo_bounds(tradeoff: TradeOff, epsilon: float) -> np.ndarray:
    """Map a trade-off to MO-MPO KL bounds: ``eps_k = K * alpha_k * epsilon``.

    A uniform trade-off gives every objective the DiME bound ``epsilon``.
    """
    return tradeoff.k * tradeoff.as_array() * epsilon


def improve(
    samples: ObjectiveSamples,
    config: ImprovementConfig,
    tradeoff: TradeOff,
    iterate: GaussianPolicy,
    previous_eta: np.ndarray | None = None,
) -> tuple[ExpertWeights, DualVariables, TradeOff]:
    """Dispatch on ``config.mode``; also returns the trade-off to distill with."""
    if config.mode == "dime":
        experts, duals = expert_weights_dime(samples, config, iterate, previous_eta)
        return experts, duals, tradeoff
    if config.mode == "ls":
        experts, duals = expert_weights_ls(samples, config, tradeoff, iterate, previous_eta)
        return experts, duals, tradeoff
    experts, duals = expert_weights_mompo(
        samples, config, mompo_bounds(tradeoff, config.epsilon), iterate, previous_eta
    )
    return experts, duals, TradeOff.uniform(samples.k)

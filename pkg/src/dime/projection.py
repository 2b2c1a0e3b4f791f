"""Trust-region projection of weighted experts onto the parametric family.

The projection maximizes

    J(theta) = (1/S) sum_s sum_k alpha_k sum_j w_k[s, j] log pi_theta(a_sj | s)

subject to decoupled trust regions on the mean and covariance parts of
``KL(pi_i || pi_theta)``, averaged over the rows. The constraint is handled
by Lagrangian relaxation (default), a quadratic penalty, or not at all, and
a final backtracking step along the update direction guarantees both
bounds hold for the returned policy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .core import (
    ContractError,
    ExpertWeights,
    FeatureMap,
    GaussianPolicy,
    NumericalError,
    TradeOff,
    TradeOffDistribution,
    _kl_parts,
    as_generator,
    stack_tradeoffs,
    weighted_log_likelihood,
)
from .improvement import (
    ImprovementConfig,
    ObjectiveSamples,
    expert_weights_dime,
    expert_weights_ls,
    improve,
)

log = logging.getLogger(__name__)

_MODES = {"lagrangian": _kernels.LAGRANGIAN, "penalty": _kernels.PENALTY, "none": _kernels.UNCONSTRAINED}


@dataclass(frozen=True)
class ProjectionConfig:
    beta_mean: float = 0.0025
    beta_cov: float = 1e-5
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    max_steps: int = 500
    grad_tol: float = 1e-7
    constraint: str = "lagrangian"
    dual_learning_rate: float = 1e-2
    penalty: float = 1.0
    # Shrink the step until both trust regions hold; only "none" skips it.
    backtrack: bool = True

    def __post_init__(self):
        if self.beta_mean <= 0 or self.beta_cov <= 0:
            raise ContractError("trust-region bounds must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.constraint not in _MODES:
            raise ContractError(f"unknown constraint handling {self.constraint!r}")
        if self.max_steps < 0 or self.learning_rate <= 0:
            raise ContractError("max_steps must be >= 0 and learning_rate > 0")


class ProjectionDiagnostics(NamedTuple):
    objective: float
    kl_mean: float
    kl_cov: float
    multipliers: tuple[float, float]
    steps: int
    converged: bool
    backtracked: bool


@dataclass(frozen=True, eq=False)
class Projection:
    policy: GaussianPolicy
    diagnostics: ProjectionDiagnostics
    coefficients: np.ndarray = field(repr=False)


def combine_weights(experts: ExpertWeights, tradeoff: TradeOff | None) -> np.ndarray:
    """``c[s, j] = sum_k alpha_k w_k[s, j]`` with a fixed or per-row trade-off."""
    if tradeoff is None:
        if experts.tradeoffs is None:
            raise ContractError("need a trade-off, or experts built with per-row trade-offs")
        alpha = experts.tradeoffs.T[:, :, None]
    else:
        if tradeoff.k != experts.k:
            raise ContractError(f"trade-off has {tradeoff.k} entries, experts have {experts.k} objectives")
        alpha = tradeoff.as_array()[:, None, None]
    return np.sum(alpha * experts.weights, axis=0)


def row_features(policy: GaussianPolicy, experts: ExpertWeights) -> np.ndarray:
    fm = policy.feature_map
    n = len(experts.states)
    states = experts.states if fm.n_states else None
    return fm.batch(n, states, experts.tradeoffs if fm.conditioned else None)


def mean_kl(policy: GaussianPolicy, iterate: GaussianPolicy, phi: np.ndarray) -> tuple[float, float]:
    """Row-averaged mean and covariance parts of ``KL(iterate || policy)``."""
    mu_i, ls_i = iterate.moments(phi)
    mu, ls = policy.moments(phi)
    parts = [_kl_parts(mu_i[s], ls_i[s], mu[s], ls[s]) for s in range(phi.shape[0])]
    return float(np.mean([p.mean_part for p in parts])), float(np.mean([p.cov_part for p in parts]))


def _kl_rows(phi, mu_i, ls_i, wm, ws):
    mu, ls = phi @ wm.T, phi @ ws.T
    dl = ls_i - ls
    km = np.mean(np.sum(0.5 * (mu - mu_i) ** 2 * np.exp(-2.0 * ls), axis=1))
    kc = np.mean(np.sum(0.5 * (np.exp(2.0 * dl) - 1.0 - 2.0 * dl), axis=1))
    return float(km), float(kc)


def _backtrack(phi, mu_i, ls_i, wm0, ws0, wm, ws, beta_m, beta_c, iters=60):
    """Shrink the update toward the iterate until both bounds hold.

    Log-std parameters are shrunk first by bisection on the covariance
    term. The mean term is then exactly quadratic in the mean step size.
    """
    moved = False
    _, kc = _kl_rows(phi, mu_i, ls_i, wm0, ws)
    if kc > beta_c:
        lo, hi = 0.0, 1.0
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if _kl_rows(phi, mu_i, ls_i, wm0, ws0 + mid * (ws - ws0))[1] <= beta_c:
                lo = mid
            else:
                hi = mid
        ws = ws0 + lo * (ws - ws0)
        moved = True
    km, _ = _kl_rows(phi, mu_i, ls_i, wm, ws)
    if km > beta_m:
        t = np.sqrt(beta_m / km) * (1.0 - 1e-12)
        wm = wm0 + t * (wm - wm0)
        moved = True
    return wm, ws, moved


def _project(
    actions: np.ndarray,
    coeffs: np.ndarray,
    phi: np.ndarray,
    iterate: GaussianPolicy,
    config: ProjectionConfig,
    multipliers=(0.0, 0.0),
) -> Projection:
    a = np.asarray(actions, dtype=float)
    c_row = coeffs.sum(axis=1)
    m1 = np.einsum("sj,sjd->sd", coeffs, a)
    m2 = np.einsum("sj,sjd->sd", coeffs, a * a)
    mu_i, ls_i = iterate.moments(phi)
    wm0 = np.array(iterate.mean_params)
    ws0 = np.array(iterate.log_std_params)
    wm, ws = wm0.copy(), ws0.copy()
    lam = np.array(multipliers, dtype=float)
    status, steps = _kernels.ascent(
        np.ascontiguousarray(phi, dtype=float),
        c_row,
        m1,
        m2,
        np.ascontiguousarray(mu_i),
        np.ascontiguousarray(ls_i),
        wm,
        ws,
        lam,
        float(config.beta_mean),
        float(config.beta_cov),
        float(config.learning_rate),
        int(config.max_steps),
        float(config.grad_tol),
        float(config.dual_learning_rate),
        _MODES[config.constraint],
        float(config.penalty),
        config.optimizer == "adam",
    )
    if status == _kernels.STATUS_NONFINITE or not (np.all(np.isfinite(wm)) and np.all(np.isfinite(ws))):
        raise NumericalError(f"projection diverged after {steps} steps")
    moved = False
    if config.backtrack and config.constraint != "none":
        wm, ws, moved = _backtrack(phi, mu_i, ls_i, wm0, ws0, wm, ws, config.beta_mean, config.beta_cov)
    policy = GaussianPolicy(wm, ws, iterate.feature_map)
    value, _ = weighted_log_likelihood(policy, a, coeffs, phi)
    km, kc = _kl_rows(phi, mu_i, ls_i, wm, ws)
    diag = ProjectionDiagnostics(
        value, km, kc, (float(lam[0]), float(lam[1])), int(steps), status == _kernels.STATUS_GRAD_TOL, moved
    )
    return Projection(policy, diag, coeffs)


def distill(
    experts: ExpertWeights,
    tradeoff: TradeOff,
    iterate: GaussianPolicy,
    config: ProjectionConfig | None = None,
    multipliers=(0.0, 0.0),
) -> Projection:
    """Fit one policy to the trade-off-weighted mixture of experts."""
    config = config or ProjectionConfig()
    if experts.iterate_id != iterate.identifier():
        raise ContractError("experts were not built from this iterate")
    if experts.actions.shape[2] != iterate.action_dim:
        raise ContractError("expert actions and policy have different dimensions")
    coeffs = combine_weights(experts, tradeoff)
    return _project(experts.actions, coeffs, row_features(iterate, experts), iterate, config, multipliers)


def distill_conditioned(
    experts: ExpertWeights,
    iterate: GaussianPolicy,
    config: ProjectionConfig | None = None,
    multipliers=(0.0, 0.0),
) -> Projection:
    """Fit a trade-off-conditioned policy; each row uses its own trade-off."""
    config = config or ProjectionConfig()
    if experts.tradeoffs is None:
        raise ContractError("conditioned distillation needs per-row trade-offs")
    if not iterate.feature_map.conditioned:
        raise ContractError("conditioned distillation needs a trade-off-conditioned policy")
    if experts.iterate_id != iterate.identifier():
        raise ContractError("experts were not built from this iterate")
    coeffs = combine_weights(experts, None)
    return _project(experts.actions, coeffs, row_features(iterate, experts), iterate, config, multipliers)


def distill_objective(policy: GaussianPolicy, experts: ExpertWeights, tradeoff: TradeOff | None):
    """Plain numpy value and flat gradient of the projection objective."""
    coeffs = combine_weights(experts, tradeoff)
    return weighted_log_likelihood(policy, experts.actions, coeffs, row_features(policy, experts))


# ---------------------------------------------------------------------------
# Full policy-iteration loop


@dataclass(frozen=True)
class MethodConfig:
    """Improvement and projection settings plus the per-iteration batch size.

    ``batch_size`` is the number of state rows per iteration. For bandits
    the rows are replicas of the single state and only reduce sampling
    noise.
    """

    improvement: ImprovementConfig = field(default_factory=ImprovementConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    batch_size: int = 16

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


class IterationRecord(NamedTuple):
    policy: GaussianPolicy
    expected_values: np.ndarray
    eta: np.ndarray
    distill: ProjectionDiagnostics


def _sample_rows(policy, states, tradeoffs, count, gen):
    fm = policy.feature_map
    n = len(states)
    phi = fm.batch(n, states if fm.n_states else None, tradeoffs if fm.conditioned else None)
    mu, ls = policy.moments(phi)
    eps = gen.standard_normal((n, count, policy.action_dim))
    return mu[:, None, :] + np.exp(ls)[:, None, :] * eps


def em_iterate(
    task,
    method: MethodConfig,
    tradeoff,
    iterations: int,
    rng,
    policy: GaussianPolicy | None = None,
    evaluators=None,
) -> list[IterationRecord]:
    """Alternate evaluation, improvement and projection ``iterations`` times.

    ``tradeoff`` is a :class:`TradeOff` for a single policy or a
    :class:`TradeOffDistribution` to train a conditioned policy, in which
    case a fresh trade-off is drawn for every row of every iteration.
    """
    from .evaluation import evaluators_for

    if iterations < 0:
        raise ContractError("iterations must be >= 0")
    gen = as_generator(rng)
    evaluators = evaluators if evaluators is not None else evaluators_for(task)
    k = len(evaluators)
    conditioned = isinstance(tradeoff, TradeOffDistribution)
    if policy is None:
        fm = FeatureMap(task.n_states, 3 if conditioned else 0, k)
        policy = GaussianPolicy.with_features(fm, np.zeros(task.action_dim), 0.0)
    if conditioned and not policy.feature_map.conditioned:
        raise ContractError("a trade-off distribution needs a conditioned policy")
    if not conditioned and tradeoff.k != k:
        raise ContractError(f"trade-off has {tradeoff.k} entries, task has {k} objectives")
    cfg = method.improvement
    records: list[IterationRecord] = []
    prev_eta, lam = None, (0.0, 0.0)
    for _ in range(iterations):
        states = task.sample_states(method.batch_size)
        rows = None
        if conditioned:
            rows = stack_tradeoffs(tradeoff.sample(gen, method.batch_size), method.batch_size)
        actions = _sample_rows(policy, states, rows, cfg.sample_count, gen)
        values = np.stack([ev.q_values(policy, states, actions, rows) for ev in evaluators])
        samples = ObjectiveSamples(actions, values, tuple(states), rows)
        if conditioned:
            if cfg.mode == "mompo":
                raise ContractError("conditioned training supports dime and ls")
            if cfg.mode == "dime":
                experts, duals = expert_weights_dime(samples, cfg, policy, prev_eta)
            else:
                experts, duals = expert_weights_ls(samples, cfg, TradeOff.uniform(k), policy, prev_eta)
            proj = distill_conditioned(experts, policy, method.projection, lam)
        else:
            experts, duals, distill_t = improve(samples, cfg, tradeoff, policy, prev_eta)
            proj = distill(experts, distill_t, policy, method.projection, lam)
        prev_eta, lam = duals.eta, proj.diagnostics.multipliers
        records.append(IterationRecord(proj.policy, values.mean(axis=(1, 2)), duals.eta, proj.diagnostics))
        policy = proj.policy
    return records

"""Losses that trade a task objective against a behavioral prior.

A prior is either a policy with an evaluable density (kickstarting) or a
fixed dataset of transitions (offline RL). Every loss returns its value,
its gradient with respect to :meth:`GaussianPolicy.flat_params` and the
number of clipped exponents.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .core import (
    ContractError,
    GaussianPolicy,
    TransitionBatch,
    weighted_log_likelihood,
)
from .improvement import softmax_weights

log = logging.getLogger(__name__)

EXP_CLIP = 20.0


@dataclass(frozen=True)
class BehaviorSpec:
    """Gaussian mixture over scalar actions: ``(weight, mean, std)`` triples.

    A zero standard deviation is a point mass.
    """

    components: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        comps = tuple(tuple(float(x) for x in c) for c in self.components)
        if not comps or any(len(c) != 3 for c in comps):
            raise ContractError("behavior spec needs (weight, mean, std) triples")
        w = np.array([c[0] for c in comps])
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9 or any(c[2] < 0 for c in comps):
            raise ContractError("mixture weights must be >= 0 and sum to 1; stds >= 0")
        object.__setattr__(self, "components", comps)

    @classmethod
    def point(cls, action: float) -> BehaviorSpec:
        return cls(((1.0, action, 0.0),))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        w = np.array([c[0] for c in self.components])
        idx = rng.choice(len(w), size=n, p=w)
        means = np.array([c[1] for c in self.components])[idx]
        stds = np.array([c[2] for c in self.components])[idx]
        return means + stds * rng.standard_normal(n)

    @property
    def mean(self) -> float:
        return float(sum(c[0] * c[1] for c in self.components))


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """Transitions plus the generator that produced them."""

    batch: TransitionBatch
    behavior: BehaviorSpec
    seed: int
    task: str

    def __len__(self) -> int:
        return len(self.batch)

    def to_csv(self) -> str:
        """Columnar text: ``#`` metadata lines, then a header and one row per transition."""
        out = io.StringIO()
        out.write(f"# task={self.task}\n# seed={self.seed}\n")
        out.write("# behavior=" + ";".join(",".join(repr(x) for x in c) for c in self.behavior.components) + "\n")
        b = self.batch
        d, k = b.actions.shape[1], b.k
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["state", *[f"a{i}" for i in range(d)], *[f"r{i + 1}" for i in range(k)], "next_state"])
        for i in range(len(b)):
            w.writerow(
                [
                    int(b.states[i]),
                    *[repr(float(x)) for x in b.actions[i]],
                    *[repr(float(x)) for x in b.rewards[i]],
                    int(b.next_states[i]),
                ]
            )
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> OfflineDataset:
        meta, body = {}, []
        for line in text.splitlines():
            if line.startswith("# "):
                key, _, val = line[2:].partition("=")
                meta[key] = val
            elif line:
                body.append(line)
        try:
            rows = list(csv.reader(body))
            header, rows = rows[0], rows[1:]
            d = sum(h.startswith("a") for h in header)
            k = sum(h.startswith("r") for h in header)
            arr = np.array(rows, dtype=float).reshape(len(rows), len(header))
            comps = tuple(tuple(float(x) for x in c.split(",")) for c in meta["behavior"].split(";"))
            batch = TransitionBatch(
                arr[:, 0].astype(int), arr[:, 1 : 1 + d], arr[:, 1 + d : 1 + d + k], arr[:, -1].astype(int)
            )
            return cls(batch, BehaviorSpec(comps), int(meta["seed"]), meta["task"])
        except (KeyError, IndexError, ValueError) as exc:
            raise ContractError(f"malformed dataset file: {exc}") from exc


@dataclass(frozen=True)
class KickstartConfig:
    """Fixed or learned trade-off between the task and the prior.

    In learned mode the trade-off is ``sigmoid(x)`` and ``x`` follows the
    loss ``alpha * (E Q - c)``.
    """

    alpha: float = 0.5
    learned: bool = False
    x: float | None = None
    threshold: float = 0.0
    step_size: float = 1.0
    eta: float = 1.0
    eta1: float = 1.0
    eta2: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must be in [0, 1]")
        if self.learned and self.x is None:
            a = min(max(self.alpha, 1e-12), 1 - 1e-12)
            object.__setattr__(self, "x", math.log(a / (1.0 - a)))
        if min(self.eta, self.eta1, self.eta2) <= 0:
            raise ContractError("temperatures must be > 0")

    @property
    def value(self) -> float:
        """Current trade-off, post-sigmoid in learned mode."""
        return _sigmoid(self.x) if self.learned else self.alpha


def _sigmoid(x: float) -> float:
    # Beyond +-36 the float64 result would round to exactly 0 or 1.
    x = min(max(x, -36.0), 36.0)
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def update_learned_tradeoff(config: KickstartConfig, mean_q: float) -> KickstartConfig:
    """One gradient step on ``x`` for ``J = sigmoid(x) * (E Q - c)``."""
    if not config.learned:
        raise ContractError("update_learned_tradeoff needs learned mode")
    s = _sigmoid(config.x)
    x = config.x - config.step_size * s * (1.0 - s) * (mean_q - config.threshold)
    return replace(config, x=x)


# ---------------------------------------------------------------------------
# Kickstarting weights


def kickstart_weights_ls(q: np.ndarray, log_ratio: np.ndarray, alpha: float, eta: float) -> np.ndarray:
    """Per-state softmax of ``((1 - alpha) Q + alpha log_ratio) / eta``."""
    _check_alpha(alpha)
    return softmax_weights((1.0 - alpha) * np.asarray(q) + alpha * np.asarray(log_ratio), eta)


def kickstart_weights_dime(q: np.ndarray, log_ratio: np.ndarray, alpha: float, eta1: float, eta2: float) -> np.ndarray:
    """Convex combination of separately normalized task and prior weights."""
    _check_alpha(alpha)
    return (1.0 - alpha) * softmax_weights(q, eta1) + alpha * softmax_weights(log_ratio, eta2)


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must be in [0, 1]")


# ---------------------------------------------------------------------------
# Offline losses


class LossResult(NamedTuple):
    value: float
    grad: np.ndarray
    n_clipped: int


def _batch_rows(policy: GaussianPolicy, batch: TransitionBatch):
    fm = policy.feature_map
    n = len(batch)
    return fm.batch(n, batch.states if fm.n_states else None, batch.tradeoffs if fm.conditioned else None)


def clipped_exp(x: np.ndarray) -> tuple[np.ndarray, int]:
    n = int(np.sum(x > EXP_CLIP))
    if n:
        log.info("clipped %d exponents at %s", n, EXP_CLIP)
    return np.exp(np.minimum(x, EXP_CLIP)), n


def _weighted_bc(policy, batch, weights) -> tuple[float, np.ndarray]:
    """Mean over the batch of ``weights * log pi(a|s)``."""
    phi = _batch_rows(policy, batch)
    return weighted_log_likelihood(policy, batch.actions[:, None, :], np.asarray(weights)[:, None], phi)


def bc_loss(policy: GaussianPolicy, batch: TransitionBatch) -> LossResult:
    """Negative mean log-likelihood of the dataset actions."""
    if len(batch) == 0:
        raise ContractError("batch must be nonempty")
    v, g = _weighted_bc(policy, batch, np.ones(len(batch)))
    return LossResult(-v, -g, 0)


def offline_loss_ls_crr(policy: GaussianPolicy, batch: TransitionBatch, q, v, beta: float) -> LossResult:
    """``-mean exp(A / beta) log pi(a|s)`` with ``A = q - v`` per transition."""
    if not beta > 0:
        raise ContractError("beta must be > 0; use bc_loss for pure cloning")
    if len(batch) == 0:
        raise ContractError("batch must be nonempty")
    adv = np.asarray(q, dtype=float) - np.asarray(v, dtype=float)
    w, n = clipped_exp(adv / beta)
    val, g = _weighted_bc(policy, batch, w)
    return LossResult(-val, -g, n)


def _task_term(policy, sample_states, sample_actions, sample_q, eta):
    w = softmax_weights(sample_q, eta)
    fm = policy.feature_map
    s = np.asarray(sample_actions).shape[0]
    phi = fm.batch(s, np.asarray(sample_states) if fm.n_states else None, None)
    return weighted_log_likelihood(policy, sample_actions, w, phi)


def offline_loss_dime(
    policy: GaussianPolicy,
    batch: TransitionBatch,
    sample_states,
    sample_actions: np.ndarray,
    sample_q: np.ndarray,
    alpha: float,
    eta: float,
) -> LossResult:
    """Task distillation term plus behavioral cloning, mixed by ``alpha``.

    ``sample_actions`` (``(S, N, D)``) were drawn from the iterate at
    ``sample_states``; ``sample_q`` (``(S, N)``) are their task values.
    The task term averages over the S rows.
    """
    _check_alpha(alpha)
    if np.asarray(sample_actions).shape[1] < 2:
        raise ContractError("need at least two policy samples per state")
    bc = bc_loss(policy, batch)
    if alpha == 1.0:
        return bc
    tv, tg = _task_term(policy, sample_states, sample_actions, sample_q, eta)
    return LossResult(-((1.0 - alpha) * tv) + alpha * bc.value, -((1.0 - alpha) * tg) + alpha * bc.grad, 0)


def offline_loss_awbc(
    policy: GaussianPolicy,
    batch: TransitionBatch,
    q,
    v,
    sample_states,
    sample_actions: np.ndarray,
    sample_q: np.ndarray,
    alpha: float,
    eta: float,
) -> LossResult:
    """As :func:`offline_loss_dime` with cloning weighted by ``exp(A)``."""
    _check_alpha(alpha)
    if np.asarray(sample_actions).shape[1] < 2:
        raise ContractError("need at least two policy samples per state")
    crr = offline_loss_ls_crr(policy, batch, q, v, 1.0)
    tv, tg = _task_term(policy, sample_states, sample_actions, sample_q, eta)
    return LossResult(
        -((1.0 - alpha) * tv) + alpha * crr.value, -((1.0 - alpha) * tg) + alpha * crr.grad, crr.n_clipped
    )

"""Domain types, diagonal-Gaussian density math and seeded randomness.

Policies are diagonal Gaussians whose mean and log standard deviation are
linear maps over a fixed feature vector. The feature vector is built from
an optional one-hot state code and an optional polynomial in the trade-off,
so the same type covers bandit policies (a single constant feature),
tabular-state policies and trade-off-conditioned policies.
"""

from __future__ import annotations

import hashlib
import re
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class NumericalError(ArithmeticError):
    """Raised when an optimizer produces non-finite values."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Trade-offs


@dataclass(frozen=True)
class TradeOff:
    """Convex preference vector over K objectives."""

    weights: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size < 1:
            raise ContractError("trade-off must be a non-empty vector")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ContractError(f"trade-off entries must be finite and >= 0, got {w}")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ContractError(f"trade-off must sum to 1, got sum {w.sum()!r}")
        object.__setattr__(self, "weights", tuple(float(x) for x in w))

    @classmethod
    def from_scalar(cls, alpha: float) -> TradeOff:
        """Two-objective trade-off ``(alpha, 1 - alpha)``."""
        alpha = float(alpha)
        return cls((alpha, 1.0 - alpha))

    @classmethod
    def uniform(cls, k: int) -> TradeOff:
        return cls(tuple([1.0 / k] * (k - 1) + [1.0 - (k - 1) / k]))

    @property
    def k(self) -> int:
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)


@dataclass(frozen=True)
class TradeOffDistribution:
    """Distribution over trade-offs used to train conditioned policies.

    ``kind`` is one of ``"simplex"`` (uniform on the K-simplex), ``"scalar"``
    (``(u, 1-u)`` with ``u ~ U(lo, hi)``) or ``"list"`` (uniform over fixed
    trade-offs).
    """

    kind: str = "scalar"
    k: int = 2
    lo: float = 0.0
    hi: float = 1.0
    choices: tuple[TradeOff, ...] = ()

    def __post_init__(self):
        if self.kind not in ("simplex", "scalar", "list"):
            raise ContractError(f"unknown trade-off distribution kind {self.kind!r}")
        if self.kind == "scalar" and not (0.0 <= self.lo <= self.hi <= 1.0):
            raise ContractError("scalar trade-off bounds must satisfy 0 <= lo <= hi <= 1")
        if self.kind == "list" and not self.choices:
            raise ContractError("list trade-off distribution needs at least one choice")

    def sample(self, rng: np.random.Generator, n: int) -> list[TradeOff]:
        if self.kind == "scalar":
            return [TradeOff.from_scalar(u) for u in rng.uniform(self.lo, self.hi, size=n)]
        if self.kind == "list":
            idx = rng.integers(len(self.choices), size=n)
            return [self.choices[i] for i in idx]
        out = []
        for row in rng.dirichlet(np.ones(self.k), size=n):
            row = row / row.sum()
            row[-1] = 1.0 - row[:-1].sum()
            out.append(TradeOff(tuple(np.clip(row, 0.0, None))))
        return out


# ---------------------------------------------------------------------------
# Features and policies


@dataclass(frozen=True)
class FeatureMap:
    """Fixed feature basis for policy parameters.

    The feature vector is ``kron(onehot(state), [1, a, a^2, ..., a^degree])``
    where ``a`` runs over the first K-1 trade-off entries. Either factor may
    be absent: ``n_states == 0`` drops the one-hot code and ``degree == 0``
    drops the trade-off polynomial.
    """

    n_states: int = 0
    degree: int = 0
    n_objectives: int = 2

    _ID = re.compile(r"^(?:onehot(\d+))?(?:\*)?(?:poly(\d+)(?:k(\d+))?)?$")

    @property
    def id(self) -> str:
        parts = []
        if self.n_states:
            parts.append(f"onehot{self.n_states}")
        if self.degree:
            tag = f"poly{self.degree}"
            if self.n_objectives != 2:
                tag += f"k{self.n_objectives}"
            parts.append(tag)
        return "*".join(parts) or "const"

    @classmethod
    def from_id(cls, ident: str) -> FeatureMap:
        if ident == "const":
            return cls()
        m = cls._ID.match(ident)
        if not m or not ident:
            raise ContractError(f"unknown feature map id {ident!r}")
        n_states, degree, k = m.groups()
        return cls(int(n_states or 0), int(degree or 0), int(k or 2))

    @property
    def conditioned(self) -> bool:
        return self.degree > 0

    @property
    def size(self) -> int:
        state_part = self.n_states or 1
        return state_part * (1 + self.degree * (self.n_objectives - 1))

    def tradeoff_features(self, tradeoffs: np.ndarray) -> np.ndarray:
        """Polynomial features for an ``(n, K)`` array of trade-off weights."""
        n = tradeoffs.shape[0]
        cols = [np.ones(n)]
        for j in range(self.n_objectives - 1):
            for p in range(1, self.degree + 1):
                cols.append(tradeoffs[:, j] ** p)
        return np.stack(cols, axis=1)

    def batch(self, n: int, states=None, tradeoffs=None) -> np.ndarray:
        """Feature matrix ``(n, F)`` for ``n`` rows of (state, trade-off)."""
        if self.degree:
            if tradeoffs is None:
                raise ContractError(f"feature map {self.id} needs a trade-off")
            t = np.asarray(tradeoffs, dtype=float).reshape(n, -1)
            if t.shape[1] != self.n_objectives:
                raise ContractError(f"trade-off has {t.shape[1]} entries, feature map expects {self.n_objectives}")
            tf = self.tradeoff_features(t)
        else:
            tf = np.ones((n, 1))
        if self.n_states:
            if states is None:
                raise ContractError(f"feature map {self.id} needs a state index")
            s = np.asarray(states, dtype=int).reshape(n)
            if np.any(s < 0) or np.any(s >= self.n_states):
                raise ContractError("state index out of range")
            onehot = np.zeros((n, self.n_states))
            onehot[np.arange(n), s] = 1.0
            return (onehot[:, :, None] * tf[:, None, :]).reshape(n, -1)
        return tf

    def features(self, state=None, tradeoff: TradeOff | None = None) -> np.ndarray:
        t = None if tradeoff is None else np.asarray(_weights(tradeoff))[None, :]
        s = None if state is None else [state]
        return self.batch(1, s, t)[0]


def _weights(tradeoff) -> tuple[float, ...]:
    return tradeoff.weights if isinstance(tradeoff, TradeOff) else tuple(tradeoff)


@dataclass(frozen=True, eq=False)
class GaussianPolicy:
    """Diagonal Gaussian with mean and log-std linear in a feature vector.

    ``mean_params`` and ``log_std_params`` have shape ``(action_dim,
    feature_map.size)``. The standard deviation is ``exp(log_std)``, so it is
    positive by construction.
    """

    mean_params: np.ndarray
    log_std_params: np.ndarray
    feature_map: FeatureMap = field(default_factory=FeatureMap)

    def __post_init__(self):
        mp = np.array(self.mean_params, dtype=float, ndmin=2)
        lp = np.array(self.log_std_params, dtype=float, ndmin=2)
        if mp.shape != lp.shape:
            raise ContractError(f"mean/log-std parameter shapes differ: {mp.shape} vs {lp.shape}")
        if mp.shape[1] != self.feature_map.size:
            raise ContractError(
                f"parameters have {mp.shape[1]} feature columns, "
                f"feature map {self.feature_map.id} has {self.feature_map.size}"
            )
        object.__setattr__(self, "mean_params", _frozen(mp))
        object.__setattr__(self, "log_std_params", _frozen(lp))

    @classmethod
    def constant(cls, mean, log_std) -> GaussianPolicy:
        """Unconditioned policy with the given mean and log-std vectors."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        log_std = np.broadcast_to(np.asarray(log_std, dtype=float), mean.shape)
        return cls(mean[:, None], log_std[:, None], FeatureMap())

    @classmethod
    def with_features(cls, feature_map: FeatureMap, mean, log_std) -> GaussianPolicy:
        """Policy whose mean and log-std are initially constant in the features.

        Only the bias column(s) are set; for one-hot state features every
        state gets the same initial mean and log-std.
        """
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        log_std = np.broadcast_to(np.asarray(log_std, dtype=float), mean.shape)
        d, f = mean.size, feature_map.size
        per_state = f // (feature_map.n_states or 1)
        mp = np.zeros((d, f))
        lp = np.zeros((d, f))
        mp[:, ::per_state] = mean[:, None]
        lp[:, ::per_state] = log_std[:, None]
        return cls(mp, lp, feature_map)

    @property
    def feature_map_id(self) -> str:
        return self.feature_map.id

    @property
    def action_dim(self) -> int:
        return self.mean_params.shape[0]

    @property
    def n_params(self) -> int:
        return 2 * self.mean_params.size

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.mean_params.ravel(), self.log_std_params.ravel()])

    def with_flat_params(self, theta) -> GaussianPolicy:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ContractError(f"expected {self.n_params} parameters, got {theta.shape}")
        half = self.n_params // 2
        shape = self.mean_params.shape
        return GaussianPolicy(theta[:half].reshape(shape), theta[half:].reshape(shape), self.feature_map)

    def features(self, n: int = 1, states=None, tradeoffs=None) -> np.ndarray:
        return self.feature_map.batch(n, states, tradeoffs)

    def moments(self, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean and log-std for a feature matrix ``(n, F)``; both ``(n, D)``."""
        return phi @ self.mean_params.T, phi @ self.log_std_params.T

    def mean(self, state=None, conditioning: TradeOff | None = None) -> np.ndarray:
        phi = self.feature_map.features(state, conditioning)
        return self.mean_params @ phi

    def log_std(self, state=None, conditioning: TradeOff | None = None) -> np.ndarray:
        phi = self.feature_map.features(state, conditioning)
        return self.log_std_params @ phi

    def identifier(self) -> str:
        """Content hash, used to tie expert weights to the iterate they came from."""
        h = hashlib.sha256()
        h.update(self.feature_map.id.encode())
        h.update(self.mean_params.tobytes())
        h.update(self.log_std_params.tobytes())
        return h.hexdigest()[:16]

    def __repr__(self) -> str:
        return (
            f"GaussianPolicy(features={self.feature_map.id}, "
            f"mean_params={self.mean_params.tolist()}, log_std_params={self.log_std_params.tolist()})"
        )


def _check_action(policy: GaussianPolicy, action) -> np.ndarray:
    a = np.asarray(action, dtype=float)
    if a.ndim == 0:
        a = a[None]
    if a.shape[-1] != policy.action_dim:
        raise ContractError(f"action has dimension {a.shape[-1]}, policy has {policy.action_dim}")
    return a


def log_density(policy: GaussianPolicy, action, conditioning: TradeOff | None = None, state=None):
    """Log-density of ``action`` (shape ``(D,)`` or ``(..., D)``)."""
    a = _check_action(policy, action)
    mu = policy.mean(state, conditioning)
    ls = policy.log_std(state, conditioning)
    z = (a - mu) * np.exp(-ls)
    out = np.sum(-0.5 * z**2 - ls - 0.5 * LOG_2PI, axis=-1)
    return float(out) if out.ndim == 0 else out


class LogDensityGrad(NamedTuple):
    d_mean: np.ndarray
    d_log_std: np.ndarray
    d_mean_params: np.ndarray
    d_log_std_params: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_mean_params.ravel(), self.d_log_std_params.ravel()])


def log_density_grad(
    policy: GaussianPolicy, action, conditioning: TradeOff | None = None, state=None
) -> LogDensityGrad:
    """Gradient of :func:`log_density` for a single action.

    Returns derivatives with respect to the mean and log-std outputs and,
    through the feature map, with respect to the parameter matrices.
    """
    a = _check_action(policy, action)
    if a.ndim != 1:
        raise ContractError("log_density_grad takes a single action vector")
    phi = policy.feature_map.features(state, conditioning)
    mu = policy.mean_params @ phi
    ls = policy.log_std_params @ phi
    inv_var = np.exp(-2.0 * ls)
    diff = a - mu
    d_mean = diff * inv_var
    d_log_std = diff**2 * inv_var - 1.0
    return LogDensityGrad(d_mean, d_log_std, np.outer(d_mean, phi), np.outer(d_log_std, phi))


class KLParts(NamedTuple):
    mean_part: float
    cov_part: float
    total: float


def kl_gaussian(p: GaussianPolicy, q: GaussianPolicy, conditioning: TradeOff | None = None, state=None) -> KLParts:
    """KL(p || q) for diagonal Gaussians, split into mean and covariance terms.

    The mean term ``0.5 * sum((mu_p - mu_q)^2 / sigma_q^2)`` uses q's
    covariance; the covariance term is the KL between the two Gaussians
    with the mean difference removed.
    """
    if p.action_dim != q.action_dim:
        raise ContractError("KL between policies of different action dimension")
    mp, mq = p.mean(state, conditioning), q.mean(state, conditioning)
    lp, lq = p.log_std(state, conditioning), q.log_std(state, conditioning)
    return _kl_parts(mp, lp, mq, lq)


def _kl_parts(mp, lp, mq, lq) -> KLParts:
    ratio = np.exp(2.0 * (lp - lq))
    mean_part = float(np.sum(0.5 * (mp - mq) ** 2 * np.exp(-2.0 * lq)))
    cov_part = float(np.sum(0.5 * (ratio - 1.0 - 2.0 * (lp - lq))))
    total = float(np.sum(0.5 * (ratio - 1.0 - 2.0 * (lp - lq) + (mp - mq) ** 2 * np.exp(-2.0 * lq))))
    return KLParts(mean_part, cov_part, total)


def sample_actions(
    policy: GaussianPolicy,
    count: int,
    rng: RngStream | np.random.Generator,
    conditioning: TradeOff | None = None,
    state=None,
) -> np.ndarray:
    """Draw ``count`` i.i.d. actions, shape ``(count, D)``."""
    if count < 1:
        raise ContractError("count must be >= 1")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    mu = policy.mean(state, conditioning)
    sd = np.exp(policy.log_std(state, conditioning))
    return mu + sd * gen.standard_normal((count, policy.action_dim))


# ---------------------------------------------------------------------------
# Containers


@dataclass(frozen=True, eq=False)
class ExpertWeights:
    """Per-objective, per-state normalized weights over sampled actions.

    ``actions`` has shape ``(S, N, D)`` and ``weights`` shape ``(K, S, N)``;
    each ``weights[k, s]`` row sums to one. ``tradeoffs`` (``(S, K)``) is set
    when the experts were built for trade-off-conditioned rows.
    """

    states: tuple
    actions: np.ndarray
    weights: np.ndarray
    iterate_id: str
    tradeoffs: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if a.ndim != 3 or w.ndim != 3 or w.shape[1:] != a.shape[:2]:
            raise ContractError(f"incompatible shapes: actions {a.shape}, weights {w.shape}")
        if len(self.states) != a.shape[0]:
            raise ContractError("one state identifier per row required")
        if np.any(w < 0) or np.max(np.abs(w.sum(axis=2) - 1.0)) > 1e-10:
            raise ContractError("expert weight rows must be nonnegative and sum to 1")
        object.__setattr__(self, "actions", _frozen(a))
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "states", tuple(self.states))
        if self.tradeoffs is not None:
            t = np.asarray(self.tradeoffs, dtype=float)
            if t.shape != (a.shape[0], w.shape[0]):
                raise ContractError("tradeoffs must have shape (S, K)")
            object.__setattr__(self, "tradeoffs", _frozen(t))

    @property
    def k(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class DualVariables:
    eta: np.ndarray
    kl_bounds: np.ndarray
    trust_region_duals: tuple[float, float] = (0.0, 0.0)
    achieved_kl: np.ndarray | None = None

    def __post_init__(self):
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        if np.any(eta <= 0):
            raise ContractError("temperatures must be strictly positive")
        object.__setattr__(self, "eta", _frozen(eta))
        object.__setattr__(self, "kl_bounds", _frozen(np.atleast_1d(self.kl_bounds)))
        if self.achieved_kl is not None:
            object.__setattr__(self, "achieved_kl", _frozen(np.atleast_1d(self.achieved_kl)))


@dataclass(frozen=True, eq=False)
class TransitionBatch:
    """Columnar batch of ``(s, a, r_1..r_K, s')`` records."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    tradeoffs: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        r = np.asarray(self.rewards, dtype=float)
        if r.ndim != 2 or r.shape[0] != a.shape[0]:
            raise ContractError("rewards must have shape (B, K)")
        s = np.asarray(self.states)
        ns = np.asarray(self.next_states)
        if s.shape[0] != a.shape[0] or ns.shape[0] != a.shape[0]:
            raise ContractError("states, actions and next states must have equal length")
        object.__setattr__(self, "actions", _frozen(a))
        object.__setattr__(self, "rewards", _frozen(r))
        s = s.copy()
        s.setflags(write=False)
        ns = ns.copy()
        ns.setflags(write=False)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "next_states", ns)
        if self.tradeoffs is not None:
            t = np.asarray(self.tradeoffs, dtype=float)
            if t.shape != r.shape:
                raise ContractError("tradeoffs must have shape (B, K)")
            object.__setattr__(self, "tradeoffs", _frozen(t))

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def k(self) -> int:
        return self.rewards.shape[1]


# ---------------------------------------------------------------------------
# Randomness


@dataclass(frozen=True)
class RngStream:
    """Named, reproducible random stream.

    Each call to :meth:`generator` returns a fresh generator positioned at the
    start of the stream, so a stream is a value: the same ``(seed, label)``
    always yields the same draws. Independent work derives children by label.
    """

    seed: int
    label: str = "root"

    def _entropy(self) -> list[int]:
        digest = hashlib.sha256(self.label.encode()).digest()
        words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]
        return [int(self.seed) & 0xFFFFFFFFFFFFFFFF, *words]

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._entropy())))

    def child(self, label: str) -> RngStream:
        return RngStream(self.seed, f"{self.label}/{label}")


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def stack_tradeoffs(tradeoffs: Sequence[TradeOff] | np.ndarray | None, n: int):
    if tradeoffs is None:
        return None
    if isinstance(tradeoffs, np.ndarray):
        return tradeoffs.reshape(n, -1)
    return np.array([_weights(t) for t in tradeoffs], dtype=float).reshape(n, -1)


def weighted_log_likelihood(
    policy: GaussianPolicy, actions: np.ndarray, coeffs: np.ndarray, phi: np.ndarray
) -> tuple[float, np.ndarray]:
    """``(1/S) * sum_s sum_j coeffs[s, j] * log pi(actions[s, j] | row s)``.

    ``actions`` is ``(S, N, D)``, ``coeffs`` ``(S, N)`` and ``phi`` the
    ``(S, F)`` feature rows. Returns the value and the gradient with respect
    to :meth:`GaussianPolicy.flat_params`.
    """
    a = np.asarray(actions, dtype=float)
    if a.ndim == 2:
        a = a[:, :, None]
    s = a.shape[0]
    mu, ls = policy.moments(phi)
    z = (a - mu[:, None, :]) * np.exp(-ls)[:, None, :]
    logp = np.sum(-0.5 * z**2 - ls[:, None, :] - 0.5 * LOG_2PI, axis=2)
    value = float(np.sum(coeffs * logp) / s)
    c = coeffs[:, :, None]
    g_mu = np.sum(c * z * np.exp(-ls)[:, None, :], axis=1) / s
    g_ls = np.sum(c * (z**2 - 1.0), axis=1) / s
    grad = np.concatenate([(g_mu.T @ phi).ravel(), (g_ls.T @ phi).ravel()])
    return value, grad

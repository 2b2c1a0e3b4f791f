"""Experiment drivers and machine-readable outputs.

Each driver expands a config into independent jobs (one per trade-off and
seed), runs them in a process pool, and writes results in job order so the
files do not depend on the worker count. Every job draws from its own
labelled random stream.

CSV files use a header row, ``,`` separators, ``.`` decimals, LF line
endings and ``repr`` floats (shortest round-trip form).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import OFFLINE_METHODS, ConfigError, ExperimentConfig, config_hash
from .core import (
    ContractError,
    FeatureMap,
    GaussianPolicy,
    RngStream,
    TradeOff,
    kl_gaussian,
)
from .evaluation import ObjectiveEvaluator, deterministic_returns, evaluators_for
from .improvement import softmax_weights, solve_temperature
from .pareto import FrontPoint, ParetoFront, front_coverage, hypervolume_2d
from .priors import (
    BehaviorSpec,
    KickstartConfig,
    OfflineDataset,
    clipped_exp,
    kickstart_weights_dime,
    kickstart_weights_ls,
    update_learned_tradeoff,
)
from .projection import _project, em_iterate
from .testbeds import BanditTask, generate_offline_dataset, true_pareto_front

log = logging.getLogger(__name__)

FRONT_COLUMNS = [
    "method",
    "provenance",
    "alpha_1",
    "alpha_2",
    "obj_1",
    "obj_2",
    "action",
    "iterations",
    "seed",
    "config_hash",
]
OFFLINE_COLUMNS = ["method", "alpha_1", "alpha_2", "obj_1", "obj_2", "mean_action", "iterations", "seed", "config_hash"]
KICKSTART_COLUMNS = ["mode", "iteration", "alpha", "expected_q", "kl_to_prior", "seed", "config_hash"]

_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(64)
_GH_W = _GH_W / _GH_W.sum()


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            raise ContractError(f"refusing to write non-finite value {x!r}")
        return repr(x)
    return str(x)


def write_csv(path: Path, columns: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    _write_text(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc


def _write_json(path: Path, data) -> None:
    _write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def _run_jobs(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def expected_rewards(task: BanditTask, policy: GaussianPolicy, conditioning=None) -> np.ndarray:
    """Exact (quadrature) expected reward vector of a 1-D bandit policy."""
    mu = policy.mean(None, conditioning)[0]
    sd = math.exp(policy.log_std(None, conditioning)[0])
    return _GH_W @ task.reward(mu + sd * _GH_X)


# ---------------------------------------------------------------------------
# Sweeps


def _sweep_job(job):
    cfg, method, alpha, seed = job
    task = cfg.task.build()
    t = TradeOff.from_scalar(alpha)
    fm = FeatureMap(task.n_states, 0, 2)
    policy = cfg.initial_policy.build(fm)
    rng = RngStream(seed, f"sweep/{method}/{alpha!r}").generator()
    recs = em_iterate(task, cfg.method_config(method), t, cfg.iterations, rng, policy)
    final = recs[-1].policy if recs else policy
    return deterministic_returns(task, final, t), _mean_action(final, t)


def _mean_action(policy: GaussianPolicy, tradeoff: TradeOff) -> float:
    """First mean-action coordinate, in the start state for tabular tasks."""
    state = 0 if policy.feature_map.n_states else None
    return float(policy.mean(state, tradeoff if policy.feature_map.conditioned else None)[0])


def run_sweep(cfg: ExperimentConfig, out: Path, workers: int = 1) -> dict:
    """One policy per trade-off and seed; writes ``front.csv`` and ``summary.json``."""
    if cfg.method not in ("dime", "ls", "mompo"):
        raise ConfigError(f"sweep needs method dime, ls or mompo, got {cfg.method!r}")
    alphas = cfg.tradeoffs.alphas()
    jobs = [(cfg, cfg.method, float(a), s) for s in cfg.seeds for a in alphas]
    results = _run_jobs(_sweep_job, jobs, workers)
    rows = [
        [cfg.method, "per-tradeoff", a, 1.0 - a, r[0], r[1], act, cfg.iterations, s, config_hash(cfg)]
        for (_, _, a, s), (r, act) in zip(jobs, results)
    ]
    write_csv(Path(out) / "front.csv", FRONT_COLUMNS, rows)
    summary = _summarize(cfg, rows)
    _write_json(Path(out) / "summary.json", summary)
    return summary


def _summarize(cfg: ExperimentConfig, rows) -> dict:
    task = cfg.task.build()
    summary = {"config_hash": config_hash(cfg), "method": cfg.method, "seeds": {}}
    for seed in cfg.seeds:
        pts = np.array([[r[4], r[5]] for r in rows if r[8] == seed], dtype=float)
        entry = {"points": len(pts)}
        if isinstance(task, BanditTask):
            ref = np.asarray(task.reference)
            inside = pts[np.all(pts >= ref, axis=1)] if len(pts) else pts
            true = true_pareto_front(task, 201)
            entry["hypervolume"] = hypervolume_2d(inside, ref)
            entry["true_hypervolume"] = hypervolume_2d(true, ref)
            entry["coverage"] = front_coverage(pts, true, cfg.coverage_threshold)
        summary["seeds"][str(seed)] = entry
    return summary


# ---------------------------------------------------------------------------
# Conditioned training


def _conditioned_job(job):
    cfg, seed = job
    task = cfg.task.build()
    fm = FeatureMap(task.n_states, cfg.conditioned.degree, 2)
    policy = cfg.initial_policy.build(fm)
    rng = RngStream(seed, "conditioned").generator()
    recs = em_iterate(task, cfg.method_config("dime"), cfg.conditioned.distribution(), cfg.iterations, rng, policy)
    final = recs[-1].policy if recs else policy
    returns = [(deterministic_returns(task, final, t), _mean_action(final, t)) for t in cfg.tradeoffs.tradeoffs()]
    return returns, final


def run_conditioned(cfg: ExperimentConfig, out: Path, workers: int = 1) -> dict:
    """One trade-off-conditioned policy per seed, evaluated on the config grid."""
    if cfg.method != "dime-multi":
        raise ConfigError(f"conditioned training needs method dime-multi, got {cfg.method!r}")
    jobs = [(cfg, s) for s in cfg.seeds]
    results = _run_jobs(_conditioned_job, jobs, workers)
    rows, dump = [], {"config_hash": config_hash(cfg), "feature_map": None, "policies": {}}
    for (_, seed), (returns, policy) in zip(jobs, results):
        for a, (r, act) in zip(cfg.tradeoffs.alphas(), returns):
            rows.append(
                [
                    cfg.method,
                    "conditioned",
                    float(a),
                    1.0 - float(a),
                    r[0],
                    r[1],
                    act,
                    cfg.iterations,
                    seed,
                    config_hash(cfg),
                ]
            )
        dump["feature_map"] = policy.feature_map_id
        dump["policies"][str(seed)] = {
            "mean_params": policy.mean_params.tolist(),
            "log_std_params": policy.log_std_params.tolist(),
        }
    write_csv(Path(out) / "conditioned_front.csv", FRONT_COLUMNS, rows)
    _write_json(Path(out) / "conditioned_policy.json", dump)
    summary = _summarize(cfg, rows)
    _write_json(Path(out) / "conditioned_summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# Offline training


def offline_coefficients(method, alpha, batch_actions, q_data, samples, q_samples, eta):
    """Per-row actions and weights whose weighted log-likelihood is the negated loss.

    Row ``s`` holds the N policy samples followed by the dataset action. The
    returned arrays feed the trust-region projection directly.
    """
    b, n = q_samples.shape
    v = q_samples.mean(axis=1)
    adv = q_data - v
    coeffs = np.zeros((b, n + 1))
    if method == "offline-bc":
        coeffs[:, n] = 1.0
    elif method == "offline-crr":
        beta = 1e9 if alpha >= 1.0 else alpha / (1.0 - alpha)
        coeffs[:, n] = clipped_exp(adv / beta)[0]
    else:
        w = softmax_weights(q_samples, eta)
        coeffs[:, :n] = (1.0 - alpha) * w
        bc_w = clipped_exp(adv)[0] if method == "offline-dime-awbc" else np.ones(b)
        coeffs[:, n] = alpha * bc_w
    actions = np.concatenate([samples, batch_actions[:, None, :]], axis=1)
    return actions, coeffs


def _offline_job(job):
    cfg, method, alpha, seed, dataset_text = job
    task = cfg.task.build()
    data = OfflineDataset.from_csv(dataset_text)
    evaluator = evaluators_for(task)[cfg.offline.objective]
    fm = FeatureMap(task.n_states, 0, 2)
    policy = cfg.initial_policy.build(fm)
    # Shared across methods: equal trade-offs see identical minibatches.
    gen = RngStream(seed, f"offline/{alpha!r}").generator()
    n, bsz = cfg.improvement.sample_count, cfg.batch_size
    for _ in range(cfg.iterations):
        idx = gen.integers(len(data), size=bsz)
        states = data.batch.states[idx]
        acts = data.batch.actions[idx]
        phi = fm.batch(bsz, states if fm.n_states else None, None)
        mu, ls = policy.moments(phi)
        samples = mu[:, None, :] + np.exp(ls)[:, None, :] * gen.standard_normal((bsz, n, policy.action_dim))
        q_s = evaluator.q_values(policy, states, samples)
        q_d = evaluator.q_values(policy, states, acts[:, None, :])[:, 0]
        eta = solve_temperature(q_s, cfg.improvement.epsilon).eta if method.startswith("offline-dime") else 1.0
        actions, coeffs = offline_coefficients(method, alpha, acts, q_d, samples, q_s, eta)
        policy = _project(actions, coeffs, phi, policy, cfg.projection).policy
    return deterministic_returns(task, policy), float(policy.mean_params[0, 0])


def load_or_generate_dataset(cfg: ExperimentConfig, seed: int) -> OfflineDataset:
    if cfg.offline.dataset:
        try:
            return OfflineDataset.from_csv(Path(cfg.offline.dataset).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read dataset {cfg.offline.dataset}: {exc}") from exc
    behavior = BehaviorSpec(cfg.offline.behavior)
    return generate_offline_dataset(cfg.task.build(), behavior, cfg.offline.size, RngStream(seed, "dataset"))


def run_offline(cfg: ExperimentConfig, out: Path, workers: int = 1) -> list[list]:
    """Train every configured offline method over the trade-off grid."""
    methods = cfg.offline.methods or (cfg.method,)
    if any(m not in OFFLINE_METHODS for m in methods):
        raise ConfigError(f"offline runs need offline methods, got {list(methods)}")
    jobs = []
    datasets = {}
    for seed in cfg.seeds:
        data = load_or_generate_dataset(cfg, seed)
        datasets[seed] = data
        text = data.to_csv()
        for method in methods:
            alphas = [1.0] if method == "offline-bc" else [float(a) for a in cfg.tradeoffs.alphas()]
            jobs += [(cfg, method, a, seed, text) for a in alphas]
    results = _run_jobs(_offline_job, jobs, workers)
    rows = [
        [m, a, 1.0 - a, r[0], r[1], mean, cfg.iterations, s, config_hash(cfg)]
        for (_, m, a, s, _), (r, mean) in zip(jobs, results)
    ]
    write_csv(Path(out) / "offline.csv", OFFLINE_COLUMNS, rows)
    for seed, data in datasets.items():
        _write_text(Path(out) / f"dataset_seed{seed}.csv", data.to_csv())
    return rows


# ---------------------------------------------------------------------------
# Kickstarting


def imitation_threshold(task: BanditTask, prior: GaussianPolicy, objective: int) -> float:
    """Threshold 10% below the prior's own expected return."""
    r = float(expected_rewards(task, prior)[objective])
    return r - 0.1 * abs(r)


def kickstart_curve(cfg: ExperimentConfig, mode: str, alpha: float | None, seed: int) -> list[list]:
    """Per-iteration rows for one kickstarting run.

    ``alpha`` of ``None`` selects the learned trade-off.
    """
    task = cfg.task.build()
    if not isinstance(task, BanditTask):
        raise ConfigError("kickstarting is implemented for bandit tasks")
    ks = cfg.kickstart
    prior = ks.prior.build()
    k = ks.objective
    policy = cfg.initial_policy.build()
    if alpha is None:
        c = imitation_threshold(task, prior, k) if ks.threshold is None else ks.threshold
        state = KickstartConfig(alpha=ks.initial_alpha, learned=True, threshold=c, step_size=ks.step_size)
    else:
        state = KickstartConfig(alpha=alpha)
    evaluator = ObjectiveEvaluator("bandit-exact", task, k)
    ratio = ObjectiveEvaluator("log-density-ratio", task, prior=prior)
    gen = RngStream(seed, f"kickstart/{mode}/{alpha!r}").generator()
    n, bsz, eps = cfg.improvement.sample_count, cfg.batch_size, cfg.improvement.epsilon
    states = (0,) * bsz
    phi = np.ones((bsz, 1))
    rows = []
    for it in range(cfg.iterations):
        a = state.value
        eq = float(expected_rewards(task, policy)[k])
        rows.append([mode, it, a, eq, kl_gaussian(policy, prior).total, seed, config_hash(cfg)])
        mu, ls = policy.moments(phi)
        samples = mu[:, None, :] + np.exp(ls)[:, None, :] * gen.standard_normal((bsz, n, 1))
        q = evaluator.q_values(policy, states, samples)
        lr = ratio.q_values(policy, states, samples)
        if mode == "kickstart-ls":
            combined = (1.0 - a) * q + a * lr
            eta = solve_temperature(combined, eps).eta if np.ptp(combined) > 0 else 1.0
            w = kickstart_weights_ls(q, lr, a, eta)
        else:
            eta1 = solve_temperature(q, eps).eta
            eta2 = solve_temperature(lr, eps).eta if np.ptp(lr) > 0 else 1.0
            w = kickstart_weights_dime(q, lr, a, eta1, eta2)
        policy = _project(samples, w, phi, policy, cfg.projection).policy
        if state.learned:
            state = update_learned_tradeoff(state, eq)
    eq = float(expected_rewards(task, policy)[k])
    rows.append([mode, cfg.iterations, state.value, eq, kl_gaussian(policy, prior).total, seed, config_hash(cfg)])
    return rows


def _kickstart_job(job):
    cfg, mode, alpha, seed = job
    return kickstart_curve(cfg, mode, alpha, seed)


def run_kickstart(cfg: ExperimentConfig, out: Path, workers: int = 1) -> list[list]:
    """Learning curves for each fixed trade-off and, if enabled, the learned one."""
    if cfg.method not in ("kickstart-ls", "kickstart-dime"):
        raise ConfigError(f"kickstart needs method kickstart-ls or kickstart-dime, got {cfg.method!r}")
    schedules = [float(a) for a in cfg.kickstart.fixed_alphas] + ([None] if cfg.kickstart.learned else [])
    jobs = [(cfg, cfg.method, a, s) for s in cfg.seeds for a in schedules]
    results = _run_jobs(_kickstart_job, jobs, workers)
    rows = []
    for (_, _, a, _), curve in zip(jobs, results):
        label = "learned" if a is None else f"fixed-{a!r}"
        rows += [[label, *r[1:]] for r in curve]
    write_csv(Path(out) / "kickstart.csv", KICKSTART_COLUMNS, rows)
    return rows


# ---------------------------------------------------------------------------
# Post-processing


def eval_front(cfg: ExperimentConfig, front_csv: Path, out: Path) -> dict:
    """Hypervolume and coverage of an existing front CSV, per method and seed."""
    task = cfg.task.build()
    if not isinstance(task, BanditTask):
        raise ConfigError("eval-front needs a bandit task with a known front")
    try:
        rows = read_csv(front_csv)
    except OSError as exc:
        raise ConfigError(f"cannot read {front_csv}: {exc}") from exc
    true = true_pareto_front(task, 201)
    ref = np.asarray(task.reference)
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["method"], r["provenance"], r["seed"]), []).append([float(r["obj_1"]), float(r["obj_2"])])
    result = {"config_hash": config_hash(cfg), "true_hypervolume": hypervolume_2d(true, ref), "fronts": []}
    for (method, prov, seed), pts in sorted(groups.items()):
        front = ParetoFront([FrontPoint((), tuple(p)) for p in pts], task.reference)
        result["fronts"].append(
            {
                "method": method,
                "provenance": prov,
                "seed": seed,
                "hypervolume": front.hypervolume(),
                "coverage": front.coverage(true, cfg.coverage_threshold),
                "nondominated": len(front.nondominated()),
            }
        )
    _write_json(Path(out) / "eval_front.json", result)
    return result


def plot_data(cfg: ExperimentConfig, out: Path) -> list[str]:
    """Per-figure CSVs from whatever results exist in ``out``.

    ``plot_fronts.csv``: achieved and true fronts in reward space.
    ``plot_conditioned.csv``: conditioned vs per-trade-off objective values.
    ``plot_kickstart.csv``: expected return and trade-off per iteration.
    """
    out = Path(out)
    written = []
    task = cfg.task.build()
    fronts = []
    for name in ("front.csv", "conditioned_front.csv"):
        if (out / name).exists():
            fronts += read_csv(out / name)
    if fronts or isinstance(task, BanditTask):
        rows = [
            [r["method"], r["provenance"], r["seed"], float(r["alpha_1"]), float(r["obj_1"]), float(r["obj_2"])]
            for r in fronts
        ]
        if isinstance(task, BanditTask):
            rows += [["true", "analytic", "", "", p[0], p[1]] for p in true_pareto_front(task, 101)]
        write_csv(out / "plot_fronts.csv", ["series", "provenance", "seed", "alpha_1", "obj_1", "obj_2"], rows)
        written.append("plot_fronts.csv")
    if fronts:
        rows = [[r["provenance"], r["seed"], float(r["alpha_1"]), float(r["obj_1"]), float(r["obj_2"])] for r in fronts]
        write_csv(out / "plot_conditioned.csv", ["provenance", "seed", "alpha_1", "obj_1", "obj_2"], rows)
        written.append("plot_conditioned.csv")
    if (out / "kickstart.csv").exists():
        rows = [
            [r["mode"], r["seed"], int(r["iteration"]), float(r["alpha"]), float(r["expected_q"])]
            for r in read_csv(out / "kickstart.csv")
        ]
        write_csv(out / "plot_kickstart.csv", ["mode", "seed", "iteration", "alpha", "expected_q"], rows)
        written.append("plot_kickstart.csv")
    return written


RUNNERS = {
    "sweep": run_sweep,
    "conditioned": run_conditioned,
    "offline": run_offline,
    "kickstart": run_kickstart,
}

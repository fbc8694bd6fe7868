"""Experiment loops: fixed-distribution and on-policy fitted Q-iteration.

A run iterates one operator with exact expectations (one iteration is a full
operator application), watches ``||q_tot||_inf`` against ``K * V_max`` and the
sup-norm step against a tolerance, and logs every iteration.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .distributions import (JointDistribution, NotFactorizedError, ProductPolicy, epsilon_greedy, eta_mixture,
                            from_product, product_factors, uniform_distribution)
from .env import LatentMmdp, RichObservationLayer, joint_action_table, resolve_obs
from .igm import (SupportError, greedy_is_optimal, igm_decompose, igm_iterate, individual_greedy_joint,
                  lex_argmax, optimal_joint_q)
from .lvf import FactoredQ, bellman_target, fit_error, lvf_iterate

OPERATORS = ("lvf-closed-form", "lvf-numeric", "igm")
DIST_KINDS = ("uniform", "epsilon-greedy", "eta")
STATUSES = ("converged", "diverged", "cap-reached")
SWEEP_PARAMS = ("epsilon", "eta", "gamma")


class DivergenceError(FloatingPointError):
    """Values overflowed to a non-finite number before the threshold test could fire."""


@dataclass(frozen=True, eq=False)
class RunConfig:
    """Inputs of one run.

    ``dist`` is a kind name (``uniform``, ``epsilon-greedy``, ``eta``), a
    ``ProductPolicy`` or a ready ``JointDistribution``. A fixed epsilon-greedy
    distribution is built around the greedy policy of the initial values.
    """

    env: LatentMmdp
    operator: str = "lvf-closed-form"
    dist: object = "uniform"
    obs: RichObservationLayer | None = None
    epsilon: float = 1.0
    eta: float = 0.0
    gamma: float | None = None
    iters: int = 300
    tol: float = 1e-8
    k: float = 10.0
    seed: int = 0
    init: str = "zeros"
    on_policy: bool = False

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown operator {self.operator!r}; expected one of {OPERATORS}")
        if isinstance(self.dist, str) and self.dist not in DIST_KINDS:
            raise ValueError(f"unknown distribution {self.dist!r}; expected one of {DIST_KINDS}")
        if self.iters < 1:
            raise ValueError("iteration cap must be >= 1")
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if not self.k > 1:
            raise ValueError("divergence multiplier K must exceed 1")
        if self.init not in ("zeros", "random"):
            raise ValueError("init must be 'zeros' or 'random'")
        if self.gamma is not None and not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.gamma}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @property
    def resolved_env(self) -> LatentMmdp:
        return self.env if self.gamma is None else self.env.with_discount(self.gamma)


@dataclass(frozen=True)
class IterationRecord:
    t: int
    q_tot_inf_norm: float
    bellman_residual: float
    step: float
    greedy: tuple  # flat joint action per joint observation
    greedy_optimal: bool
    wall_clock: float
    q_tot: np.ndarray = field(repr=False, compare=False)


@dataclass
class IterationLog:
    records: list = field(default_factory=list)
    status: str = "running"
    threshold: float = float("inf")
    final_q: object = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def last(self) -> IterationRecord:
        return self.records[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


def _greedy_joint(operator: str, q, obs: RichObservationLayer, n: int, m: int) -> np.ndarray:
    if operator == "igm":
        return lex_argmax(q, n, m)
    return individual_greedy_joint(q, obs)


def _q_tot(q, obs) -> np.ndarray:
    return q.q_tot(obs) if isinstance(q, FactoredQ) else q


def initial_values(config: RunConfig, env: LatentMmdp, obs: RichObservationLayer):
    """``Q^(0)``: zeros by default, otherwise uniform in ``[-1, 1]`` from the config seed."""
    rng = np.random.default_rng(config.seed)
    if config.operator == "igm":
        shape = (obs.num_joint_obs, env.num_joint_actions)
        return np.zeros(shape) if config.init == "zeros" else rng.uniform(-1, 1, size=shape)
    if config.init == "zeros":
        return FactoredQ.zeros(env, obs)
    return FactoredQ.random(env, rng, obs=obs)


def build_distribution(config: RunConfig, env: LatentMmdp, obs: RichObservationLayer, q0) -> JointDistribution:
    d = config.dist
    if isinstance(d, JointDistribution):
        if d.table.shape != (obs.num_joint_obs, env.num_joint_actions):
            raise ValueError(f"distribution table has shape {d.table.shape}, expected "
                             f"{(obs.num_joint_obs, env.num_joint_actions)}")
        return d
    if isinstance(d, ProductPolicy):
        return from_product(d, obs)
    if d == "uniform":
        return uniform_distribution(env, obs)
    if d == "eta":
        return eta_mixture(env, config.eta, obs)
    f = q0 if isinstance(q0, FactoredQ) else igm_decompose(q0, env.num_agents, env.num_actions, obs)
    return epsilon_greedy(f, config.epsilon, obs)


def check_compatible(config: RunConfig, env: LatentMmdp, obs: RichObservationLayer,
                     dist: JointDistribution) -> None:
    """Fail before iterating when the operator cannot use the distribution."""
    if config.operator == "lvf-closed-form":
        if not dist.is_positive:
            j = np.argwhere(dist.table <= 0)[0]
            raise NotFactorizedError(
                f"closed-form LVF needs positive data; row {j[0]} joint action {j[1]} has zero mass "
                "(use operator lvf-numeric)")
        product_factors(dist, env, obs)
    elif config.operator == "igm" and not dist.is_positive:
        j = np.argwhere(dist.table <= 0)[0]
        raise SupportError(f"IGM fit needs data on every joint action; row {j[0]} joint action {j[1]} "
                           "has zero mass")


def _apply(config: RunConfig, env, obs, dist, q):
    if config.operator == "igm":
        return igm_iterate(env, obs, dist, q)
    solver = "closed-form" if config.operator == "lvf-closed-form" else "numeric"
    return lvf_iterate(env, obs, dist, q, solver=solver)


def _loop(config: RunConfig, next_dist) -> IterationLog:
    env = config.resolved_env
    obs = resolve_obs(env, config.obs)
    n, m = env.num_agents, env.num_actions
    q = initial_values(config, env, obs)
    q_star = optimal_joint_q(env, obs)
    log = IterationLog(threshold=config.k * env.v_max)
    prev = _q_tot(q, obs)
    start = time.perf_counter()
    for t in range(1, config.iters + 1):
        dist = next_dist(env, obs, q)
        y = bellman_target(env, obs, q)
        try:
            q = _apply(config, env, obs, dist, q)
        except ValueError as e:
            if "non-finite" in str(e):
                raise DivergenceError(f"iteration {t}: values overflowed ({e})") from e
            raise
        cur = _q_tot(q, obs)
        if not np.all(np.isfinite(cur)):
            raise DivergenceError(f"iteration {t}: q_tot has non-finite entries")
        greedy = _greedy_joint(config.operator, q, obs, n, m)
        rec = IterationRecord(
            t=t,
            q_tot_inf_norm=float(np.max(np.abs(cur))),
            bellman_residual=fit_error(obs, dist, y, cur),
            step=float(np.max(np.abs(cur - prev))),
            greedy=tuple(int(g) for g in greedy),
            greedy_optimal=bool(np.all(greedy_is_optimal(q_star, greedy))),
            wall_clock=time.perf_counter() - start,
            q_tot=cur,
        )
        log.records.append(rec)
        prev = cur
        if rec.q_tot_inf_norm > log.threshold:
            log.status = "diverged"
            break
        if rec.step <= config.tol:
            log.status = "converged"
            break
    else:
        log.status = "cap-reached"
    log.final_q = q
    return log


def run_fqi(config: RunConfig) -> IterationLog:
    """Iterate the configured operator under one fixed data distribution."""
    if config.on_policy:
        return run_onpolicy_fqi(config)
    env = config.resolved_env
    obs = resolve_obs(env, config.obs)
    dist = build_distribution(config, env, obs, initial_values(config, env, obs))
    check_compatible(config, env, obs, dist)
    return _loop(config, lambda env, obs, q: dist)


def run_onpolicy_fqi(config: RunConfig) -> IterationLog:
    """Rebuild the epsilon-greedy product distribution from the current values before every step."""
    if config.operator == "igm":
        raise ValueError("on-policy iteration is defined for the LVF operators only")
    if not 0.0 < config.epsilon <= 1.0:
        raise ValueError(f"on-policy iteration needs epsilon in (0, 1], got {config.epsilon}; "
                         "epsilon = 0 leaves joint actions without data")
    return _loop(config, lambda env, obs, q: epsilon_greedy(q, config.epsilon, obs))


def run(config: RunConfig) -> IterationLog:
    return run_onpolicy_fqi(config) if config.on_policy else run_fqi(config)


# ---------------------------------------------------------------------------
# Stability box around the optimal values


def action_irrelevant_states(env: LatentMmdp) -> np.ndarray:
    """States whose reward and transition rows are identical for every joint action."""
    r, P = env.reward, env.transition
    same_r = np.all(r == r[:, :1], axis=1)
    same_p = np.all(P == P[:, :1, :], axis=(1, 2))
    return same_r & same_p


def unique_optimal_policy(env: LatentMmdp, obs: RichObservationLayer | None = None,
                          gap_tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """``(pi_star, v_star)`` per joint observation, or raise if the optimum is not unique.

    States where actions change nothing are exempt; their optimal action is
    taken to be the lexicographically first one.
    """
    obs = resolve_obs(env, obs)
    q = optimal_joint_q(env, obs)
    pi = lex_argmax(q, env.num_agents, env.num_actions)
    v = q.max(axis=1)
    exempt = action_irrelevant_states(env)[obs.joint_state]
    ordered = np.sort(q, axis=1)
    gaps = ordered[:, -1] - ordered[:, -2] if q.shape[1] > 1 else np.full(len(q), np.inf)
    bad = np.flatnonzero(~exempt & (gaps <= gap_tol * max(1.0, env.v_max)))
    if bad.size:
        raise ValueError(f"optimal policy is not unique at joint observation {bad[0]} "
                         f"(gap {gaps[bad[0]]:.3g}); the stability check assumes a unique optimal policy")
    return pi, v


def sample_box_point(env: LatentMmdp, obs: RichObservationLayer, pi_star: np.ndarray, v_star: np.ndarray,
                     delta: float, rng: np.random.Generator, max_gap: float = 1.0) -> FactoredQ:
    """A ``FactoredQ`` with greedy policy ``pi_star`` and ``|q_tot(x, pi_star) - V*| <= delta``.

    Agent 0 carries ``V*(s) + d_s`` at its optimal action; the other agents
    carry zero there; every non-optimal entry sits a random gap below.
    """
    n, m = env.num_agents, env.num_actions
    acts = joint_action_table(n, m)
    S = env.num_states
    first = np.array([np.flatnonzero(obs.joint_state == s)[0] for s in range(S)])
    d = rng.uniform(-delta, delta, size=S) if delta > 0 else np.zeros(S)
    best = acts[pi_star[first]]  # (S, n)
    tables = []
    for i, k in enumerate(obs.obs_counts):
        s_of = obs.obs_state[i]
        top = (v_star[first[s_of]] + d[s_of]) if i == 0 else np.zeros(k)
        gap = rng.uniform(1e-3, max_gap, size=(k, m))
        t = top[:, None] - gap
        t[np.arange(k), best[s_of, i]] = top
        tables.append(t)
    return FactoredQ(tuple(tables))


@dataclass
class BoxReport:
    trials: int
    in_box: int
    policy_failures: int
    worst_excursion: float
    pi_star: tuple
    v_star: tuple

    @property
    def fraction(self) -> float:
        return self.in_box / self.trials if self.trials else 1.0


def stability_box_check(env: LatentMmdp, delta: float, epsilon: float, trials: int, seed: int,
                        obs: RichObservationLayer | None = None) -> BoxReport:
    """Apply one on-policy LVF step to random points of the box and count those that stay."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if not 0.0 < epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    obs = resolve_obs(env, obs)
    pi, v = unique_optimal_policy(env, obs)
    # where actions change nothing, exact ties make any greedy choice optimal
    checked = ~action_irrelevant_states(env)[obs.joint_state]
    rng = np.random.default_rng(seed)
    rows = np.arange(obs.num_joint_obs)
    in_box = failures = 0
    worst = 0.0
    for _ in range(trials):
        q = sample_box_point(env, obs, pi, v, delta, rng)
        nxt = lvf_iterate(env, obs, epsilon_greedy(q, epsilon, obs), q)
        excursion = float(np.max(np.abs(nxt.q_tot(obs)[rows, pi] - v)))
        policy_ok = bool(np.array_equal(individual_greedy_joint(nxt, obs)[checked], pi[checked]))
        worst = max(worst, excursion)
        failures += not policy_ok
        in_box += policy_ok and excursion <= delta
    return BoxReport(trials, in_box, failures, worst, tuple(int(p) for p in pi), tuple(float(x) for x in v))


# ---------------------------------------------------------------------------
# Sweeps and CSV output


def derive_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


@dataclass
class SweepEntry:
    value: float
    seed: int
    log: IterationLog | None
    error: str | None = None


def sweep_config(config: RunConfig, param: str, value: float, seed: int) -> RunConfig:
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")
    changes = {"seed": seed, param: value}
    if param == "eta":
        changes["dist"] = "eta"
    return config.replace(**changes)


def sweep(config: RunConfig, param: str, values) -> list[SweepEntry]:
    """Run every value independently; failures are recorded, not raised."""
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")
    out = []
    for idx, value in enumerate(values):
        seed = derive_seed(config.seed, idx)
        try:
            log = run(sweep_config(config, param, value, seed))
            out.append(SweepEntry(value, seed, log))
        except (ValueError, FloatingPointError) as e:
            out.append(SweepEntry(value, seed, None, f"{type(e).__name__}: {e}"))
    return out


def _fmt(x: float) -> str:
    return format(x, ".17g")


def _open_for_write(path):
    try:
        return open(path, "w", newline="", encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


CSV_HEADER = ("iter", "q_tot_inf_norm", "bellman_residual", "greedy_optimal", "status")


def emit_csv(log: IterationLog, path) -> None:
    """One row per iteration; the status column reads ``running`` until the terminal row."""
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        last = len(log.records) - 1
        for k, r in enumerate(log.records):
            w.writerow((r.t, _fmt(r.q_tot_inf_norm), _fmt(r.bellman_residual),
                        str(r.greedy_optimal).lower(), log.status if k == last else "running"))


SUMMARY_HEADER = ("value", "status", "final_q_tot_inf_norm", "iterations", "greedy_optimal", "error")


def summary_rows(entries: list[SweepEntry]) -> list[tuple]:
    rows = []
    for e in entries:
        if e.log is None or not e.log.records:
            rows.append((_fmt(e.value), "error", "", "", "", e.error or "empty log"))
        else:
            last = e.log.last
            rows.append((_fmt(e.value), e.log.status, _fmt(last.q_tot_inf_norm), str(last.t),
                         str(last.greedy_optimal).lower(), ""))
    return rows


def emit_summary_csv(entries: list[SweepEntry], path) -> None:
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerows(summary_rows(entries))

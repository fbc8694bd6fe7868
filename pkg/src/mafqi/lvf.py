"""Fitted Q-iteration under linear value factorization (``Q_tot = sum_i Q_i``).

The projection onto the additive class has a closed form when the data
distribution is a positive product of per-agent policies: each individual
value is the conditional mean target given the agent's own observation and
action, minus ``(n-1)/n`` of the state's mean target (the counterfactual
baseline). Other distributions go through the numeric least-squares path.

Array kernels accept arbitrary leading batch axes so that random searches
over many value tables stay vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .distributions import JointDistribution, NotFactorizedError, product_factors
from .env import LatentMmdp, RichObservationLayer, joint_action_table, resolve_obs
from .lstsq import WlsInstance, weighted_lstsq_solve


@dataclass(frozen=True, eq=False)
class FactoredQ:
    """Individual value tables; agent ``i``'s table has shape ``(num_obs_i, m)``."""

    tables: tuple

    def __post_init__(self):
        tables = []
        for i, t in enumerate(self.tables):
            t = np.array(t, dtype=float)
            if t.ndim != 2:
                raise ValueError(f"tables[{i}] must be (observations, actions)")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"tables[{i}] has non-finite entries")
            t.flags.writeable = False
            tables.append(t)
        if len({t.shape[1] for t in tables}) != 1:
            raise ValueError("heterogeneous action counts are not supported")
        object.__setattr__(self, "tables", tuple(tables))

    @classmethod
    def zeros(cls, env: LatentMmdp, obs: RichObservationLayer | None = None) -> "FactoredQ":
        obs = resolve_obs(env, obs)
        return cls(tuple(np.zeros((k, env.num_actions)) for k in obs.obs_counts))

    @classmethod
    def random(cls, env: LatentMmdp, rng: np.random.Generator, low: float = -1.0, high: float = 1.0,
               obs: RichObservationLayer | None = None) -> "FactoredQ":
        obs = resolve_obs(env, obs)
        return cls(tuple(rng.uniform(low, high, size=(k, env.num_actions)) for k in obs.obs_counts))

    @property
    def num_agents(self) -> int:
        return len(self.tables)

    @property
    def num_actions(self) -> int:
        return self.tables[0].shape[1]

    def q_tot(self, obs: RichObservationLayer | None = None) -> np.ndarray:
        """Joint values, shape ``(joint observations, m**n)``."""
        if obs is None:
            from .env import identity_layer
            obs = identity_layer(self.num_agents, self.tables[0].shape[0])
        return q_tot_array(self.tables, obs)

    def greedy(self) -> tuple[np.ndarray, ...]:
        """Per agent, the argmax action at each observation (lowest index on ties)."""
        return tuple(np.argmax(t, axis=1) for t in self.tables)


@dataclass(frozen=True, eq=False)
class ResidueSpec:
    """Per-agent offsets ``w_i(x_i)`` that must cancel on every joint observation."""

    offsets: tuple

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(np.array(w, dtype=float) for w in self.offsets))

    @classmethod
    def zeros(cls, obs: RichObservationLayer) -> "ResidueSpec":
        return cls(tuple(np.zeros(k) for k in obs.obs_counts))

    @classmethod
    def random(cls, obs: RichObservationLayer, rng: np.random.Generator, scale: float = 1.0) -> "ResidueSpec":
        """Per state, draw agent offsets summing to zero and share them across that state's observations."""
        n, S = obs.num_agents, obs.num_states
        c = rng.uniform(-scale, scale, size=(S, n))
        c[:, -1] = -c[:, :-1].sum(axis=1)
        return cls(tuple(c[obs.obs_state[i], i] for i in range(n)))

    def violation(self, obs: RichObservationLayer) -> float:
        total = np.zeros(obs.num_joint_obs)
        for i, w in enumerate(self.offsets):
            total += w[obs.joint_obs[:, i]]
        return float(np.max(np.abs(total))) if total.size else 0.0

    def check(self, obs: RichObservationLayer, tol: float = 1e-12) -> None:
        if tuple(len(w) for w in self.offsets) != obs.obs_counts:
            raise ValueError("residue offsets do not match the observation layer")
        v = self.violation(obs)
        if v > tol:
            raise ValueError(f"residue offsets do not cancel on some joint observation (max |sum| = {v:.3g})")


def q_tot_array(tables, obs: RichObservationLayer) -> np.ndarray:
    """Sum of individual tables on every (joint observation, joint action); batch axes allowed."""
    n, m = len(tables), tables[0].shape[-1]
    acts = joint_action_table(n, m)
    out = 0.0
    for i, t in enumerate(tables):
        out = out + t[..., obs.joint_obs[:, i], :][..., acts[:, i]]
    return out


def _state_onehot(obs: RichObservationLayer) -> np.ndarray:
    return (obs.joint_state[:, None] == np.arange(obs.num_states)[None, :]).astype(float)


def target_from_joint(env: LatentMmdp, obs: RichObservationLayer, q_tot: np.ndarray) -> np.ndarray:
    """``y(x, a) = r(s, a) + gamma * sum_s' P(s'|s,a) E_{x'|s'}[max_a' q_tot(x', a')]``."""
    v = q_tot.max(axis=-1)
    v_state = (v * obs.joint_weight) @ _state_onehot(obs)
    s = obs.joint_state
    future = np.einsum("jas,...s->...ja", env.transition[s], v_state)
    return env.reward[s] + env.discount * future


def bellman_target(env: LatentMmdp, obs: RichObservationLayer | None, q) -> np.ndarray:
    """One-step expected TD target for a ``FactoredQ`` or a joint value table."""
    obs = resolve_obs(env, obs)
    joint = q_tot_array(q.tables, obs) if isinstance(q, FactoredQ) else np.asarray(q, dtype=float)
    if joint.shape[-2:] != (obs.num_joint_obs, env.num_joint_actions):
        raise ValueError(f"value table has shape {joint.shape}, expected "
                         f"{(obs.num_joint_obs, env.num_joint_actions)}")
    return target_from_joint(env, obs, joint)


def data_weights(obs: RichObservationLayer, dist: JointDistribution) -> np.ndarray:
    """Within-state joint weight ``p(x | s) p_D(a | x)``; sums to 1 per state."""
    if dist.table.shape[0] != obs.num_joint_obs:
        raise ValueError(f"distribution has {dist.table.shape[0]} rows, layer has "
                         f"{obs.num_joint_obs} joint observations")
    return obs.joint_weight[:, None] * dist.table


def _require_closed_form(env, obs, dist) -> None:
    if np.any(np.concatenate(obs.obs_state) < 0):
        raise ValueError("observation layer has observations that are never emitted")
    if not dist.is_positive:
        bad = np.argwhere(dist.table <= 0)[0]
        raise NotFactorizedError(
            f"closed form needs every joint action to have positive probability (exploratory data); "
            f"row {bad[0]} joint action {bad[1]} has zero mass; use the numeric solver")
    product_factors(dist, env, obs)


class _Terms(NamedTuple):
    evaluation: tuple  # per agent, (..., X_i, m)
    baseline: np.ndarray  # (..., S)
    weight: float


def _credit_terms(env: LatentMmdp, obs: RichObservationLayer, dist: JointDistribution, y: np.ndarray) -> _Terms:
    n, m = env.num_agents, env.num_actions
    acts = env.joint_actions
    W = data_weights(obs, dist)
    Wy = W * y
    baseline = np.einsum("js,...ja->...s", _state_onehot(obs), Wy)
    evaluation = []
    for i, k in enumerate(obs.obs_counts):
        O = (obs.joint_obs[:, i][:, None] == np.arange(k)[None, :]).astype(float)
        C = (acts[:, i][:, None] == np.arange(m)[None, :]).astype(float)
        num = np.einsum("jx,...ja,ak->...xk", O, Wy, C)
        den = O.T @ W @ C
        evaluation.append(num / den)
    return _Terms(tuple(evaluation), baseline, (n - 1) / n)


def _assemble(obs: RichObservationLayer, terms: _Terms, residue: ResidueSpec | None) -> tuple:
    tables = []
    for i, ev in enumerate(terms.evaluation):
        base = terms.baseline[..., obs.obs_state[i]]
        t = ev - terms.weight * base[..., None]
        if residue is not None:
            t = t + residue.offsets[i][:, None]
        tables.append(t)
    return tuple(tables)


def lvf_project(env: LatentMmdp, obs: RichObservationLayer | None, dist: JointDistribution,
                target: np.ndarray, residue: ResidueSpec | None = None) -> FactoredQ:
    """Closed-form weighted least-squares projection of ``target`` onto the additive class."""
    obs = resolve_obs(env, obs)
    _require_closed_form(env, obs, dist)
    if residue is not None:
        residue.check(obs)
    y = np.asarray(target, dtype=float)
    return FactoredQ(_assemble(obs, _credit_terms(env, obs, dist, y), residue))


class Credit(NamedTuple):
    evaluation: float
    baseline: float
    weight: float


def credit_decomposition(env: LatentMmdp, obs: RichObservationLayer | None, dist: JointDistribution,
                         target: np.ndarray, agent: int, observation: int, action: int) -> Credit:
    """Split ``Q_i(x_i, a_i)`` into its evaluation and weighted counterfactual baseline."""
    obs = resolve_obs(env, obs)
    _require_closed_form(env, obs, dist)
    terms = _credit_terms(env, obs, dist, np.asarray(target, dtype=float))
    state = obs.decode(agent, observation)
    return Credit(float(terms.evaluation[agent][observation, action]),
                  float(terms.baseline[state]), terms.weight)


def credit_rows(env: LatentMmdp, obs: RichObservationLayer | None, dist: JointDistribution,
                target: np.ndarray, residue: ResidueSpec | None = None) -> list[tuple]:
    """All decompositions as ``(agent, observation, action, evaluation, baseline, weight, residue, q_i)``."""
    obs = resolve_obs(env, obs)
    _require_closed_form(env, obs, dist)
    terms = _credit_terms(env, obs, dist, np.asarray(target, dtype=float))
    q = _assemble(obs, terms, residue)
    rows = []
    for i, k in enumerate(obs.obs_counts):
        for x in range(k):
            base = float(terms.baseline[obs.obs_state[i][x]])
            w = 0.0 if residue is None else float(residue.offsets[i][x])
            for a in range(env.num_actions):
                rows.append((i, x, a, float(terms.evaluation[i][x, a]), base, terms.weight, w, float(q[i][x, a])))
    return rows


@dataclass(frozen=True)
class NumericFit:
    q: FactoredQ
    residual: float
    off_support: tuple  # per agent, boolean (num_obs_i, m): entries no positive-weight row touches


def lvf_fit_numeric(env: LatentMmdp, obs: RichObservationLayer | None, dist: JointDistribution,
                    target: np.ndarray) -> NumericFit:
    """Minimum-norm additive fit for any distribution, solved state by state."""
    obs = resolve_obs(env, obs)
    n, m = env.num_agents, env.num_actions
    acts = env.joint_actions
    W = data_weights(obs, dist)
    y = np.asarray(target, dtype=float)
    tables = [np.zeros((k, m)) for k in obs.obs_counts]
    touched = [np.zeros((k, m), dtype=bool) for k in obs.obs_counts]
    residual = 0.0
    for s in range(env.num_states):
        rows = np.flatnonzero(obs.joint_state == s)
        own = [np.flatnonzero(obs.obs_state[i] == s) for i in range(n)]
        offsets = np.cumsum([0] + [len(o) * m for o in own])
        design = np.zeros((len(rows) * env.num_joint_actions, offsets[-1]))
        r = np.arange(design.shape[0])
        for i in range(n):
            local = np.searchsorted(own[i], obs.joint_obs[rows, i])
            col = offsets[i] + (local[:, None] * m + acts[None, :, i]).ravel()
            design[r, col] = 1.0
        w, b = W[rows].ravel(), y[rows].ravel()
        sol = weighted_lstsq_solve(WlsInstance(w, b), design)
        residual += sol.residual
        support = (w[:, None] * design).sum(axis=0) > 0
        for i in range(n):
            block = slice(offsets[i], offsets[i + 1])
            tables[i][own[i]] = sol.x[block].reshape(len(own[i]), m)
            touched[i][own[i]] = support[block].reshape(len(own[i]), m)
    return NumericFit(FactoredQ(tuple(tables)), residual, tuple(~t for t in touched))


def fit_error(obs: RichObservationLayer, dist: JointDistribution, target: np.ndarray, q_tot: np.ndarray) -> float:
    """Weighted squared error of a fit, summed over states (each state's weights sum to 1)."""
    return float(np.sum(data_weights(obs, dist) * (np.asarray(target) - q_tot) ** 2))


SOLVERS = ("closed-form", "numeric")


def lvf_iterate(env: LatentMmdp, obs: RichObservationLayer | None, dist: JointDistribution, q: FactoredQ,
                residue: ResidueSpec | None = None, solver: str = "closed-form") -> FactoredQ:
    """One application of the empirical LVF Bellman operator."""
    obs = resolve_obs(env, obs)
    y = bellman_target(env, obs, q)
    if solver == "closed-form":
        return lvf_project(env, obs, dist, y, residue)
    if solver == "numeric":
        if residue is not None:
            raise ValueError("the numeric solver returns the minimum-norm fit; residues are closed-form only")
        return lvf_fit_numeric(env, obs, dist, y).q
    raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")


class ContractionWitness(NamedTuple):
    ratio: float
    q: FactoredQ
    q_prime: FactoredQ


def contraction_ratio_search(env: LatentMmdp, obs: RichObservationLayer | None, dist: JointDistribution,
                             num_pairs: int, seed: int, batch: int = 2000) -> ContractionWitness:
    """Largest observed ``|T Q - T Q'|_inf / |Q_tot - Q'_tot|_inf`` over random pairs in ``[-1, 1]``."""
    obs = resolve_obs(env, obs)
    _require_closed_form(env, obs, dist)
    rng = np.random.default_rng(seed)
    m = env.num_actions
    best = (-np.inf, None, None)
    done = 0
    while done < num_pairs:
        b = min(batch, num_pairs - done)
        qa = tuple(rng.uniform(-1, 1, size=(b, k, m)) for k in obs.obs_counts)
        qb = tuple(rng.uniform(-1, 1, size=(b, k, m)) for k in obs.obs_counts)
        done += b
        ta, tb = q_tot_array(qa, obs), q_tot_array(qb, obs)
        denom = np.abs(ta - tb).max(axis=(-2, -1))
        out_a = q_tot_array(_assemble(obs, _credit_terms(env, obs, dist, target_from_joint(env, obs, ta)), None), obs)
        out_b = q_tot_array(_assemble(obs, _credit_terms(env, obs, dist, target_from_joint(env, obs, tb)), None), obs)
        numer = np.abs(out_a - out_b).max(axis=(-2, -1))
        valid = denom > 0
        ratio = np.where(valid, numer / np.where(valid, denom, 1.0), -np.inf)
        k = int(np.argmax(ratio))
        if ratio[k] > best[0]:
            best = (float(ratio[k]), FactoredQ(tuple(t[k] for t in qa)), FactoredQ(tuple(t[k] for t in qb)))
    if best[1] is None:
        raise ValueError("no pair with distinct joint values was sampled")
    return ContractionWitness(*best)

"""Exact joint-action data distributions ``p_D(a | x)``.

Tables are indexed by joint observation (one row per entry of
``RichObservationLayer.joint_obs``; under the identity layer, one row per
state) and flat joint action.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .env import LatentMmdp, RichObservationLayer, identity_layer, joint_action_table, resolve_obs

SUM_TOL = 1e-12
FACTOR_TOL = 1e-10


class NotFactorizedError(ValueError):
    """Raised when a closed-form path receives a distribution it cannot use."""


@dataclass(frozen=True, eq=False)
class ProductPolicy:
    """Per agent, a ``(num_observations, m)`` table of action probabilities."""

    probs: tuple
    require_positive: bool = False

    def __post_init__(self):
        tables = []
        for i, p in enumerate(self.probs):
            p = np.array(p, dtype=float)
            if p.ndim != 2:
                raise ValueError(f"probs[{i}] must be (observations, actions)")
            if np.any(p < 0) or not np.all(np.abs(p.sum(axis=1) - 1.0) <= SUM_TOL):
                raise ValueError(f"probs[{i}]: rows must be non-negative and sum to 1")
            if self.require_positive and np.any(p <= 0):
                raise ValueError(f"probs[{i}]: zero-probability action in an exploratory policy")
            p.flags.writeable = False
            tables.append(p)
        if len({p.shape[1] for p in tables}) != 1:
            raise ValueError("heterogeneous action counts are not supported")
        object.__setattr__(self, "probs", tuple(tables))

    @property
    def num_agents(self) -> int:
        return len(self.probs)

    @property
    def num_actions(self) -> int:
        return self.probs[0].shape[1]

    @property
    def is_positive(self) -> bool:
        return all(np.all(p > 0) for p in self.probs)


@dataclass(frozen=True, eq=False)
class JointDistribution:
    table: np.ndarray
    factorized_origin: bool
    policy: ProductPolicy | None = None

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim != 2:
            raise ValueError("table must be (joint observations, joint actions)")
        if np.any(t < 0):
            raise ValueError("table has negative entries")
        sums = t.sum(axis=1)
        bad = np.flatnonzero(~(np.abs(sums - 1.0) <= SUM_TOL))
        if bad.size:
            raise ValueError(f"table[{bad[0]}] sums to {sums[bad[0]]!r}, expected 1")
        t.flags.writeable = False
        object.__setattr__(self, "table", t)

    @property
    def is_positive(self) -> bool:
        return bool(np.all(self.table > 0))


def _product_table(policy: ProductPolicy, obs: RichObservationLayer) -> np.ndarray:
    n, m = policy.num_agents, policy.num_actions
    acts = joint_action_table(n, m)
    table = np.ones((obs.num_joint_obs, m**n))
    for i, p in enumerate(policy.probs):
        table *= p[obs.joint_obs[:, i]][:, acts[:, i]]
    return table


def from_product(policy: ProductPolicy, obs: RichObservationLayer | None = None) -> JointDistribution:
    """Joint table ``p(a | x) = prod_i pi_i(a_i | x_i)``.

    Without an observation layer each agent's observation is the latent state.
    """
    if obs is None:
        counts = {p.shape[0] for p in policy.probs}
        if len(counts) != 1:
            raise ValueError("policy tables disagree on the number of states")
        obs = identity_layer(policy.num_agents, counts.pop())
    if obs.obs_counts != tuple(p.shape[0] for p in policy.probs):
        raise ValueError("policy tables do not match the observation layer")
    return JointDistribution(_product_table(policy, obs), True, policy)


def uniform_policy(env: LatentMmdp, obs: RichObservationLayer | None = None) -> ProductPolicy:
    obs = resolve_obs(env, obs)
    m = env.num_actions
    return ProductPolicy(tuple(np.full((k, m), 1.0 / m) for k in obs.obs_counts), True)


def uniform_distribution(env: LatentMmdp, obs: RichObservationLayer | None = None) -> JointDistribution:
    obs = resolve_obs(env, obs)
    return from_product(uniform_policy(env, obs), obs)


def greedy_actions(table: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest action index."""
    return np.argmax(table, axis=-1)


def epsilon_greedy(q, epsilon: float, obs: RichObservationLayer | None = None) -> JointDistribution:
    """Product of per-agent epsilon-greedy policies built from a ``FactoredQ``.

    Agent ``i`` plays ``a`` with probability ``epsilon/m + (1-epsilon)*[a == argmax Q_i]``.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    probs = []
    for t in q.tables:
        k, m = t.shape
        p = np.full((k, m), epsilon / m)
        p[np.arange(k), greedy_actions(t)] += 1.0 - epsilon
        probs.append(p)
    policy = ProductPolicy(tuple(probs))
    if obs is None:
        obs = identity_layer(len(probs), probs[0].shape[0])
    return from_product(policy, obs)


def eta_mixture(env: LatentMmdp, eta: float, obs: RichObservationLayer | None = None) -> JointDistribution:
    """Correlated 2x2 dataset: diagonal mass ``0.5*eta + 0.25*(1-eta)``, off-diagonal ``0.25*(1-eta)``."""
    if env.num_agents != 2 or env.num_actions != 2:
        raise ValueError("the eta dataset is defined for 2 agents with 2 actions each")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    obs = resolve_obs(env, obs)
    acts = env.joint_actions
    diag = acts[:, 0] == acts[:, 1]
    row = np.where(diag, 0.5 * eta + 0.25 * (1.0 - eta), 0.25 * (1.0 - eta))
    table = np.tile(row, (obs.num_joint_obs, 1))
    if eta == 0.0:
        return JointDistribution(table, True, uniform_policy(env, obs))
    return JointDistribution(table, False)


def marginals(dist: JointDistribution, n: int, m: int) -> np.ndarray:
    """Per-row action marginals, shape ``(rows, n, m)``."""
    acts = joint_action_table(n, m)
    out = np.zeros((dist.table.shape[0], n, m))
    for i in range(n):
        onehot = acts[:, i][:, None] == np.arange(m)[None, :]
        out[:, i, :] = dist.table @ onehot
    return out


class FactorizationCheck(NamedTuple):
    factorized: bool
    max_error: float
    witness: tuple[int, int] | None  # (joint observation row, joint action)


def is_factorized(dist: JointDistribution, n: int, m: int) -> FactorizationCheck:
    """Compare every row with the outer product of its own marginals."""
    marg = marginals(dist, n, m)
    acts = joint_action_table(n, m)
    prod = np.ones_like(dist.table)
    for i in range(n):
        prod *= marg[:, i, acts[:, i]]
    err = np.abs(prod - dist.table)
    worst = np.unravel_index(np.argmax(err), err.shape)
    max_err = float(err[worst])
    ok = max_err <= FACTOR_TOL
    return FactorizationCheck(ok, max_err, None if ok else (int(worst[0]), int(worst[1])))


def product_factors(dist: JointDistribution, env: LatentMmdp,
                    obs: RichObservationLayer | None = None) -> ProductPolicy:
    """Recover the decentralized policy behind ``dist`` or raise.

    Rows must factorize, and each agent's marginal may depend only on its own
    observation.
    """
    obs = resolve_obs(env, obs)
    n, m = env.num_agents, env.num_actions
    if dist.table.shape != (obs.num_joint_obs, m**n):
        raise ValueError(f"distribution table has shape {dist.table.shape}, "
                         f"expected {(obs.num_joint_obs, m**n)}")
    if dist.policy is not None:
        return dist.policy
    check = is_factorized(dist, n, m)
    if not check.factorized:
        raise NotFactorizedError(
            f"distribution is not a product of per-agent policies (error {check.max_error:.3g} at "
            f"row/joint action {check.witness}); use the numeric least-squares solver")
    marg = marginals(dist, n, m)
    probs = []
    for i, k in enumerate(obs.obs_counts):
        p = np.full((k, m), 1.0 / m)
        seen = np.zeros(k, dtype=bool)
        for row, x in enumerate(obs.joint_obs[:, i]):
            if seen[x] and np.max(np.abs(p[x] - marg[row, i])) > FACTOR_TOL:
                raise NotFactorizedError(
                    f"agent {i}'s action marginal at observation {x} depends on other agents' "
                    "observations; use the numeric least-squares solver")
            p[x] = marg[row, i]
            seen[x] = True
        probs.append(p / p.sum(axis=1, keepdims=True))
    return ProductPolicy(tuple(probs))

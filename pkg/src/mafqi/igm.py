"""Fitted Q-iteration with a complete IGM factorization.

Joint value tables are plain arrays of shape ``(joint observations, m**n)``.
Because the IGM class can represent any joint table, the least-squares fit
reproduces the target exactly on the data support, so one iteration is the
exact Bellman optimality update.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .distributions import JointDistribution
from .env import LatentMmdp, RichObservationLayer, identity_layer, joint_action_table, resolve_obs
from .lvf import FactoredQ, target_from_joint


class SupportError(ValueError):
    """A joint action the operator must fit has no data."""


def lex_rank(n: int, m: int) -> np.ndarray:
    """Lexicographic rank of each flat joint action, agent 0 most significant."""
    acts = joint_action_table(n, m)
    return acts @ (m ** np.arange(n - 1, -1, -1))


def lex_argmax(q: np.ndarray, n: int, m: int) -> np.ndarray:
    """Row-wise flat index of the lexicographically first maximizer."""
    q = np.asarray(q, dtype=float)
    rank = lex_rank(n, m)
    tied = q == q.max(axis=-1, keepdims=True)
    return np.argmin(np.where(tied, rank, m**n), axis=-1)


def igm_iterate(env: LatentMmdp, obs: RichObservationLayer | None, dist: JointDistribution | None,
                q: np.ndarray) -> np.ndarray:
    """Exact Bellman optimality image of ``q``; ``dist`` is only checked for full support."""
    obs = resolve_obs(env, obs)
    q = np.asarray(q, dtype=float)
    if q.shape != (obs.num_joint_obs, env.num_joint_actions):
        raise ValueError(f"joint table has shape {q.shape}, expected {(obs.num_joint_obs, env.num_joint_actions)}")
    if not np.all(np.isfinite(q)):
        raise ValueError("joint table has non-finite entries")
    if dist is not None:
        holes = np.argwhere(dist.table <= 0)
        if holes.size:
            raise SupportError(
                f"IGM fit needs data on every joint action (exploratory data); row {holes[0][0]} "
                f"joint action {holes[0][1]} has zero mass")
    return target_from_joint(env, obs, q)


def igm_decompose(q: np.ndarray, n: int, m: int, obs: RichObservationLayer | None = None) -> FactoredQ:
    """Indicator individual tables pointing at the lexicographically first joint argmax.

    With rich observations, an individual observation shared by several joint
    observations takes its indicator from the first of them.
    """
    q = np.asarray(q, dtype=float)
    if obs is None:
        obs = identity_layer(n, q.shape[0])
    best = joint_action_table(n, m)[lex_argmax(q, n, m)]
    tables = []
    for i, k in enumerate(obs.obs_counts):
        t = np.zeros((k, m))
        seen = np.zeros(k, dtype=bool)
        for row, x in enumerate(obs.joint_obs[:, i]):
            if not seen[x]:
                t[x, best[row, i]] = 1.0
                seen[x] = True
        tables.append(t)
    return FactoredQ(tuple(tables))


def individual_greedy_joint(f: FactoredQ, obs: RichObservationLayer | None = None) -> np.ndarray:
    """Flat joint action assembled from each agent's own argmax, per joint observation."""
    n, m = f.num_agents, f.num_actions
    if obs is None:
        obs = identity_layer(n, f.tables[0].shape[0])
    greedy = f.greedy()
    j = np.zeros(obs.num_joint_obs, dtype=int)
    for i in range(n):
        j += greedy[i][obs.joint_obs[:, i]] * m**i
    return j


class IgmCheck(NamedTuple):
    consistent: bool
    witness: int | None  # first joint observation where the argmaxes disagree


def igm_check(q: np.ndarray, f: FactoredQ, obs: RichObservationLayer | None = None) -> IgmCheck:
    q = np.asarray(q, dtype=float)
    n, m = f.num_agents, f.num_actions
    if q.shape[1] != m**n:
        raise ValueError(f"joint table has {q.shape[1]} joint actions, individual tables imply {m**n}")
    if obs is None:
        obs = identity_layer(n, q.shape[0])
    bad = np.flatnonzero(lex_argmax(q, n, m) != individual_greedy_joint(f, obs))
    return IgmCheck(bad.size == 0, int(bad[0]) if bad.size else None)


def iteration_cap(env: LatentMmdp, tolerance: float) -> int:
    """Iterations after which the sup-norm step is guaranteed to be <= ``tolerance``."""
    r_max, gamma = env.r_max, env.discount
    if r_max == 0.0 or gamma == 0.0:
        return 2
    arg = tolerance * (1.0 - gamma) / r_max
    if arg >= 1.0:
        return 1
    return math.ceil(math.log(arg) / math.log(gamma)) + 1


def value_iteration(env: LatentMmdp, tolerance: float,
                    obs: RichObservationLayer | None = None) -> tuple[np.ndarray, int]:
    """Iterate the Bellman optimality operator from zero until the step is within ``tolerance``."""
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    obs = resolve_obs(env, obs)
    q = np.zeros((obs.num_joint_obs, env.num_joint_actions))
    cap = iteration_cap(env, tolerance)
    for t in range(1, cap + 1):
        nxt = target_from_joint(env, obs, q)
        step = float(np.max(np.abs(nxt - q)))
        q = nxt
        if step <= tolerance:
            return q, t
    raise RuntimeError(f"value iteration did not reach tolerance {tolerance} within {cap} iterations")


def optimal_joint_q(env: LatentMmdp, obs: RichObservationLayer | None = None, tolerance: float = 1e-12) -> np.ndarray:
    scale = max(env.v_max, 1.0)
    return value_iteration(env, tolerance * scale, obs)[0]


def greedy_is_optimal(q_star: np.ndarray, greedy: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Per joint observation, whether the greedy joint action attains the optimal value."""
    v = q_star.max(axis=1)
    chosen = q_star[np.arange(len(greedy)), greedy]
    return chosen >= v - tol * np.maximum(1.0, np.abs(v))


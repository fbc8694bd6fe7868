"""Finite multi-agent environments: latent MMDPs and rich-observation layers.

Joint actions are flat indices ``j`` in ``[0, m**n)`` with agent ``u`` reading
its action as ``(j // m**u) % m``; agent 0 is the least significant digit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

ROW_TOL = 1e-12


def encode(actions, m: int) -> int:
    """Flat joint-action index of the tuple ``actions``."""
    j = 0
    for u, a in enumerate(actions):
        if not 0 <= a < m:
            raise ValueError(f"action {a} of agent {u} outside [0, {m})")
        j += int(a) * m**u
    return j


def decode(j: int, n: int, m: int) -> tuple[int, ...]:
    if not 0 <= j < m**n:
        raise ValueError(f"joint index {j} outside [0, {m**n})")
    return tuple((j // m**u) % m for u in range(n))


def joint_action_table(n: int, m: int) -> np.ndarray:
    """Array of shape ``(m**n, n)``; row ``j`` is ``decode(j, n, m)``."""
    j = np.arange(m**n)
    return np.stack([(j // m**u) % m for u in range(n)], axis=1)


@dataclass(frozen=True, eq=False)
class LatentMmdp:
    """Finite latent-state MMDP with a uniform per-agent action count.

    ``transition`` has shape ``(S, m**n, S)`` and ``reward`` shape ``(S, m**n)``.
    Only shapes are enforced here; use :func:`validate` for the probabilistic
    invariants so that malformed environments can still be diagnosed.
    """

    num_agents: int
    num_states: int
    num_actions: int
    transition: np.ndarray
    reward: np.ndarray
    discount: float
    name: str = ""

    def __post_init__(self):
        n, S, m = self.num_agents, self.num_states, self.num_actions
        if min(n, S, m) < 1:
            raise ValueError("num_agents, num_states and num_actions must be >= 1")
        P = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        if P.shape != (S, m**n, S):
            raise ValueError(f"transition has shape {P.shape}, expected {(S, m**n, S)}")
        if r.shape != (S, m**n):
            raise ValueError(f"reward has shape {r.shape}, expected {(S, m**n)}")
        P.flags.writeable = False
        r.flags.writeable = False
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def num_joint_actions(self) -> int:
        return self.num_actions**self.num_agents

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.reward)))

    @property
    def v_max(self) -> float:
        return self.r_max / (1.0 - self.discount)

    @cached_property
    def joint_actions(self) -> np.ndarray:
        return joint_action_table(self.num_agents, self.num_actions)

    def with_discount(self, gamma: float) -> "LatentMmdp":
        if not 0.0 <= gamma < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {gamma}")
        return LatentMmdp(self.num_agents, self.num_states, self.num_actions,
                          self.transition, self.reward, gamma, self.name)


@dataclass(frozen=True, eq=False)
class RichObservationLayer:
    """Per-agent emission tables ``emission[i][s, x] = Lambda(x | i, s)``.

    Supports must be disjoint across states so that every emitted observation
    decodes to exactly one latent state. Joint observations are enumerated
    state by state, agent 0's observation varying fastest, and are assumed to
    be emitted independently across agents given the state.
    """

    emission: tuple = field(default=())

    def __post_init__(self):
        tables = []
        for i, e in enumerate(self.emission):
            e = np.array(e, dtype=float)
            if e.ndim != 2:
                raise ValueError(f"emission[{i}] must be a (states, observations) table")
            e.flags.writeable = False
            tables.append(e)
        if not tables:
            raise ValueError("an observation layer needs at least one agent")
        if len({e.shape[0] for e in tables}) != 1:
            raise ValueError("emission tables disagree on the number of states")
        object.__setattr__(self, "emission", tuple(tables))

    @classmethod
    def identity(cls, num_agents: int, num_states: int) -> "RichObservationLayer":
        return cls(tuple(np.eye(num_states) for _ in range(num_agents)))

    @property
    def num_agents(self) -> int:
        return len(self.emission)

    @property
    def num_states(self) -> int:
        return self.emission[0].shape[0]

    @property
    def obs_counts(self) -> tuple[int, ...]:
        return tuple(e.shape[1] for e in self.emission)

    @cached_property
    def obs_state(self) -> tuple[np.ndarray, ...]:
        """Per agent, the decoded state of each observation (-1 if never emitted)."""
        out = []
        for e in self.emission:
            pos = e > 0
            dec = np.where(pos.any(axis=0), np.argmax(pos, axis=0), -1)
            out.append(dec)
        return tuple(out)

    def decode(self, agent: int, x: int) -> int:
        s = int(self.obs_state[agent][x])
        if s < 0:
            raise ValueError(f"observation {x} of agent {agent} is never emitted")
        return s

    @cached_property
    def _joint(self):
        rows, states, probs = [], [], []
        for s in range(self.num_states):
            supports = [np.flatnonzero(e[s] > 0) for e in self.emission]
            grids = np.meshgrid(*supports, indexing="ij")
            # agent 0 fastest: Fortran-order flattening of the ij grid
            xs = np.stack([g.ravel(order="F") for g in grids], axis=1)
            p = np.ones(len(xs))
            for i, e in enumerate(self.emission):
                p = p * e[s, xs[:, i]]
            rows.append(xs)
            states.append(np.full(len(xs), s))
            probs.append(p)
        return np.concatenate(rows), np.concatenate(states), np.concatenate(probs)

    @property
    def joint_obs(self) -> np.ndarray:
        """``(J, n)`` array of joint observations with positive probability."""
        return self._joint[0]

    @property
    def joint_state(self) -> np.ndarray:
        return self._joint[1]

    @property
    def joint_weight(self) -> np.ndarray:
        """``p(x | s)`` for each joint observation ``x`` of state ``s``."""
        return self._joint[2]

    @property
    def num_joint_obs(self) -> int:
        return len(self._joint[0])

    @property
    def is_identity(self) -> bool:
        S = self.num_states
        return all(e.shape == (S, S) and np.array_equal(e, np.eye(S)) for e in self.emission)


def resolve_obs(env: LatentMmdp, obs: RichObservationLayer | None) -> RichObservationLayer:
    """Default to the identity layer, otherwise check ``obs`` matches ``env``."""
    if obs is None:
        return identity_layer(env.num_agents, env.num_states)
    if obs.num_agents != env.num_agents or obs.num_states != env.num_states:
        raise ValueError(
            f"observation layer is for {obs.num_agents} agents / {obs.num_states} states, "
            f"environment has {env.num_agents} / {env.num_states}")
    return obs


_IDENTITY: dict[tuple[int, int], RichObservationLayer] = {}


def identity_layer(n: int, S: int) -> RichObservationLayer:
    key = (n, S)
    if key not in _IDENTITY:
        _IDENTITY[key] = RichObservationLayer.identity(n, S)
    return _IDENTITY[key]


def two_state_env(gamma: float = 0.9) -> LatentMmdp:
    """Two agents, two states, two actions; state index 0 is s1, 1 is s2.

    s1 is absorbing with zero reward. In s2 the joint action <A1,A1> pays 1 and
    stays, <A2,A2> moves to s1, and the mixed actions stay with zero reward.
    """
    m, n = 2, 2
    reward = np.zeros((2, m**n))
    reward[1, encode((0, 0), m)] = 1.0
    transition = np.zeros((2, m**n, 2))
    transition[0, :, 0] = 1.0
    transition[1, :, 1] = 1.0
    transition[1, encode((1, 1), m)] = (1.0, 0.0)
    return LatentMmdp(n, 2, m, transition, reward, gamma, name="two-state")


MATRIX_GAME_PAYOFF = np.array([[8.0, -12.0, -12.0],
                               [-12.0, 0.0, 0.0],
                               [-12.0, 0.0, 0.0]])


def matrix_game_env() -> LatentMmdp:
    """One-shot 3x3 cooperative game; termination is encoded as discount 0."""
    m, n = 3, 2
    reward = np.zeros((1, m**n))
    for a1 in range(m):
        for a2 in range(m):
            # payoff rows index agent 2, columns agent 1
            reward[0, encode((a1, a2), m)] = MATRIX_GAME_PAYOFF[a2, a1]
    transition = np.ones((1, m**n, 1))
    return LatentMmdp(n, 1, m, transition, reward, 0.0, name="matrix-game")


def random_mmdp(seed: int, n: int, num_states: int, m: int, gamma: float) -> LatentMmdp:
    """Random test instance; transition rows are uniform on the simplex."""
    if min(n, num_states, m) < 1:
        raise ValueError("all sizes must be >= 1")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {gamma}")
    rng = np.random.default_rng(seed)
    A = m**n
    transition = rng.exponential(size=(num_states, A, num_states))
    transition /= transition.sum(axis=-1, keepdims=True)
    reward = rng.uniform(-1.0, 1.0, size=(num_states, A))
    return LatentMmdp(n, num_states, m, transition, reward, gamma, name=f"random-{seed}")


def validate(env: LatentMmdp, obs: RichObservationLayer | None = None) -> list[str]:
    """Return human-readable descriptions of every violated invariant."""
    report = []
    P, r = env.transition, env.reward
    if not 0.0 <= env.discount < 1.0:
        report.append(f"discount: {env.discount} outside [0, 1)")
    if not np.all(np.isfinite(r)):
        bad = np.argwhere(~np.isfinite(r))[0]
        report.append(f"reward[{bad[0]}][{bad[1]}]: non-finite entry")
    for s, j in np.argwhere(np.any(P < 0, axis=-1)):
        report.append(f"transition[{s}][{j}]: negative probability")
    sums = P.sum(axis=-1)
    for s, j in np.argwhere(~(np.abs(sums - 1.0) <= ROW_TOL)):
        report.append(f"transition[{s}][{j}]: row sums to {sums[s, j]!r}, expected 1")
    if obs is not None:
        report.extend(validate_observations(obs, env))
    return report


def validate_observations(obs: RichObservationLayer, env: LatentMmdp | None = None) -> list[str]:
    report = []
    if env is not None and (obs.num_agents != env.num_agents or obs.num_states != env.num_states):
        report.append(
            f"observations: layer covers {obs.num_agents} agents / {obs.num_states} states, "
            f"environment has {env.num_agents} / {env.num_states}")
    for i, e in enumerate(obs.emission):
        if np.any(e < 0):
            report.append(f"emission[{i}]: negative probability")
        sums = e.sum(axis=1)
        for s in np.flatnonzero(~(np.abs(sums - 1.0) <= ROW_TOL)):
            report.append(f"emission[{i}][{s}]: sums to {sums[s]!r}, expected 1")
        shared = np.flatnonzero((e > 0).sum(axis=0) > 1)
        for x in shared:
            states = np.flatnonzero(e[:, x] > 0).tolist()
            report.append(f"emission[{i}]: observation {x} emitted by states {states} (supports not disjoint)")
        for x in np.flatnonzero((e > 0).sum(axis=0) == 0):
            report.append(f"emission[{i}]: observation {x} is never emitted")
    return report

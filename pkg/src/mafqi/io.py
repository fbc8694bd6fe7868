"""YAML files for environments, distributions and value tables; CSV exports.

Floats are written through ``repr`` by the YAML emitter, which round-trips
every double exactly. Loader errors name the offending key path.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import yaml

from .distributions import JointDistribution, ProductPolicy
from .env import LatentMmdp, RichObservationLayer, decode, validate
from .lvf import FactoredQ


class SpecError(ValueError):
    """A structured file is malformed; the message starts with the key path."""


def _read(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise SpecError(f"{path}: cannot read ({e.strerror or e})") from e
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise SpecError(f"{path}: not valid YAML ({e})") from e
    if not isinstance(doc, dict):
        raise SpecError(f"{path}: top level must be a mapping")
    return doc


def _write(doc: dict, path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            yaml.safe_dump(doc, fh, sort_keys=False, default_flow_style=None, width=100)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


def _require(doc: dict, key: str, where: str = ""):
    if key not in doc:
        raise SpecError(f"{where}{key}: missing")
    return doc[key]


def _array(value, key: str, ndim: int, shape: tuple | None = None) -> np.ndarray:
    try:
        a = np.array(value, dtype=float)
    except (TypeError, ValueError) as e:
        raise SpecError(f"{key}: not a rectangular numeric array ({e})") from e
    if a.ndim != ndim:
        raise SpecError(f"{key}: expected {ndim} nested levels, got {a.ndim}")
    if shape is not None and a.shape != shape:
        raise SpecError(f"{key}: shape {a.shape}, expected {shape}")
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0]
        raise SpecError(f"{key}{''.join(f'[{i}]' for i in bad)}: non-finite entry")
    return a


def _int(doc: dict, key: str) -> int:
    v = _require(doc, key)
    if isinstance(v, bool) or not isinstance(v, int) or v < 1:
        raise SpecError(f"{key}: expected a positive integer, got {v!r}")
    return v


def _check_kind(doc: dict, kind: str) -> None:
    if doc.get("kind", kind) != kind:
        raise SpecError(f"kind: expected {kind!r}, got {doc['kind']!r}")


# ---------------------------------------------------------------------------
# Environments


def observations_to_dict(obs: RichObservationLayer) -> dict:
    return {"emission": [e.tolist() for e in obs.emission]}


def observations_from_dict(doc: dict, num_agents: int, num_states: int, where: str = "observations") -> RichObservationLayer:
    em = _require(doc, "emission", f"{where}.")
    if not isinstance(em, list) or len(em) != num_agents:
        raise SpecError(f"{where}.emission: expected one table per agent ({num_agents})")
    tables = []
    for i, e in enumerate(em):
        t = _array(e, f"{where}.emission[{i}]", 2)
        if t.shape[0] != num_states:
            raise SpecError(f"{where}.emission[{i}]: {t.shape[0]} rows, expected one per state ({num_states})")
        tables.append(t)
    return RichObservationLayer(tuple(tables))


def env_to_dict(env: LatentMmdp, obs: RichObservationLayer | None = None) -> dict:
    doc = {
        "kind": "environment",
        "name": env.name,
        "num_agents": env.num_agents,
        "num_states": env.num_states,
        "num_actions": env.num_actions,
        "discount": env.discount,
        "reward": env.reward.tolist(),
        "transition": env.transition.tolist(),
    }
    if obs is not None and not obs.is_identity:
        doc["observations"] = observations_to_dict(obs)
    return doc


def env_from_dict(doc: dict) -> tuple[LatentMmdp, RichObservationLayer | None]:
    _check_kind(doc, "environment")
    m_raw = _require(doc, "num_actions")
    if isinstance(m_raw, list):
        if len(set(m_raw)) != 1:
            raise SpecError(f"num_actions: heterogeneous action counts {m_raw} are not supported")
        doc = {**doc, "num_actions": m_raw[0]}
    n, S, m = _int(doc, "num_agents"), _int(doc, "num_states"), _int(doc, "num_actions")
    gamma = _require(doc, "discount")
    if isinstance(gamma, bool) or not isinstance(gamma, (int, float)) or not 0.0 <= gamma < 1.0:
        raise SpecError(f"discount: expected a number in [0, 1), got {gamma!r}")
    A = m**n
    reward = _array(_require(doc, "reward"), "reward", 2, (S, A))
    transition = _array(_require(doc, "transition"), "transition", 3, (S, A, S))
    env = LatentMmdp(n, S, m, transition, reward, float(gamma), str(doc.get("name", "")))
    obs = None
    if doc.get("observations") is not None:
        if not isinstance(doc["observations"], dict):
            raise SpecError("observations: expected a mapping")
        obs = observations_from_dict(doc["observations"], n, S)
    problems = validate(env, obs)
    if problems:
        raise SpecError("; ".join(problems))
    return env, obs


def save_env(env: LatentMmdp, path, obs: RichObservationLayer | None = None) -> None:
    _write(env_to_dict(env, obs), path)


def load_env(path) -> tuple[LatentMmdp, RichObservationLayer | None]:
    doc = _read(path)
    try:
        return env_from_dict(doc)
    except SpecError as e:
        raise SpecError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# Distributions and value tables


def dist_to_dict(dist: JointDistribution) -> dict:
    doc = {"kind": "joint-distribution", "factorized_origin": bool(dist.factorized_origin),
           "table": dist.table.tolist()}
    if dist.policy is not None:
        doc["policy"] = [p.tolist() for p in dist.policy.probs]
    return doc


def dist_from_dict(doc: dict) -> JointDistribution:
    _check_kind(doc, "joint-distribution")
    table = _array(_require(doc, "table"), "table", 2)
    policy = None
    if doc.get("policy") is not None:
        probs = tuple(_array(p, f"policy[{i}]", 2) for i, p in enumerate(doc["policy"]))
        try:
            policy = ProductPolicy(probs)
        except ValueError as e:
            raise SpecError(f"policy: {e}") from e
    try:
        return JointDistribution(table, bool(doc.get("factorized_origin", False)), policy)
    except ValueError as e:
        raise SpecError(f"table: {e}") from e


def save_dist(dist: JointDistribution, path) -> None:
    _write(dist_to_dict(dist), path)


def load_dist(path) -> JointDistribution:
    try:
        return dist_from_dict(_read(path))
    except SpecError as e:
        raise SpecError(f"{path}: {e}") from e


def save_factored_q(q: FactoredQ, path) -> None:
    _write({"kind": "factored-q", "tables": [t.tolist() for t in q.tables]}, path)


def load_factored_q(path) -> FactoredQ:
    doc = _read(path)
    try:
        _check_kind(doc, "factored-q")
        tables = _require(doc, "tables")
        if not isinstance(tables, list) or not tables:
            raise SpecError("tables: expected a non-empty list of per-agent tables")
        return FactoredQ(tuple(_array(t, f"tables[{i}]", 2) for i, t in enumerate(tables)))
    except (SpecError, ValueError) as e:
        raise SpecError(f"{path}: {e}") from e


def save_joint_q(q: np.ndarray, path) -> None:
    _write({"kind": "joint-q", "table": np.asarray(q, dtype=float).tolist()}, path)


def load_joint_q(path) -> np.ndarray:
    doc = _read(path)
    try:
        _check_kind(doc, "joint-q")
        return _array(_require(doc, "table"), "table", 2)
    except SpecError as e:
        raise SpecError(f"{path}: {e}") from e


def save_report(report: dict, path) -> None:
    _write(report, path)


# ---------------------------------------------------------------------------
# CSV


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


CREDIT_HEADER = ("agent", "observation", "action", "evaluation", "baseline", "weight", "residue", "q_i")


def write_credit_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CREDIT_HEADER)
        for agent, x, a, *values in rows:
            w.writerow((agent, x, a, *(_fmt(v) for v in values)))


def joint_q_matrix(q_row: np.ndarray, m: int) -> np.ndarray:
    """Two-agent joint values as an ``m x m`` grid; rows are agent 2's action, columns agent 1's."""
    q_row = np.asarray(q_row, dtype=float)
    if q_row.shape != (m * m,):
        raise ValueError("matrix layout needs exactly two agents")
    out = np.empty((m, m))
    for j, v in enumerate(q_row):
        a1, a2 = decode(j, 2, m)
        out[a2, a1] = v
    return out


def write_joint_q_csv(q: np.ndarray, m: int, path, labels=None) -> None:
    """One ``m x m`` block per joint observation, prefixed by the observation index."""
    labels = labels or [f"A{k + 1}" for k in range(m)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("observation", "agent2_action", *(f"agent1_{lab}" for lab in labels)))
        for x, row in enumerate(np.asarray(q, dtype=float)):
            for a2, vals in enumerate(joint_q_matrix(row, m)):
                w.writerow((x, labels[a2], *(_fmt(v) for v in vals)))


def load_lstsq_instance(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read ``pattern,weight,target`` lines (``#`` comments and an optional header allowed)."""
    rows, weights, targets = [], [], []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise SpecError(f"{path}: cannot read ({e.strerror or e})") from e
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if lineno == 1 and parts[0].lower() == "pattern":
            continue
        if len(parts) != 3:
            raise SpecError(f"{path}:{lineno}: expected pattern,weight,target")
        pattern, weight, target = parts
        if not pattern or set(pattern) - {"0", "1"}:
            raise SpecError(f"{path}:{lineno}: pattern {pattern!r} is not a binary string")
        if rows and len(pattern) != len(rows[0]):
            raise SpecError(f"{path}:{lineno}: pattern has {len(pattern)} bits, expected {len(rows[0])}")
        try:
            weights.append(float(weight))
            targets.append(float(target))
        except ValueError as e:
            raise SpecError(f"{path}:{lineno}: {e}") from e
        rows.append([int(c) for c in pattern])
    if not rows:
        raise SpecError(f"{path}: no data rows")
    return np.array(rows, dtype=int), np.array(weights), np.array(targets)

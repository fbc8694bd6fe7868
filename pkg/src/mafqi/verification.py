"""Self-checks that compare the closed forms against independent numeric routes.

Each suite returns a :class:`SuiteResult`; the CLI ``verify`` command runs them
all and exits non-zero if any fails.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .distributions import JointDistribution, ProductPolicy, from_product, uniform_distribution
from .env import LatentMmdp, RichObservationLayer, random_mmdp, two_state_env
from .lstsq import reduce_lstsq_to_mmdp, verify_pseudoinverse
from .lvf import (ResidueSpec, contraction_ratio_search, fit_error, lvf_fit_numeric, lvf_project)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        detail = ", ".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}" for k, v in self.metrics.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} ({detail}; {self.seconds:.2f}s)"


@dataclass(frozen=True, eq=False)
class Instance:
    env: LatentMmdp
    obs: RichObservationLayer
    dist: JointDistribution
    target: np.ndarray


def random_rich_layer(rng: np.random.Generator, n: int, num_states: int, max_per_state: int = 2) -> RichObservationLayer:
    """Disjoint-support emissions with 1..``max_per_state`` observations per state and agent."""
    tables = []
    for _ in range(n):
        counts = rng.integers(1, max_per_state + 1, size=num_states)
        e = np.zeros((num_states, counts.sum()))
        start = 0
        for s, c in enumerate(counts):
            w = rng.uniform(0.2, 1.0, size=c)
            e[s, start:start + c] = w / w.sum()
            start += c
        tables.append(e)
    return RichObservationLayer(tuple(tables))


def random_product_policy(rng: np.random.Generator, obs: RichObservationLayer, m: int,
                          low: float = 0.05) -> ProductPolicy:
    probs = []
    for k in obs.obs_counts:
        p = rng.uniform(low, 1.0, size=(k, m))
        probs.append(p / p.sum(axis=1, keepdims=True))
    return ProductPolicy(tuple(probs), True)


def random_instance(rng: np.random.Generator, max_agents: int = 3, max_actions: int = 3,
                    max_states: int = 4, rich: bool | None = None) -> Instance:
    """Random environment, positive product distribution and target, at most 3 agents/actions, 4 states."""
    n = int(rng.integers(1, max_agents + 1))
    m = int(rng.integers(2, max_actions + 1))
    S = int(rng.integers(1, max_states + 1))
    env = random_mmdp(int(rng.integers(2**31)), n, S, m, float(rng.uniform(0.0, 0.95)))
    if rich is None:
        rich = bool(rng.integers(2))
    obs = random_rich_layer(rng, n, S) if rich else RichObservationLayer.identity(n, S)
    dist = from_product(random_product_policy(rng, obs, m), obs)
    target = rng.uniform(-5.0, 5.0, size=(obs.num_joint_obs, m**n))
    return Instance(env, obs, dist, target)


def _timed(name: str, fn) -> SuiteResult:
    start = time.perf_counter()
    passed, metrics = fn()
    return SuiteResult(name, passed, metrics, time.perf_counter() - start)


def oracle_equivalence(instances: int = 200, seed: int = 0, value_tol: float = 1e-8,
                       residual_tol: float = 1e-9) -> SuiteResult:
    """Closed-form fit vs the numeric minimum-norm solve: fitted values and residuals."""
    def body():
        rng = np.random.default_rng(seed)
        worst_v = worst_r = 0.0
        for _ in range(instances):
            inst = random_instance(rng)
            closed = lvf_project(inst.env, inst.obs, inst.dist, inst.target).q_tot(inst.obs)
            numeric = lvf_fit_numeric(inst.env, inst.obs, inst.dist, inst.target)
            num_q = numeric.q.q_tot(inst.obs)
            worst_v = max(worst_v, float(np.max(np.abs(closed - num_q))))
            r_closed = fit_error(inst.obs, inst.dist, inst.target, closed)
            worst_r = max(worst_r, abs(r_closed - numeric.residual))
        return worst_v <= value_tol and worst_r <= residual_tol, {
            "instances": instances, "max_value_diff": worst_v, "max_residual_diff": worst_r}
    return _timed("oracle-equivalence", body)


def pseudoinverse_suite(sizes=((n, m) for n in (1, 2, 3) for m in (2, 3)), trials: int = 10, seed: int = 0,
                        tol: float = 1e-9) -> SuiteResult:
    def body():
        worst = 0.0
        count = 0
        for n, m in sizes:
            rep = verify_pseudoinverse(n, m, trials=trials, seed=seed)
            worst = max(worst, rep.max_violation)
            count += len(rep.violations)
        return worst <= tol, {"factor_sets": count, "max_violation": worst}
    return _timed("pseudoinverse", body)


def contraction_suite(num_pairs: int = 10_000, seed: int = 0, gamma: float = 0.9) -> SuiteResult:
    """A ratio above ``gamma`` shows the LVF operator is not a ``gamma``-contraction."""
    def body():
        env = two_state_env(gamma)
        w = contraction_ratio_search(env, None, uniform_distribution(env), num_pairs, seed)
        return w.ratio > gamma, {"pairs": num_pairs, "max_ratio": w.ratio}
    return _timed("contraction-witness", body)


def affine_lstsq_oracle(rows: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Fitted values of ``min sum_j w_j (c_j . x + b - y_j)**2`` by LAPACK least squares."""
    design = np.hstack([rows.astype(float), np.ones((len(rows), 1))])
    sw = np.sqrt(weights)
    coef = np.linalg.lstsq(sw[:, None] * design, sw * labels, rcond=None)[0]
    return design @ coef


def random_lstsq_problem(rng: np.random.Generator, max_features: int = 4, max_rows: int = 10):
    n = int(rng.integers(1, max_features + 1))
    k = int(rng.integers(1, max_rows + 1))
    rows = rng.integers(0, 2, size=(k, n))
    labels = rng.normal(0.0, 2.0, size=k)
    weights = rng.uniform(0.1, 2.0, size=k)
    return rows, labels, weights


def reduction_predictions(rows, labels, weights) -> np.ndarray:
    """Fit through the one-state reduction and predict ``c_j . x + b`` on every row."""
    red = reduce_lstsq_to_mmdp(rows, labels, weights)
    fit = lvf_fit_numeric(red.env, None, red.dist, red.target)
    x, b = red.recover(fit.q)
    return np.asarray(rows) @ x + b


def reduction_suite(instances: int = 100, seed: int = 0, tol: float = 1e-8) -> SuiteResult:
    def body():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(instances):
            rows, labels, weights = random_lstsq_problem(rng)
            pred = reduction_predictions(rows, labels, weights)
            worst = max(worst, float(np.max(np.abs(pred - affine_lstsq_oracle(rows, labels, weights)))))
        return worst <= tol, {"instances": instances, "max_prediction_diff": worst}
    return _timed("lstsq-reduction", body)


def residue_suite(instances: int = 100, seed: int = 0, tol: float = 1e-10) -> SuiteResult:
    """Random cancelling offsets leave the closed-form joint values unchanged."""
    def body():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(instances):
            inst = random_instance(rng)
            base = lvf_project(inst.env, inst.obs, inst.dist, inst.target).q_tot(inst.obs)
            res = ResidueSpec.random(inst.obs, rng, scale=10.0)
            shifted = lvf_project(inst.env, inst.obs, inst.dist, inst.target, res).q_tot(inst.obs)
            worst = max(worst, float(np.max(np.abs(base - shifted))))
        return worst <= tol, {"instances": instances, "max_q_tot_diff": worst}
    return _timed("residue-invariance", body)


SUITES = {
    "oracle": oracle_equivalence,
    "pseudoinverse": pseudoinverse_suite,
    "contraction": contraction_suite,
    "reduction": reduction_suite,
    "residue": residue_suite,
}


def run_all(seed: int = 0, names=None) -> list[SuiteResult]:
    names = list(SUITES) if names is None else names
    return [SUITES[name](seed=seed) for name in names]

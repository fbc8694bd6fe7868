"""Weighted least squares over m-ary encoding matrices.

Three roles: a numeric minimum-norm solver (the independent oracle for the
closed-form LVF update and the only solver for non-product distributions),
the explicit closed form and pseudoinverse for product weights, and the
reduction of binary-feature affine regression to a one-state LVF fit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from .env import LatentMmdp, joint_action_table

if TYPE_CHECKING:
    from .distributions import JointDistribution

DEFAULT_ROW_CAP = 4096
EIG_THRESHOLD = 1e-10


def build_encoding_matrix(n: int, m: int, cap: int = DEFAULT_ROW_CAP) -> np.ndarray:
    """``A[j, u*m + v] = 1`` iff agent ``u`` plays ``v`` in joint action ``j``."""
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    if m**n > cap:
        raise ValueError(f"m**n = {m**n} rows exceeds the cap of {cap}")
    acts = joint_action_table(n, m)
    A = np.zeros((m**n, m * n))
    rows = np.arange(m**n)
    for u in range(n):
        A[rows, u * m + acts[:, u]] = 1.0
    return A


@dataclass(frozen=True, eq=False)
class WlsInstance:
    """Row weights ``p`` and targets ``b``; ``factors`` (n, m) when ``p`` is a product."""

    weights: np.ndarray
    targets: np.ndarray
    factors: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.weights, dtype=float)
        b = np.asarray(self.targets, dtype=float)
        if p.shape != b.shape or p.ndim != 1:
            raise ValueError("weights and targets must be vectors of equal length")
        if np.any(p < 0):
            raise ValueError("weights must be non-negative")
        object.__setattr__(self, "weights", p)
        object.__setattr__(self, "targets", b)
        if self.factors is not None:
            f = np.asarray(self.factors, dtype=float)
            _check_factors(f)
            object.__setattr__(self, "factors", f)

    @classmethod
    def from_factors(cls, factors, targets) -> "WlsInstance":
        f = np.asarray(factors, dtype=float)
        return cls(product_weights(f), targets, f)


def _check_factors(f: np.ndarray) -> None:
    if f.ndim != 2:
        raise ValueError("factors must have shape (n, m)")
    if np.any(f <= 0):
        raise ValueError("closed form needs strictly positive factors")
    if not np.allclose(f.sum(axis=1), 1.0, rtol=0, atol=1e-12):
        raise ValueError("each factor vector must sum to 1")


def product_weights(factors: np.ndarray) -> np.ndarray:
    """``p(a) = prod_u factors[u, a_u]`` in flat joint-action order."""
    n, m = factors.shape
    acts = joint_action_table(n, m)
    return np.prod(factors[np.arange(n), acts], axis=1)


class LstsqSolution(NamedTuple):
    x: np.ndarray
    residual: float
    rank: int


def weighted_lstsq_solve(inst: WlsInstance, A: np.ndarray) -> LstsqSolution:
    """Minimum-norm minimizer of ``sum_j p_j (A_j x - b_j)**2``.

    Solves the normal equations through an eigendecomposition of the Gram
    matrix, dropping eigenvalues below ``EIG_THRESHOLD * lambda_max``.
    """
    p, b = inst.weights, inst.targets
    A = np.asarray(A, dtype=float)
    if A.shape[0] != p.shape[0]:
        raise ValueError(f"design has {A.shape[0]} rows but {p.shape[0]} weights")
    if not np.any(p > 0):
        raise ValueError("all weights are zero")
    gram = A.T @ (p[:, None] * A)
    rhs = A.T @ (p * b)
    evals, evecs = np.linalg.eigh(gram)
    keep = evals > EIG_THRESHOLD * evals[-1]
    V = evecs[:, keep]
    x = V @ ((V.T @ rhs) / evals[keep])
    residual = float(p @ (A @ x - b) ** 2)
    return LstsqSolution(x, residual, int(keep.sum()))


def product_closed_form(factors, b, w=None) -> np.ndarray:
    """Closed-form minimizer for product weights.

    ``x[u*m+v] = E[b | a_u = v] - (n-1)/n * E[b] - mean(w) + mean(w[u*m:(u+1)*m])``.
    With ``w`` omitted the two free-vector terms vanish.
    """
    f = np.asarray(factors, dtype=float)
    _check_factors(f)
    n, m = f.shape
    b = np.asarray(b, dtype=float)
    if b.shape != (m**n,):
        raise ValueError(f"b must have length {m**n}")
    p = product_weights(f)
    acts = joint_action_table(n, m)
    x = np.empty(n * m)
    baseline = p @ b
    for u in range(n):
        for v in range(m):
            sel = acts[:, u] == v
            x[u * m + v] = np.sum(p[sel] / f[u, v] * b[sel]) - (n - 1) / n * baseline
    if w is not None:
        w = np.asarray(w, dtype=float)
        if w.shape != (n * m,):
            raise ValueError(f"w must have length {n * m}")
        x += -w.mean() + np.repeat(w.reshape(n, m).mean(axis=1), m)
    return x


def pseudoinverse_formula(factors) -> np.ndarray:
    """Explicit Moore-Penrose inverse of ``diag(sqrt(p)) A`` for product weights ``p``."""
    f = np.asarray(factors, dtype=float)
    _check_factors(f)
    n, m = f.shape
    acts = joint_action_table(n, m)
    p = product_weights(f)
    own = f[np.arange(n), acts]  # p_u(a_u), shape (m**n, n)
    # sqrt(p(a_{-u}) / p_u(a_u)) = sqrt(p(a)) / p_u(a_u)
    g = np.sqrt(p)[:, None] / own
    gbar = g.sum(axis=1) / (m * n)
    out = np.empty((n * m, m**n))
    for u in range(n):
        for v in range(m):
            out[u * m + v] = (g[:, u] * (acts[:, u] == v) - (n - 1) / n * np.sqrt(p)
                              - g[:, u] / m + gbar)
    return out


@dataclass
class PseudoinverseReport:
    n: int
    m: int
    violations: list  # one dict per factor set

    @property
    def max_violation(self) -> float:
        return max(max(v.values()) for v in self.violations)

    def passed(self, tol: float = 1e-9) -> bool:
        return self.max_violation <= tol


def _penrose_violations(factors: np.ndarray) -> dict:
    n, m = factors.shape
    Ap = np.sqrt(product_weights(factors))[:, None] * build_encoding_matrix(n, m)
    Ad = pseudoinverse_formula(factors)
    left, right = Ap @ Ad, Ad @ Ap
    return {
        "AAd_symmetric": float(np.max(np.abs(left - left.T))),
        "AdA_symmetric": float(np.max(np.abs(right - right.T))),
        "A_AdA": float(np.max(np.abs(Ap @ right - Ap))),
        "Ad_AAd": float(np.max(np.abs(right @ Ad - Ad))),
    }


def verify_pseudoinverse(n: int, m: int, factors=None, trials: int = 10, seed: int = 0) -> PseudoinverseReport:
    """Check the four Penrose conditions for uniform, given, and ``trials`` random factor sets."""
    if m**n > 256:
        raise ValueError("verification is limited to m**n <= 256")
    sets = [np.full((n, m), 1.0 / m)]
    if factors is not None:
        sets.append(np.asarray(factors, dtype=float))
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        f = rng.uniform(0.05, 1.0, size=(n, m))
        sets.append(f / f.sum(axis=1, keepdims=True))
    return PseudoinverseReport(n, m, [_penrose_violations(f) for f in sets])


@dataclass(frozen=True, eq=False)
class LstsqReduction:
    """A binary-feature affine regression posed as a one-state LVF fit."""

    env: LatentMmdp
    dist: JointDistribution
    target: np.ndarray
    rows: np.ndarray

    def recover(self, q) -> tuple[np.ndarray, float]:
        """``x_i = Q_i(1) - Q_i(0)`` and ``b = sum_i Q_i(0)`` from a fitted ``FactoredQ``."""
        x = np.array([t[0, 1] - t[0, 0] for t in q.tables])
        b = float(sum(t[0, 0] for t in q.tables))
        return x, b


def reduce_lstsq_to_mmdp(rows, labels, weights) -> LstsqReduction:
    """Build the one-state, two-action MMDP whose LVF fit solves the regression.

    Joint action ``c_j`` pays ``y_j`` and is drawn with probability proportional
    to ``w_j``; repeated rows are merged by weight (their fitted value is shared).
    """
    from .distributions import JointDistribution

    C = np.asarray(rows)
    y = np.asarray(labels, dtype=float)
    w = np.asarray(weights, dtype=float)
    if C.ndim != 2 or len(C) != len(y) or len(y) != len(w):
        raise ValueError("rows must be (k, n) with one label and weight per row")
    if not np.all((C == 0) | (C == 1)):
        raise ValueError("rows must be binary")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    C = C.astype(int)
    n = C.shape[1]
    idx = C @ (2 ** np.arange(n))
    mass = np.zeros(2**n)
    weighted = np.zeros(2**n)
    np.add.at(mass, idx, w)
    np.add.at(weighted, idx, w * y)
    reward = np.divide(weighted, mass, out=np.zeros(2**n), where=mass > 0)
    env = LatentMmdp(n, 1, 2, np.ones((1, 2**n, 1)), reward[None, :], 0.0, name="lstsq-reduction")
    dist = JointDistribution((mass / mass.sum())[None, :], False)
    return LstsqReduction(env, dist, reward[None, :].copy(), C)

"""Exact-expectation fitted Q-iteration for cooperative multi-agent MDPs.

Value tables are fitted either under linear value factorization (joint value
as a sum of per-agent values) or under a complete IGM class, with data
distributions given as exact joint-action probability tables.
"""

from .distributions import (JointDistribution, NotFactorizedError, ProductPolicy, epsilon_greedy, eta_mixture,
                            from_product, is_factorized, uniform_distribution)
from .env import LatentMmdp, RichObservationLayer, matrix_game_env, random_mmdp, two_state_env, validate
from .harness import IterationLog, RunConfig, run, run_fqi, run_onpolicy_fqi, stability_box_check, sweep
from .igm import SupportError, igm_decompose, igm_iterate, value_iteration
from .lstsq import build_encoding_matrix, product_closed_form, weighted_lstsq_solve
from .lvf import FactoredQ, ResidueSpec, credit_decomposition, lvf_fit_numeric, lvf_iterate, lvf_project

__version__ = "0.1.0"

__all__ = [
    "FactoredQ", "IterationLog", "JointDistribution", "LatentMmdp", "NotFactorizedError", "ProductPolicy",
    "ResidueSpec", "RichObservationLayer", "RunConfig", "SupportError", "build_encoding_matrix",
    "credit_decomposition", "epsilon_greedy", "eta_mixture", "from_product", "igm_decompose", "igm_iterate",
    "is_factorized", "lvf_fit_numeric", "lvf_iterate", "lvf_project", "matrix_game_env", "product_closed_form",
    "random_mmdp", "run", "run_fqi", "run_onpolicy_fqi", "stability_box_check", "sweep", "two_state_env",
    "uniform_distribution", "validate", "value_iteration", "weighted_lstsq_solve",
]

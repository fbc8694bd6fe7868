import numpy as np
import pytest

from mafqi.distributions import NotFactorizedError, ProductPolicy
from mafqi.env import encode, matrix_game_env, random_mmdp, two_state_env
from mafqi.harness import (IterationLog, RunConfig, derive_seed, emit_csv, emit_summary_csv, run_fqi,
                           run_onpolicy_fqi, sample_box_point, stability_box_check, sweep, sweep_config,
                           unique_optimal_policy)
from mafqi.env import identity_layer

S2 = 1
A1A1 = encode((0, 0), 2)


@pytest.mark.parametrize("changes", [{"iters": 0}, {"tol": 0.0}, {"k": 1.0}, {"operator": "bogus"},
                                     {"dist": "mystery"}, {"gamma": 1.0}])
def test_config_validation(changes):
    with pytest.raises(ValueError):
        RunConfig(two_state_env(), **changes)


def test_lvf_uniform_diverges():
    log = run_fqi(RunConfig(two_state_env(0.9), k=10, iters=300))
    assert log.status == "diverged"
    assert log.last.t <= 100
    assert log.last.q_tot_inf_norm > log.threshold == pytest.approx(100.0)
    assert all(r.q_tot_inf_norm <= log.threshold for r in log.records[:-1])


def test_lvf_uniform_converges_at_half():
    log = run_fqi(RunConfig(two_state_env(), gamma=0.5))
    assert log.status == "converged"
    assert log.last.step <= 1e-8


def test_igm_converges_to_optimum():
    log = run_fqi(RunConfig(two_state_env(0.9), operator="igm", tol=1e-8))
    assert log.status == "converged"
    assert log.final_q[S2, A1A1] == pytest.approx(10.0, abs=1e-6)
    assert log.last.greedy_optimal


def test_matrix_game_one_iteration():
    log = run_fqi(RunConfig(matrix_game_env(), iters=1))
    assert len(log) == 1
    q_tot = log.final_q.q_tot()[0]
    for acts, v in [((0, 0), -6.22), ((0, 1), -4.89), ((1, 1), -3.56)]:
        assert abs(q_tot[encode(acts, 3)] - v) <= 0.01


def test_first_record_values():
    log = run_fqi(RunConfig(two_state_env(0.9), iters=1))
    r = log.records[0]
    assert r.t == 1 and r.q_tot_inf_norm == pytest.approx(0.75)
    # the fit misses 1 at <A1,A1> by 0.25 and each other action by 0.25; state s1 is exact
    assert r.bellman_residual == pytest.approx(0.0625)
    assert log.status == "cap-reached"


def test_closed_form_rejects_correlated_data():
    with pytest.raises(NotFactorizedError):
        run_fqi(RunConfig(two_state_env(), dist="eta", eta=0.5))


def test_product_policy_distribution():
    pol = ProductPolicy((np.array([[0.5, 0.5], [0.8, 0.2]]),) * 2)
    log = run_fqi(RunConfig(two_state_env(), dist=pol, gamma=0.5))
    assert log.status == "converged"


@pytest.mark.parametrize("eps", [0.1, 0.01])
def test_onpolicy_stable(eps):
    log = run_onpolicy_fqi(RunConfig(two_state_env(0.9), epsilon=eps, iters=300))
    assert log.status != "diverged"
    assert log.last.greedy[S2] == A1A1
    assert log.last.q_tot_inf_norm <= 30


def test_onpolicy_full_exploration_equals_fixed_uniform():
    a = run_onpolicy_fqi(RunConfig(two_state_env(0.9), epsilon=1.0))
    b = run_fqi(RunConfig(two_state_env(0.9)))
    assert a.status == b.status == "diverged"
    np.testing.assert_array_equal(a.column("q_tot_inf_norm"), b.column("q_tot_inf_norm"))


def test_onpolicy_rejects_zero_epsilon_and_igm():
    with pytest.raises(ValueError, match="epsilon"):
        run_onpolicy_fqi(RunConfig(two_state_env(), epsilon=0.0))
    with pytest.raises(ValueError, match="LVF"):
        run_onpolicy_fqi(RunConfig(two_state_env(), operator="igm", epsilon=0.5))


def test_determinism_with_random_init(tmp_path):
    cfg = RunConfig(random_mmdp(2, 2, 3, 2, 0.8), init="random", seed=11, iters=50)
    a, b = run_fqi(cfg), run_fqi(cfg)
    emit_csv(a, tmp_path / "a.csv")
    emit_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert run_fqi(cfg.replace(seed=12)).records[0].q_tot_inf_norm != a.records[0].q_tot_inf_norm


def test_status_soundness_on_random_envs():
    for seed in range(10):
        for op in ("lvf-closed-form", "igm"):
            log = run_fqi(RunConfig(random_mmdp(seed, 2, 2, 2, 0.9), operator=op, iters=200))
            assert 1 <= len(log) <= 200
            assert list(log.column("t")) == list(range(1, len(log) + 1))
            if log.status == "diverged":
                assert log.last.q_tot_inf_norm > log.threshold
            elif log.status == "converged":
                assert log.last.step <= 1e-8


def test_emit_csv(tmp_path):
    path = tmp_path / "empty.csv"
    emit_csv(IterationLog(), path)
    assert path.read_text() == "iter,q_tot_inf_norm,bellman_residual,greedy_optimal,status\n"

    log = run_fqi(RunConfig(two_state_env(), iters=3))
    path = tmp_path / "three.csv"
    emit_csv(log, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 4
    assert lines[1].split(",")[4] == "running" and lines[3].split(",")[4] == "cap-reached"
    assert lines[1].split(",")[1] == "0.75"
    first = path.read_bytes()
    emit_csv(log, path)
    assert path.read_bytes() == first
    with pytest.raises(OSError, match="missing"):
        emit_csv(log, tmp_path / "missing" / "x.csv")


def test_sweep_epsilon():
    entries = sweep(RunConfig(two_state_env(0.9), on_policy=True), "epsilon", [1.0, 0.5, 0.1, 0.01])
    status = {e.value: e.log.status for e in entries}
    assert status[1.0] == "diverged"
    assert status[0.1] != "diverged" and status[0.01] != "diverged"


def test_sweep_eta_numeric():
    entries = sweep(RunConfig(two_state_env(0.9), operator="lvf-numeric"), "eta", [0.0, 1.0])
    assert entries[0].log.status == "diverged"
    assert entries[1].log.status == "converged"
    assert entries[1].log.last.greedy[S2] == A1A1


def test_sweep_gamma():
    entries = sweep(RunConfig(two_state_env()), "gamma", [0.5, 0.9])
    assert [e.log.status for e in entries] == ["converged", "diverged"]


def test_sweep_records_errors_and_continues(tmp_path):
    entries = sweep(RunConfig(two_state_env()), "eta", [0.5, 0.0])
    assert entries[0].log is None and "NotFactorizedError" in entries[0].error
    assert entries[1].log.status == "diverged"
    emit_summary_csv(entries, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "value,status,final_q_tot_inf_norm,iterations,greedy_optimal,error"
    assert lines[1].startswith("0.5,error")


def test_sweep_entry_equals_standalone_run():
    base = RunConfig(random_mmdp(4, 2, 2, 2, 0.6), init="random", seed=3, iters=40)
    entries = sweep(base, "gamma", [0.3, 0.6])
    for k, e in enumerate(entries):
        assert e.seed == derive_seed(3, k)
        alone = run_fqi(sweep_config(base, "gamma", e.value, e.seed))
        np.testing.assert_array_equal(alone.column("q_tot_inf_norm"), e.log.column("q_tot_inf_norm"))


def test_sweep_requires_values():
    with pytest.raises(ValueError):
        sweep(RunConfig(two_state_env()), "eta", [])


def test_stability_box_small_epsilon():
    rep = stability_box_check(two_state_env(0.9), delta=0.05, epsilon=1e-4, trials=200, seed=0)
    assert rep.fraction == 1.0 and rep.policy_failures == 0
    assert rep.pi_star[S2] == A1A1


def test_stability_box_full_exploration_escapes():
    rep = stability_box_check(two_state_env(0.9), delta=0.05, epsilon=1.0, trials=50, seed=0)
    assert rep.fraction < 1.0 and rep.worst_excursion > 0.05


def test_box_sampler_exact_at_zero_delta():
    env = two_state_env(0.9)
    obs = identity_layer(2, 2)
    pi, v = unique_optimal_policy(env, obs)
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = sample_box_point(env, obs, pi, v, 0.0, rng)
        np.testing.assert_array_equal(q.q_tot()[np.arange(2), pi], v)
        assert [int(g[S2]) for g in q.greedy()] == [0, 0]


def test_non_unique_optimum_rejected():
    env = matrix_game_env()
    reward = np.zeros((1, 9))
    tied = type(env)(2, 1, 3, env.transition, reward + np.eye(1, 9, 0) + np.eye(1, 9, 4), 0.0)
    with pytest.raises(ValueError, match="unique optimal policy"):
        stability_box_check(tied, 0.05, 0.1, 5, 0)

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssplab import env as E
from ssplab.oracle import (ImproperPolicyError, OracleError, OracleSolution, empirical_hitting_check,
                           hitting_threshold, hitting_times, solve_fh, solve_ssp)

# mpmath, 30 digits: (1 - (1/3 + 2 Delta)) * 5 and 2 * 5 * Delta at K = 10^4
V_S0_PP = 3.32823022970253504562875565818
GAP_MIN_B5 = 0.00510310363079828770457767515564


def lower_bound(d=2, B=5.0, rho="++"):
    return E.make_lower_bound_instance(d, 10_000, B, rho=E.parse_rho(rho, 10_000))


def one_step_env(cost=0.3):
    P = np.zeros((1, 2, 2))
    P[0, :, 1] = 1.0
    return E.TabularSsp(P=P, c=np.full((1, 2), cost))


def chain_env():
    P = np.zeros((2, 1, 3))
    P[0, 0, 1] = 1.0
    P[1, 0, 2] = 1.0
    return E.TabularSsp(P=P, c=np.full((2, 1), 0.5))


def test_lower_bound_values():
    sol = solve_ssp(lower_bound())
    assert abs(sol.V_star[1] - 5.0) <= 1e-9
    assert abs(sol.V_star[0] - V_S0_PP) <= 1e-9
    assert abs(sol.gap_min - GAP_MIN_B5) <= 1e-9
    assert sol.B_star == pytest.approx(5.0, abs=1e-9)
    assert sol.pi_star[0] == 3


def test_hitting_time_at_costly_state_any_policy():
    env = lower_bound()
    for a in range(env.n_actions):
        T = hitting_times(env, [a, a])
        assert abs(T[1] - 5.0) <= 1e-9


def test_trivial_instances():
    sol = solve_ssp(one_step_env(0.3))
    assert sol.V_star[0] == pytest.approx(0.3)
    assert sol.gap_min == math.inf
    assert hitting_times(one_step_env(), [0]).tolist() == [1.0]
    assert hitting_times(chain_env(), [0, 0]).tolist() == [2.0, 1.0]


def test_improper_policy_detected():
    P = np.zeros((1, 2, 2))
    P[0, 0, 0] = 1.0
    P[0, 1, 1] = 1.0
    env = E.TabularSsp(P=P, c=np.array([[0.0, 1.0]]))
    with pytest.raises(ImproperPolicyError):
        hitting_times(env, [0])


def test_no_proper_policy_is_reported():
    P = np.zeros((1, 1, 2))
    P[0, 0, 0] = 1.0
    env = E.TabularSsp(P=P, c=np.array([[1.0]]))
    with pytest.raises(OracleError):
        solve_ssp(env, max_iter=1000)


def test_gap_example_bellman_gap():
    env = E.make_gap_example(0.5, 0.1, 0.01)
    sol = solve_ssp(env)
    assert sol.V_star.tolist() == pytest.approx([0.01, 0.01, 1.009, 0.0], abs=1e-9)
    # 1 + (1 - q) eps - eps, not the 1/q - eps of the committing argument
    assert sol.gap[1, 0] == pytest.approx(0.999, abs=1e-9)
    assert sol.T_star == pytest.approx(4.0)


@pytest.mark.parametrize("terminal", [E.zero(), E.two_B_star(1.009)])
def test_gap_example_layered_gap_is_eps(terminal):
    env = E.make_gap_example(0.5, 0.1, 0.01)
    fh = solve_fh(E.fh_wrap(env, 60, terminal))
    assert fh.gap_min_prime <= 0.01 + 1e-12


def test_fh_one_step_equals_min_cost():
    env = E.make_gap_example(0.5, 0.1, 0.01)
    fh = solve_fh(E.fh_wrap(env, 1, E.zero()))
    assert np.allclose(fh.V_h(1)[:4], env.c.min(axis=1))
    assert np.allclose(fh.Q_h(2), 0.0)


def test_fh_terminal_layer():
    env = lower_bound()
    fh = solve_fh(E.fh_wrap(env, 7, E.two_B_star(5.0)))
    assert fh.V_h(8).tolist() == [10.0, 10.0, 0.0]
    assert np.allclose(fh.V, fh.Q.min(axis=2))


@pytest.mark.parametrize("make", [lambda: lower_bound(), lambda: E.make_gap_example(0.5, 0.1, 0.01)])
def test_fh_value_bound_at_4tstar_horizon(make):
    env = make()
    sol = solve_ssp(env)
    for K in (10, 1000, 10_000):
        H = math.ceil(4 * sol.T_star * math.log(4 * K))
        fh = solve_fh(E.fh_wrap(env, H, E.two_B_star(sol.B_star)))
        assert fh.V_h(1)[: env.n_states].max() <= 1.5 * sol.B_star + 1e-9


def random_env(seed, S=4, A=3):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(S + 1), size=(S, A))
    P = 0.9 * P
    P[..., S] += 0.1
    return E.TabularSsp(P=P, c=rng.uniform(0, 1, size=(S, A)))


@given(st.integers(0, 10_000))
def test_bellman_consistency(seed):
    env = random_env(seed)
    sol = solve_ssp(env, tol=1e-11)
    Q = env.c + env.P[..., :-1] @ sol.V_star
    assert np.max(np.abs(sol.V_star - Q.min(axis=1))) <= 1e-10
    assert sol.gap.min() >= -1e-10
    assert np.all(sol.gap[np.arange(env.n_states), sol.pi_star] <= 1e-9)
    assert sol.T_star >= 1.0


@given(st.integers(0, 10_000))
def test_fh_zero_terminal_below_ssp_and_converging(seed):
    env = random_env(seed)
    sol = solve_ssp(env)
    errs = []
    for H in (5, 10, 20, 40):
        V1 = solve_fh(E.fh_wrap(env, H, E.zero())).V_h(1)[: env.n_states]
        assert np.all(V1 <= sol.V_star + 1e-9)
        errs.append(np.max(np.abs(V1 - sol.V_star)))
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < errs[0]


def test_value_iteration_monotone_from_zero():
    env = random_env(3)
    V = np.zeros(env.n_states)
    for _ in range(50):
        V_new = (env.c + env.P[..., :-1] @ V).min(axis=1)
        assert np.all(V_new >= V - 1e-15)
        V = V_new


def test_solution_round_trip():
    sol = solve_ssp(lower_bound())
    back = OracleSolution.from_dict(sol.to_dict())
    assert np.array_equal(back.V_star, sol.V_star) and back.gap_min == sol.gap_min


def test_hitting_threshold_formula():
    assert hitting_threshold(5.0, 0.1) == 4 * 5.0 * math.log(2 / 0.1)


def test_hitting_check_deterministic_env(rng):
    chk = empirical_hitting_check(one_step_env(), [0], 0.1, 1000, rng)
    assert chk.exceedances == 0 and chk.passed


def test_hitting_check_lower_bound(rng):
    env = lower_bound()
    chk = empirical_hitting_check(env, [0, 0], 0.05, 100_000, rng, start=1)
    assert chk.tau == pytest.approx(5.0)
    assert chk.passed


def test_hitting_check_needs_enough_trials(rng):
    with pytest.raises(ValueError):
        empirical_hitting_check(one_step_env(), [0], 0.1, 10, rng)

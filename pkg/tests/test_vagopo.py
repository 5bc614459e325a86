import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssplab import env as E
from ssplab.vagopo import (History, VagopoLearner, VagopoParams, clip_j, f_j, g_j, iota, j_range,
                           lazy_condition, omega_contains, potentials, u_operator, vagopo_run, value_of)

# mpmath, 30 digits: 2^11 * 3 * ln(48 * 3 / (1e-8 * 0.05))
IOTA_EXAMPLE = 162116.974492154001936620999721


def test_clip_examples():
    assert clip_j(1, 3.0) == 2.0
    assert clip_j(1, -0.5) == -0.5
    assert f_j(1, 3.0) == 6.0
    assert g_j(1, 3.0) == 8.0


def test_f_g_sandwich_dense():
    x = np.linspace(-50, 50, 20001)
    for j in range(-4, 6):
        f, g = f_j(j, x), g_j(j, x)
        assert np.all(f <= g + 1e-12)
        assert np.all(g <= 2 * f + 1e-12)


@given(st.integers(-10, 10), st.floats(-1e4, 1e4))
def test_f_g_sandwich_property(j, x):
    f, g = float(f_j(j, x)), float(g_j(j, x))
    assert f <= g * (1 + 1e-12) + 1e-12
    assert g <= 2 * f * (1 + 1e-12) + 1e-12


def test_value_examples():
    phi = np.zeros((2, 2, 1))
    phi[0, :, 0] = [1.0, 2.0]
    assert value_of([5.0], 2.0, 1, phi) == 0.0  # goal
    assert value_of([0.0], 2.0, 0, phi) == 0.0
    assert value_of([5.0], 2.0, 0, phi) == 4.0  # 5 clipped to 2B
    assert value_of([-1.0], 2.0, 0, phi) == 0.0


def test_j_range_and_iota():
    js = j_range(1e-8, 3, 1.0)
    assert js[0] == math.ceil(math.log2(1e-8)) == -26
    assert js[-1] == math.ceil(math.log2(6 * math.sqrt(3))) == 4
    assert np.array_equal(js, np.arange(-26, 5))
    assert iota(3, 1.0, 1, 1e-8, 0.05) == pytest.approx(IOTA_EXAMPLE, rel=1e-13)


@given(st.integers(1, 10**6), st.floats(0.5, 50))
def test_iota_monotone(t, B):
    assert iota(3, B, t + 1, 1e-8, 0.05) > iota(3, B, t, 1e-8, 0.05)
    assert iota(3, 2 * B, t, 1e-8, 0.05) > iota(3, B, t, 1e-8, 0.05)


def _lb(rho="+"):
    return E.make_lower_bound_instance(1, 50, 2.0, rho=E.parse_rho(rho, 50))


def test_empty_history_accepts_ball():
    env = _lb()
    params = VagopoParams()
    hist = History(env.phi_plus())
    for w in params.w_grid(env.d, 1.0):
        assert omega_contains(hist, w, w, 1.0, params, 1e-8).contained


def test_ball_violation():
    env = _lb()
    params = VagopoParams()
    hist = History(env.phi_plus())
    w = np.zeros(env.d)
    w[0] = 4 * math.sqrt(env.d) * 1.0
    m = omega_contains(hist, w, np.zeros(env.d), 1.0, params, 1e-8)
    assert not m.contained and not m.in_ball


def test_u_operator_zero_is_theta():
    env = _lb()
    assert np.allclose(u_operator(env, np.zeros(env.d), 2.0), env.theta_star)


def test_u_operator_iteration_monotone():
    env = _lb()
    phi = env.phi
    w = np.zeros(env.d)
    prev = phi @ w
    for _ in range(30):
        w = u_operator(env, w, 4.0)
        q = phi @ w
        assert np.all(q >= prev - 1e-12)
        prev = q


def test_u_operator_one_hot():
    tab = E.make_gap_example(0.5, 0.1, 0.01)
    env = E.tabular_to_linear(tab)
    rng = np.random.default_rng(0)
    w = rng.uniform(0, 3, env.d)
    B = 1.0
    q = env.phi_plus() @ w
    V = np.clip(q, 0, 2 * B).min(axis=1)
    V[-1] = 0.0
    expected = tab.c + tab.P @ V
    assert np.allclose(u_operator(env, w, B).reshape(tab.c.shape), expected)


def test_lazy_examples():
    d = 3
    nus = np.array([[1.0, 0.0, 0.0]])
    js = np.array([0])
    Phi0 = potentials(np.zeros((0, d)), np.zeros(0), nus, js)
    assert not lazy_condition(Phi0, Phi0, d)
    # one direction, |phi^T nu| <= 1 so f_0 = x^2; 9 d^2 - 1 unit records multiply Phi by 9 d^2
    feats = np.array([[1.0, 0.0, 0.0]])
    Phi1 = potentials(feats, np.array([9.0 * d * d - 1]), nus, js)
    assert Phi1[0, 0] == pytest.approx(9 * d * d * Phi0[0, 0])
    assert lazy_condition(Phi1, Phi0, d)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_potentials_nondecreasing(pairs):
    env = _lb()
    phi_plus = env.phi_plus()
    params = VagopoParams()
    nus = params.nu_grid(env.d, 1.0)
    js = j_range(1e-3, env.d, 1.0)
    hist = History(phi_plus)
    prev = potentials(*hist.pair_arrays(), nus, js)
    for s, a in pairs:
        hist.add(s, a, 0.5, 2)
        cur = potentials(*hist.pair_arrays(), nus, js)
        assert np.all(cur >= prev - 1e-12)
        prev = cur


def test_first_update_picks_zero():
    env = _lb()
    L = VagopoLearner(env, 10, VagopoParams())
    events = L.update_step(env.s_init)
    assert events == []
    assert np.array_equal(L.w, np.zeros(env.d))
    assert L.B == 1.0


def test_forced_single_doubling():
    tab = E.make_gap_example(0.5, 0.1, 0.01)
    env = E.tabular_to_linear(tab)
    s = env.s_init
    w = np.zeros(env.d)
    w[s * env.n_actions:(s + 1) * env.n_actions] = 1.5
    L = VagopoLearner(env, 10, VagopoParams(), candidate_grid=lambda B: w[None, :])
    events = L.update_step(s)
    assert events == ["double_B"]
    assert L.B == 2.0


def test_infeasible_grid_keeps_w():
    env = _lb()
    far = np.full((1, env.d), 100.0)
    L = VagopoLearner(env, 10, VagopoParams(), candidate_grid=lambda B: far)
    events = L.update_step(env.s_init)
    assert events == ["infeasible_grid"]
    assert np.array_equal(L.w, np.zeros(env.d))
    assert L.infeasible == 1


def test_params_validation():
    with pytest.raises(ValueError):
        VagopoParams(net_w=0)
    with pytest.raises(ValueError):
        VagopoParams(candidate_budget=10).check_budget(3)


def test_one_step_env_single_epoch():
    P = np.zeros((1, 1, 2))
    P[0, 0, 1] = 1.0
    tab = E.TabularSsp(P=P, c=np.array([[0.5]]))
    env = E.tabular_to_linear(tab)
    trace, L = vagopo_run(env, 1, VagopoParams(), np.random.default_rng(0))
    assert trace.meta["epochs"] == 1
    assert len(trace) == 1 and trace["cost"].sum() == 0.5


def test_trigger_bookkeeping_and_determinism(tmp_path):
    env = _lb("-")
    t1, L1 = vagopo_run(env, 20, VagopoParams(), np.random.default_rng(5))
    t2, _ = vagopo_run(env, 20, VagopoParams(), np.random.default_rng(5))
    t1.to_csv(tmp_path / "a.csv")
    t2.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    epochs = np.asarray(t1["epoch"])
    starts = np.flatnonzero(np.diff(np.concatenate([[0], epochs])) != 0)
    assert len(starts) == t1.meta["epochs"]
    for i, ev in enumerate(t1["event"]):
        tags = [x for x in ev.split(";") if x in ("goal", "lazy", "overestimate")]
        assert len(tags) == (1 if i in set(starts) else 0)
    assert sum(t1.meta["triggers"].values()) == t1.meta["epochs"]
    assert np.all(np.diff(np.asarray(t1["B_t"])) >= 0)


def test_tilde_w_membership_short():
    env = _lb("+")
    params = VagopoParams()
    hits = total = 0
    for seed in range(3):
        rec = []

        def probe(learner, s):
            if learner.t % 25 == 0:
                wt = u_operator(env, learner.w, learner.B)
                rec.append(omega_contains(learner.history, wt, learner.w, learner.B, params, learner.eps).contained)

        vagopo_run(env, 40, params, np.random.default_rng(seed), probe=probe)
        hits += sum(rec)
        total += len(rec)
    assert total > 0 and hits / total >= 0.9

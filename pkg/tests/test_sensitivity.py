import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poisonlab.envlab import MdpSpec, Transition, TransitionDataset
from poisonlab.errors import ConfigError, NumericalError, UnsupportedSurfaceError
from poisonlab.sensitivity import (bellman_loss_grad, exact_influence_oracle, score_dataset, td_error,
                                   top_k_by_sensitivity)
from poisonlab.victims import FeatureMap, VictimModel


def _tab_model(q, gamma=0.9):
    q = np.asarray(q, dtype=float)
    fm = FeatureMap.tabular(q.shape[0], 0.0, q.shape[0] - 1.0, q.shape[1])
    return VictimModel.from_table(fm, q, gamma)


def _random_line_model(rng, fm=None):
    fm = fm or FeatureMap.rbf_grid(10, 0.15)
    return VictimModel(fm, rng.normal(size=fm.dim), 0.9, "LinFQI")


def _random_line_data(rng, n):
    spec = MdpSpec.lineworld()
    return TransitionDataset(spec, s=rng.random((n, 1)), a=rng.integers(0, 2, n), r=rng.normal(size=n),
                             s_next=rng.random((n, 1)), terminal=rng.random(n) < 0.1)


def test_td_error_zero_q():
    m = _tab_model(np.zeros((2, 2)))
    assert td_error(m, Transition(np.array([0.0]), 0, 2.0, np.array([1.0]), False, 0)) == 2.0


def test_td_error_hand_value():
    # Q(s0, a0) = 1, max Q(s1, .) = 2, gamma 0.9, r 0.5
    m = _tab_model([[1.0, 0.0], [2.0, -1.0]])
    t = Transition(np.array([0.0]), 0, 0.5, np.array([1.0]), False, 0)
    expected = 0.5 + 0.9 * max(2.0, -1.0) - 1.0
    assert td_error(m, t) == pytest.approx(expected, abs=1e-15)
    assert td_error(m, Transition(np.array([0.0]), 0, 0.5, np.array([1.0]), True, 0)) == pytest.approx(-0.5)


def test_td_error_zero_under_optimal_q_deterministic_grid():
    from poisonlab.envlab import build_env, generate_dataset, value_iteration_oracle
    from poisonlab.victims import default_feature_map
    spec = MdpSpec.gridworld()
    opt = value_iteration_oracle(spec, tol=1e-13)
    data = generate_dataset(build_env(spec), 500, "medium", seed=0, oracle=opt)
    m = VictimModel.from_table(default_feature_map(spec), opt.Q, spec.gamma)
    rec = score_dataset(m, data)
    assert np.max(rec.abs_delta) < 1e-10


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_td_error_non_finite_names_idx():
    m = _tab_model([[np.inf, 0.0], [0.0, 0.0]])
    with pytest.raises(NumericalError, match="idx=4"):
        td_error(m, Transition(np.array([0.0]), 0, 0.0, np.array([1.0]), False, 4))


def test_zero_delta_row_gets_zero_everything(rng):
    m = _random_line_model(rng)
    data = _random_line_data(rng, 5)
    # make row 0 have delta exactly 0 by setting its reward to -(bootstrap - q)
    d = score_dataset(m, data, "both").delta
    data.r[0] -= d[0]
    rec = score_dataset(m, data, "both")
    if rec.delta[0] != 0:  # guard against a 1-ulp miss
        data.r[0] -= rec.delta[0]
        rec = score_dataset(m, data, "both")
    assert rec.delta[0] == 0
    assert rec.grad_reward[0] == 0 and np.all(rec.grad_state[0] == 0) and rec.influence_proxy[0] == 0
    assert np.all(rec.grad_reward[rec.delta > 0] == 1)


def test_state_surface_on_tabular_rejected(grid_model, grid_data):
    with pytest.raises(UnsupportedSurfaceError):
        score_dataset(grid_model, grid_data, "state")


def _abs_delta(m, s, a, r, s2, term):
    fm = m.feature_map
    q = fm.base(s) @ m.table
    q2 = fm.base(s2) @ m.table
    boot = 0.0 if term else q2.max()
    return abs(r + m.gamma * boot - q[0, a])


@pytest.mark.parametrize("fm", [FeatureMap.rbf_grid(10, 0.15), FeatureMap.polynomial(4)])
def test_state_gradient_finite_differences(fm, rng):
    m = _random_line_model(rng, fm)
    data = _random_line_data(rng, 400)
    rec = score_dataset(m, data, "state", perturb_next_state=True)
    checked = 0
    h = 1e-5
    for i in np.flatnonzero(rec.abs_delta > 1e-3)[:200]:
        s, s2 = data.s[i:i + 1], data.s_next[i:i + 1]
        a, r, term = int(data.a[i]), data.r[i], bool(data.terminal[i])
        fd_s = (_abs_delta(m, s + h, a, r, s2, term) - _abs_delta(m, s - h, a, r, s2, term)) / (2 * h)
        fd_s2 = (_abs_delta(m, s, a, r, s2 + h, term) - _abs_delta(m, s, a, r, s2 - h, term)) / (2 * h)
        assert rec.grad_state[i, 0] == pytest.approx(fd_s, rel=1e-6, abs=1e-8)
        # the max over actions is only differentiable away from ties; skip near-ties
        q2 = m.q_all(s2)[0]
        if abs(q2[0] - q2[1]) > 1e-3:
            assert rec.grad_state[i, 1] == pytest.approx(fd_s2, rel=1e-6, abs=1e-8)
        checked += 1
    assert checked == 200


def test_bellman_grad_matches_theta_finite_differences(rng):
    m = _random_line_model(rng)
    data = _random_line_data(rng, 100)
    g = bellman_loss_grad(m, data)
    phi = m.feature_map.phi(data.s, data.a)
    y = score_dataset(m, data).delta + m.q(data.s, data.a)  # frozen targets
    h = 1e-6
    for j in rng.choice(m.feature_map.dim, 6, replace=False):
        e = np.zeros(m.feature_map.dim)
        e[j] = h
        lp = 0.5 * (y - phi @ (m.theta + e)) ** 2
        lm = 0.5 * (y - phi @ (m.theta - e)) ** 2
        np.testing.assert_allclose(g[:, j], (lp - lm) / (2 * h), rtol=1e-6, atol=1e-9)


def test_proxy_doubles_with_delta(rng):
    m = _random_line_model(rng)
    data = _random_line_data(rng, 50)
    data.terminal[:] = True
    m.theta[:] = 0.0
    a = score_dataset(m, data).influence_proxy
    b = score_dataset(m, data.copy(r=2 * data.r)).influence_proxy
    np.testing.assert_allclose(b, 2 * a, rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(0.01, 0.99))
def test_reward_sign_rule_piecewise_linear(r, frac):
    m = _tab_model([[0.4, 0.1], [0.2, 0.7]])
    t = Transition(np.array([0.0]), 0, r, np.array([1.0]), False, 0)
    delta = td_error(m, t)
    if abs(delta) < 1e-9:
        return
    h = frac * abs(delta)
    for sgn in (1, -1):
        moved = td_error(m, Transition(t.s, 0, r + sgn * h, t.s_next, False, 0))
        assert np.sign(abs(moved) - abs(delta)) == sgn * np.sign(delta)


def test_scoring_is_pure(line_model, line_data):
    a = score_dataset(line_model, line_data, "both")
    b = score_dataset(line_model, line_data, "both")
    for f in ("delta", "grad_state", "influence_proxy", "grad_norm"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_influence_orthonormal_features_rank_one():
    # one-hot features with one sample per bin: H = (1 + damping) I on the used block
    s = np.arange(8.0).reshape(-1, 1) / 7.0
    deltas = np.array([0.1, -0.5, 2.0, 0.3, -1.0, 0.05, 0.7, -0.2])
    data = TransitionDataset(MdpSpec.lineworld(), s=s, a=np.zeros(8, int), r=deltas, s_next=s,
                             terminal=np.ones(8, bool))
    fm = FeatureMap.tabular(8, 0.0, 1.0, 2)
    m = VictimModel(fm, np.zeros(fm.dim), 0.9, "LinFQI")
    res = exact_influence_oracle(m, data, damping=1e-3)
    np.testing.assert_allclose(res.influence_norms, np.abs(deltas) / (1 + 1e-3), rtol=1e-12)
    assert res.rank_correlation_vs_proxy == pytest.approx(1.0)


def test_influence_all_zero_delta_is_undefined(rng):
    data = _random_line_data(rng, 40)
    data.terminal[:] = True
    data.r[:] = 0.0
    fm = FeatureMap.rbf_grid(5, 0.2)
    res = exact_influence_oracle(VictimModel(fm, np.zeros(fm.dim), 0.9, "LinFQI"), data)
    assert np.all(res.influence_norms == 0) and not res.correlation_defined


def test_influence_ill_conditioned(rng):
    data = _random_line_data(rng, 40)
    fm = FeatureMap.rbf_grid(25, 0.005)
    with pytest.raises(NumericalError, match="damping"):
        exact_influence_oracle(VictimModel(fm, np.zeros(fm.dim), 0.9, "LinFQI"), data, damping=0.0)


def _records(values):
    from poisonlab.sensitivity import SensitivityTable
    v = np.asarray(values, dtype=float)
    n = len(v)
    return SensitivityTable(np.arange(n), v, np.abs(v), np.sign(v), np.zeros((n, 0)), np.abs(v), np.abs(v))


def test_top_k_examples():
    assert sorted(top_k_by_sensitivity(_records([3, 1, 2]), 2)) == [0, 2]
    assert sorted(top_k_by_sensitivity(_records([1, 1, 1]), 2)) == [0, 1]
    with pytest.raises(ConfigError):
        top_k_by_sensitivity(_records([1, 2]), 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 1000))
def test_top_k_matches_sort_oracle(seed, k):
    r = np.random.default_rng(seed)
    vals = r.integers(0, 50, 1000).astype(float)  # plenty of ties
    got = top_k_by_sensitivity(_records(vals), k)
    ref = sorted(range(1000), key=lambda i: (-vals[i], i))[:k]
    assert list(got) == ref


def test_sensitivity_csv(tmp_path, line_model, line_data):
    import csv
    rec = score_dataset(line_model, line_data)
    p = rec.write_csv(tmp_path / "s.csv", epsilon=np.ones(len(rec)))
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["idx", "delta", "abs_delta", "grad_norm", "influence_proxy", "epsilon"]
    assert float(rows[1][1]) == rec.delta[0]

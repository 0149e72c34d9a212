import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poisonlab.attacks import (AttackConfig, PoisonedDataset, apply, attack_global_allocation, attack_local_greedy,
                               attack_random_noise, attack_random_subset, budget_matched, energy_audit, run_attack)
from poisonlab.envlab import MdpSpec, TransitionDataset
from poisonlab.errors import ConfigError, DataError
from poisonlab.sensitivity import SensitivityTable, score_dataset
from poisonlab.victims import TrainConfig, train_linear_fqi


def _table(deltas, grad_state=None):
    d = np.asarray(deltas, dtype=float)
    n = len(d)
    gs = np.zeros((n, 0)) if grad_state is None else np.asarray(grad_state, dtype=float)
    surface = "reward" if grad_state is None else "both"
    return SensitivityTable(np.arange(n), d, np.abs(d), np.sign(d), gs, np.abs(np.sign(d)), np.abs(d),
                            surface=surface)


def _toy(n, rng=None):
    rng = rng or np.random.default_rng(0)
    return TransitionDataset(MdpSpec.lineworld(), s=rng.random((n, 1)) * 0.8 + 0.1, a=rng.integers(0, 2, n),
                             r=rng.normal(size=n), s_next=rng.random((n, 1)), terminal=np.zeros(n, bool))


# -- config -------------------------------------------------------------------

def test_global_needs_c_total():
    with pytest.raises(ConfigError) as exc:
        AttackConfig("GlobalAllocation").validate()
    assert exc.value.field == "c_total"


def test_local_needs_epsilon_and_rho():
    with pytest.raises(ConfigError, match="epsilon_local"):
        AttackConfig("LocalGreedy", rho=0.1).validate()
    with pytest.raises(ConfigError, match="rho"):
        AttackConfig("LocalGreedy", epsilon_local=0.1).validate()
    with pytest.raises(ConfigError, match="strategy"):
        AttackConfig("Sneaky")


def test_budget_matching_identity():
    cfgs = [budget_matched(s, 0.02, 0.3, 5000) for s in ("RandomNoise", "LocalGreedy", "GlobalAllocation")]
    assert cfgs[2].c_total == pytest.approx(0.02 * 5000 * 0.09)


def test_rho_selecting_nothing():
    with pytest.raises(ConfigError, match="rho"):
        attack_random_noise(_toy(50), None, AttackConfig("RandomNoise", rho=0.01, epsilon_local=1.0))


# -- random noise -----------------------------------------------------------

def test_noise_zero_epsilon_is_noop():
    data = _toy(100)
    p = attack_random_noise(data, None, AttackConfig("RandomNoise", rho=0.5, epsilon_local=0.0))
    assert p.n_poisoned == 0 and p.total_l2_energy == 0
    assert apply(data, p).same_content(data)


def test_noise_full_support_bounded():
    data = _toy(500)
    p = attack_random_noise(data, None, AttackConfig("RandomNoise", rho=1.0, epsilon_local=0.2, units="raw"))
    assert p.n_poisoned == 500 and np.max(np.abs(p.d_r)) < 0.2


def test_noise_count_rule():
    data = _toy(10_000)
    p = attack_random_noise(data, None, AttackConfig("RandomNoise", rho=0.01, epsilon_local=0.5))
    assert p.n_poisoned == 100


# -- directional ------------------------------------------------------------

def test_subset_zero_delta_rows_stay_clean():
    data = _toy(20)
    p = attack_random_subset(data, _table(np.zeros(20)), AttackConfig("RandomSubset", rho=0.5, epsilon_local=1.0))
    assert p.n_poisoned == 0 and p.zero_gradient_count == 10


def test_subset_positive_delta_gets_plus_epsilon():
    data = _toy(40)
    p = attack_random_subset(data, _table(np.full(40, 0.3)),
                             AttackConfig("RandomSubset", rho=0.25, epsilon_local=0.7, units="raw"))
    np.testing.assert_array_equal(p.d_r, np.full(10, 0.7))


def test_local_greedy_single_top_row():
    data = _toy(100)
    deltas = np.linspace(-1, 0.5, 100)
    p = attack_local_greedy(data, _table(deltas), AttackConfig("LocalGreedy", rho=0.01, epsilon_local=0.4,
                                                               units="raw"))
    assert list(p.idx) == [0] and p.d_r[0] == -0.4


def test_local_greedy_top_positive_delta_brute_force(line_model, line_data):
    rec = score_dataset(line_model, line_data)
    i = int(np.argmax(rec.abs_delta))
    cfg = AttackConfig("LocalGreedy", rho=1 / len(line_data), epsilon_local=0.25, units="raw")
    p = attack_local_greedy(line_data, rec, cfg)
    out = apply(line_data, p)
    assert list(np.flatnonzero(out.r != line_data.r)) == [i]
    assert out.r[i] - line_data.r[i] == pytest.approx(0.25 * np.sign(rec.delta[i]), abs=1e-15)


def test_local_deterministic(line_model, line_data):
    rec = score_dataset(line_model, line_data, "both")
    cfg = AttackConfig("LocalGreedy", rho=0.05, epsilon_local=0.5, surface="both", seed=3)
    a, b = attack_local_greedy(line_data, rec, cfg), attack_local_greedy(line_data, rec, cfg)
    assert np.array_equal(a.rows, b.rows) and np.array_equal(a.d_s, b.d_s) and np.array_equal(a.d_r, b.d_r)


@pytest.mark.parametrize("strategy", ["LocalGreedy", "RandomSubset"])
def test_local_bound_compliance(strategy, line_model, line_data):
    rec = score_dataset(line_model, line_data, "both")
    p = run_attack(line_data, rec, AttackConfig(strategy, rho=0.1, epsilon_local=0.5, surface="both"))
    assert np.all(np.linalg.norm(p.eta(), axis=1) <= 0.5 + 1e-12)
    # reward-only moves are never clipped, so every perturbed row sits on the bound
    q = run_attack(line_data, rec, AttackConfig(strategy, rho=0.1, epsilon_local=0.5))
    np.testing.assert_allclose(np.linalg.norm(q.eta(), axis=1), 0.5, rtol=1e-14)


# -- global allocation -----------------------------------------------------

def test_global_three_four_example():
    data = _toy(2)
    p = attack_global_allocation(data, _table([3.0, 4.0]), AttackConfig("GlobalAllocation", c_total=1.0,
                                                                          units="raw"))
    np.testing.assert_allclose(p.d_r, [0.6, 0.8], rtol=1e-15)


def test_global_degenerate_status():
    data = _toy(5)
    p = attack_global_allocation(data, _table(np.zeros(5)), AttackConfig("GlobalAllocation", c_total=1.0))
    assert p.status == "degenerate" and p.n_poisoned == 0


def test_global_vanishing_budget_keeps_victim(line_model, line_data):
    rec = score_dataset(line_model, line_data)
    p = attack_global_allocation(line_data, rec, AttackConfig("GlobalAllocation", c_total=1e-12))
    assert p.total_l2_energy == pytest.approx(1e-12, rel=1e-6)
    clean = train_linear_fqi(line_data, TrainConfig())
    dirty = train_linear_fqi(apply(line_data, p), TrainConfig())
    np.testing.assert_allclose(dirty.theta, clean.theta, atol=1e-5)


def test_global_budget_identity_on_10k(line_env, line_oracle):
    from poisonlab.envlab import generate_dataset
    data = generate_dataset(line_env, 10_000, "medium", seed=5, oracle=line_oracle)
    model = train_linear_fqi(data, TrainConfig())
    for surface in ("reward", "both"):
        rec = score_dataset(model, data, surface)
        p = attack_global_allocation(data, rec, AttackConfig("GlobalAllocation", c_total=25.0, surface=surface))
        assert abs(p.planned_energy - 25.0) <= 1e-6 * 25.0
        assert energy_audit(p) == pytest.approx(p.total_l2_energy, rel=1e-9)
        assert p.total_l2_energy <= p.planned_energy * (1 + 1e-12)
        if surface == "reward":
            assert abs(p.total_l2_energy - 25.0) <= 1e-6 * 25.0


def test_top_rho_support_limits_rows(line_model, line_data):
    rec = score_dataset(line_model, line_data)
    p = attack_global_allocation(line_data, rec, AttackConfig("GlobalAllocation", c_total=3.0, rho=0.02,
                                                              support="top_rho"))
    assert p.n_poisoned <= int(0.02 * len(line_data))


def test_dominance_global_local_subset(line_model, line_data):
    rec = score_dataset(line_model, line_data)
    n = len(line_data)
    g = run_attack(line_data, rec, budget_matched("GlobalAllocation", 0.02, 0.5, n))
    loc = run_attack(line_data, rec, budget_matched("LocalGreedy", 0.02, 0.5, n))
    assert g.objective >= loc.objective
    subs = [run_attack(line_data, rec, AttackConfig("RandomSubset", rho=0.02, epsilon_local=0.5, seed=s)).objective
            for s in range(100)]
    assert loc.objective >= np.mean(subs)


def test_concentration_on_pareto_tail():
    rng = np.random.default_rng(11)
    n, rho, eps = 5000, 0.02, 0.5
    deltas = rng.pareto(1.5, n) + 1e-3
    data = _toy(n, rng)
    p = attack_global_allocation(data, _table(deltas), budget_matched("GlobalAllocation", rho, eps, n, units="raw"))
    assert int((np.abs(p.d_r) > eps).sum()) <= rho * n


# -- apply and serialization ----------------------------------------------

def test_apply_single_shift_and_no_mutation():
    data = _toy(10)
    before = data.copy()
    p = PoisonedDataset(data, AttackConfig("RandomNoise", rho=0.1, epsilon_local=1.0), np.array([7]),
                        np.array([0.5]), np.zeros((1, 1)), np.zeros((1, 1)), 1.0, np.ones(1), 0.25, 0.0)
    out = apply(data, p)
    assert data.same_content(before)
    assert list(np.flatnonzero(out.r != data.r)) == [7] and out.r[7] - data.r[7] == 0.5
    assert out.poisoned[7] and out.poisoned.sum() == 1
    assert np.all(np.abs((out.r - 0.5 * (np.arange(10) == 7)) - data.r) <= np.spacing(np.abs(out.r)))


def test_apply_rejects_other_base():
    a, b = _toy(10), _toy(11)
    p = attack_random_noise(a, None, AttackConfig("RandomNoise", rho=0.5, epsilon_local=1.0))
    with pytest.raises(DataError):
        apply(b, p)


def test_reward_records_rejected_for_state_attack(line_model, line_data):
    rec = score_dataset(line_model, line_data, "reward")
    with pytest.raises(ConfigError, match="surface"):
        attack_local_greedy(line_data, rec, AttackConfig("LocalGreedy", rho=0.1, epsilon_local=0.1,
                                                         surface="state"))


def test_perturbation_file_roundtrip(tmp_path, line_model, line_data):
    rec = score_dataset(line_model, line_data, "both")
    p = run_attack(line_data, rec, AttackConfig("GlobalAllocation", c_total=4.0, surface="both"))
    back = PoisonedDataset.read(p.write(tmp_path / "p.jsonl"), line_data)
    assert np.array_equal(back.rows, p.rows) and np.array_equal(back.d_s, p.d_s)
    assert back.total_l2_energy == p.total_l2_energy
    assert apply(line_data, back).same_content(apply(line_data, p))


def test_iterative_rounds(line_model, line_data):
    rec = score_dataset(line_model, line_data)

    def rescore(d):
        return score_dataset(train_linear_fqi(d, TrainConfig()), d)

    p = run_attack(line_data, rec, AttackConfig("GlobalAllocation", c_total=4.0, n_rounds=3), rescore)
    assert p.n_poisoned > 0 and p.planned_energy == pytest.approx(4.0)
    with pytest.raises(ConfigError, match="n_rounds"):
        run_attack(line_data, rec, AttackConfig("GlobalAllocation", c_total=4.0, n_rounds=2))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["RandomNoise", "RandomSubset", "LocalGreedy", "GlobalAllocation"]),
       st.sampled_from(["reward", "state", "both"]))
def test_energy_accounting_all_strategies(seed, strategy, surface):
    rng = np.random.default_rng(seed)
    data = _toy(200, rng)
    deltas = rng.normal(size=200)
    rec = _table(deltas, rng.normal(size=(200, 1)))
    rec.surface = "both"
    cfg = budget_matched(strategy, 0.1, 0.3, 200, surface=surface, seed=seed)
    p = run_attack(data, rec, cfg)
    assert energy_audit(p) == pytest.approx(p.total_l2_energy, rel=1e-9, abs=1e-15)
    assert p.total_l2_energy <= p.planned_energy * (1 + 1e-12) + 1e-15
    assert not data.poisoned.any()

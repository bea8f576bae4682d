import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sorl.diffcore import Tensor
from sorl.envworld import BANDIT2GOAL, REACH2GOAL, generate_dataset
from sorl.scale import (
    SWEEP_COLUMNS,
    InferenceConfig,
    best_of_n,
    candidate_noise,
    evaluate,
    plot_sweep,
    read_sweep_csv,
    scaling_sweep,
    write_sweep_csv,
)
from sorl.shortcut import AnalyticField, NoiseSource, ShortcutPolicy
from sorl.trainer import Critic


class FnCritic:
    def __init__(self, fn):
        self.fn = fn

    def mean_q(self, x, a, code, target=False, frozen=False):
        a = a.data if isinstance(a, Tensor) else np.asarray(a)
        return Tensor(self.fn(np.asarray(x), a))


NEG_SQUARE = FnCritic(lambda x, a: -np.sum(a * a, axis=1))


def zero_field(action_dim=1, obs_dim=1, M_disc=8):
    return AnalyticField(lambda a, t, h, x: np.zeros_like(a), action_dim, obs_dim, M_disc)


def constant_field(c, obs_dim=2, M_disc=8):
    # (c - a) / (1 - t) lands exactly on c for every Euler discretisation
    c = np.asarray(c, dtype=np.float64)
    return AnalyticField(lambda a, t, h, x: (c - a) / (1.0 - t), len(c), obs_dim, M_disc)


def goal_seeker(spec, M_disc=8):
    g = np.asarray(spec.goal)

    def v(a, t, h, x):
        target = np.clip(g - x, -spec.action_bound, spec.action_bound)
        return (target - a) / (1.0 - t)

    return AnalyticField(v, spec.action_dim, spec.obs_dim, M_disc)


def test_inference_config_validation():
    InferenceConfig(4, 2, 5).validate(8)
    for bad in (InferenceConfig(3, 1, 1), InferenceConfig(16, 1, 1), InferenceConfig(1, 0, 1), InferenceConfig(1, 1, 0)):
        with pytest.raises(ValueError):
            bad.validate(8)


# ---------------------------------------------------------------- best of n


def test_best_of_n_single_candidate_skips_critic():
    pol = zero_field()
    noise = np.array([[[0.42]]])
    a, best, scores, cand = best_of_n(pol, None, np.zeros((1, 1)), InferenceConfig(1, 1), noise=noise, return_scores=True)
    assert a[0, 0] == 0.42 and scores is None and best[0] == 0


def test_best_of_n_picks_highest_q():
    pol = zero_field()
    noise = np.array([[[0.5], [-0.1], [0.9]]])
    a = best_of_n(pol, NEG_SQUARE, np.zeros((1, 1)), InferenceConfig(1, 3), noise=noise)
    assert a[0, 0] == -0.1


def test_best_of_n_ties_go_to_lowest_index():
    pol = zero_field()
    noise = np.array([[[0.3], [-0.3], [0.3]]])
    _, best, _, _ = best_of_n(pol, NEG_SQUARE, np.zeros((1, 1)), InferenceConfig(1, 3), noise=noise, return_scores=True)
    assert best[0] == 0


def test_best_of_n_accepts_single_state():
    pol = ShortcutPolicy.create(2, 2, 8, (8,), 0)
    critic = Critic.create(2, 2, (8,), 1)
    a = best_of_n(pol, critic, np.zeros(2), InferenceConfig(2, 4), rng=NoiseSource(0))
    assert a.shape == (2,)


def test_best_of_n_scores_with_inference_step_code():
    codes = []

    def fn(x, a):
        return -np.sum(a * a, axis=1)

    class Rec(FnCritic):
        def mean_q(self, x, a, code, target=False, frozen=False):
            codes.append(np.asarray(code))
            return super().mean_q(x, a, code)

    best_of_n(zero_field(), Rec(fn), np.zeros((2, 1)), InferenceConfig(4, 3), rng=NoiseSource(1))
    np.testing.assert_allclose(codes[0], 2 / 3)


def test_candidate_noise_prefix_property():
    small = candidate_noise(5, 3, 7, 4, 2)
    big = candidate_noise(5, 3, 7, 9, 2)
    assert np.array_equal(big[:, :4], small)
    other = candidate_noise(5, 3, 8, 4, 2)
    assert not np.array_equal(other, small)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 20), N=st.integers(1, 12), m=st.sampled_from([1, 2, 4, 8]))
def test_property_argmax_contract(seed, N, m):
    pol = ShortcutPolicy.create(2, 2, 8, (8,), 3)
    critic = Critic.create(2, 2, (8,), 4)
    x = NoiseSource(seed).normal((3, 2))
    a, best, scores, cand = best_of_n(pol, critic, x, InferenceConfig(m, N), rng=NoiseSource(seed, 1), return_scores=True)
    if N == 1:
        assert np.array_equal(a, cand[:, 0])
        return
    q_sel = critic.mean_q(x, a, (np.log2(m) / 3.0), frozen=True).data
    np.testing.assert_array_equal(scores[np.arange(3), best], scores.max(axis=1))
    np.testing.assert_allclose(q_sel, scores.max(axis=1), rtol=0, atol=1e-12)


# ---------------------------------------------------------------- evaluate


def test_evaluate_rejects_zero_episodes():
    with pytest.raises(ValueError):
        evaluate(zero_field(2, 2), None, REACH2GOAL, InferenceConfig(1, 1, 0))


def test_random_policy_below_behavior_rate():
    _, stats = generate_dataset(REACH2GOAL, 20000, NoiseSource(0), return_stats=True)
    res = evaluate(zero_field(2, 2), None, REACH2GOAL, InferenceConfig(1, 1, 50, 0))
    assert res.success_rate < stats.success_fraction


def test_scripted_goal_policy_succeeds():
    res = evaluate(goal_seeker(REACH2GOAL), None, REACH2GOAL, InferenceConfig(4, 1, 20, 0))
    assert res.success_rate == 1.0
    assert all(r.length <= 6 for r in res.records)


def test_evaluate_is_deterministic():
    pol = ShortcutPolicy.create(2, 2, 8, (8,), 0)
    critic = Critic.create(2, 2, (8,), 1)
    cfg = InferenceConfig(2, 3, 8, 11)
    a = evaluate(pol, critic, REACH2GOAL, cfg)
    b = evaluate(pol, critic, REACH2GOAL, cfg)
    assert a == b


def test_bandit_success_threshold():
    good = evaluate(constant_field([0.6, 0.6]), None, BANDIT2GOAL, InferenceConfig(1, 1, 5))
    bad = evaluate(constant_field([-0.6, -0.6]), None, BANDIT2GOAL, InferenceConfig(1, 1, 5))
    assert good.success_rate == 1.0 and bad.success_rate == 0.0
    assert bad.mean_return == pytest.approx(0.5, abs=1e-6)


# ---------------------------------------------------------------- sweep


def test_sweep_single_cell():
    rows = scaling_sweep(zero_field(2, 2), None, REACH2GOAL, [1], [1], 1)
    assert len(rows) == 1 and (rows[0].m_inf, rows[0].n, rows[0].episodes) == (1, 1, 1)


def test_sweep_constant_policy_and_critic_is_flat():
    critic = FnCritic(lambda x, a: np.ones(len(a)))
    rows = scaling_sweep(constant_field([0.1, 0.1]), critic, REACH2GOAL, [1, 2, 8], [1, 4], 4)
    assert len({r.mean_return for r in rows}) == 1
    assert len({r.success_rate for r in rows}) == 1


def test_sweep_rejects_illegal_budget_before_running():
    calls = []

    def fn(a, t, h, x):
        calls.append(1)
        return np.zeros_like(a)

    with pytest.raises(ValueError):
        scaling_sweep(AnalyticField(fn, 2, 2, 8), None, REACH2GOAL, [1, 3], [1], 2)
    assert calls == []


def test_sweep_allows_budgets_beyond_btt():
    pol = ShortcutPolicy.create(2, 2, 8, (8,), 0)
    rows = scaling_sweep(pol, Critic.create(2, 2, (8,), 1), REACH2GOAL, [8], [2], 2)
    assert rows[0].m_inf == 8


def test_sweep_csv_round_trip_and_plot(tmp_path):
    rows = scaling_sweep(zero_field(2, 2), NEG_SQUARE, REACH2GOAL, [1, 2], [1, 2], 3)
    p = tmp_path / "s.csv"
    write_sweep_csv(rows, p)
    assert p.read_text().split("\n")[0] == ",".join(SWEEP_COLUMNS)
    back = read_sweep_csv(p)
    assert back == rows
    pytest.importorskip("matplotlib")
    plot_sweep(rows, tmp_path / "s.png")
    assert (tmp_path / "s.png").stat().st_size > 0

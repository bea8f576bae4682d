import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sorl.envworld import (
    BANDIT2GOAL,
    HEADER_PREFIX,
    REACH2GOAL,
    Dataset,
    DatasetFormatError,
    EnvSpec,
    bandit_reward,
    env_reset,
    env_step,
    generate_dataset,
    get_env,
    load_dataset,
    optimal_reward,
    save_dataset,
)
from sorl.shortcut import NoiseSource


def test_env_spec_invariants():
    with pytest.raises(ValueError):
        EnvSpec("x", 1, 1, 1.0, 0, 0.9, (0.0,), (0.0,), 0.1, 0.5)
    with pytest.raises(ValueError):
        EnvSpec("x", 1, 1, 0.0, 1, 0.9, (0.0,), (0.0,), 0.1, 0.5)


def test_unknown_env_lists_valid_names():
    with pytest.raises(KeyError, match="bandit2goal"):
        get_env("cartpole")


# ---------------------------------------------------------------- reset / step


def test_bandit_reset_is_origin():
    for s in range(5):
        assert np.array_equal(env_reset(BANDIT2GOAL, NoiseSource(s)), np.zeros(2))


def test_reach_reset_reproducible_and_in_box():
    a = env_reset(REACH2GOAL, NoiseSource(3))
    b = env_reset(REACH2GOAL, NoiseSource(3))
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= 0.1)


def test_reach_reset_mean_near_zero():
    x = env_reset(REACH2GOAL, NoiseSource(4), n=10000)
    assert np.all(np.abs(x.mean(axis=0)) < 0.01)
    assert np.all(np.abs(x) <= 0.1)


def test_reach_step_free_motion():
    x, r, d = env_step(REACH2GOAL, [0.0, 0.0], [0.2, 0.2])
    np.testing.assert_allclose(x, [0.2, 0.2])
    assert r == 0.0 and d == 0.0


def test_reach_step_goal():
    x, r, d = env_step(REACH2GOAL, [0.65, 0.65], [0.05, 0.05])
    np.testing.assert_allclose(x, [0.7, 0.7])
    assert r == 1.0 and d == 1.0


def test_reach_step_clips_to_box():
    x, _, _ = env_step(REACH2GOAL, [0.95, -0.95], [0.2, -0.2])
    np.testing.assert_allclose(x, [1.0, -1.0])


def test_step_rejects_out_of_bounds_action():
    with pytest.raises(ValueError):
        env_step(REACH2GOAL, [0.0, 0.0], [0.25, 0.0])
    with pytest.raises(ValueError):
        env_step(BANDIT2GOAL, [0.0, 0.0], [1.5, 0.0])


def test_bandit_reward_at_goal():
    _, r, d = env_step(BANDIT2GOAL, [0.0, 0.0], [0.6, 0.6])
    expect = 1.0 + 0.5 * math.exp(-(1.2 ** 2 + 1.2 ** 2) / (2 * 0.15 ** 2))
    assert r == pytest.approx(expect, abs=1e-15)
    assert d == 1.0


def test_bandit_optimum_matches_dense_grid():
    opt = optimal_reward(BANDIT2GOAL)
    g = np.linspace(0.55, 0.65, 1001)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    dense = bandit_reward(BANDIT2GOAL, np.stack([xx, yy], -1)).max()
    assert opt >= dense - 1e-12
    assert opt == pytest.approx(1.0, abs=1e-6)


def test_optimum_only_for_bandit():
    with pytest.raises(ValueError):
        optimal_reward(REACH2GOAL)


@settings(max_examples=100, deadline=None)
@given(
    x=st.lists(st.floats(-1, 1), min_size=2, max_size=2),
    a=st.lists(st.floats(-0.2, 0.2), min_size=2, max_size=2),
)
def test_property_reach_step_is_pure_and_rewards_binary(x, a):
    out1 = env_step(REACH2GOAL, x, a)
    out2 = env_step(REACH2GOAL, x, a)
    for u, v in zip(out1, out2):
        assert np.array_equal(u, v)
    assert float(out1[1]) in (0.0, 1.0)
    assert np.all(np.abs(out1[0]) <= 1.0)


@settings(max_examples=100, deadline=None)
@given(a=st.lists(st.floats(-1, 1), min_size=2, max_size=2))
def test_property_bandit_reward_bounds(a):
    r = float(bandit_reward(BANDIT2GOAL, np.array(a)))
    assert 0.0 < r <= 1.5


# ---------------------------------------------------------------- datasets


def test_generate_rejects_zero():
    with pytest.raises(ValueError):
        generate_dataset(BANDIT2GOAL, 0, NoiseSource(0))


def test_bandit_dataset_symmetry():
    ds = generate_dataset(BANDIT2GOAL, 10000, NoiseSource(1))
    assert len(ds) == 10000
    assert np.all(np.abs(ds.actions.mean(axis=0)) < 0.05)
    assert np.all(np.abs(ds.actions) <= 1.0)


def test_reach_dataset_goal_fraction():
    ds, stats = generate_dataset(REACH2GOAL, 10000, NoiseSource(2), return_stats=True)
    assert len(ds) == 10000
    assert 0.4 <= stats.success_fraction <= 0.6
    assert np.all(np.abs(ds.actions) <= 0.2)
    assert set(np.unique(ds.rewards)) <= {0.0, 1.0}
    # terminal rows are exactly the rewarded rows
    assert np.array_equal(ds.dones, ds.rewards)


def test_reach_dataset_is_bimodal_near_origin():
    ds = generate_dataset(REACH2GOAL, 20000, NoiseSource(3))
    near = np.all(np.abs(ds.obs) <= 0.1, axis=1)
    a = ds.actions[near]
    # two-means with sign-based initialisation
    c = np.array([a[a.sum(1) > 0].mean(0), a[a.sum(1) <= 0].mean(0)])
    for _ in range(20):
        lab = np.argmin(((a[:, None] - c[None]) ** 2).sum(-1), axis=1)
        c = np.array([a[lab == k].mean(0) for k in range(2)])
    assert np.all(np.sign(c[0]) == -np.sign(c[1]))
    assert np.linalg.norm(c[0] - c[1]) > 0.2


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset("x", np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        Dataset("x", np.zeros((3, 2)), np.zeros((2, 2)), np.zeros(3), np.zeros((3, 2)), np.zeros(3))


def test_dataset_sample_is_reproducible():
    ds = generate_dataset(BANDIT2GOAL, 100, NoiseSource(0))
    b1 = ds.sample(NoiseSource(5), 16)
    b2 = ds.sample(NoiseSource(5), 16)
    for k in b1:
        assert np.array_equal(b1[k], b2[k])


# ---------------------------------------------------------------- persistence


def test_round_trip_100(tmp_path):
    ds = generate_dataset(REACH2GOAL, 100, NoiseSource(7))
    p = tmp_path / "d.txt"
    save_dataset(ds, p)
    back = load_dataset(p)
    assert back.equals(ds)
    for i in (0, 50, 99):
        a, b = ds[i], back[i]
        assert np.array_equal(a.x, b.x) and np.array_equal(a.a, b.a) and a.r == b.r and a.done == b.done


def test_header_is_exact(tmp_path):
    ds = generate_dataset(BANDIT2GOAL, 3, NoiseSource(0))
    p = tmp_path / "d.txt"
    save_dataset(ds, p)
    first = p.read_text().split("\n")[0]
    assert first == f"{HEADER_PREFIX} obs_dim=2 action_dim=2 env=bandit2goal"
    assert first == "# sorl-dataset v1 obs_dim=2 action_dim=2 env=bandit2goal"


def test_truncated_file_rejected(tmp_path):
    ds = generate_dataset(REACH2GOAL, 20, NoiseSource(0))
    p = tmp_path / "d.txt"
    save_dataset(ds, p)
    text = p.read_text()
    p.write_text(text[: len(text) - 7])
    with pytest.raises(DatasetFormatError):
        load_dataset(p)


def test_wrong_column_count_rejected(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("# sorl-dataset v1 obs_dim=3 action_dim=2 env=reach2goal\n" + ",".join(["0.0"] * 8) + "\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(p)


def test_bad_header_rejected(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("# other v1\n1,2\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(p)


def test_non_finite_rejected(tmp_path):
    p = tmp_path / "d.txt"
    p.write_text("# sorl-dataset v1 obs_dim=1 action_dim=1 env=x\n0.0,nan,0.0,0.0,0.0\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(p)


@settings(max_examples=30, deadline=None)
@given(vals=st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=5, max_size=5))
def test_property_round_trip_full_precision(tmp_path_factory, vals):
    v = np.array(vals)
    ds = Dataset("reach2goal", v[None, 0:1], v[None, 1:2], v[2:3], v[None, 3:4], v[4:5])
    p = tmp_path_factory.mktemp("rt") / "d.txt"
    save_dataset(ds, p)
    assert load_dataset(p).equals(ds)

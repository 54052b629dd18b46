import numpy as np
import pytest

from maskshare.envs import (
    EnvSpec,
    TrajectoryWriter,
    VecEnv,
    action_dim,
    make_env,
    obs_dim,
    read_trajectory,
)
from maskshare.errors import ContractError


def bps(agents=(3, 3, 3), seed=0, **kw):
    return make_env(EnvSpec("bps", agents, seed=seed, **kw))


def lbf(agents=(3, 3, 3), seed=0, **kw):
    return make_env(EnvSpec("lbf", agents, seed=seed, **kw))


def test_spec_validation():
    with pytest.raises(ValueError):
        EnvSpec("bps", (1,))
    with pytest.raises(ValueError):
        EnvSpec("rware", (2, 2))
    with pytest.raises(ValueError):
        EnvSpec("lbf", (2, 2), horizon=0)
    assert EnvSpec("lbf", (2, 2)).horizon == 50


@pytest.mark.parametrize("make", [bps, lbf])
def test_reset_is_deterministic(make):
    a = make(seed=11).reset()
    b = make(seed=11).reset()
    assert a.tobytes() == b.tobytes()
    assert make(seed=12).reset().tobytes() != a.tobytes()


@pytest.mark.parametrize("make", [bps, lbf])
def test_seed_and_actions_determine_trajectory(make):
    rng = np.random.default_rng(0)
    e1, e2 = make(seed=5), make(seed=5)
    o1, o2 = e1.reset(), e2.reset()
    for _ in range(30):
        a = rng.integers(0, e1.n_actions, e1.n_agents)
        r1, r2 = e1.step(a), e2.step(a)
        assert r1.observations.tobytes() == r2.observations.tobytes()
        assert r1.rewards.tobytes() == r2.rewards.tobytes()
        assert r1.done == r2.done
        if r1.done:
            break


def test_dims():
    s = EnvSpec("lbf", (3, 3, 3))
    assert action_dim(s) == 6
    assert action_dim(EnvSpec("bps", (3, 3, 3))) == 5
    assert {obs_dim(s, i) for i in range(9)} == {3 + 12 + 16}
    env = make_env(s)
    assert env.reset().shape == (9, obs_dim(s))
    b = EnvSpec("bps", (10, 10, 10))
    assert make_env(b).reset().shape == (30, obs_dim(b)) == (30, 6 + 58)


def test_bps_observation_hides_type_labels():
    env = bps(seed=3)
    env.reset()
    before = env.observe()
    env.state.agent_types = np.random.default_rng(1).permutation(env.state.agent_types)
    assert np.array_equal(before, env.observe())
    # rewards do depend on the hidden label
    assert not np.array_equal(-env.distances(), -np.linalg.norm(
        env.state.agent_pos - env.state.landmarks[env.agent_types], axis=1))


def test_bps_on_landmark_stay_gives_zero():
    env = bps(seed=0)
    env.reset()
    env.state.agent_pos[0] = env.state.landmarks[env.state.agent_types[0]]
    res = env.step(np.zeros(env.n_agents, dtype=int))
    assert res.rewards[0] == 0.0


def test_bps_mirrored_agents_equal_rewards():
    env = bps(seed=0, agents=(2, 2))
    env.reset()
    env.state.landmarks[0] = [0.5, 0.5]
    env.state.agent_pos[0] = [0.25, 0.625]
    env.state.agent_pos[1] = [0.75, 0.375]
    res = env.step(np.zeros(4, dtype=int))
    assert res.rewards[0] == res.rewards[1]


def test_bps_moves_and_clamp():
    env = bps(seed=0, agents=(1, 1))
    env.reset()
    env.state.agent_pos[:] = [[0.5, 0.5], [0.0, 1.0]]
    env.step(np.array([4, 1]))
    np.testing.assert_allclose(env.state.agent_pos, [[0.55, 0.5], [0.0, 1.0]])


def test_invalid_action_names_agent():
    env = lbf()
    env.reset()
    a = np.zeros(9, dtype=int)
    a[4] = 6
    with pytest.raises(ContractError, match="agent 4"):
        env.step(a)


@pytest.mark.parametrize("make", [bps, lbf])
def test_episode_never_exceeds_horizon(make):
    env = make(seed=2, horizon=7)
    env.reset()
    rng = np.random.default_rng(0)
    steps = 0
    while True:
        steps += 1
        if env.step(rng.integers(0, env.n_actions, env.n_agents)).done:
            break
    assert steps <= 7


def test_step_after_horizon_rejected():
    env = bps(horizon=2)
    env.reset()
    env.step(np.zeros(9, dtype=int))
    assert env.step(np.zeros(9, dtype=int)).done
    with pytest.raises(ContractError):
        env.step(np.zeros(9, dtype=int))


def test_lbf_distinct_cells_over_many_seeds():
    # exhaustive collision check: every entity on its own cell, across resets and steps
    for seed in range(300):
        env = lbf(seed=seed)
        env.reset()
        rng = np.random.default_rng(seed)
        for _ in range(5):
            s = env.state
            cells = [tuple(p) for p in s.agent_pos] + [tuple(p) for p in s.food_pos[s.food_present]]
            assert len(cells) == len(set(cells)) == 9 + s.remaining_food
            assert all(0 <= r < 8 and 0 <= c < 8 for r, c in cells)
            assert (s.agent_levels >= 1).all() and (s.food_levels >= 1).all()
            if env.step(rng.integers(0, 6, 9)).done:
                break


def _lbf_loading_fixture():
    # agents: index 0 level 1 (type 0), index 2 level 2 (type 1)
    env = lbf(agents=(2, 2), n_food=2)
    env.reset()
    s = env.state
    s.agent_pos[:] = [[3, 2], [0, 0], [3, 4], [7, 7]]
    s.food_pos[:] = [[3, 3], [6, 0]]
    s.food_levels[:] = [3, 1]
    s.food_present[:] = True
    env._total_food_level = 4
    return env


def test_lbf_loading_rule():
    env = _lbf_loading_fixture()
    # level-2 agent alone cannot lift level-3 food
    res = env.step(np.array([0, 0, 5, 0]))
    assert env.state.food_present[0]
    assert res.rewards.sum() == 0.0
    # with the level-1 teammate: collected, split 2:1
    res = env.step(np.array([5, 0, 5, 0]))
    assert not env.state.food_present[0]
    assert res.rewards[2] == pytest.approx(2 * 3 / (3 * 4))
    assert res.rewards[0] == pytest.approx(1 * 3 / (3 * 4))
    assert res.rewards[2] / res.rewards[0] == pytest.approx(2.0)


def test_lbf_full_clear_sums_to_one():
    env = _lbf_loading_fixture()
    total = env.step(np.array([5, 0, 5, 0])).rewards.sum()
    env.state.agent_pos[1] = [5, 0]
    res = env.step(np.array([0, 5, 0, 0]))
    total += res.rewards.sum()
    assert total == pytest.approx(1.0)
    assert res.done


def test_lbf_observation_hides_other_levels():
    env = lbf(agents=(2, 2), seed=4)
    env.reset()
    before = env.observe()
    env.state.agent_levels[1] = 3  # another agent's level changes
    after = env.observe()
    assert np.array_equal(np.delete(before, 1, axis=0), np.delete(after, 1, axis=0))
    # food levels and positions are visible
    env.state.food_levels[0] += 1
    assert not np.array_equal(after[0], env.observe()[0])


def test_lbf_move_conflicts_block_both():
    env = lbf(agents=(1, 1), n_food=1)
    env.reset()
    env.state.agent_pos[:] = [[2, 1], [2, 3]]
    env.state.food_pos[:] = [[6, 6]]
    env.step(np.array([4, 3]))  # both target (2, 2)
    np.testing.assert_array_equal(env.state.agent_pos, [[2, 1], [2, 3]])
    env.step(np.array([1, 0]))
    np.testing.assert_array_equal(env.state.agent_pos, [[1, 1], [2, 3]])


def test_vec_env_autoreset_and_returns():
    spec = EnvSpec("bps", (2, 2), horizon=3)
    venv = VecEnv(spec, 2, seed=1)
    obs = venv.reset()
    assert obs.shape == (2, 4, venv.obs_dim)
    total = np.zeros((2, 4))
    for t in range(3):
        obs, rew, dones, infos = venv.step(np.zeros((2, 4), dtype=int))
        total += rew
    assert dones.all()
    np.testing.assert_allclose(infos[0]["episode_return"], total[0])
    assert "final_obs" in infos[1]


def test_trajectory_dump_roundtrip(tmp_path):
    env = bps(agents=(1, 1))
    obs = env.reset()
    res = env.step(np.array([1, 2]))
    path = tmp_path / "traj.tsv"
    with TrajectoryWriter(path) as w:
        w.write_step(0, obs, np.array([1, 2]), res.rewards)
    rows = read_trajectory(path)
    assert len(rows) == 2
    assert rows[1][1] == 1 and rows[1][3] == 2
    assert np.array_equal(rows[0][2], obs[0])
    assert rows[0][4] == res.rewards[0]


def test_lbf_observation_layout():
    env = _lbf_loading_fixture()
    o = env.observe()
    scale, lvl = 7.0, 3.0
    assert o.shape == (4, 3 + 4 * 2 + 2 * 3)
    np.testing.assert_allclose(o[0, :3], [3 / scale, 2 / scale, 1 / lvl])
    # food 0 sits one column right of agent 0
    np.testing.assert_allclose(o[0, 3:7], [0.0, 1 / scale, 3 / lvl, 1.0])
    np.testing.assert_allclose(o[0, 7:11], [3 / scale, -2 / scale, 1 / lvl, 1.0])
    # others in index order: agents 1, 2, 3
    np.testing.assert_allclose(o[0, 11:], [-3 / scale, -2 / scale, 0.0, 2 / scale, 4 / scale, 5 / scale])
    env.step(np.array([5, 0, 5, 0]))
    np.testing.assert_array_equal(env.observe()[0, 3:7], np.zeros(4))

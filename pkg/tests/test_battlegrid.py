import numpy as np
import pytest

from marlbarrier.battlegrid import (
    ATTACK_BASE,
    NOOP,
    BattleEnv,
    CorridorEnv,
    EnvConfig,
    EnvError,
    TrajectoryLogWriter,
    make_env,
    read_trajectory_log,
)


def battle_cfg(**kw):
    defaults = dict(env_type="battle", grid_width=7, grid_height=5, n_allies=3,
                    n_enemies=3, ally_hp=6, enemy_hp=2, attack_damage=1,
                    attack_range=1, sight_range=7, max_steps=30, seed=11)
    defaults.update(kw)
    return EnvConfig(**defaults)


def corridor_cfg(**kw):
    defaults = dict(env_type="corridor", grid_width=8, grid_height=1, n_allies=4,
                    n_enemies=0, sight_range=3, max_steps=20, hazards=(4,),
                    seed=5)
    defaults.update(kw)
    return EnvConfig(**defaults)


class TestReset:
    def test_same_seed_reproduces_states_and_observations(self):
        a, b = BattleEnv(battle_cfg()), BattleEnv(battle_cfg())
        oa, ob = a.reset(), b.reset()
        for x, y in zip(oa, ob):
            assert x.tobytes() == y.tobytes()
        np.testing.assert_array_equal(a.state.ally_pos, b.state.ally_pos)
        np.testing.assert_array_equal(a.state.enemy_pos, b.state.enemy_pos)

    def test_observation_list_length_matches_ally_count(self):
        env = BattleEnv(battle_cfg(n_allies=3))
        assert len(env.reset()) == 3

    def test_zero_sight_range_hides_every_other_unit(self):
        env = BattleEnv(battle_cfg(sight_range=0, attack_range=0))
        obs = env.reset()
        for i, o in enumerate(obs):
            assert np.all(o[:-1] == 0.0)
            assert o[-1] == 1.0  # own hp still visible

    def test_allies_left_band_enemies_right_band(self):
        env = BattleEnv(battle_cfg())
        env.reset()
        assert env.state.ally_pos[:, 0].max() < 7 // 3
        assert env.state.enemy_pos[:, 0].min() >= 7 - 7 // 3

    def test_rejects_overfull_band(self):
        with pytest.raises(EnvError, match="capacity"):
            BattleEnv(battle_cfg(grid_width=3, grid_height=1, n_allies=2,
                                 n_enemies=2))


class TestBattleStep:
    def test_all_noop_out_of_range_no_interaction(self):
        env = BattleEnv(battle_cfg())
        env.reset()
        _, res = env.step([NOOP] * 3)
        assert res.reward == 0.0
        assert res.deaths_this_step == 0
        assert not res.done

    def test_one_v_one_kill_collects_all_bonuses(self):
        cfg = battle_cfg(n_allies=1, n_enemies=1, enemy_hp=1, attack_range=1,
                         kill_reward=1.0, win_reward=8.0, damage_reward_scale=1.0,
                         grid_width=4, grid_height=1)
        env = BattleEnv(cfg)
        env.reset()
        # walk the ally adjacent to the enemy, then attack
        while abs(int(env.state.ally_pos[0, 0]) - int(env.state.enemy_pos[0, 0])) > 1:
            _, res = env.step([3])  # east
            assert not res.done
        _, res = env.step([ATTACK_BASE + 0])
        assert res.win and res.done
        assert res.reward == pytest.approx(1.0 * 1 + 1.0 + 8.0)

    def test_timeout_is_a_loss(self):
        cfg = battle_cfg(max_steps=3, attack_range=0, sight_range=0)
        env = BattleEnv(cfg)
        env.reset()
        for _ in range(2):
            _, res = env.step([NOOP] * 3)
            assert not res.done
        _, res = env.step([NOOP] * 3)
        assert res.done and not res.win

    def test_malformed_action_rejected(self):
        env = BattleEnv(battle_cfg())
        env.reset()
        with pytest.raises(EnvError, match="malformed"):
            env.step([99, NOOP, NOOP])

    def test_attack_on_dead_target_is_flagged_noop(self):
        cfg = battle_cfg(n_allies=2, n_enemies=1, enemy_hp=1, grid_width=6,
                         grid_height=1, attack_range=6, sight_range=6)
        env = BattleEnv(cfg)
        env.reset()
        _, res = env.step([ATTACK_BASE, ATTACK_BASE])  # second hit lands on a corpse
        assert res.win
        assert res.invalid_attacks == 1
        assert res.reward == pytest.approx(1.0 + 1.0 + 8.0)  # one kill only

    def test_enemy_hp_never_increases_and_deaths_bounded(self):
        env = BattleEnv(battle_cfg(seed=3))
        env.reset()
        rng = np.random.default_rng(0)
        total_deaths = 0
        prev_hp = env.state.enemy_hp.sum()
        for _ in range(40):
            avail = env.avail_actions()
            actions = [int(rng.choice(np.flatnonzero(avail[i])))
                       for i in range(env.n_agents)]
            _, res = env.step(actions)
            hp = env.state.enemy_hp.sum()
            assert hp <= prev_hp
            prev_hp = hp
            total_deaths += res.deaths_this_step
            if res.done:
                break
        assert total_deaths <= env.cfg.n_allies

    def test_replay_reproduces_trajectory_bit_exactly(self):
        cfg = battle_cfg(seed=9)
        env = BattleEnv(cfg)
        env.reset()
        rng = np.random.default_rng(1)
        actions_log, rewards = [], []
        for _ in range(15):
            avail = env.avail_actions()
            acts = [int(rng.choice(np.flatnonzero(avail[i])))
                    for i in range(env.n_agents)]
            actions_log.append(acts)
            _, res = env.step(acts)
            rewards.append(res.reward)
            if res.done:
                break
        env2 = BattleEnv(cfg)
        env2.reset()
        for acts, r in zip(actions_log, rewards):
            _, res = env2.step(acts)
            assert res.reward == r
        np.testing.assert_array_equal(env.state.ally_hp, env2.state.ally_hp)
        np.testing.assert_array_equal(env.state.enemy_pos, env2.state.enemy_pos)

    def test_win_implies_all_enemies_dead(self):
        cfg = battle_cfg(n_allies=2, n_enemies=2, enemy_hp=1, attack_range=7,
                         sight_range=7)
        env = BattleEnv(cfg)
        env.reset()
        _, res = env.step([ATTACK_BASE, ATTACK_BASE + 1])
        if res.win:
            assert env.state.enemy_hp.max() == 0

    def test_dead_ally_must_noop(self):
        cfg = battle_cfg(n_allies=1, n_enemies=3, ally_hp=1, attack_range=7,
                         sight_range=7)
        env = BattleEnv(cfg)
        env.reset()
        _, res = env.step([NOOP])
        assert res.done  # sole ally is dead
        assert res.deaths_this_step == 1


class TestCorridor:
    def test_hazard_free_lane_no_deaths(self):
        env = CorridorEnv(corridor_cfg(hazards=()))
        env.reset()
        for _ in range(7):
            _, res = env.step([1] * 4)
            assert res.deaths_this_step == 0
            if res.done:
                break
        assert res.win

    def test_entering_hazard_kills_and_clears(self):
        env = CorridorEnv(corridor_cfg(hazards=(2,)))
        env.reset()
        env.step([1, 0, 0, 0])
        _, res = env.step([1, 0, 0, 0])  # agent 0 steps onto the hazard
        assert res.deaths_this_step == 1
        assert env.state.ally_hp[0] == 0
        assert 2 not in env.state.hazards  # single-use

    def test_majority_elimination_ends_episode(self):
        env = CorridorEnv(corridor_cfg(n_allies=10, grid_width=12,
                                       hazards=(1, 2, 3, 4, 5, 6)))
        env.reset()
        deaths = 0
        done = False
        for _ in range(10):
            alive = env.state.ally_hp > 0
            # everyone marches; the lead agent clears one hazard per step
            acts = [1 if alive[i] else 0 for i in range(10)]
            _, res = env.step(acts)
            deaths += res.deaths_this_step
            if res.done:
                done = True
                break
        assert done and deaths == 6  # more than half of 10

    def test_progress_and_goal_rewards(self):
        cfg = corridor_cfg(n_allies=1, grid_width=3, hazards=(),
                           progress_reward=0.1, goal_bonus=2.0)
        env = CorridorEnv(cfg)
        env.reset()
        _, r1 = env.step([1])
        assert r1.reward == pytest.approx(0.1)
        _, r2 = env.step([1])
        assert r2.reward == pytest.approx(0.1 + 2.0)
        assert r2.win and r2.done

    def test_observation_shows_hazards_within_sight(self):
        env = CorridorEnv(corridor_cfg(n_allies=1, sight_range=3, hazards=(2,)))
        obs = env.reset()[0]
        hazard_flags = obs[0:3]  # no other agents -> hazard block starts at 0
        np.testing.assert_array_equal(hazard_flags, [0.0, 1.0, 0.0])


class TestTrajectoryLog:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "traj.txt"
        with TrajectoryLogWriter(path, meta={"seed": 3}) as w:
            w.write_step(0, 0, [1, 2], 0.5, 0, False, False)
            w.write_step(0, 1, [0, 0], 1.25, 2, True, False)
            w.write_step(1, 0, [3, 4], 0.0, 0, True, True)
        eps = read_trajectory_log(path)
        assert len(eps) == 2
        assert eps[0].total_deaths == 2
        assert eps[0].done and not eps[0].win
        assert eps[1].win
        assert eps[0].rewards == [0.5, 1.25]

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("# header\n0 0 1,2 0.5 0 0 0\nnot a row\n")
        with pytest.raises(EnvError, match="3"):
            read_trajectory_log(path)

    def test_out_of_order_step_rejected(self, tmp_path):
        path = tmp_path / "bad2.txt"
        path.write_text("0 1 1 0.0 0 0 0\n")
        with pytest.raises(EnvError, match="out of order"):
            read_trajectory_log(path)


def test_make_env_dispatches_on_type():
    assert isinstance(make_env(battle_cfg()), BattleEnv)
    assert isinstance(make_env(corridor_cfg()), CorridorEnv)


def test_config_validation():
    with pytest.raises(EnvError):
        battle_cfg(attack_range=3, sight_range=2).validate()
    with pytest.raises(EnvError):
        corridor_cfg(hazards=(0,)).validate()
    with pytest.raises(EnvError):
        battle_cfg(env_type="flight").validate()

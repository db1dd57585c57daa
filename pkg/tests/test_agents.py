"""Action grid, heuristic behavior, and REINFORCE math against oracles."""

from __future__ import annotations

import math
import random
from collections import Counter

import numpy as np
import pytest

from trialworks import arena
from trialworks.agents import (
    FEATURE_SIZE,
    GRID_SIZE,
    EpisodeStep,
    ModelError,
    PolicyModel,
    extract_features,
    grid_decode,
    grid_encode,
    heuristic_act,
    load_model,
    random_act,
    reinforce_act,
    reinforce_update,
    returns_to_go,
    save_model,
)
from trialworks.protocol import SchemaRef, validate_against_schema

ACTION_SCHEMA = SchemaRef("arena_action", 1)
OBS_SCHEMA = SchemaRef("arena_obs", 1)


def make_obs(players=(), projectiles=(), alive=True, theta=0.0):
    return {
        "self": {"x": 30.0, "y": 30.0, "theta": theta, "alive": alive},
        "visible_players": list(players),
        "visible_projectiles": list(projectiles),
        "tick_id": 0,
    }


def opponent(x, y, theta=0.0, alive=True, opponent_flag=True):
    return {"x": x, "y": y, "theta": theta, "team_is_opponent": opponent_flag, "alive": alive}


class TestGrid:
    def test_bijection_over_all_cells(self):
        seen = set()
        for i in range(GRID_SIZE):
            action = grid_decode(i)
            validate_against_schema(action, ACTION_SCHEMA)
            assert grid_encode(action) == i
            seen.add((action["fire"], action["strafe"], action["forward"], action["rotate"]))
        assert len(seen) == GRID_SIZE

    def test_row_major_fire_slowest(self):
        assert grid_decode(0) == {"fire": False, "strafe": -1.0, "forward": -1.0, "rotate": -1.0}
        assert grid_decode(1) == {"fire": False, "strafe": -1.0, "forward": -1.0, "rotate": 0.0}
        assert grid_decode(3) == {"fire": False, "strafe": -1.0, "forward": 0.0, "rotate": -1.0}
        assert grid_decode(9) == {"fire": False, "strafe": 0.0, "forward": -1.0, "rotate": -1.0}
        assert grid_decode(27) == {"fire": True, "strafe": -1.0, "forward": -1.0, "rotate": -1.0}
        assert grid_decode(53) == {"fire": True, "strafe": 1.0, "forward": 1.0, "rotate": 1.0}

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            grid_decode(54)


class TestRandomAct:
    def test_schema_valid_and_reproducible(self):
        actions = [random_act(make_obs(), random.Random(99)) for _ in range(5)]
        assert all(a == actions[0] for a in actions)
        validate_against_schema(actions[0], ACTION_SCHEMA)

    def test_uniform_over_grid(self):
        rng = random.Random(4)
        counts = Counter(grid_encode(random_act(make_obs(), rng)) for _ in range(54_000))
        assert len(counts) == GRID_SIZE
        for cell, n in counts.items():
            assert abs(n - 1000) <= 120, (cell, n)


class TestHeuristic:
    def test_fires_at_opponent_dead_ahead(self):
        action = heuristic_act(make_obs(players=[opponent(20.0, 0.0)]), fov_range=50.0)
        assert action["fire"] is True
        assert action["rotate"] == 0.0
        assert action["forward"] == 1.0  # 20 > 0.3 * 50

    def test_scans_when_nothing_visible(self):
        action = heuristic_act(make_obs(), fov_range=50.0)
        assert action == {"fire": False, "strafe": 0.0, "forward": 0.0, "rotate": 1.0}

    def test_ignores_teammates_and_corpses(self):
        players = [opponent(10.0, 0.0, opponent_flag=False), opponent(12.0, 1.0, alive=False)]
        action = heuristic_act(make_obs(players=players), fov_range=50.0)
        assert action["rotate"] == 1.0 and not action["fire"]

    def test_negative_bearing_rotates_negative(self):
        action = heuristic_act(make_obs(players=[opponent(10.0, -10.0)]), fov_range=50.0)
        assert action["rotate"] < 0

    def test_rotation_sign_closes_bearing_in_simulation(self):
        # The sign convention oracle: one step of the heuristic's rotate must
        # shrink the bearing computed by the arena's own visibility transform.
        state = arena.arena_init(arena.ArenaConfig(seed=3, fov_half_angle=math.pi), ["A", "B"])
        a, b = state.player("A"), state.player("B")
        a.x, a.y, a.theta = 50.0, 50.0, -math.pi / 2
        b.x, b.y = 60.0, 60.0
        obs = arena.player_observation(state, a)
        target = obs["visible_players"][0]
        before = abs(math.atan2(target["y"], target["x"]))
        action = heuristic_act(obs, fov_range=state.config.fov_range)
        arena.arena_step(state, {"A": dict(action, fire=False), "B":
                                 {"fire": False, "strafe": 0.0, "forward": 0.0, "rotate": 0.0}})
        obs_after = arena.player_observation(state, a)
        target_after = obs_after["visible_players"][0]
        after = abs(math.atan2(target_after["y"], target_after["x"]))
        assert after < before

    def test_dodges_at_close_range(self):
        action = heuristic_act(make_obs(players=[opponent(5.0, 0.5)]), fov_range=50.0)
        assert action["forward"] == 0.0
        assert action["strafe"] == 1.0


class TestFeatures:
    def test_shape_and_absent_encoding(self):
        features = extract_features(make_obs(), fov_range=50.0)
        assert features.shape == (FEATURE_SIZE,)
        assert features[0] == 1.0  # bias
        # absent opponent: range=fov_range (normalized 1), bearing 0, no presence
        assert features[5] == 1.0 and features[6] == 1.0 and features[7] == 0.0
        assert features[10] == 0.0
        assert np.all(np.isfinite(features))

    def test_present_opponent_polar(self):
        features = extract_features(make_obs(players=[opponent(30.0, 40.0)]), fov_range=100.0)
        assert features[5] == pytest.approx(0.5)           # range 50 / fov 100
        assert features[6] == pytest.approx(math.cos(math.atan2(40, 30)))
        assert features[10] == 1.0


class TestReinforceAct:
    def test_zero_weights_uniform(self):
        model = PolicyModel()
        action, log_prob, cell, _ = reinforce_act(model, make_obs(), random.Random(1))
        assert log_prob == pytest.approx(-math.log(54))
        probs = model.distribution(extract_features(make_obs(), model.fov_range))
        assert probs == pytest.approx(np.full(54, 1 / 54))
        validate_against_schema(action, ACTION_SCHEMA)

    def test_distribution_sums_to_one(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            model = PolicyModel(weights=rng.normal(0, 3, size=(GRID_SIZE, FEATURE_SIZE)))
            probs = model.distribution(rng.normal(0, 1, FEATURE_SIZE))
            assert abs(probs.sum() - 1.0) < 1e-9
            assert np.all(probs > 0)

    def test_huge_scores_clamped_not_degenerate(self):
        model = PolicyModel(weights=np.full((GRID_SIZE, FEATURE_SIZE), 1e6))
        probs = model.distribution(np.ones(FEATURE_SIZE))
        assert np.all(np.isfinite(probs))
        assert abs(probs.sum() - 1.0) < 1e-9

    def test_non_finite_weights_raise(self):
        model = PolicyModel(weights=np.full((GRID_SIZE, FEATURE_SIZE), np.nan))
        with pytest.raises(ModelError):
            model.distribution(np.ones(FEATURE_SIZE))

    def test_sampling_reproducible(self):
        model = PolicyModel()
        a = reinforce_act(model, make_obs(), random.Random(5))
        b = reinforce_act(model, make_obs(), random.Random(5))
        assert a[2] == b[2]


class TestGradient:
    def test_matches_central_finite_differences(self):
        rng = np.random.default_rng(123)
        h = 1e-6
        for case in range(20):
            weights = rng.normal(0, 1, size=(GRID_SIZE, FEATURE_SIZE))
            features = rng.normal(0, 1, FEATURE_SIZE)
            cell = int(rng.integers(GRID_SIZE))
            model = PolicyModel(weights=weights.copy())
            probs = model.distribution(features)
            analytic = model.grad_log_prob(features, probs, cell)
            # spot-check a random subset of coordinates against the oracle
            for _ in range(25):
                i = int(rng.integers(GRID_SIZE))
                j = int(rng.integers(FEATURE_SIZE))
                w_plus = weights.copy(); w_plus[i, j] += h
                w_minus = weights.copy(); w_minus[i, j] -= h
                lp_plus = math.log(PolicyModel(weights=w_plus).distribution(features)[cell])
                lp_minus = math.log(PolicyModel(weights=w_minus).distribution(features)[cell])
                numeric = (lp_plus - lp_minus) / (2 * h)
                scale = max(1.0, abs(numeric))
                assert abs(analytic[i, j] - numeric) / scale < 1e-5


class TestReturns:
    def test_gamma_zero_returns_rewards(self):
        assert returns_to_go([1.0, -2.0, 3.0], 0.0) == [1.0, -2.0, 3.0]

    def test_discounted(self):
        assert returns_to_go([1.0, 1.0, 1.0], 0.5) == [1.75, 1.5, 1.0]


class TestReinforceUpdate:
    def step(self, model, obs, reward, rng):
        action, log_prob, cell, features = reinforce_act(model, obs, rng)
        return EpisodeStep(features, cell, log_prob, reward)

    def test_zero_rewards_leave_weights_unchanged(self):
        model = PolicyModel()
        rng = random.Random(0)
        episode = [self.step(model, make_obs(), 0.0, rng) for _ in range(5)]
        before = model.weights.copy()
        reinforce_update(model, episode)
        assert np.array_equal(model.weights, before)

    def test_empty_episode_noop(self):
        model = PolicyModel()
        before = model.weights.copy()
        reinforce_update(model, [])
        assert np.array_equal(model.weights, before)

    def test_single_transition_closed_form(self):
        model = PolicyModel(learning_rate=0.05, discount=0.9)
        features = extract_features(make_obs(players=[opponent(10.0, 5.0)]), model.fov_range)
        probs = model.distribution(features)
        cell = 17
        g = 2.5  # single step: no normalization applies
        expected = model.weights + 0.05 * g * np.outer(
            np.eye(GRID_SIZE)[cell] - probs, features)
        reinforce_update(model, [EpisodeStep(features, cell, math.log(probs[cell]), g)])
        assert model.weights == pytest.approx(expected)

    def test_normalization_applied_for_longer_episodes(self):
        model = PolicyModel(discount=0.0)
        rng = random.Random(2)
        episode = [self.step(model, make_obs(), r, rng) for r in (1.0, 3.0)]
        returns = np.array([1.0, 3.0])
        std = math.sqrt(max(returns.var(), 1e-8))
        normalized = (returns - returns.mean()) / std
        expected = model.weights.copy()
        for step, g in zip(episode, normalized):
            probs = PolicyModel().distribution(step.features)
            expected += model.learning_rate * g * np.outer(
                np.eye(GRID_SIZE)[step.cell] - probs, step.features)
        reinforce_update(model, episode)
        assert model.weights == pytest.approx(expected)


class TestSwapCompatibility:
    def test_all_implementations_accept_valid_obs_and_emit_valid_actions(self):
        rng = random.Random(31)
        model = PolicyModel(weights=np.random.default_rng(1).normal(0, 2, (GRID_SIZE, FEATURE_SIZE)))
        for case in range(200):
            players = [
                opponent(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-math.pi, math.pi),
                         alive=rng.random() > 0.3, opponent_flag=rng.random() > 0.5)
                for _ in range(rng.randint(0, 4))
            ]
            projectiles = [
                {"x": rng.uniform(-50, 50), "y": rng.uniform(-50, 50),
                 "vx": rng.uniform(-5, 5), "vy": rng.uniform(-5, 5)}
                for _ in range(rng.randint(0, 3))
            ]
            obs = make_obs(players, projectiles, alive=rng.random() > 0.1,
                           theta=rng.uniform(-math.pi, math.pi))
            validate_against_schema(obs, OBS_SCHEMA)
            for action in (
                random_act(obs, rng),
                heuristic_act(obs, fov_range=50.0),
                reinforce_act(model, obs, rng)[0],
            ):
                validate_against_schema(action, ACTION_SCHEMA)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        model = PolicyModel(weights=rng.normal(0, 1, (GRID_SIZE, FEATURE_SIZE)),
                            learning_rate=0.02, discount=0.95, fov_range=60.0)
        path = tmp_path / "model.twckpt"
        save_model(model, path)
        loaded = load_model(path)
        assert np.array_equal(loaded.weights, model.weights)
        assert loaded.learning_rate == 0.02
        assert loaded.discount == 0.95
        assert loaded.fov_range == 60.0

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "not.twckpt"
        from trialworks.protocol import Envelope, ORCHESTRATOR, encode_frame
        path.write_bytes(encode_frame(Envelope("heartbeat", "", 0, ORCHESTRATOR, {})))
        with pytest.raises(ModelError):
            load_model(path)

import numpy as np
import pytest

from marltrap.arena import STOP, Arena, ArenaConfig
from marltrap.marl import (
    EpisodeRecord,
    ReplayBuffer,
    SharedTeamPolicy,
    TrainConfig,
    build_model,
    collate,
    derive_streams,
    epsilon_greedy,
    load_team_model,
    record_to_jsonl,
    run_episode,
    save_team_model,
    train_clean,
    with_agent_ids,
)


def small_cfg(**kw):
    base = dict(
        n_allies=3,
        n_enemies=3,
        width=24.0,
        height=24.0,
        sight_radius=12.0,
        attack_range=3.0,
        move_step=2.0,
        attack_damage=2.0,
        initial_health=10.0,
        step_limit=40,
        ally_spawn_x=6.0,
        enemy_spawn_x=18.0,
        spawn_jitter=0.4,
    )
    base.update(kw)
    return ArenaConfig(**base)


class TestEpsilonGreedy:
    def test_zero_eps_is_argmax(self):
        q = np.array([0.1, 0.9, 0.3])
        mask = np.array([True, True, True])
        assert epsilon_greedy(q, mask, 0.0, None) == 1

    def test_masked_argmax_skips_best(self):
        q = np.array([0.1, 0.9, 0.3])
        mask = np.array([True, False, True])
        assert epsilon_greedy(q, mask, 0.0, None) == 2

    def test_ties_go_low(self):
        q = np.array([0.5, 0.5, 0.5])
        mask = np.array([False, True, True])
        assert epsilon_greedy(q, mask, 0.0, None) == 1

    def test_eps_one_uniform(self):
        rng = np.random.default_rng(0)
        q = np.array([5.0, 1.0, 1.0, 1.0])
        mask = np.array([True, True, False, True])
        draws = np.array([epsilon_greedy(q, mask, 1.0, rng) for _ in range(10_000)])
        counts = np.bincount(draws, minlength=4)
        assert counts[2] == 0
        # each available slot ~ Binomial(10000, 1/3): 3 sigma band
        sigma = np.sqrt(10_000 * (1 / 3) * (2 / 3))
        for slot in (0, 1, 3):
            assert abs(counts[slot] - 10_000 / 3) < 3 * sigma

    def test_all_masked_raises(self):
        with pytest.raises(ValueError):
            epsilon_greedy(np.array([1.0]), np.array([False]), 0.1, np.random.default_rng(0))

    def test_fuzz_never_unavailable(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            n = int(rng.integers(2, 9))
            mask = rng.random(n) > 0.5
            if not mask.any():
                mask[rng.integers(n)] = True
            a = epsilon_greedy(rng.normal(size=n), mask, float(rng.random()), rng)
            assert mask[a]


class TestReplayBuffer:
    def _ep(self, tag):
        rec = EpisodeRecord(
            obs=np.zeros((2, 1, 3)),
            state=np.zeros((2, 4)),
            avail=np.ones((2, 1, 5), dtype=bool),
            actions=np.zeros((1, 1), dtype=np.int64),
            enemy_actions=np.zeros((1, 1), dtype=np.int64),
            reward=np.zeros(1),
            env_reward=np.zeros(1),
            done=np.array([True]),
            won=False,
        )
        rec.tag = tag
        return rec

    def test_fifo_eviction(self):
        buf = ReplayBuffer(capacity=10)
        for i in range(13):
            buf.insert(self._ep(i))
        tags = {e.tag for e in buf.episodes()}
        assert tags == set(range(3, 13))
        assert len(buf) == 10

    def test_sample_without_replacement_when_full(self):
        buf = ReplayBuffer(capacity=8)
        for i in range(8):
            buf.insert(self._ep(i))
        got = buf.sample(np.random.default_rng(0), 8)
        assert sorted(e.tag for e in got) == list(range(8))

    def test_empty_sample_raises(self):
        with pytest.raises(ValueError):
            ReplayBuffer(4).sample(np.random.default_rng(0), 2)


class _StopPolicy:
    """Scripted: every ally stops (dead ones no-op via the mask)."""

    def reset(self):
        pass

    def act(self, obs, avail, eps, rng):
        n = obs.shape[0]
        return np.array([STOP if avail[i][STOP] else 0 for i in range(n)], dtype=np.int64)


class TestRunEpisode:
    def test_deterministic_greedy_rollout(self):
        cfg = small_cfg()
        arena = Arena(cfg)
        model = build_model("vdn", cfg, seed=0)

        def play():
            policy = SharedTeamPolicy(model.agent, 3)
            return run_episode(arena, policy, 0.0, None, seed=5)

        a, b = play(), play()
        assert np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.reward, b.reward)

    def test_step_limit_termination(self):
        cfg = small_cfg(initial_health=1000.0, step_limit=12)
        arena = Arena(cfg)
        rec = run_episode(arena, _StopPolicy(), 0.0, None, seed=1)
        assert rec.length == 12
        assert not rec.won
        assert rec.done[-1] and not rec.done[:-1].any()

    def test_noop_hooks_leave_trajectory_unchanged(self):
        from marltrap.marl import RolloutHooks

        cfg = small_cfg()
        arena = Arena(cfg)
        model = build_model("vdn", cfg, seed=2)

        def play(hooks):
            policy = SharedTeamPolicy(model.agent, 3)
            return run_episode(arena, policy, 0.0, None, seed=9, hooks=hooks)

        bare, hooked = play(None), play(RolloutHooks())
        assert np.array_equal(bare.actions, hooked.actions)
        assert np.array_equal(bare.reward, hooked.reward)

    def test_record_lengths_consistent(self):
        cfg = small_cfg()
        arena = Arena(cfg)
        model = build_model("vdn", cfg, seed=1)
        rec = run_episode(
            arena, SharedTeamPolicy(model.agent, 3), 0.3, np.random.default_rng(0), seed=2
        )
        T = rec.length
        assert rec.obs.shape[0] == T + 1
        assert rec.state.shape[0] == T + 1
        assert rec.avail.shape[0] == T + 1
        assert rec.reward.shape == (T,)
        assert rec.done.sum() == 1

    def test_jsonl_dump_round_trip_fields(self):
        import json

        cfg = small_cfg()
        arena = Arena(cfg)
        rec = run_episode(arena, _StopPolicy(), 0.0, None, seed=3, record_units=True)
        lines = record_to_jsonl(rec, arena).strip().split("\n")
        meta = json.loads(lines[0])
        assert meta["type"] == "meta" and meta["length"] == rec.length
        step0 = json.loads(lines[1])
        assert step0["type"] == "step"
        assert len(step0["units"]) == 6
        assert len(lines) == rec.length + 1


class TestCollate:
    def test_padding_and_ids(self):
        cfg = small_cfg()
        arena = Arena(cfg)
        model = build_model("vdn", cfg, seed=1)
        recs = [
            run_episode(arena, SharedTeamPolicy(model.agent, 3), 1.0, np.random.default_rng(i), seed=i)
            for i in range(3)
        ]
        batch = collate(recs, model.n_actions)
        B, T, n = batch.sizes
        assert B == 3 and n == 3
        assert T == max(r.length for r in recs)
        assert batch.obs.shape[-1] == cfg.obs_dim + 3
        # padded rows only allow noop; real rows never allow it for living agents
        for b, r in enumerate(recs):
            assert batch.mask[b, : r.length].all()
            assert not batch.mask[b, r.length:].any()
            if r.length < T:
                assert batch.avail[b, r.length + 1:, :, 0].all()
                assert batch.avail[b, r.length + 1:].sum() == (T - r.length) * 3

    def test_agent_id_onehot(self):
        obs = np.zeros((2, 4, 3, 5))
        out = with_agent_ids(obs)
        assert out.shape == (2, 4, 3, 8)
        assert np.array_equal(out[1, 2, :, 5:], np.eye(3))

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            collate([], 9)


class TestTrainClean:
    def test_short_run_is_deterministic(self):
        cfg = small_cfg()
        tc = TrainConfig(
            episodes=30,
            batch_size=4,
            eps_anneal_episodes=20,
            eval_interval=15,
            eval_episodes=3,
        )
        m1, c1 = train_clean("vdn", cfg, tc, seed=9)
        m2, c2 = train_clean("vdn", cfg, tc, seed=9)
        assert c1 == c2
        assert m1.digest() == m2.digest()

    def test_qmix_smoke(self):
        cfg = small_cfg()
        tc = TrainConfig(
            episodes=10, batch_size=4, eps_anneal_episodes=5, eval_interval=10, eval_episodes=2
        )
        model, curves = train_clean("qmix", cfg, tc, seed=1)
        assert len(curves) == 1
        assert 0.0 <= curves[0]["winrate"] <= 1.0


class TestModelIO:
    def test_round_trip(self, tmp_path):
        cfg = small_cfg()
        model = build_model("qmix", cfg, seed=4)
        path = tmp_path / "model.ckpt"
        save_team_model(path, model, {"note": "test"})
        loaded, meta = load_team_model(path)
        assert meta["note"] == "test"
        assert loaded.digest() == model.digest()
        obs = np.random.default_rng(0).normal(size=(3, cfg.obs_dim + 3))
        h = model.agent.init_hidden(3)
        np.testing.assert_array_equal(
            model.agent.forward(obs, h)[0], loaded.agent.forward(obs, h)[0]
        )

    def test_save_is_byte_deterministic(self, tmp_path):
        cfg = small_cfg()
        model = build_model("vdn", cfg, seed=4)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_team_model(p1, model, {"seed": 4})
        save_team_model(p2, model, {"seed": 4})
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupt_payload_rejected(self, tmp_path):
        from marltrap.checkpoint import CheckpointError

        cfg = small_cfg()
        model = build_model("vdn", cfg, seed=4)
        path = tmp_path / "model.ckpt"
        save_team_model(path, model)
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_team_model(path)


def test_derive_streams_is_stable():
    a = derive_streams(123, ["x", "y"])
    b = derive_streams(123, ["x", "y"])
    assert a["x"].entropy == b["x"].entropy and a["x"].spawn_key == b["x"].spawn_key
    assert a["x"].spawn_key != a["y"].spawn_key

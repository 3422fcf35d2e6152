import numpy as np
import pytest

from sdpolicy.toyenv import (
    A_MAX,
    CONTACT_RADIUS,
    MAX_STEPS,
    STATION_GAP,
    Dataset,
    DatasetFormatError,
    EnvState,
    dataset_from_bytes,
    dataset_to_bytes,
    env_step,
    episode_seed,
    evaluate_policy,
    expert_policy,
    generate_dataset,
    obs_window,
    push_station,
    random_state,
    read_dataset,
    rollout_expert,
    scripted_expert,
    splitmix64,
    write_metrics_csv,
)


def state(agent, block, target=(0.5, 0.5)):
    return EnvState(np.array(agent, float), np.array(block, float), np.array(target, float))


class TestStep:
    def test_zero_action(self):
        s = state((0.2, 0.3), (0.6, 0.7))
        n = env_step(s, (0, 0))
        assert np.array_equal(n.agent_pos, s.agent_pos) and np.array_equal(n.block_pos, s.block_pos)
        assert n.step_count == 1

    def test_free_motion(self):
        n = env_step(state((0.5, 0.5), (0.8, 0.8)), (0.05, 0.0))
        np.testing.assert_allclose(n.agent_pos, [0.55, 0.5], atol=1e-15)
        assert n.block_pos.tolist() == [0.8, 0.8]

    def test_action_clipped(self):
        n = env_step(state((0.5, 0.5), (0.8, 0.8)), (1.0, -1.0))
        np.testing.assert_allclose(n.agent_pos, [0.5 + A_MAX, 0.5 - A_MAX])

    def test_contact_push_along_normal(self):
        # agent ends 0.03 from the block centre: overlap 0.01 along +x
        n = env_step(state((0.45, 0.5), (0.5, 0.5)), (0.02, 0.0))
        np.testing.assert_allclose(n.agent_pos, [0.47, 0.5])
        np.testing.assert_allclose(n.block_pos, [0.51, 0.5], atol=1e-12)

    def test_oblique_contact(self):
        n = env_step(state((0.5, 0.5), (0.53, 0.53)), (0.01, 0.0))
        offset = np.array([0.02, 0.03])
        want = np.array([0.51, 0.5]) + offset / np.linalg.norm(offset) * CONTACT_RADIUS
        np.testing.assert_allclose(n.block_pos, want, atol=1e-12)
        assert np.linalg.norm(n.block_pos - n.agent_pos) == pytest.approx(CONTACT_RADIUS)

    def test_containment_and_determinism(self):
        rng = np.random.default_rng(0)
        s = random_state(rng)
        for _ in range(500):
            a = rng.uniform(-0.1, 0.1, 2)
            n1, n2 = env_step(s, a), env_step(s, a)
            assert np.array_equal(n1.agent_pos, n2.agent_pos) and np.array_equal(n1.block_pos, n2.block_pos)
            assert np.all((n1.agent_pos >= 0) & (n1.agent_pos <= 1))
            assert np.all((n1.block_pos >= 0) & (n1.block_pos <= 1))
            s = n1


class TestExpert:
    def test_done_state(self):
        assert scripted_expert(state((0.2, 0.2), (0.51, 0.52))).tolist() == [0.0, 0.0]

    def test_push_from_station(self):
        s = state((0.0, 0.0), (0.3, 0.5))
        s.agent_pos = push_station(s)
        np.testing.assert_allclose(s.agent_pos, [0.3 - CONTACT_RADIUS - STATION_GAP, 0.5])
        a = scripted_expert(s)
        assert np.linalg.norm(a) == pytest.approx(A_MAX)
        np.testing.assert_allclose(a / np.linalg.norm(a), [1.0, 0.0], atol=1e-12)

    def test_solves_hundred_random_starts(self):
        solved = sum(rollout_expert(random_state(np.random.default_rng(episode_seed(3, i)))).success
                     for i in range(100))
        assert solved >= 99

    def test_thousand_seeded_episodes(self):
        results = [rollout_expert(random_state(np.random.default_rng(episode_seed(11, i))))
                   for i in range(1000)]
        assert sum(r.success for r in results) >= 990
        assert max(len(r.actions) for r in results) <= MAX_STEPS


class TestSeeds:
    def test_splitmix_known_value(self):
        # first output of the reference splitmix64 generator seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_episode_seeds_distinct(self):
        assert len({episode_seed(5, i) for i in range(1000)}) == 1000


class TestDataset:
    def test_deterministic_bytes(self, tmp_path):
        generate_dataset(10, 7, tmp_path / "a.sdpd")
        generate_dataset(10, 7, tmp_path / "b.sdpd")
        assert (tmp_path / "a.sdpd").read_bytes() == (tmp_path / "b.sdpd").read_bytes()

    def test_round_trip_and_success(self, tmp_path):
        ds = generate_dataset(10, 1, tmp_path / "d.sdpd")
        back = read_dataset(tmp_path / "d.sdpd")
        assert back == ds
        assert all(t.success for t in back.trajectories)
        for t in back.trajectories:
            assert t.observations.shape == (len(t.actions) + 1, 6)
        acts = np.concatenate([t.actions for t in ds.trajectories])
        assert np.array_equal(ds.action_min, acts.min(axis=0))

    def test_bad_magic_and_truncation(self):
        ds = generate_dataset(2, 0)
        raw = dataset_to_bytes(ds)
        with pytest.raises(DatasetFormatError):
            dataset_from_bytes(b"XXXX" + raw[4:])
        with pytest.raises(DatasetFormatError):
            dataset_from_bytes(raw[:-3])
        with pytest.raises(DatasetFormatError):
            dataset_from_bytes(raw + b"\0")

    def test_rejects_bad_count(self):
        with pytest.raises(ValueError):
            generate_dataset(0, 0)

    def test_equality(self):
        ds = generate_dataset(2, 0)
        assert ds == Dataset.from_trajectories(ds.trajectories)


class TestEvaluate:
    def test_window_pads_first_frame(self):
        a, b = np.arange(6.0), np.arange(6.0) + 10
        assert obs_window([a]).tolist() == list(a) * 2
        assert obs_window([a, b]).tolist() == list(a) + list(b)

    def test_expert_policy_succeeds(self):
        m = evaluate_policy(expert_policy(), 50, seed=1000)
        assert m["success_rate"] == 1.0
        assert m["coverage"] > 0.9

    def test_zero_policy(self):
        m = evaluate_policy(lambda w: np.zeros((len(w), 16, 2)), 20, seed=3, max_steps=40)
        assert m["success_rate"] == 0.0 and m["coverage"] == pytest.approx(0.0, abs=1e-12)
        assert m["mean_steps"] == 40

    def test_repeatable(self, tmp_path):
        a = evaluate_policy(expert_policy(), 10, seed=4)
        b = evaluate_policy(expert_policy(), 10, seed=4)
        assert a == b
        write_metrics_csv(a, tmp_path / "a.csv")
        write_metrics_csv(b, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a.csv").read_text().splitlines()[0] == "n_episodes,seed,success_rate,mean_steps,coverage"

import inspect

import numpy as np
import pytest

from lvm.replay import ReplayBuffer, read_episode_file, write_episode_file

OBS_SHAPE = (1, 8, 8)


def add_episode(buf: ReplayBuffer, length: int, fill: float | None = None,
                rng: np.random.Generator | None = None) -> None:
    """Append one sealed episode; observations are `fill`-valued or random."""
    rng = rng or np.random.default_rng(0)

    def obs():
        if fill is not None:
            return np.full(OBS_SHAPE, fill, dtype=np.float32)
        return rng.random(OBS_SHAPE).astype(np.float32)

    for k in range(length):
        done = k == length - 1
        buf.append_step(obs(), rng.standard_normal(2).astype(np.float32),
                        float(rng.standard_normal()), done,
                        final_obs=obs() if done else None)


class TestAppend:
    def test_t_appends_with_done_seal_one_episode_of_length_t(self):
        buf = ReplayBuffer(capacity=1000)
        add_episode(buf, 7)
        assert buf.num_episodes == 1
        ep = buf.episodes[0]
        assert ep.length == 7
        assert ep.observations.shape == (8,) + OBS_SHAPE
        assert ep.actions.shape == (7, 2)
        assert ep.rewards.shape == (7,)

    def test_default_capacity_is_one_million_steps(self):
        assert ReplayBuffer().capacity == 1_000_000

    def test_fifo_eviction_keeps_total_steps_under_capacity(self):
        buf = ReplayBuffer(capacity=25)
        for i in range(5):
            add_episode(buf, 10, fill=float(i) / 4.0)
        assert buf.num_steps <= 25
        assert buf.num_episodes == 2
        assert [ep.episode_id for ep in buf.episodes] == [3, 4]
        # Sampling after eviction only ever touches surviving episodes.
        batch = buf.sample_sequences(32, 5, rng=np.random.default_rng(0))
        assert set(np.unique(batch.observations)) <= {0.75, 1.0}

    def test_non_finite_transition_rejected(self):
        buf = ReplayBuffer(capacity=100)
        bad = np.full(OBS_SHAPE, np.nan, dtype=np.float32)
        with pytest.raises(ValueError, match="invalid transition"):
            buf.append_step(bad, np.zeros(2), 0.0, False)
        with pytest.raises(ValueError, match="invalid transition"):
            buf.append_step(np.zeros(OBS_SHAPE), np.zeros(2), float("inf"), False)

    def test_terminal_append_requires_final_obs(self):
        buf = ReplayBuffer(capacity=100)
        with pytest.raises(ValueError, match="final_obs"):
            buf.append_step(np.zeros(OBS_SHAPE), np.zeros(2), 0.0, True)


class TestSampling:
    def test_default_batch_and_length_are_fifty(self):
        sig = inspect.signature(ReplayBuffer.sample_sequences)
        assert sig.parameters["batch_size"].default == 50
        assert sig.parameters["seq_len"].default == 50

    def test_single_episode_of_exact_length_yields_only_the_full_slice(self):
        buf = ReplayBuffer(capacity=100)
        add_episode(buf, 6)
        ep = buf.episodes[0]
        batch = buf.sample_sequences(5, 6, rng=np.random.default_rng(0))
        for b in range(5):
            assert np.array_equal(batch.observations[b], ep.observations[:6])
            assert np.array_equal(batch.actions[b, 0], np.zeros(2, dtype=np.float32))
            assert np.array_equal(batch.actions[b, 1:], ep.actions[:5])
            assert batch.rewards[b, 0] == 0.0
            assert np.array_equal(batch.rewards[b, 1:], ep.rewards[:5])

    def test_mid_episode_window_uses_preceding_action_and_reward(self):
        buf = ReplayBuffer(capacity=100)
        add_episode(buf, 10)
        ep = buf.episodes[0]
        seen_offsets = set()
        for seed in range(40):
            batch = buf.sample_sequences(1, 4, rng=np.random.default_rng(seed))
            offset = next(j for j in range(7)
                          if np.array_equal(batch.observations[0], ep.observations[j:j + 4]))
            seen_offsets.add(offset)
            if offset > 0:
                assert np.array_equal(batch.actions[0, 0], ep.actions[offset - 1])
                assert batch.rewards[0, 0] == ep.rewards[offset - 1]
            assert np.array_equal(batch.actions[0, 1:], ep.actions[offset:offset + 3])
        assert len(seen_offsets) > 1

    def test_same_rng_state_gives_identical_batches(self):
        buf = ReplayBuffer(capacity=1000)
        for _ in range(3):
            add_episode(buf, 12)
        a = buf.sample_sequences(8, 5, rng=np.random.default_rng(42))
        b = buf.sample_sequences(8, 5, rng=np.random.default_rng(42))
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.rewards, b.rewards)

    def test_sequences_never_straddle_episode_boundaries(self):
        buf = ReplayBuffer(capacity=1000)
        for i in range(4):
            add_episode(buf, 9, fill=float(i) / 8.0)
        batch = buf.sample_sequences(64, 5, rng=np.random.default_rng(7))
        for b in range(64):
            assert len(np.unique(batch.observations[b])) == 1

    def test_insufficient_data_raises(self):
        buf = ReplayBuffer(capacity=1000)
        with pytest.raises(ValueError, match="insufficient data"):
            buf.sample_sequences(2, 4, rng=np.random.default_rng(0))
        add_episode(buf, 3)
        with pytest.raises(ValueError, match="insufficient data"):
            buf.sample_sequences(2, 4, rng=np.random.default_rng(0))


class TestPersistence:
    def test_round_trip_preserves_sampling_bit_exactly(self, tmp_path):
        buf = ReplayBuffer(capacity=1000)
        for _ in range(3):
            add_episode(buf, 11, rng=np.random.default_rng(9))
        buf.save(tmp_path / "episodes")
        loaded = ReplayBuffer(capacity=1000)
        loaded.load(tmp_path / "episodes")
        assert loaded.num_steps == buf.num_steps
        a = buf.sample_sequences(6, 5, rng=np.random.default_rng(3))
        b = loaded.sample_sequences(6, 5, rng=np.random.default_rng(3))
        assert np.array_equal(a.observations, b.observations)
        assert np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.rewards, b.rewards)

    def test_save_is_byte_stable(self, tmp_path):
        buf = ReplayBuffer(capacity=1000)
        add_episode(buf, 5)
        buf.save(tmp_path / "a")
        buf.save(tmp_path / "b")
        name = "ep_000000.bin"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_empty_buffer_round_trip(self, tmp_path):
        buf = ReplayBuffer(capacity=10)
        buf.save(tmp_path / "episodes")
        loaded = ReplayBuffer(capacity=10)
        loaded.load(tmp_path / "episodes")
        assert loaded.num_episodes == 0 and loaded.num_steps == 0

    def test_tampered_header_byte_is_detected_and_names_the_file(self, tmp_path):
        buf = ReplayBuffer(capacity=1000)
        add_episode(buf, 5)
        buf.save(tmp_path)
        target = tmp_path / "ep_000000.bin"
        blob = bytearray(target.read_bytes())
        header_end = blob.find(b"\n\n")
        for pos in (7, header_end // 2, header_end - 2):
            tampered = bytearray(blob)
            tampered[pos] ^= 0x01
            target.write_bytes(bytes(tampered))
            with pytest.raises(ValueError, match="corrupt episode file") as err:
                read_episode_file(target)
            assert "ep_000000.bin" in str(err.value)

    def test_truncated_payload_is_detected(self, tmp_path):
        buf = ReplayBuffer(capacity=1000)
        add_episode(buf, 5)
        buf.save(tmp_path)
        target = tmp_path / "ep_000000.bin"
        target.write_bytes(target.read_bytes()[:-10])
        with pytest.raises(ValueError, match="corrupt episode file"):
            read_episode_file(target)

    def test_episode_file_round_trip_is_exact(self, tmp_path):
        buf = ReplayBuffer(capacity=1000)
        add_episode(buf, 8, rng=np.random.default_rng(21))
        ep = buf.episodes[0]
        path = tmp_path / "ep.bin"
        write_episode_file(path, ep)
        back = read_episode_file(path)
        assert back.episode_id == ep.episode_id
        assert np.array_equal(back.observations, ep.observations)
        assert np.array_equal(back.actions, ep.actions)
        assert np.array_equal(back.rewards, ep.rewards)

import numpy as np
from pytest import raises

from attn_style import CheckpointError, load_checkpoint, load_model, save_checkpoint
from attn_style.checkpoint import MAGIC, dump_weights, load_weights
from tests import TestCase


class TestCheckpoint(TestCase):
    def test_round_trip_is_bit_exact(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(self.weights, path, {"epochs": 3})
        weights, metadata = load_checkpoint(path)
        assert weights == self.weights
        assert weights.config == self.config
        assert metadata == {"epochs": 3}
        for name, value in self.weights.parameters.items():
            assert weights[name].numpy().tobytes() == value.numpy().tobytes()

    def test_dump_is_stable(self):
        payload = dump_weights(self.weights)
        assert payload.startswith(MAGIC)
        assert dump_weights(load_weights(payload)[0]) == payload

    def test_bad_magic(self):
        payload = dump_weights(self.weights)
        with raises(CheckpointError):
            load_weights(b"NOTACKPT" + payload[len(MAGIC) :])

    def test_unknown_version(self):
        payload = bytearray(dump_weights(self.weights))
        payload[len(MAGIC)] = 9
        with raises(CheckpointError):
            load_weights(bytes(payload))

    def test_truncated(self):
        payload = dump_weights(self.weights)
        with raises(CheckpointError):
            load_weights(payload[:-3])
        with raises(CheckpointError):
            load_weights(payload[:20])

    def test_trailing_bytes(self):
        with raises(CheckpointError):
            load_weights(dump_weights(self.weights) + b"\x00")

    def test_missing_file(self, tmp_path):
        with raises(OSError):
            load_checkpoint(str(tmp_path / "absent.ckpt"))


class TestLoadModel(TestCase):
    def test_recorded_noise_schedule(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        noise = {"T_train": 20, "beta_min": 1e-3, "beta_max": 0.05}
        save_checkpoint(self.weights, path, {"noise": noise})
        weights, schedule, metadata = load_model(path)
        assert weights == self.weights
        assert schedule.as_dict() == noise
        assert metadata["noise"] == noise

    def test_default_noise_schedule(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(self.weights, path)
        _, schedule, _ = load_model(path)
        assert schedule.T_train == 20
        assert np.allclose(schedule.alpha_bars, self.noise.alpha_bars)

    def test_schedule_length_must_match_model(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(self.weights, path, {"noise": {"T_train": 30}})
        with raises(CheckpointError):
            load_model(path)

    def test_corrupt_schedule(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(self.weights, path, {"noise": {"T_train": 20, "beta_min": 0.5, "beta_max": 0.1}})
        with raises(CheckpointError):
            load_model(path)

"""Tests for the trainer: optimizer, loop determinism, checkpoints, configs."""

import numpy as np
import pytest

from mmface import model as mm
from mmface import synth
from mmface import tensor as tt
from mmface import train as tr
from mmface.features import AlignedClip, NormStats
from mmface.tensor import Tensor


def small_config(**kw):
    base = dict(variant="c", learning_rate=3e-3, batch_size=2, window=40,
                steps=5, seed=0, precision="float64", kl_weight=0.1,
                channels=6, latent=4, layers=2, log_every=1, snapshot_every=2)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_clips():
    rng = np.random.default_rng(0)
    return [AlignedClip(audio=rng.standard_normal((120, 80)),
                        gaze=rng.standard_normal((120, 4)),
                        face=rng.standard_normal((120, 256)))
            for _ in range(2)]


class TestAdam:
    def test_zero_gradients_leave_params_unchanged(self):
        params = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        state = tr.AdamState.for_params(params)
        tr.adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])

    def test_constant_gradient_bias_corrected_first_moment(self):
        """With constant gradient g, the bias-corrected first moment equals g."""
        params = {"w": Tensor(np.array([0.0]), requires_grad=True)}
        state = tr.AdamState.for_params(params)
        g = np.array([0.37])
        for _ in range(25):
            tr.adam_step(params, {"w": g}, state, lr=1e-3)
        mhat = state.m["w"] / (1 - state.beta1 ** state.step_count)
        np.testing.assert_allclose(mhat, g, rtol=1e-12)

    def test_quadratic_minimized(self):
        """Scalar x^2 objective reaches |x| < 1e-3 within 500 steps at lr 0.1."""
        params = {"x": Tensor(np.array([1.0]), requires_grad=True)}
        state = tr.AdamState.for_params(params)
        for _ in range(500):
            grad = 2.0 * params["x"].data
            tr.adam_step(params, {"x": grad}, state, lr=0.1)
        assert abs(params["x"].data[0]) < 1e-3

    def test_nonfinite_gradient_skips_step(self):
        params = {"w": Tensor(np.array([1.0]), requires_grad=True)}
        state = tr.AdamState.for_params(params)
        tr.adam_step(params, {"w": np.array([np.nan])}, state, lr=0.1)
        assert params["w"].data[0] == 1.0
        assert state.skipped == 1
        assert state.step_count == 0


class TestTrainLoop:
    def test_zero_steps_returns_initialization(self, tiny_clips):
        config = small_config(steps=0)
        ckpt, metrics = tr.train(config, tiny_clips)
        init = mm.init_params(config.model_config(), "c", seed=config.seed)
        for name, p in init.items():
            np.testing.assert_array_equal(ckpt.params[name].data, p.data)
        assert metrics == []

    def test_same_seed_identical_metrics(self, tiny_clips):
        config = small_config(steps=4)
        _, m1 = tr.train(config, tiny_clips)
        _, m2 = tr.train(config, tiny_clips)
        assert m1 == m2

    def test_different_seed_differs(self, tiny_clips):
        _, m1 = tr.train(small_config(steps=3, seed=0), tiny_clips)
        _, m2 = tr.train(small_config(steps=3, seed=1), tiny_clips)
        assert m1 != m2

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            tr.train(small_config(), [])

    def test_window_shorter_than_receptive_field_rejected(self):
        with pytest.raises(ValueError):
            small_config(window=5, layers=5).validate()

    def test_divergence_aborts_with_last_good_checkpoint(self, tiny_clips):
        config = small_config(steps=50, learning_rate=1e12, snapshot_every=1)
        with pytest.raises(tr.TrainingDiverged) as err:
            tr.train(config, tiny_clips)
        ckpt = err.value.checkpoint
        assert ckpt is not None
        for p in ckpt.params.values():
            assert np.all(np.isfinite(p.data))

    def test_window_sampling_covers_dataset(self):
        """Every eligible start position keeps a plausibly uniform draw rate."""
        rng = np.random.default_rng(7)
        clips = [AlignedClip(audio=np.zeros((60, 80)), gaze=np.zeros((60, 4)),
                             face=np.zeros((60, 256))),
                 AlignedClip(audio=np.zeros((90, 80)), gaze=np.zeros((90, 4)),
                             face=np.zeros((90, 256)))]
        window = 40
        counts = np.zeros((2, 51))
        draws = 20000
        for ci, start in tr._sample_windows(rng, clips, window, draws):
            counts[ci, start] += 1
        eligible = np.concatenate([counts[0, :21], counts[1, :51]])
        expected = draws / eligible.size
        chi2 = float(((eligible - expected) ** 2 / expected).sum())
        # 72 cells; generous bound on the chi-square statistic
        assert chi2 < 150
        assert eligible.min() > 0

    def test_synthetic_convergence(self):
        """Face error falls below 20% of its starting value on a 60 s clip."""
        session = synth.generate_session(synth.WorldConfig(
            seed=21, duration=60.0, style="conversational", subject=1))
        clip = synth.session_to_clip(session)
        config = tr.TrainConfig(variant="c", learning_rate=3e-3, batch_size=2,
                                window=160, steps=2000, seed=3,
                                precision="float32", kl_weight=0.1, channels=16,
                                latent=8, layers=4, log_every=2000,
                                snapshot_every=0)
        ckpt, metrics = tr.train(config, [clip])
        assert metrics[-1]["face_rec"] < 0.2 * metrics[0]["face_rec"]


class TestCheckpointRoundTrip:
    def _trained(self, tiny_clips, tmp_path, **kw):
        config = small_config(steps=3, **kw)
        ckpt, _ = tr.train(config, tiny_clips)
        path = tmp_path / "model.ckpt"
        tr.save_checkpoint(ckpt, path)
        return config, ckpt, path

    def test_forward_bit_exact_after_roundtrip(self, tiny_clips, tmp_path):
        config, ckpt, path = self._trained(tiny_clips, tmp_path)
        loaded = tr.load_checkpoint(path)
        rng = np.random.default_rng(5)
        audio = rng.standard_normal((50, 80))
        gaze = rng.standard_normal((50, 4))
        cfg = config.model_config()
        before = mm.infer(ckpt.params, "c", cfg, audio, gaze, stats=ckpt.stats)
        after = mm.infer(loaded.params, "c", cfg, audio, gaze, stats=loaded.stats)
        assert np.array_equal(before, after)

    def test_optimizer_state_roundtrip(self, tiny_clips, tmp_path):
        _, ckpt, path = self._trained(tiny_clips, tmp_path)
        loaded = tr.load_checkpoint(path)
        assert loaded.optimizer is not None
        assert loaded.optimizer.step_count == ckpt.optimizer.step_count
        for name in ckpt.optimizer.m:
            np.testing.assert_array_equal(loaded.optimizer.m[name],
                                          ckpt.optimizer.m[name])

    def test_truncated_file_rejected(self, tiny_clips, tmp_path):
        _, _, path = self._trained(tiny_clips, tmp_path)
        blob = path.read_bytes()
        bad = tmp_path / "trunc.ckpt"
        bad.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(tr.CheckpointFormatError):
            tr.load_checkpoint(bad)

    def test_corrupted_byte_rejected(self, tiny_clips, tmp_path):
        _, _, path = self._trained(tiny_clips, tmp_path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        bad = tmp_path / "corrupt.ckpt"
        bad.write_bytes(bytes(blob))
        with pytest.raises(tr.CheckpointFormatError):
            tr.load_checkpoint(bad)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 64)
        with pytest.raises(tr.CheckpointFormatError):
            tr.load_checkpoint(path)

    def test_variant_mismatch_rejected(self, tiny_clips, tmp_path):
        _, _, path = self._trained(tiny_clips, tmp_path, variant="f")
        with pytest.raises(tr.VariantMismatchError):
            tr.load_checkpoint(path, expect_variant="c")
        loaded = tr.load_checkpoint(path)
        with pytest.raises(mm.ModelStateError):
            mm.infer(loaded.params, "c", loaded.model_config,
                     np.zeros((10, 80)), np.zeros((10, 4)))

    def test_stats_preserved(self, tiny_clips, tmp_path):
        _, ckpt, path = self._trained(tiny_clips, tmp_path)
        loaded = tr.load_checkpoint(path)
        np.testing.assert_array_equal(loaded.stats.audio_mean,
                                      ckpt.stats.audio_mean)
        np.testing.assert_array_equal(loaded.stats.gaze_std, ckpt.stats.gaze_std)


class TestConfigFiles:
    def test_parse_and_override(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nvariant=d\nsteps=7\nlearning_rate=0.01\n"
                        "window=130\n")
        config = tr.load_config_file(path, {"steps": 9})
        assert config.variant == "d"
        assert config.steps == 9
        assert config.learning_rate == pytest.approx(0.01)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            tr.parse_config_text("nonsense=1\n")

    def test_malformed_line_rejected(self):
        with pytest.raises(ValueError, match="key=value"):
            tr.parse_config_text("just some words\n")

    def test_metrics_line_format(self):
        record = {"step": 3, "face_rec": 0.5, "audio_rec": 0.25, "gaze_rec": 0.1,
                  "kl_shared": 0.0, "kl_modality": 0.0, "total": 0.85}
        line = tr.format_metrics_line(record)
        parts = dict(p.split("=") for p in line.split())
        assert parts["step"] == "3"
        assert float(parts["total"]) == pytest.approx(0.85)

"""Tests for the synthetic world: determinism, structure, landmark decoder."""

import numpy as np
import pytest

from mmface import features as ff
from mmface import synth
from mmface.synth import (SyntheticLandmarkSet, WorldConfig, decode_landmarks,
                          generate_session)


@pytest.fixture(scope="module")
def conv_session():
    return generate_session(WorldConfig(seed=5, duration=30.0,
                                        style="conversational", subject=1))


@pytest.fixture(scope="module")
def desc_session():
    return generate_session(WorldConfig(seed=5, duration=30.0,
                                        style="descriptive", subject=1))


class TestGenerateSession:
    def test_deterministic_bit_identical(self, conv_session):
        again = generate_session(WorldConfig(seed=5, duration=30.0,
                                             style="conversational", subject=1))
        assert np.array_equal(conv_session.pcm.samples, again.pcm.samples)
        assert np.array_equal(conv_session.face, again.face)
        assert np.array_equal(conv_session.eye_observations, again.eye_observations)

    def test_descriptive_expression_flat(self, desc_session):
        assert desc_session.factors.expression.max() < 0.05

    def test_silence_produces_mel_floor(self, conv_session):
        """Frames whose whole window lies in silence sit at the log floor."""
        mel = ff.mel_spectrogram(conv_session.pcm)
        env = conv_session.factors.envelope
        floor = np.log(1e-6)
        checked = 0
        for t in range(mel.shape[0]):
            # mel frame t covers factor frames [t, t+5)
            if env[t:t + 6].max(initial=0.0) == 0.0:
                np.testing.assert_allclose(mel[t], floor, atol=1e-9)
                checked += 1
        assert checked > 100

    def test_factor_slew_bounded(self, conv_session):
        f = conv_session.factors
        for track, bound in ((f.envelope, 0.5), (f.expression, 0.2),
                             (f.gaze_path, 0.25), (f.bands, 0.1)):
            arr = np.atleast_2d(track.T)
            assert np.max(np.abs(np.diff(arr, axis=1))) < bound

    def test_conversational_has_silent_smiles(self, conv_session):
        per_minute = conv_session.factors.silent_smile_count() / 0.5
        assert per_minute >= 5

    def test_descriptive_has_no_smiles(self, desc_session):
        assert desc_session.factors.silent_smile_count() == 0
        assert len(desc_session.factors.smile_episodes) == 0

    def test_lip_closure_at_envelope_minima(self, desc_session):
        gap = desc_session.face[:, synth.LIP_GAP_DIM]
        env = desc_session.factors.envelope
        silent = (env == 0.0) & (desc_session.factors.silent_open == 0.0)
        assert silent.sum() > 200
        np.testing.assert_allclose(gap[silent], 0.0, atol=1e-12)

    def test_duration_must_exceed_two_seconds(self):
        with pytest.raises(ValueError):
            WorldConfig(seed=0, duration=1.0, style="descriptive", subject=1)

    def test_unknown_style_and_subject_rejected(self):
        with pytest.raises(ValueError):
            WorldConfig(seed=0, duration=10.0, style="casual", subject=1)
        with pytest.raises(ValueError):
            WorldConfig(seed=0, duration=10.0, style="descriptive", subject=9)


class TestIdentifiability:
    """The documented factor-to-block wiring is visible in correlations."""

    def _norm_corr(self, A, B):
        A = (A - A.mean(0)) / (A.std(0) + 1e-9)
        B = (B - B.mean(0)) / (B.std(0) + 1e-9)
        return np.abs(A.T @ B / len(A))

    def test_block_structure(self, conv_session):
        clip = synth.session_to_clip(conv_session)
        n = clip.num_frames
        eye = conv_session.face[:n, synth.EYE_BLOCK]
        mouth = conv_session.face[:n, 1:64]
        gaze_corr_eye = self._norm_corr(eye, clip.gaze).max()
        gaze_corr_mouth = self._norm_corr(mouth, clip.gaze).max()
        assert gaze_corr_eye > 0.8
        assert gaze_corr_mouth < 0.6
        assert gaze_corr_mouth < gaze_corr_eye - 0.3

    def test_expression_visible_in_gaze_not_silent_audio(self, conv_session):
        clip = synth.session_to_clip(conv_session)
        n = clip.num_frames
        f = conv_session.factors
        expr = conv_session.face[:n, synth.EXPR_BLOCK]
        silence = f.envelope[:n] < 0.02
        smiles = silence & (f.expression[:n] > 0.5)
        assert smiles.sum() > 50
        gaze_y = clip.gaze[:, 1:2]
        corr_gaze = self._norm_corr(expr[silence], gaze_y[silence]).max()
        mel_energy = clip.audio.mean(axis=1, keepdims=True)
        corr_audio = self._norm_corr(expr[smiles], mel_energy[smiles]).max()
        assert corr_gaze > 0.5
        assert corr_audio < 0.4

    def test_filler_uncorrelated_with_inputs(self, conv_session):
        """Filler tracks are smooth, so spurious correlation stays moderate;
        structurally they sit far below the genuinely gaze-driven block."""
        clip = synth.session_to_clip(conv_session)
        n = clip.num_frames
        filler = conv_session.face[:n, synth.FILLER_BLOCK]
        eye = conv_session.face[:n, synth.EYE_BLOCK]
        filler_corr = self._norm_corr(filler, clip.gaze).max()
        eye_corr = self._norm_corr(eye, clip.gaze).max()
        assert filler_corr < 0.55
        assert eye_corr - filler_corr > 0.3
        env = conv_session.factors.envelope[:n, None]
        assert self._norm_corr(filler, env).max() < 0.45


class TestDecodeLandmarks:
    def test_zero_coefficients_give_template(self):
        lm = decode_landmarks(np.zeros((3, 256)), subject=1)
        template = synth._subject_wiring(1)["template"]
        for t in range(3):
            np.testing.assert_array_equal(lm.points[t], template)

    def test_zero_gap_closes_inner_lips(self):
        coeffs = np.random.default_rng(0).standard_normal((5, 256))
        coeffs[:, synth.LIP_GAP_DIM] = 0.0
        lm = decode_landmarks(coeffs, subject=1)
        np.testing.assert_allclose(lm.inner_lip_gaps(), 0.0, atol=1e-12)

    def test_gap_drives_inner_lips_exactly(self):
        coeffs = np.zeros((4, 256))
        coeffs[:, synth.LIP_GAP_DIM] = [0.0, 1.0, 2.5, 7.0]
        lm = decode_landmarks(coeffs, subject=1)
        np.testing.assert_allclose(lm.inner_lip_gaps(),
                                   np.array([[0.0, 1.0, 2.5, 7.0]]).T
                                   @ np.ones((1, 5)), atol=1e-12)

    def test_oracle_recomputation(self):
        """Independent reimplementation of the documented map agrees to 1e-12."""
        rng = np.random.default_rng(42)
        coeffs = rng.standard_normal((7, 256))
        lm = decode_landmarks(coeffs, subject=2)
        w = synth._subject_wiring(2)
        T = coeffs.shape[0]
        expected = np.tile(w["template"], (T, 1, 1))
        expected[:, 0:18] += (
            w["gain"]["eyebrows"] * np.tanh(coeffs[:, 128:192] @ w["lm_brow"].T)
        ).reshape(T, 18, 2)
        expected[:, 18:38] += (
            w["gain"]["eyes"] * np.tanh(coeffs[:, 64:128] @ w["lm_eye"].T)
        ).reshape(T, 20, 2)
        expected[:, 38:51] += (
            w["gain"]["nose"] * np.tanh(coeffs[:, 1:64] @ w["lm_nose"].T)
        ).reshape(T, 13, 2)
        expected[:, 51:73] += (
            w["gain"]["mouth"] * np.tanh(
                np.concatenate([coeffs[:, 1:64], coeffs[:, 128:192]], axis=1)
                @ w["lm_mouth"].T)
        ).reshape(T, 22, 2)
        gap = coeffs[:, 0]
        expected[:, list(synth.INNER_UPPER), 1] -= 0.5 * gap[:, None]
        expected[:, list(synth.INNER_LOWER), 1] += 0.5 * gap[:, None]
        np.testing.assert_allclose(lm.points, expected, atol=1e-12)

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            decode_landmarks(np.zeros((2, 100)), subject=1)

    def test_region_partition_sizes(self):
        sizes = {name: sl.stop - sl.start for name, sl in synth.REGIONS.items()}
        assert sizes == {"eyebrows": 18, "eyes": 20, "nose": 13, "mouth": 32}
        assert sum(sizes.values()) == 83


class TestSessionFiles:
    def test_write_then_load_roundtrip(self, tmp_path, desc_session):
        synth.write_session(tmp_path, "demo", desc_session)
        clip = synth.load_session_clip(tmp_path, "demo")
        direct = synth.session_to_clip(desc_session)
        assert clip.num_frames == direct.num_frames
        np.testing.assert_allclose(clip.face, direct.face, atol=1e-6)
        np.testing.assert_allclose(clip.gaze, direct.gaze, atol=1e-6)
        # WAV quantizes to 16-bit, so mel features only match loosely
        assert np.mean(np.abs(clip.audio - direct.audio)) < 0.1

    def test_byte_identical_session_files(self, tmp_path, desc_session):
        synth.write_session(tmp_path / "a", "demo", desc_session)
        regen = generate_session(WorldConfig(seed=5, duration=30.0,
                                             style="descriptive", subject=1))
        synth.write_session(tmp_path / "b", "demo", regen)
        for suffix in ("demo.wav", "demo_eyes.csv", "demo_face.csv"):
            assert (tmp_path / "a" / suffix).read_bytes() == \
                (tmp_path / "b" / suffix).read_bytes()

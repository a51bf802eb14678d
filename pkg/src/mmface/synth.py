"""Synthetic capture world: audio, eye observations, facial coefficients.

Stands in for a real multi-camera capture pipeline.  Sessions are a
deterministic function of (seed, style, subject) with fully known factor
structure, wired so that qualitative relationships between modalities are
testable:

* mouth-block coefficients (dims 0-63) derive from the speech envelope
  and slow articulation bands, which also synthesize the audio, so they
  are predictable from audio alone; dim 0 is the lip gap, hitting zero at
  envelope minima between and inside speech bursts;
* eye-block coefficients (dims 64-127) derive from the clean gaze path
  and blinks, both visible (noisily) in the eye observations;
* expression-block coefficients (dims 128-191) derive from smile/squint
  episodes with a co-occurring downward pupil offset, so they can be read
  from gaze but not, during silent smiles, from audio;
* dims 192-255 are inertial filler, predictable from neither stream.

Styles differ as capture tasks do: "descriptive" keeps a flat expression
and steady speech with every pause lips-closed; "conversational" adds
smile episodes (some open-mouthed) and silent open-mouth onsets.

Landmarks come from a fixed per-subject seeded map: 83 points
(18 eyebrows, 20 eyes, 13 nose, 32 mouth), each region an affine read of
its coefficient blocks through a saturating tanh, except five inner-lip
landmark pairs whose vertical gap is exactly the lip-gap coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from mmface import features as ff
from mmface.features import PcmClip

STYLES = ("descriptive", "conversational")
SUBJECTS = (1, 2, 3)

FRAME_RATE = 100
COEFF_DIM = 256
MOUTH_BLOCK = slice(0, 64)      # dim 0 is the lip gap
EYE_BLOCK = slice(64, 128)
EXPR_BLOCK = slice(128, 192)
FILLER_BLOCK = slice(192, 256)
LIP_GAP_DIM = 0

N_LANDMARKS = 83
REGIONS = {"eyebrows": slice(0, 18), "eyes": slice(18, 38),
           "nose": slice(38, 51), "mouth": slice(51, 83)}
# five inner-lip pairs inside the mouth region; gap driven solely by dim 0
INNER_UPPER = tuple(range(73, 78))
INNER_LOWER = tuple(range(78, 83))

BAND_FREQS = (220.0, 680.0, 1700.0, 3400.0)

# pupil tracking error: frame-rate jitter plus slow calibration drift that
# temporal filtering cannot remove; subject 2 tracks worst
GAZE_JITTER = {1: 0.10, 2: 0.17, 3: 0.10}
GAZE_DRIFT = {1: 0.12, 2: 0.20, 3: 0.12}
GAZE_DRIFT_SMOOTH = 150.0    # frames; ~1.5 s correlation length

SPEECH_GAP_SCALE = 10.0      # lip gap units while speaking
SILENT_OPEN_SCALE = 6.5      # lip gap during intent-to-speak onsets
SMILE_GAZE_DROP = 0.45       # downward pupil offset at full smile
BLINK_GAZE_DROP = 0.30


@dataclass
class WorldConfig:
    seed: int = 0
    duration: float = 60.0
    style: str = "conversational"
    subject: int = 1

    def __post_init__(self):
        if self.duration <= 2.0:
            raise ValueError("duration must exceed 2 seconds")
        if self.style not in STYLES:
            raise ValueError(f"style must be one of {STYLES}")
        if self.subject not in SUBJECTS:
            raise ValueError(f"subject must be one of {SUBJECTS}")


@dataclass
class SmileEpisode:
    start: int
    end: int
    amplitude: float


@dataclass
class FactorTracks:
    """Ground-truth generative factors at 100 Hz (test-only)."""
    envelope: np.ndarray        # articulated speech envelope in [0, 1]
    bands: np.ndarray           # (T, 4) slow articulation pattern
    gaze_path: np.ndarray       # (T, 4) clean per-eye (x, y)
    expression: np.ndarray      # smile factor in [0, 1]
    blink: np.ndarray           # blink activation in [0, 1]
    silent_open: np.ndarray     # open-mouth-while-silent factor
    smile_episodes: list

    def silent_smile_count(self) -> int:
        n = 0
        for ep in self.smile_episodes:
            if self.expression[ep.start:ep.end].max(initial=0.0) >= 0.5 and \
                    self.envelope[ep.start:ep.end].mean() < 0.1:
                n += 1
        return n


@dataclass
class SyntheticSession:
    config: WorldConfig
    pcm: PcmClip
    eye_times: np.ndarray       # seconds, 100 Hz
    eye_observations: np.ndarray  # (T, 14): per eye corners, pupil, iris
    face: np.ndarray            # (T, 256) coefficients
    factors: FactorTracks


@dataclass
class SyntheticLandmarkSet:
    """(T, 83, 2) landmark tracks with the fixed region partition."""
    points: np.ndarray

    def region(self, name: str) -> np.ndarray:
        return self.points[:, REGIONS[name], :]

    def inner_lip_gaps(self) -> np.ndarray:
        """(T, 5) distances between paired inner upper/lower lip landmarks."""
        up = self.points[:, INNER_UPPER, :]
        lo = self.points[:, INNER_LOWER, :]
        return np.linalg.norm(up - lo, axis=2)


# ---------------------------------------------------------------------------
# factor construction


def _bump(n: int, start: int, end: int, ramp: int) -> np.ndarray:
    """Raised-cosine plateau covering [start, end) with given ramp length."""
    out = np.zeros(n)
    start, end = max(start, 0), min(end, n)
    if end <= start:
        return out
    length = end - start
    ramp = max(1, min(ramp, length // 2))
    seg = np.ones(length)
    up = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    seg[:ramp] = up
    seg[-ramp:] = np.minimum(seg[-ramp:], up[::-1])
    out[start:end] = seg
    return out


def _segments(rng, n: int, style: str):
    """Alternating (kind, start, end) covering [0, n), kind in speech/silence."""
    if style == "descriptive":
        speech_range, silence_range = (1.2, 2.6), (0.45, 0.95)
    else:
        speech_range, silence_range = (0.8, 2.0), (0.7, 1.7)
    segs = []
    pos = 0
    kind = "silence" if rng.uniform() < 0.5 else "speech"
    while pos < n:
        lo, hi = speech_range if kind == "speech" else silence_range
        length = int(rng.uniform(lo, hi) * FRAME_RATE)
        segs.append((kind, pos, min(pos + length, n)))
        pos += length
        kind = "speech" if kind == "silence" else "silence"
    return segs


def _build_factors(rng, n: int, style: str) -> FactorTracks:
    segs = _segments(rng, n, style)
    envelope = np.zeros(n)
    for kind, start, end in segs:
        if kind != "speech":
            continue
        # word-level articulation: short plateaus separated by micro-gaps
        pos = start
        while pos < end:
            word = int(rng.uniform(0.18, 0.45) * FRAME_RATE)
            gap = int(rng.uniform(0.06, 0.14) * FRAME_RATE)
            level = rng.uniform(0.6, 1.0)
            envelope += level * _bump(n, pos, min(pos + word, end), ramp=4)
            pos += word + gap
    envelope = np.clip(envelope, 0.0, 1.0)

    bands = np.empty((n, 4))
    for j in range(4):
        noise = rng.standard_normal(n)
        smooth = gaussian_filter1d(noise, sigma=12.0, mode="nearest")
        lo, hi = smooth.min(), smooth.max()
        bands[:, j] = 0.1 + 0.9 * (smooth - lo) / max(hi - lo, 1e-9)

    # smooth gaze wander: saccade targets low-pass filtered, plus slow drift
    targets_x = np.zeros(n)
    targets_y = np.zeros(n)
    pos = 0
    while pos < n:
        hold = int(rng.uniform(0.6, 2.0) * FRAME_RATE)
        targets_x[pos:pos + hold] = rng.uniform(-0.55, 0.55)
        targets_y[pos:pos + hold] = rng.uniform(-0.30, 0.30)
        pos += hold
    t = np.arange(n) / FRAME_RATE
    gx = gaussian_filter1d(targets_x, sigma=7.0, mode="nearest") \
        + 0.05 * np.sin(2 * np.pi * 0.13 * t + rng.uniform(0, 2 * np.pi))
    gy = gaussian_filter1d(targets_y, sigma=7.0, mode="nearest") \
        + 0.04 * np.sin(2 * np.pi * 0.21 * t + rng.uniform(0, 2 * np.pi))

    blink = np.zeros(n)
    pos = int(rng.uniform(0.5, 2.0) * FRAME_RATE)
    while pos < n:
        blink += _bump(n, pos, pos + 14, ramp=5)
        pos += int(rng.uniform(2.0, 6.0) * FRAME_RATE)
    blink = np.clip(blink, 0.0, 1.0)

    expression = np.zeros(n)
    silent_open = np.zeros(n)
    episodes = []
    if style == "conversational":
        # smiles happen in pauses and during speech (laughter) alike, and
        # intent-to-speak opens are drawn independently of smiles: gaze,
        # which sees smiles, carries no usable lip-closure information
        for kind, start, end in segs:
            if kind == "silence":
                if rng.uniform() < 0.55:
                    dur = int(rng.uniform(0.8, 1.6) * FRAME_RATE)
                    mid = (start + end) // 2
                    s, e = mid - dur // 2, mid + dur // 2
                    amp = rng.uniform(0.75, 1.0)
                    expression += amp * _bump(n, s, e, ramp=20)
                    episodes.append(SmileEpisode(max(s, 0), min(e, n), amp))
                if rng.uniform() < 0.55:
                    dur = int(rng.uniform(0.75, 0.95) * (end - start))
                    s = start + int(rng.uniform(0.0, 0.15) * (end - start))
                    silent_open += rng.uniform(0.85, 1.15) * _bump(n, s, s + dur,
                                                                   ramp=10)
            elif kind == "speech" and rng.uniform() < 0.45:
                dur = int(rng.uniform(0.8, 1.6) * FRAME_RATE)
                s = start + int(rng.uniform(0, max(end - start - dur // 2, 1)))
                amp = rng.uniform(0.7, 1.0)
                expression += amp * _bump(n, s, s + dur, ramp=20)
                episodes.append(SmileEpisode(s, min(s + dur, n), amp))
    expression = np.clip(expression, 0.0, 1.0)
    silent_open = np.clip(silent_open, 0.0, 1.2)

    # smiles squint the eyes: pupils shift down and slightly inward
    gy_eyes = gy - SMILE_GAZE_DROP * expression - BLINK_GAZE_DROP * blink
    gaze_path = np.column_stack([gx + 0.06 + 0.08 * expression, gy_eyes,
                                 gx - 0.06 - 0.08 * expression, gy_eyes])
    return FactorTracks(envelope=envelope, bands=bands, gaze_path=gaze_path,
                        expression=expression, blink=blink,
                        silent_open=silent_open, smile_episodes=episodes)


# ---------------------------------------------------------------------------
# per-subject wiring


_SUBJECT_CACHE: dict = {}


def _subject_wiring(subject: int) -> dict:
    """Fixed seeded maps from factors to coefficients and landmarks."""
    if subject in _SUBJECT_CACHE:
        return _SUBJECT_CACHE[subject]
    rng = np.random.default_rng([90401, subject])
    w = {
        "mouth": rng.normal(0.0, 0.55, size=(63, 5)),          # env + 4 bands
        "eye": rng.normal(0.0, 0.55, size=(64, 5)),            # gaze path + blink
        "expr": rng.normal(0.0, 0.70, size=(64, 2)),           # e, e^2
        "template": _neutral_template(rng),
        "lm_brow": rng.normal(0.0, 1.0, size=(36, 64)) / 8.0,     # expr block
        "lm_eye": rng.normal(0.0, 1.0, size=(40, 64)) / 8.0,      # eye block
        "lm_nose": rng.normal(0.0, 1.0, size=(26, 63)) / 8.0,     # mouth block sans gap
        "lm_mouth": rng.normal(0.0, 1.0, size=(44, 127)) / 11.0,  # mouth + expr blocks
        "gain": {"eyebrows": 3.2, "eyes": 3.2, "nose": 1.1, "mouth": 4.6},
    }
    # smiles must visibly move the outer mouth (corner raise), so the
    # expression columns of the mouth landmark map carry extra weight
    w["lm_mouth"][:, 63:] *= 1.6
    _SUBJECT_CACHE[subject] = w
    return w


def _neutral_template(rng) -> np.ndarray:
    """Stylized neutral face on a ~100x100 canvas, with subject jitter."""
    pts = []
    for cx in (32.0, 68.0):  # eyebrows: two 9-point arcs
        xs = np.linspace(cx - 12, cx + 12, 9)
        pts += [(x, 28.0 - 3.0 * np.cos((x - cx) / 12 * np.pi / 2)) for x in xs]
    for cx in (32.0, 68.0):  # eyes: two 10-point rings
        ang = np.linspace(0, 2 * np.pi, 10, endpoint=False)
        pts += [(cx + 8 * np.cos(a), 40.0 + 4 * np.sin(a)) for a in ang]
    pts += [(50.0, y) for y in np.linspace(44, 56, 7)]  # nose ridge
    pts += [(50 + dx, 58.0) for dx in (-9, -4.5, 0, 4.5, 9, 13)]  # nose base
    ang = np.linspace(0, 2 * np.pi, 22, endpoint=False)  # outer mouth ring
    pts += [(50 + 14 * np.cos(a), 72.0 + 6 * np.sin(a)) for a in ang]
    inner_x = np.linspace(42, 58, 5)
    pts += [(x, 72.0) for x in inner_x]  # inner upper lip
    pts += [(x, 72.0) for x in inner_x]  # inner lower lip
    template = np.asarray(pts, dtype=np.float64)
    assert template.shape == (N_LANDMARKS, 2)
    template += rng.normal(0.0, 0.5, size=template.shape)
    # inner pairs coincide exactly at rest: a zero lip gap closes the lips
    template[list(INNER_LOWER)] = template[list(INNER_UPPER)]
    return template


def coefficients_from_factors(factors: FactorTracks, subject: int) -> np.ndarray:
    """Assemble the (T, 256) coefficient sequence from ground-truth factors."""
    w = _subject_wiring(subject)
    n = factors.envelope.size
    art = factors.envelope[:, None] * factors.bands          # articulation
    coeffs = np.zeros((n, COEFF_DIM))
    lip_gap = (SPEECH_GAP_SCALE * factors.envelope * (0.55 + 0.45 * factors.bands[:, 0])
               + SILENT_OPEN_SCALE * factors.silent_open)
    coeffs[:, LIP_GAP_DIM] = lip_gap
    mouth_drivers = np.column_stack([factors.envelope, art])
    coeffs[:, 1:64] = mouth_drivers @ w["mouth"].T
    eye_drivers = np.column_stack([factors.gaze_path, factors.blink])
    coeffs[:, EYE_BLOCK] = eye_drivers @ w["eye"].T
    expr_drivers = np.column_stack([factors.expression, factors.expression ** 2])
    coeffs[:, EXPR_BLOCK] = expr_drivers @ w["expr"].T
    return coeffs


def _filler_tracks(rng, n: int) -> np.ndarray:
    noise = rng.standard_normal((n, 64))
    smooth = gaussian_filter1d(noise, sigma=25.0, axis=0, mode="nearest")
    std = smooth.std(axis=0)
    return 0.15 * smooth / np.maximum(std, 1e-9)


# ---------------------------------------------------------------------------
# session assembly


def _synthesize_audio(rng, factors: FactorTracks) -> np.ndarray:
    n = factors.envelope.size
    num_samples = n * (ff.SAMPLE_RATE // FRAME_RATE)
    ts = np.arange(num_samples) / ff.SAMPLE_RATE
    frame_t = np.arange(n) / FRAME_RATE
    env = np.interp(ts, frame_t, factors.envelope)
    carrier = np.zeros(num_samples)
    for j, freq in enumerate(BAND_FREQS):
        band = np.interp(ts, frame_t, factors.bands[:, j])
        phase = rng.uniform(0, 2 * np.pi)
        carrier += band * (np.sin(2 * np.pi * freq * ts + phase)
                           + 0.35 * np.sin(4 * np.pi * freq * ts + 2 * phase))
    breath = 0.02 * rng.standard_normal(num_samples)
    return np.clip(0.16 * env * carrier + env * breath, -1.0, 1.0)


def _tracking_error(rng, n: int, subject: int) -> np.ndarray:
    """(n, 2) pupil error: white jitter plus slow in-band drift."""
    jitter = rng.normal(0.0, GAZE_JITTER[subject], (n, 2))
    white = rng.standard_normal((n, 2))
    drift = gaussian_filter1d(white, sigma=GAZE_DRIFT_SMOOTH, axis=0,
                              mode="nearest")
    drift = drift / np.maximum(drift.std(axis=0), 1e-9) * GAZE_DRIFT[subject]
    return jitter + drift


def _embed_eye_observations(rng, gaze_path: np.ndarray, subject: int):
    """Noisy image-plane observations whose normalization recovers the path.

    Each eye gets a session-fixed similarity placement (center, angle,
    scale) and iris radius; pupil tracking error is drawn in normalized
    units so tracking quality is subject-controlled.
    """
    n = gaze_path.shape[0]
    obs = np.empty((n, 14))
    for eye in range(2):
        center = np.array([120.0 + 160.0 * eye, 200.0]) + rng.uniform(-20, 20, 2)
        theta = rng.uniform(-0.25, 0.25)
        half_width = rng.uniform(28.0, 52.0)
        iris = rng.uniform(0.35, 0.55) * half_width
        ux = np.array([np.cos(theta), np.sin(theta)])
        uy = np.array([-np.sin(theta), np.cos(theta)])
        lc = center - half_width * ux
        rc = center + half_width * ux
        noisy = gaze_path[:, 2 * eye:2 * eye + 2] + _tracking_error(rng, n, subject)
        px = center[0] + noisy[:, 0] * half_width * ux[0] + noisy[:, 1] * iris * uy[0]
        py = center[1] + noisy[:, 0] * half_width * ux[1] + noisy[:, 1] * iris * uy[1]
        base = 7 * eye
        obs[:, base + 0] = lc[0]
        obs[:, base + 1] = lc[1]
        obs[:, base + 2] = rc[0]
        obs[:, base + 3] = rc[1]
        obs[:, base + 4] = px
        obs[:, base + 5] = py
        obs[:, base + 6] = iris
    return obs


def generate_session(config: WorldConfig) -> SyntheticSession:
    """Deterministic synthetic capture session for one (seed, style, subject)."""
    n = int(round(config.duration * FRAME_RATE))
    rng = np.random.default_rng([config.seed, config.subject,
                                 STYLES.index(config.style)])
    factors = _build_factors(rng, n, config.style)
    face = coefficients_from_factors(factors, config.subject)
    face[:, FILLER_BLOCK] = _filler_tracks(rng, n)
    audio = _synthesize_audio(rng, factors)
    obs = _embed_eye_observations(rng, factors.gaze_path, config.subject)
    times = np.arange(n) / FRAME_RATE
    return SyntheticSession(config=config,
                            pcm=PcmClip(ff.SAMPLE_RATE, audio),
                            eye_times=times, eye_observations=obs,
                            face=face, factors=factors)


def eye_frame_to_features(row: np.ndarray) -> np.ndarray:
    """One 14-column observation row to the 4-d normalized gaze feature."""
    out = np.empty(4)
    for eye in range(2):
        base = 7 * eye
        obs = ff.EyeObservation((row[base], row[base + 1]),
                                (row[base + 2], row[base + 3]),
                                (row[base + 4], row[base + 5]), row[base + 6])
        out[2 * eye], out[2 * eye + 1] = ff.normalize_gaze(obs)
    return out


def session_to_clip(session: SyntheticSession) -> "ff.AlignedClip":
    """Featurize and align a session: mel audio, normalized gaze, coefficients."""
    mel = ff.mel_spectrogram(session.pcm)
    gaze = np.stack([eye_frame_to_features(row)
                     for row in session.eye_observations])
    return ff.align_streams(mel, session.eye_times, gaze,
                            session.eye_times, session.face)


# ---------------------------------------------------------------------------
# landmark decoder


def decode_landmarks(coeffs: np.ndarray, subject: int = 1) -> SyntheticLandmarkSet:
    """Fixed per-subject map from (T, 256) coefficients to 83 2-D landmarks.

    Each region reads its blocks through a saturating tanh around the
    neutral template; the five inner-lip pairs move apart vertically by
    exactly the lip-gap coefficient and coincide when it is zero.
    """
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
    if coeffs.shape[1] != COEFF_DIM:
        raise ValueError(f"expected width {COEFF_DIM}, got {coeffs.shape[1]}")
    w = _subject_wiring(subject)
    T = coeffs.shape[0]
    pts = np.tile(w["template"], (T, 1, 1))
    mouth_wo_gap = coeffs[:, 1:64]
    eye = coeffs[:, EYE_BLOCK]
    expr = coeffs[:, EXPR_BLOCK]

    def apply(region, mat, block):
        delta = w["gain"][region] * np.tanh(block @ mat.T)
        sl = REGIONS[region]
        pts[:, sl, :] += delta.reshape(T, sl.stop - sl.start, 2)

    apply("eyebrows", w["lm_brow"], expr)
    apply("eyes", w["lm_eye"], eye)
    apply("nose", w["lm_nose"], mouth_wo_gap)
    # mouth: 22 outer landmarks deform; inner pairs carry the gap exactly
    outer = w["gain"]["mouth"] * np.tanh(
        np.concatenate([mouth_wo_gap, expr], axis=1) @ w["lm_mouth"].T)
    pts[:, 51:73, :] += outer.reshape(T, 22, 2)
    gap = coeffs[:, LIP_GAP_DIM]
    pts[:, INNER_UPPER, 1] -= 0.5 * gap[:, None]
    pts[:, INNER_LOWER, 1] += 0.5 * gap[:, None]
    return SyntheticLandmarkSet(points=pts)


# ---------------------------------------------------------------------------
# session files


def write_session(directory, name: str, session: SyntheticSession) -> None:
    """WAV + eye/face CSV triplet for one session."""
    from pathlib import Path
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ff.write_wav(directory / f"{name}.wav", session.pcm)
    ff.write_stream_csv(directory / f"{name}_eyes.csv", session.eye_times,
                        session.eye_observations, "eye")
    ff.write_stream_csv(directory / f"{name}_face.csv", session.eye_times,
                        session.face, "coef")


def load_session_clip(directory, name: str) -> "ff.AlignedClip":
    """Featurize a stored WAV + eyes/face CSV triplet into an AlignedClip."""
    from pathlib import Path
    directory = Path(directory)
    pcm = ff.read_wav(directory / f"{name}.wav")
    eye_times, obs = ff.read_stream_csv(directory / f"{name}_eyes.csv")
    face_times, face = ff.read_stream_csv(directory / f"{name}_face.csv")
    mel = ff.mel_spectrogram(pcm)
    gaze = np.stack([eye_frame_to_features(row) for row in obs])
    return ff.align_streams(mel, eye_times, gaze, face_times, face)

"""Feature frontends: mel-spectrogram audio, normalized gaze, stream alignment.

Everything is resampled onto a common 100 Hz frame clock.  Audio becomes
80 log-mel channels per frame (10 ms hop, 50 ms Hanning window at 16 kHz);
eye observations become per-eye normalized pupil coordinates that are
invariant to translation, rotation, and uniform scaling of the image
plane.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
FRAME_RATE = 100
HOP = 160            # 10 ms at 16 kHz
WINDOW = 800         # 50 ms at 16 kHz
FFT_SIZE = 2048      # zero-padded; 1025 one-sided power bins
N_MELS = 80
MEL_FMIN = 0.0
MEL_FMAX = 8000.0
LOG_FLOOR = 1e-6

AUDIO_DIM = N_MELS
GAZE_DIM = 4
FACE_DIM = 256


class UnsupportedFormatError(ValueError):
    """Audio input violates the supported PCM format."""


class DegenerateGeometryError(ValueError):
    """Eye observation geometry does not define a coordinate frame."""


@dataclass
class PcmClip:
    """Mono PCM audio at 16 kHz with samples in [-1, 1]."""
    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise UnsupportedFormatError("PCM clip must be mono")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("PCM samples must be finite")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class EyeObservation:
    """One eye's raw landmarks in image pixels."""
    left_corner: tuple
    right_corner: tuple
    pupil: tuple
    iris_radius: float

    def __post_init__(self):
        if self.iris_radius <= 0:
            raise ValueError("iris_radius must be positive")


@dataclass
class AlignedClip:
    """Synchronized 100 Hz sequences: audio (T,80), gaze (T,4), face (T,256)."""
    audio: np.ndarray
    gaze: np.ndarray
    face: np.ndarray

    def __post_init__(self):
        if not (len(self.audio) == len(self.gaze) == len(self.face)):
            raise ValueError("aligned streams must share a common length")

    @property
    def num_frames(self) -> int:
        return len(self.audio)


def frame_count(num_samples: int) -> int:
    """Closed-form frame count for a clip of ``num_samples`` at 16 kHz."""
    return 1 + (num_samples - WINDOW) // HOP


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank() -> np.ndarray:
    """(N_MELS, 1025) triangular filters equally spaced on the mel scale.

    Triangles peak at 1 (no area normalization); mel(f) = 2595*log10(1+f/700).
    """
    n_bins = FFT_SIZE // 2 + 1
    bin_freqs = np.arange(n_bins) * (SAMPLE_RATE / FFT_SIZE)
    mel_points = np.linspace(hz_to_mel(MEL_FMIN), hz_to_mel(MEL_FMAX), N_MELS + 2)
    hz_points = mel_to_hz(mel_points)
    fb = np.zeros((N_MELS, n_bins))
    for j in range(N_MELS):
        lo, center, hi = hz_points[j], hz_points[j + 1], hz_points[j + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        fb[j] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_center_frequencies() -> np.ndarray:
    """Peak frequency (Hz) of each of the 80 triangular filters."""
    mel_points = np.linspace(hz_to_mel(MEL_FMIN), hz_to_mel(MEL_FMAX), N_MELS + 2)
    return mel_to_hz(mel_points)[1:-1]


_FILTERBANK_CACHE: dict = {}


def mel_power(clip: PcmClip) -> np.ndarray:
    """Pre-log mel energies (T, 80): windowed power spectra through the filterbank."""
    if clip.sample_rate != SAMPLE_RATE:
        raise UnsupportedFormatError(
            f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
    n = clip.samples.size
    if n < WINDOW:
        raise ValueError("clip shorter than one analysis window")
    T = frame_count(n)
    if "fb" not in _FILTERBANK_CACHE:
        _FILTERBANK_CACHE["fb"] = mel_filterbank()
        _FILTERBANK_CACHE["win"] = np.hanning(WINDOW)
    fb = _FILTERBANK_CACHE["fb"]
    win = _FILTERBANK_CACHE["win"]
    idx = np.arange(T)[:, None] * HOP + np.arange(WINDOW)[None, :]
    frames = clip.samples[idx] * win
    spectrum = np.fft.rfft(frames, n=FFT_SIZE, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    return power @ fb.T


def mel_spectrogram(clip: PcmClip) -> np.ndarray:
    """Log-mel features (T, 80) for a 16 kHz clip.

    Power spectra from a 50 ms Hanning window every 10 ms, zero-padded to a
    2048-point FFT, projected onto 80 triangular mel filters spanning
    0-8000 Hz, then compressed as log(x + 1e-6).
    """
    return np.log(mel_power(clip) + LOG_FLOOR)


def normalize_gaze(obs: EyeObservation) -> tuple:
    """Pupil position in the eye-corner coordinate frame.

    The similarity transform sending left_corner to (-1, 0) and
    right_corner to (1, 0) is applied to the pupil; the perpendicular
    axis is then rescaled so one iris radius maps to unit length.
    """
    l = np.asarray(obs.left_corner, dtype=np.float64)
    r = np.asarray(obs.right_corner, dtype=np.float64)
    p = np.asarray(obs.pupil, dtype=np.float64)
    axis = r - l
    half_width = np.hypot(*axis) / 2.0
    if half_width == 0.0:
        raise DegenerateGeometryError("eye corners coincide")
    center = (l + r) / 2.0
    d = p - center
    # rotate so the corner axis is horizontal, without normalizing scale yet
    ux = axis / (2.0 * half_width)
    x_rot = d[0] * ux[0] + d[1] * ux[1]
    y_rot = -d[0] * ux[1] + d[1] * ux[0]
    return (x_rot / half_width, y_rot / obs.iris_radius)


def gaze_frame(left: EyeObservation, right: EyeObservation) -> np.ndarray:
    """Concatenated 4-vector (left x, left y, right x, right y)."""
    lx, ly = normalize_gaze(left)
    rx, ry = normalize_gaze(right)
    return np.array([lx, ly, rx, ry])


def align_streams(audio_frames: np.ndarray,
                  gaze_times: np.ndarray, gaze_values: np.ndarray,
                  face_times: np.ndarray, face_values: np.ndarray) -> AlignedClip:
    """Interpolate gaze and face onto the audio frame clock, truncate to overlap.

    Audio frame t is anchored at t/100 seconds.  Gaze and face streams may
    arrive at arbitrary rates with explicit timestamps; both are linearly
    interpolated at the audio frame times and the result is truncated to
    the frames every stream covers.
    """
    audio_frames = np.asarray(audio_frames, dtype=np.float64)
    gaze_times = np.asarray(gaze_times, dtype=np.float64)
    face_times = np.asarray(face_times, dtype=np.float64)
    if gaze_times.size == 0 or face_times.size == 0 or len(audio_frames) == 0:
        raise ValueError("empty stream")
    t_hi = min(len(audio_frames) - 1, int(np.floor(min(gaze_times[-1], face_times[-1]) * FRAME_RATE)))
    t_lo = max(0, int(np.ceil(max(gaze_times[0], face_times[0]) * FRAME_RATE)))
    if t_hi < t_lo:
        raise ValueError("streams share no common time interval")
    times = np.arange(t_lo, t_hi + 1) / FRAME_RATE
    gaze = np.column_stack([
        np.interp(times, gaze_times, np.asarray(gaze_values, dtype=np.float64)[:, j])
        for j in range(np.asarray(gaze_values).shape[1])])
    face = np.column_stack([
        np.interp(times, face_times, np.asarray(face_values, dtype=np.float64)[:, j])
        for j in range(np.asarray(face_values).shape[1])])
    return AlignedClip(audio=audio_frames[t_lo:t_hi + 1], gaze=gaze, face=face)


@dataclass
class NormStats:
    """Per-channel z-score statistics for the two input feature streams.

    Computed on the training split and stored in checkpoints; applied
    identically at training, offline inference, and streaming time.
    """
    audio_mean: np.ndarray
    audio_std: np.ndarray
    gaze_mean: np.ndarray
    gaze_std: np.ndarray

    @classmethod
    def from_clips(cls, clips) -> "NormStats":
        audio = np.concatenate([c.audio for c in clips], axis=0)
        gaze = np.concatenate([c.gaze for c in clips], axis=0)
        return cls(audio.mean(axis=0), np.maximum(audio.std(axis=0), 1e-8),
                   gaze.mean(axis=0), np.maximum(gaze.std(axis=0), 1e-8))

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(np.zeros(AUDIO_DIM), np.ones(AUDIO_DIM),
                   np.zeros(GAZE_DIM), np.ones(GAZE_DIM))

    def pair(self, modality: str):
        if modality == "audio":
            return self.audio_mean, self.audio_std
        if modality == "gaze":
            return self.gaze_mean, self.gaze_std
        raise ValueError(f"no statistics for modality {modality!r}")

    def apply(self, modality: str, arr: np.ndarray) -> np.ndarray:
        """Z-score in the array's own dtype (no precision promotion)."""
        mean, std = self.pair(modality)
        arr = np.asarray(arr)
        return (arr - mean.astype(arr.dtype)) / std.astype(arr.dtype)

    def normalize_clip(self, clip: AlignedClip) -> AlignedClip:
        return AlignedClip(audio=self.apply("audio", clip.audio),
                           gaze=self.apply("gaze", clip.gaze),
                           face=clip.face)


# ---------------------------------------------------------------------------
# file formats


def read_wav(path) -> PcmClip:
    """Read 16-bit little-endian mono PCM WAV into [-1, 1] floats."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise UnsupportedFormatError("expected mono WAV")
    if data.dtype != np.int16:
        raise UnsupportedFormatError(f"expected 16-bit PCM WAV, got {data.dtype}")
    return PcmClip(sample_rate=int(rate), samples=data.astype(np.float64) / 32768.0)


def write_wav(path, clip: PcmClip) -> None:
    scaled = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, clip.sample_rate, scaled)


def write_stream_csv(path, times: np.ndarray, values: np.ndarray, prefix: str) -> None:
    """Headered CSV: time_seconds, then one column per value channel."""
    values = np.asarray(values)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_seconds"] + [f"{prefix}{j}" for j in range(values.shape[1])])
        for t, row in zip(times, values):
            writer.writerow([f"{t:.6f}"] + [f"{v:.9g}" for v in row])


def read_stream_csv(path) -> tuple:
    """Read a headered stream CSV back as (times, values)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "time_seconds":
            raise ValueError(f"{path}: missing time_seconds header column")
        rows = [[float(v) for v in row] for row in reader if row]
    arr = np.asarray(rows, dtype=np.float64)
    if arr.size == 0:
        raise ValueError(f"{path}: empty stream")
    return arr[:, 0], arr[:, 1:]

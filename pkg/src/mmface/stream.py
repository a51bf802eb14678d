"""Real-time causal streaming inference at the 100 Hz frame clock.

A ``StreamSession`` consumes one (audio, gaze) feature frame at a time
and emits one coefficient frame, using bounded ring buffers: the raw
feature history at receptive-field depth, plus one ring per convolution
layer holding exactly the frames its dilation can still reach.  Every
per-frame operation has the same shapes and values as the offline
``model.infer`` path, so a streamed clip reproduces offline inference
bit-exactly; memory does not grow with stream length.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from mmface import model as mm
from mmface import tensor as tt
from mmface.model import ModelConfig, _flat_kernel, _head_col, _lrelu


class StreamStateError(RuntimeError):
    """Session used before initialization or after shutdown."""


class RingBuffer:
    """Fixed-capacity per-channel history with absolute-index reads."""

    def __init__(self, channels: int, capacity: int, dtype):
        self.capacity = capacity
        self.data = np.zeros((channels, capacity), dtype=dtype)
        self.head = -1   # absolute index of the newest frame

    def push(self, col: np.ndarray) -> None:
        self.head += 1
        self.data[:, self.head % self.capacity] = col

    def read(self, index: int) -> np.ndarray | None:
        """Column at absolute frame index, or None before stream start."""
        if index < 0:
            return None
        if index > self.head or index <= self.head - self.capacity:
            raise IndexError("index outside buffered history")
        return self.data[:, index % self.capacity]


class _StreamTrunk:
    """Ring-buffered incremental evaluator of one TCN trunk."""

    def __init__(self, params, stack: str, cfg: ModelConfig):
        dtype = params[f"{stack}/resize_w"].data.dtype
        self.cfg = cfg
        self.resize_w = params[f"{stack}/resize_w"].data
        self.resize_b = params[f"{stack}/resize_b"].data
        self.conv_w = [_flat_kernel(params[f"{stack}/conv{l}_w"].data)
                       for l in range(cfg.layers)]
        self.conv_b = [params[f"{stack}/conv{l}_b"].data for l in range(cfg.layers)]
        # layer l only ever reaches (K-1)*dilation frames back
        self.rings = [RingBuffer(cfg.channels, (cfg.kernel - 1) * d + 1, dtype)
                      for d in cfg.dilations()]

    def reset(self) -> None:
        for ring in self.rings:
            ring.data[...] = 0.0
            ring.head = -1

    def step(self, t: int, col: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        K = cfg.kernel
        h = _lrelu(self.resize_w @ col + self.resize_b, cfg.leak)
        for l, d in enumerate(cfg.dilations()):
            ring = self.rings[l]
            ring.push(h)
            cols = np.zeros((cfg.channels, K), dtype=h.dtype)
            for k in range(K):
                src = ring.read(t - (K - 1 - k) * d)
                if src is not None:
                    cols[:, k] = src
            y = _lrelu(self.conv_w[l] @ cols.reshape(K * cfg.channels, order="F")
                       + self.conv_b[l], cfg.leak)
            h = h + y
        return h


@dataclass
class LatencyStats:
    """Bounded latency accumulator: fixed histogram instead of a sample list."""
    bucket_us: float = 10.0
    buckets: np.ndarray = None
    count: int = 0
    total: float = 0.0
    worst: float = 0.0

    def __post_init__(self):
        if self.buckets is None:
            self.buckets = np.zeros(20000, dtype=np.int64)   # covers 200 ms

    def add(self, seconds: float) -> None:
        self.count += 1
        self.total += seconds
        self.worst = max(self.worst, seconds)
        idx = min(int(seconds * 1e6 / self.bucket_us), len(self.buckets) - 1)
        self.buckets[idx] += 1

    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0

    def quantile(self, q: float) -> float:
        if not self.count:
            return 0.0
        target = q * self.count
        cum = np.cumsum(self.buckets)
        idx = int(np.searchsorted(cum, target))
        return (idx + 1) * self.bucket_us / 1e6

    def summary(self) -> dict:
        return {"frames": self.count, "mean_ms": self.mean() * 1e3,
                "p50_ms": self.quantile(0.50) * 1e3,
                "p99_ms": self.quantile(0.99) * 1e3,
                "max_ms": self.worst * 1e3}


class StreamSession:
    """Frame-by-frame inference over a loaded checkpoint.

    Inputs are normalized with the checkpoint statistics.  Non-finite
    input frames are rejected: the previous output is repeated and a
    warning counter ticks.  Outputs appear strictly in frame order.
    """

    def __init__(self, checkpoint):
        self.checkpoint = checkpoint
        self.variant = checkpoint.variant
        self.spec = mm.variant_spec(self.variant)
        self.cfg = checkpoint.model_config
        self.params = checkpoint.params
        mm.check_params(self.params, self.cfg, self.variant)
        self.stats = checkpoint.stats
        dtype = self.params[next(iter(self.params))].data.dtype
        self._dtype = dtype
        rf = self.cfg.receptive_field()
        self.feature_rings = {
            m: RingBuffer(self.cfg.modality_dim(m), rf, dtype)
            for m in self.spec.modalities}
        if self.spec.regression:
            self._trunks = {"reg": _StreamTrunk(self.params, "reg", self.cfg)}
        else:
            self._trunks = {f"enc_{m}": _StreamTrunk(self.params, f"enc_{m}", self.cfg)
                            for m in self.spec.modalities}
            if self.spec.mixture:
                self._trunks["enc_mix"] = _StreamTrunk(self.params, "enc_mix", self.cfg)
            self._trunks["dec_face"] = _StreamTrunk(self.params, "dec_face", self.cfg)
        self.latency = LatencyStats()
        self.frame_index = -1
        self.rejected = 0
        self._last_output = np.zeros(self.cfg.face_dim, dtype=dtype)
        self._norms = {m: self.stats.pair(m) for m in self.spec.modalities}
        self._open = True

    def reset(self) -> None:
        for trunk in self._trunks.values():
            trunk.reset()
        for ring in self.feature_rings.values():
            ring.data[...] = 0.0
            ring.head = -1
        self.frame_index = -1
        self.rejected = 0
        self._last_output = np.zeros(self.cfg.face_dim, dtype=self._dtype)

    def step(self, audio_frame=None, gaze_frame=None) -> np.ndarray:
        """Push one frame per modality, emit one coefficient frame."""
        if not self._open:
            raise StreamStateError("session is closed")
        frames = {}
        for m, raw in (("audio", audio_frame), ("gaze", gaze_frame)):
            if m not in self.spec.modalities:
                continue
            if raw is None:
                raise ValueError(f"variant {self.variant!r} needs a {m} frame")
            arr = np.asarray(raw, dtype=self._dtype)
            if arr.shape != (self.cfg.modality_dim(m),):
                raise ValueError(f"{m} frame must have shape "
                                 f"({self.cfg.modality_dim(m)},)")
            frames[m] = arr
        started = time.perf_counter()
        if any(not np.all(np.isfinite(a)) for a in frames.values()):
            self.rejected += 1
            self.latency.add(time.perf_counter() - started)
            return self._last_output.copy()
        self.frame_index += 1
        t = self.frame_index
        cols = {}
        for m, arr in frames.items():
            mean, std = self._norms[m]
            col = mm.normalize_frame(arr, mean.astype(self._dtype),
                                     std.astype(self._dtype))
            self.feature_rings[m].push(col)
            cols[m] = col
        if self.spec.regression:
            cat = np.concatenate([cols[m] for m in self.spec.modalities])
            out = _head_col(self.params, "reg", "out",
                            self._trunks["reg"].step(t, cat))
        else:
            mus = {m: _head_col(self.params, f"enc_{m}", "mu",
                                self._trunks[f"enc_{m}"].step(t, cols[m]))
                   for m in self.spec.modalities}
            if self.spec.mixture:
                cat = np.concatenate([cols[m] for m in mm.MODALITIES])
                logits = _head_col(self.params, "enc_mix", "pi",
                                   self._trunks["enc_mix"].step(t, cat))
                L = self.cfg.latent
                pi_a, pi_g = mm.softmax_pair_col(logits[:L], logits[L:])
                z = mm.fuse_mean_col(pi_a, mus["audio"], pi_g, mus["gaze"])
            else:
                z = mus[self.spec.modalities[0]]
            out = _head_col(self.params, "dec_face", "out",
                            self._trunks["dec_face"].step(t, z))
        self._last_output = out
        self.latency.add(time.perf_counter() - started)
        return out.copy()

    def run_clip(self, audio, gaze=None) -> np.ndarray:
        """Stream a whole clip frame by frame; returns (T, 256) coefficients."""
        arrays = {}
        if "audio" in self.spec.modalities:
            arrays["audio"] = np.asarray(audio)
        if "gaze" in self.spec.modalities:
            if gaze is None:
                raise ValueError("variant requires gaze frames")
            arrays["gaze"] = np.asarray(gaze)
        T = min(len(a) for a in arrays.values())
        out = np.empty((T, self.cfg.face_dim), dtype=self._dtype)
        for t in range(T):
            out[t] = self.step(
                audio_frame=arrays["audio"][t] if "audio" in arrays else None,
                gaze_frame=arrays["gaze"][t] if "gaze" in arrays else None)
        return out

    def close(self) -> None:
        self._open = False

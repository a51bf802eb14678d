"""Seeded training loop, adaptive-moment optimizer, and binary checkpoints.

A run is fully determined by (config, dataset, seed) in a fixed precision
mode: window sampling, parameter initialization, and reparameterization
noise all flow from one seeded generator.  Metrics stream to a
newline-delimited ``key=value`` text log; the final state lands in a
versioned, CRC-guarded binary checkpoint.

Checkpoint layout (all integers little-endian):

    magic   8 bytes  b"MMFACEC1"
    version u32      currently 1
    variant u16 length + utf-8 tag
    model   u32 length + utf-8 key=value block (one per line)
    train   u32 length + utf-8 key=value block
    tensors u32 count, then per tensor:
              u16 name length + utf-8 name
              u8 dtype code (0 = float64, 1 = float32)
              u8 ndim, then ndim * u32 dims
              raw value bytes
            normalization statistics ride along under "stats/" names
    opt     u8 flag; if 1: u64 step count, then first/second moment
            arrays in tensor-table order (same dtype/shape as each param)
    crc     u32 CRC32 of every preceding byte

Config files are flat ``key=value`` lines; ``#`` starts a comment.
Recognized keys mirror TrainConfig field names.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

from mmface import model as mm
from mmface import tensor as tt
from mmface.features import AlignedClip, NormStats
from mmface.model import ModelConfig
from mmface.tensor import Tensor

MAGIC = b"MMFACEC1"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {0: np.dtype(np.float64), 1: np.dtype(np.float32)}


class CheckpointFormatError(ValueError):
    """Checkpoint bytes are corrupt, truncated, or of an unknown version."""


class VariantMismatchError(ValueError):
    """Checkpoint holds a different model variant than requested."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite-state checkpoint."""

    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    """Everything that determines a run besides the dataset itself."""
    variant: str = "c"
    learning_rate: float = 1e-3
    batch_size: int = 8
    window: int = 200
    steps: int = 1000
    seed: int = 0
    precision: str = "float64"
    kl_weight: float = 1.0
    channels: int = 128
    latent: int = 64
    layers: int = 5
    log_every: int = 10
    holdout_every: int = 100
    snapshot_every: int = 25

    def model_config(self) -> ModelConfig:
        return ModelConfig(channels=self.channels, latent=self.latent,
                           layers=self.layers)

    def validate(self) -> None:
        if self.variant not in mm.VARIANT_TAGS:
            raise ValueError(f"unknown variant {self.variant!r}")
        rf = self.model_config().receptive_field()
        if self.window < rf:
            raise ValueError(f"window {self.window} shorter than the "
                             f"receptive field ({rf} frames)")
        if self.learning_rate <= 0 or self.batch_size <= 0:
            raise ValueError("learning_rate and batch_size must be positive")
        if self.steps < 0 or self.kl_weight < 0:
            raise ValueError("steps and kl_weight must be non-negative")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"unknown precision {self.precision!r}")


_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_config_text(text: str) -> dict:
    """Parse flat key=value lines; unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def config_from_mapping(mapping: dict) -> TrainConfig:
    kwargs = {}
    for key, value in mapping.items():
        if key not in _CONFIG_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        target = TrainConfig.__dataclass_fields__[key].type
        if target in ("int",):
            kwargs[key] = int(value)
        elif target in ("float",):
            kwargs[key] = float(value)
        else:
            kwargs[key] = str(value)
    cfg = TrainConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config_file(path, overrides: dict | None = None) -> TrainConfig:
    with open(path) as fh:
        mapping = parse_config_text(fh.read())
    if overrides:
        mapping.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_mapping(mapping)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""
    m: dict
    v: dict
    step_count: int = 0
    skipped: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected adaptive-moment update, in place.

    Non-finite gradients skip the whole step and bump a warning counter,
    leaving parameters and moments untouched.
    """
    for g in grads.values():
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            return state
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / correction1
        vhat = v / correction2
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


# ---------------------------------------------------------------------------
# checkpoint format


@dataclass
class Checkpoint:
    variant: str
    model_config: ModelConfig
    train_config: dict
    params: dict                 # name -> Tensor
    stats: NormStats
    optimizer: AdamState | None = None

    def require_variant(self, variant: str) -> None:
        if self.variant != variant:
            raise VariantMismatchError(
                f"checkpoint holds variant {self.variant!r}, not {variant!r}")

    def clone_params(self) -> dict:
        return {k: Tensor(p.data.copy(), requires_grad=True)
                for k, p in self.params.items()}


def _kv_block(mapping: dict) -> bytes:
    lines = [f"{k}={mapping[k]}" for k in sorted(mapping)]
    return "\n".join(lines).encode()

def _parse_kv(blob: bytes, section: str) -> dict:
    out = {}
    for line in blob.decode().splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointFormatError(f"malformed {section} section")
        k, v = line.split("=", 1)
        out[k] = v
    return out


def _model_config_dict(cfg: ModelConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(ModelConfig)}


def _model_config_from(mapping: dict) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        raw = mapping[f.name]
        kwargs[f.name] = {"int": int, "float": float}[f.type](raw)
    return ModelConfig(**kwargs)


def _write_array(buf, name: str, arr: np.ndarray) -> None:
    nm = name.encode()
    buf.write(struct.pack("<H", len(nm)))
    buf.write(nm)
    buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr).tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError(f"truncated in {section} section")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, section: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), section))


def _read_array(r: _Reader, section: str):
    (nlen,) = r.unpack("<H", section)
    name = r.take(nlen, section).decode()
    code, ndim = r.unpack("<BB", section)
    if code not in _CODE_DTYPES:
        raise CheckpointFormatError(f"unknown dtype code in {section} section")
    dims = r.unpack(f"<{ndim}I", section)
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    arr = np.frombuffer(r.take(nbytes, section), dtype=dtype).reshape(dims).copy()
    return name, arr


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    tag = ckpt.variant.encode()
    buf.write(struct.pack("<H", len(tag)))
    buf.write(tag)
    for block in (_kv_block(_model_config_dict(ckpt.model_config)),
                  _kv_block(ckpt.train_config)):
        buf.write(struct.pack("<I", len(block)))
        buf.write(block)
    names = sorted(ckpt.params)
    stats = ckpt.stats
    stat_arrays = [("stats/audio_mean", stats.audio_mean),
                   ("stats/audio_std", stats.audio_std),
                   ("stats/gaze_mean", stats.gaze_mean),
                   ("stats/gaze_std", stats.gaze_std)]
    buf.write(struct.pack("<I", len(names) + len(stat_arrays)))
    for name in names:
        _write_array(buf, name, ckpt.params[name].data)
    for name, arr in stat_arrays:
        _write_array(buf, name, np.asarray(arr, dtype=np.float64))
    if ckpt.optimizer is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", ckpt.optimizer.step_count))
        for name in names:
            buf.write(np.ascontiguousarray(ckpt.optimizer.m[name]).tobytes())
            buf.write(np.ascontiguousarray(ckpt.optimizer.v[name]).tobytes())
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path, expect_variant: str | None = None) -> Checkpoint:
    """Parse and validate a checkpoint; no state escapes a corrupt file.

    Stored arrays are cast to the active precision mode; loading under the
    mode the checkpoint was written with reproduces forward outputs
    bit-exactly.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointFormatError("file too short for header")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointFormatError("CRC mismatch: file corrupt or truncated")
    r = _Reader(payload)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I", "header")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (taglen,) = r.unpack("<H", "variant")
    variant = r.take(taglen, "variant").decode()
    if variant not in mm.VARIANT_TAGS:
        raise CheckpointFormatError(f"unknown variant tag {variant!r}")
    (mlen,) = r.unpack("<I", "model-config")
    model_cfg = _model_config_from(_parse_kv(r.take(mlen, "model-config"),
                                             "model-config"))
    (tlen,) = r.unpack("<I", "train-config")
    train_cfg = _parse_kv(r.take(tlen, "train-config"), "train-config")
    (count,) = r.unpack("<I", "tensor-table")
    params = {}
    raw_stats = {}
    order = []   # (name, stored dtype, shape) before the precision cast
    for _ in range(count):
        name, arr = _read_array(r, "tensor-table")
        if name.startswith("stats/"):
            raw_stats[name] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
            order.append((name, arr.dtype, arr.shape))
    try:
        stats = NormStats(raw_stats["stats/audio_mean"], raw_stats["stats/audio_std"],
                          raw_stats["stats/gaze_mean"], raw_stats["stats/gaze_std"])
    except KeyError as exc:
        raise CheckpointFormatError("missing normalization statistics") from exc
    (opt_flag,) = r.unpack("<B", "optimizer")
    optimizer = None
    if opt_flag == 1:
        (step_count,) = r.unpack("<Q", "optimizer")
        m, v = {}, {}
        for name, dtype, shape in order:
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            target = params[name].data.dtype
            m[name] = np.frombuffer(r.take(nbytes, "optimizer"),
                                    dtype=dtype).reshape(shape).astype(target)
            v[name] = np.frombuffer(r.take(nbytes, "optimizer"),
                                    dtype=dtype).reshape(shape).astype(target)
        optimizer = AdamState(m=m, v=v, step_count=step_count)
    elif opt_flag != 0:
        raise CheckpointFormatError("bad optimizer flag")
    if r.pos != len(payload):
        raise CheckpointFormatError("trailing bytes after optimizer section")
    ckpt = Checkpoint(variant=variant, model_config=model_cfg,
                      train_config=train_cfg, params=params, stats=stats,
                      optimizer=optimizer)
    if expect_variant is not None:
        ckpt.require_variant(expect_variant)
    return ckpt


# ---------------------------------------------------------------------------
# training loop


def _sample_windows(rng, clips, window: int, batch: int):
    eligible = np.array([c.num_frames - window + 1 for c in clips])
    if np.any(eligible <= 0):
        raise ValueError("every training clip must cover one full window")
    cum = np.cumsum(eligible)
    picks = rng.integers(0, cum[-1], size=batch)
    out = []
    for pick in picks:
        ci = int(np.searchsorted(cum, pick, side="right"))
        start = int(pick - (cum[ci - 1] if ci else 0))
        out.append((ci, start))
    return out


def _window_clip(clip: AlignedClip, start: int, window: int) -> AlignedClip:
    sl = slice(start, start + window)
    return AlignedClip(audio=clip.audio[sl], gaze=clip.gaze[sl], face=clip.face[sl])


def _snapshot(params: dict) -> dict:
    return {k: Tensor(p.data.copy(), requires_grad=True) for k, p in params.items()}


def format_metrics_line(record: dict) -> str:
    parts = [f"step={record['step']}"]
    for key in ("face_rec", "audio_rec", "gaze_rec", "kl_shared", "kl_modality",
                "total"):
        parts.append(f"{key}={record[key]:.10g}")
    if "holdout_face_rec" in record:
        parts.append(f"holdout_face_rec={record['holdout_face_rec']:.10g}")
    return " ".join(parts)


def holdout_face_error(params, variant: str, cfg: ModelConfig, clips,
                       kl_weight: float = 1.0) -> float:
    """Mean facial reconstruction error over normalized held-out clips."""
    errs = []
    for clip in clips:
        br = mm.loss(None, params, variant, cfg, clip, noise=None,
                     kl_weight=kl_weight)
        errs.append(br.face_rec)
    return float(np.mean(errs))


def train(config: TrainConfig, clips, holdout=None, log_path=None,
          stats: NormStats | None = None):
    """Optimize one variant on aligned clips; returns (Checkpoint, metrics).

    Clips are z-scored with training-set statistics (stored in the
    checkpoint).  Every step draws ``batch_size`` fixed-length windows
    uniformly over eligible positions, averages the variant loss, and
    applies one adaptive-moment update.  A non-finite loss aborts with the
    last finite snapshot attached to the TrainingDiverged exception.
    """
    config.validate()
    if not clips:
        raise ValueError("dataset must be non-empty")
    with tt.precision(config.precision):
        cfg = config.model_config()
        if stats is None:
            stats = NormStats.from_clips(clips)
        normalized = [stats.normalize_clip(c) for c in clips]
        held = [stats.normalize_clip(c) for c in (holdout or [])]
        rng = np.random.default_rng(config.seed)
        params = mm.init_params(cfg, config.variant, seed=config.seed)
        opt = AdamState.for_params(params)
        spec = mm.variant_spec(config.variant)
        metrics = []
        log_fh = open(log_path, "w") if log_path else None
        last_good = _snapshot(params)
        last_good_opt = AdamState(m={k: a.copy() for k, a in opt.m.items()},
                                  v={k: a.copy() for k, a in opt.v.items()})

        def build_checkpoint(p, o):
            return Checkpoint(variant=config.variant, model_config=cfg,
                              train_config={f.name: getattr(config, f.name)
                                            for f in fields(TrainConfig)},
                              params=p, stats=stats, optimizer=o)

        try:
            for step in range(config.steps):
                tape = tt.Tape()
                total = None
                sums = {k: 0.0 for k in ("face_rec", "audio_rec", "gaze_rec",
                                         "kl_shared", "kl_modality", "total")}
                try:
                    for ci, start in _sample_windows(rng, normalized,
                                                     config.window,
                                                     config.batch_size):
                        window = _window_clip(normalized[ci], start, config.window)
                        noise = {m: Tensor(rng.standard_normal(
                            (config.window, cfg.latent)))
                            for m in spec.modalities}
                        br = mm.loss(tape, params, config.variant, cfg, window,
                                     noise, kl_weight=config.kl_weight)
                        for k in sums:
                            sums[k] += getattr(br, k)
                        term = tt.mul_scalar(tape, br.total_tensor,
                                             1.0 / config.batch_size)
                        total = term if total is None else tt.add(tape, total, term)
                    if not np.isfinite(total.item()):
                        raise tt.NonFiniteError("loss is non-finite")
                except tt.NonFiniteError as exc:
                    raise TrainingDiverged(
                        f"aborted at step {step}: {exc}",
                        build_checkpoint(last_good, last_good_opt)) from exc
                grads = tt.backward(tape, total)
                adam_step(params, {k: params[k].grad for k in params}, opt,
                          config.learning_rate)
                record = {"step": step}
                record.update({k: sums[k] / config.batch_size for k in sums})
                if held and config.holdout_every and \
                        (step + 1) % config.holdout_every == 0:
                    record["holdout_face_rec"] = holdout_face_error(
                        params, config.variant, cfg, held, config.kl_weight)
                if step % config.log_every == 0 or step == config.steps - 1 \
                        or "holdout_face_rec" in record:
                    metrics.append(record)
                    if log_fh:
                        log_fh.write(format_metrics_line(record) + "\n")
                if config.snapshot_every and (step + 1) % config.snapshot_every == 0:
                    last_good = _snapshot(params)
                    last_good_opt = AdamState(
                        m={k: a.copy() for k, a in opt.m.items()},
                        v={k: a.copy() for k, a in opt.v.items()},
                        step_count=opt.step_count)
        finally:
            if log_fh:
                log_fh.close()
        return build_checkpoint(params, opt), metrics

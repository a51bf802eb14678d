"""Command-line entry points for every workflow.

Subcommands: datagen, featurize, train, eval, infer, stream, gradcheck,
ablate.  Exit codes: 0 success, 1 usage error, 2 data/format error,
3 numerical failure.  Run ``python -m mmface <subcommand> --help`` for
per-subcommand flags; train accepts a flat key=value config file whose
settings individual flags override.
"""

from __future__ import annotations

import argparse
import struct
import sys
from pathlib import Path

import numpy as np

from mmface import dataset as ds
from mmface import evalmetrics as ev
from mmface import features as ff
from mmface import model as mm
from mmface import synth
from mmface import tensor as tt
from mmface import train as tr
from mmface.stream import StreamSession

USAGE_ERROR, DATA_ERROR, NUMERICAL_ERROR = 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmface",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("datagen", help="generate synthetic capture sessions")
    g.add_argument("--out", required=True)
    g.add_argument("--subject", type=int, default=1, choices=synth.SUBJECTS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-sessions", type=int, default=4)
    g.add_argument("--heldout-sessions", type=int, default=2)
    g.add_argument("--session-seconds", type=float, default=45.0)

    f = sub.add_parser("featurize", help="featurize stored sessions to 100 Hz clips")
    f.add_argument("--data", required=True)
    f.add_argument("--session", help="single session name; default: all")
    f.add_argument("--mel-csv", help="also dump this session's mel features as CSV")

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--log", help="metrics log path")
    t.add_argument("--style", choices=synth.STYLES,
                   help="restrict training to one style")
    for key in ("variant", "precision"):
        t.add_argument(f"--{key}")
    for key in ("batch-size", "window", "steps", "seed", "channels", "latent",
                "layers"):
        t.add_argument(f"--{key.replace('_', '-')}", type=int)
    for key in ("learning-rate", "kl-weight"):
        t.add_argument(f"--{key}", type=float)

    e = sub.add_parser("eval", help="landmark/closure report for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="heldout")
    e.add_argument("--style", choices=synth.STYLES)
    e.add_argument("--out", help="write the report as TSV")

    i = sub.add_parser("infer", help="offline inference on a WAV + eyes CSV pair")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--wav", required=True)
    i.add_argument("--eyes", required=True)
    i.add_argument("--out", required=True)

    s = sub.add_parser("stream", help="frame-by-frame streaming inference")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--wav", required=True)
    s.add_argument("--eyes", required=True)
    s.add_argument("--out", help="coefficient CSV path")
    s.add_argument("--binary", action="store_true",
                   help="write length-prefixed float32 frames to stdout")
    s.add_argument("--stats", action="store_true",
                   help="print latency statistics to stderr")

    c = sub.add_parser("gradcheck", help="finite-difference verification sweep")
    c.add_argument("--configs", type=int, default=50)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--samples", type=int, default=2)
    c.add_argument("--tolerance", type=float, default=1e-5)

    a = sub.add_parser("ablate", help="train a variant grid and emit the table")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--variants", default="a,b,c,d,e,f")
    a.add_argument("--seeds", default="0")
    a.add_argument("--config", help="key=value config file for every run")
    a.add_argument("--steps", type=int)
    return p


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_datagen(args) -> int:
    entries = ds.generate_dataset(args.out, args.subject, args.seed,
                                  args.train_sessions, args.heldout_sessions,
                                  args.session_seconds)
    print(f"wrote {len(entries)} sessions under {args.out}")
    return 0


def _cmd_featurize(args) -> int:
    root = Path(args.data)
    entries = ds.read_manifest(root / "manifest.txt")
    names = [args.session] if args.session else [e.name for e in entries]
    for name in names:
        path = ds.featurize_session(root, name)
        print(f"featurized {name} -> {path}")
    if args.mel_csv:
        clip = ds.load_clip(root, names[0])
        times = np.arange(clip.num_frames) / ff.FRAME_RATE
        ff.write_stream_csv(args.mel_csv, times, clip.audio, "mel")
        print(f"mel features for {names[0]} -> {args.mel_csv}")
    return 0


def _train_config(args) -> tr.TrainConfig:
    overrides = {key: getattr(args, key) for key in (
        "variant", "learning_rate", "batch_size", "window", "steps", "seed",
        "precision", "kl_weight", "channels", "latent", "layers")
        if getattr(args, key, None) is not None}
    if args.config:
        return tr.load_config_file(args.config, overrides)
    return tr.config_from_mapping(overrides)


def _cmd_train(args) -> int:
    config = _train_config(args)
    _, clips = ds.load_split(args.data, "train", args.style)
    try:
        _, holdout = ds.load_split(args.data, "heldout")
    except ValueError:
        holdout = None
    ckpt, metrics = tr.train(config, clips, holdout=holdout, log_path=args.log)
    tr.save_checkpoint(ckpt, args.out)
    last = metrics[-1] if metrics else {"total": float("nan")}
    print(f"trained variant {config.variant!r} for {config.steps} steps; "
          f"final total {last.get('total', float('nan')):.5g}; "
          f"checkpoint -> {args.out}")
    return 0


def evaluate_checkpoint(ckpt_path, data_root, split: str = "heldout",
                        style: str | None = None):
    """(RegionErrorReport, lip-closure F1) for a checkpoint on one split."""
    ckpt = tr.load_checkpoint(ckpt_path)
    entries, clips = ds.load_split(data_root, split, style)
    with tt.precision(ckpt.train_config.get("precision", "float64")):
        preds, truths, subjects = [], [], []
        for entry, clip in zip(entries, clips):
            audio = ckpt.stats.apply("audio", clip.audio)
            gaze = ckpt.stats.apply("gaze", clip.gaze)
            spec = mm.variant_spec(ckpt.variant)
            pred = mm.infer(ckpt.params, ckpt.variant, ckpt.model_config,
                            audio=audio if "audio" in spec.modalities else None,
                            gaze=gaze if "gaze" in spec.modalities else None)
            preds.append(pred)
            truths.append(clip.face)
            subjects.append(entry.subject)
    reports = [ev.landmark_error(p, t, s)
               for p, t, s in zip(preds, truths, subjects)]
    merged = ev.RegionErrorReport(**{
        c: float(np.mean([getattr(r, c) for r in reports]))
        for c in ("eyebrows", "eyes", "nose", "mouth", "all")})
    closed_pred = np.concatenate([
        ev.detect_closures(synth.decode_landmarks(p, s))
        for p, s in zip(preds, subjects)])
    closed_true = np.concatenate([
        ev.detect_closures(synth.decode_landmarks(t, s))
        for t, s in zip(truths, subjects)])
    return merged, ev.lip_closure_f1(closed_pred, closed_true)


def _cmd_eval(args) -> int:
    report, f1 = evaluate_checkpoint(args.ckpt, args.data, args.split, args.style)
    for col in ev.REPORT_COLUMNS:
        print(f"{col:10s} {getattr(report, col):.4f}")
    print(f"{'lip F1':10s} {f1:.4f}")
    if args.out:
        row = ev.AblationRow(Path(args.ckpt).stem, report, f1,
                             ev.file_sha256(args.ckpt))
        Path(args.out).write_text(ev.AblationTable([row]).to_tsv())
    return 0


def _featurize_pair(wav_path, eyes_path):
    pcm = ff.read_wav(wav_path)
    mel = ff.mel_spectrogram(pcm)
    times, obs = ff.read_stream_csv(eyes_path)
    gaze = np.stack([synth.eye_frame_to_features(row) for row in obs])
    T = min(len(mel), len(gaze))
    return mel[:T], gaze[:T]


def _write_coeff_csv(path, coeffs) -> None:
    times = np.arange(len(coeffs)) / ff.FRAME_RATE
    ff.write_stream_csv(path, times, coeffs, "coef")


def _cmd_infer(args) -> int:
    ckpt = tr.load_checkpoint(args.ckpt)
    mel, gaze = _featurize_pair(args.wav, args.eyes)
    spec = mm.variant_spec(ckpt.variant)
    with tt.precision(ckpt.train_config.get("precision", "float64")):
        coeffs = mm.infer(
            ckpt.params, ckpt.variant, ckpt.model_config,
            audio=ckpt.stats.apply("audio", mel) if "audio" in spec.modalities else None,
            gaze=ckpt.stats.apply("gaze", gaze) if "gaze" in spec.modalities else None)
    _write_coeff_csv(args.out, coeffs)
    print(f"wrote {len(coeffs)} coefficient frames -> {args.out}")
    return 0


def _cmd_stream(args) -> int:
    ckpt = tr.load_checkpoint(args.ckpt)
    mel, gaze = _featurize_pair(args.wav, args.eyes)
    session = StreamSession(ckpt)
    spec = mm.variant_spec(ckpt.variant)
    rows = []
    binary_out = sys.stdout.buffer if args.binary else None
    for t in range(len(mel)):
        out = session.step(
            audio_frame=mel[t] if "audio" in spec.modalities else None,
            gaze_frame=gaze[t] if "gaze" in spec.modalities else None)
        if binary_out is not None:
            frame = np.asarray(out, dtype="<f4").tobytes()
            binary_out.write(struct.pack("<I", len(frame)))
            binary_out.write(frame)
        rows.append(out)
    if binary_out is not None:
        binary_out.flush()
    if args.out:
        _write_coeff_csv(args.out, np.stack(rows))
    if args.stats:
        s = session.latency.summary()
        print("latency: " + " ".join(f"{k}={v:.3f}" if isinstance(v, float)
                                     else f"{k}={v}" for k, v in s.items()),
              file=sys.stderr)
    return 0


def _cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for trial in range(args.configs):
        cfg = mm.ModelConfig(channels=int(rng.integers(2, 9)),
                             latent=int(rng.integers(2, 9)),
                             layers=int(rng.integers(1, 4)),
                             audio_dim=int(rng.integers(3, 7)),
                             gaze_dim=int(rng.integers(2, 5)),
                             face_dim=int(rng.integers(3, 8)))
        T = int(rng.integers(cfg.receptive_field() // 4 + 2, 33))
        variant = mm.VARIANT_TAGS[int(rng.integers(0, len(mm.VARIANT_TAGS)))]
        params = mm.init_params(cfg, variant, seed=trial)
        clip = ff.AlignedClip(audio=rng.standard_normal((T, cfg.audio_dim)),
                              gaze=rng.standard_normal((T, cfg.gaze_dim)),
                              face=rng.standard_normal((T, cfg.face_dim)))
        noise = {m: tt.Tensor(rng.standard_normal((T, cfg.latent)))
                 for m in ("audio", "gaze")}

        def build():
            tape = tt.Tape()
            br = mm.loss(tape, params, variant, cfg, clip, noise)
            return br.total_tensor, tape

        err = tt.grad_check(build, list(params.values()), epsilon=1e-5,
                            samples=args.samples, rng=rng)
        worst = max(worst, err)
        print(f"config {trial:3d} variant={variant:10s} T={T:3d} "
              f"max_rel_err={err:.3e}")
    print(f"worst over {args.configs} configs: {worst:.3e} "
          f"(tolerance {args.tolerance:g})")
    return 0 if worst < args.tolerance else NUMERICAL_ERROR


def _cmd_ablate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = tr.parse_config_text(fh.read())
    if args.steps is not None:
        base["steps"] = str(args.steps)
    _, clips = ds.load_split(args.data, "train")
    try:
        _, holdout = ds.load_split(args.data, "heldout")
    except ValueError:
        holdout = None
    runs = []
    for variant in variants:
        for seed in seeds:
            mapping = dict(base)
            mapping["variant"] = variant
            mapping["seed"] = str(seed)
            config = tr.config_from_mapping(mapping)
            ckpt, _ = tr.train(config, clips, holdout=holdout)
            path = out_dir / f"{variant}_seed{seed}.ckpt"
            tr.save_checkpoint(ckpt, path)
            runs.append((f"{variant}/seed{seed}", str(path), "heldout"))
            print(f"trained {variant} seed {seed} -> {path}")
    manifest = out_dir / "runs.tsv"
    with open(manifest, "w") as fh:
        for label, path, split in runs:
            fh.write(f"{label}\t{path}\t{split}\n")
    table = ev.build_ablation_table(
        runs, lambda p, split: evaluate_checkpoint(p, args.data, split))
    (out_dir / "table.tsv").write_text(table.to_tsv())
    (out_dir / "table.txt").write_text(table.to_text())
    print(table.to_text())
    return 0


_COMMANDS = {
    "datagen": _cmd_datagen,
    "featurize": _cmd_featurize,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "stream": _cmd_stream,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else USAGE_ERROR
    try:
        return _COMMANDS[args.command](args)
    except (tr.CheckpointFormatError, tr.VariantMismatchError,
            ff.UnsupportedFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except (tt.NonFiniteError, tr.TrainingDiverged) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR


def main() -> None:
    sys.exit(cli_main())

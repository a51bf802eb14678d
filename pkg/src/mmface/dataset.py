"""Dataset directory layout: session files, manifest, featurized clips.

A dataset directory holds raw sessions and their featurized form:

    manifest.txt            one `name<TAB>style<TAB>subject<TAB>split` per line
    sessions/<name>.wav     16 kHz mono PCM
    sessions/<name>_eyes.csv   per-frame eye observations (14 columns)
    sessions/<name>_face.csv   per-frame facial coefficients (256 columns)
    features/<name>.npz     aligned (audio, gaze, face) arrays at 100 Hz
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mmface import synth
from mmface.features import AlignedClip


@dataclass
class ManifestEntry:
    name: str
    style: str
    subject: int
    split: str


def write_manifest(path, entries) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(f"{e.name}\t{e.style}\t{e.subject}\t{e.split}\n")


def read_manifest(path):
    entries = []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"manifest line needs 4 fields: {raw!r}")
            entries.append(ManifestEntry(parts[0], parts[1], int(parts[2]), parts[3]))
    return entries


def generate_dataset(root, subject: int, seed: int, train_sessions: int,
                     heldout_sessions: int, session_seconds: float = 45.0):
    """Write a train/held-out session grid alternating the two styles."""
    root = Path(root)
    sessions_dir = root / "sessions"
    entries = []
    idx = 0
    for split, count in (("train", train_sessions), ("heldout", heldout_sessions)):
        for i in range(count):
            style = synth.STYLES[i % 2]
            cfg = synth.WorldConfig(seed=seed + idx, duration=session_seconds,
                                    style=style, subject=subject)
            session = synth.generate_session(cfg)
            name = f"s{subject}_{split}_{style[:4]}_{seed + idx:04d}"
            synth.write_session(sessions_dir, name, session)
            entries.append(ManifestEntry(name, style, subject, split))
            idx += 1
    write_manifest(root / "manifest.txt", entries)
    return entries


def featurize_session(root, name: str) -> Path:
    """Featurize one stored session into features/<name>.npz."""
    root = Path(root)
    clip = synth.load_session_clip(root / "sessions", name)
    out_dir = root / "features"
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / f"{name}.npz"
    np.savez(out, audio=clip.audio, gaze=clip.gaze, face=clip.face)
    return out


def load_clip(root, name: str) -> AlignedClip:
    """Load a featurized clip, featurizing on demand if needed."""
    root = Path(root)
    path = root / "features" / f"{name}.npz"
    if not path.exists():
        featurize_session(root, name)
    with np.load(path) as z:
        return AlignedClip(audio=z["audio"], gaze=z["gaze"], face=z["face"])


def load_split(root, split: str, style: str | None = None):
    """(entries, clips) for one manifest split, optionally filtered by style."""
    entries = [e for e in read_manifest(Path(root) / "manifest.txt")
               if e.split == split and (style is None or e.style == style)]
    if not entries:
        raise ValueError(f"no sessions with split={split!r}"
                         + (f" style={style!r}" if style else ""))
    return entries, [load_clip(root, e.name) for e in entries]

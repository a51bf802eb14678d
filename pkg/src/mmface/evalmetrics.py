"""Evaluation metrics and ablation artifacts: region MSE, lip-closure F1,
mixture-weight heatmaps, and the ablation table.

Landmark errors are measured in synthetic landmark units through the
fixed coefficient-to-landmark decoder, so only orderings and ratios are
meaningful, never absolute values from studies run on real capture data.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mmface import synth

REPORT_COLUMNS = ("eyebrows", "eyes", "nose", "mouth", "all")
CLOSURE_THRESHOLD = 2.0

# Published reference results for the KL-placement ablation on real capture
# data (commercial landmark tracker, pixel units).  NOT reproducible here:
# the synthetic world uses different units and data; these anchor the
# expected orderings only.
PUBLISHED_REFERENCE = {
    "a": {"eyebrows": 4.27, "eyes": 6.84, "nose": 2.27, "mouth": 20.46,
          "all": 15.15, "f1": 0.557},
    "b": {"eyebrows": 4.18, "eyes": 6.08, "nose": 2.12, "mouth": 19.03,
          "all": 14.12, "f1": 0.569},
    "c": {"eyebrows": 4.00, "eyes": 5.62, "nose": 1.99, "mouth": 17.95,
          "all": 13.36, "f1": 0.546},
    "d": {"eyebrows": 4.06, "eyes": 5.49, "nose": 2.06, "mouth": 18.42,
          "all": 13.42, "f1": 0.521},
    "e": {"eyebrows": 4.18, "eyes": 6.05, "nose": 2.15, "mouth": 19.42,
          "all": 14.22, "f1": 0.534},
    "f": {"eyebrows": 4.38, "eyes": 7.43, "nose": 2.34, "mouth": 20.64,
          "all": 15.52, "f1": 0.462},
}


@dataclass
class RegionErrorReport:
    """Per-region landmark MSE in squared landmark units, per coordinate."""
    eyebrows: float
    eyes: float
    nose: float
    mouth: float
    all: float

    def as_dict(self):
        return {c: getattr(self, c) for c in REPORT_COLUMNS}


def landmark_error(pred_coeffs, true_coeffs, subject: int = 1) -> RegionErrorReport:
    """Region MSE between predicted and true coefficient sequences.

    Both sequences decode through the same landmark map; the error is the
    mean squared difference per landmark coordinate.  "all" is the MSE
    over the union of landmarks, which equals the landmark-count-weighted
    mean of the region values.
    """
    pred_coeffs = np.asarray(pred_coeffs, dtype=np.float64)
    true_coeffs = np.asarray(true_coeffs, dtype=np.float64)
    if pred_coeffs.shape != true_coeffs.shape:
        raise ValueError("prediction and truth must share shape")
    lp = synth.decode_landmarks(pred_coeffs, subject).points
    lt = synth.decode_landmarks(true_coeffs, subject).points
    sq = (lp - lt) ** 2
    values = {name: float(sq[:, sl, :].mean()) for name, sl in synth.REGIONS.items()}
    return RegionErrorReport(all=float(sq.mean()), **values)


def detect_closures(landmarks: synth.SyntheticLandmarkSet,
                    threshold: float = CLOSURE_THRESHOLD) -> np.ndarray:
    """Per-frame closure flags: every inner lip pair within the threshold."""
    gaps = landmarks.inner_lip_gaps()
    return np.all(gaps <= threshold, axis=1)


def lip_closure_f1(pred_closed, true_closed) -> float:
    """Frame-level F1 on the closed class; 0 when precision+recall is 0."""
    pred_closed = np.asarray(pred_closed, dtype=bool)
    true_closed = np.asarray(true_closed, dtype=bool)
    if pred_closed.shape != true_closed.shape:
        raise ValueError("sequences must share length")
    tp = float(np.sum(pred_closed & true_closed))
    fp = float(np.sum(pred_closed & ~true_closed))
    fn = float(np.sum(~pred_closed & true_closed))
    if tp == 0.0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def closure_f1_from_coeffs(pred_coeffs, true_coeffs, subject: int = 1,
                           threshold: float = CLOSURE_THRESHOLD) -> float:
    pred = detect_closures(synth.decode_landmarks(pred_coeffs, subject), threshold)
    true = detect_closures(synth.decode_landmarks(true_coeffs, subject), threshold)
    return lip_closure_f1(pred, true)


def mixture_entropy(pi: np.ndarray) -> float:
    """Mean per-coordinate binary entropy (nats) of the audio weight."""
    p = np.clip(np.asarray(pi)[0], 1e-12, 1.0 - 1e-12)
    return float(np.mean(-p * np.log(p) - (1.0 - p) * np.log(1.0 - p)))


@dataclass
class HeatmapSummary:
    row_means: np.ndarray
    row_stds: np.ndarray

    def exclusive_high(self, bound: float = 0.9):
        return np.flatnonzero(self.row_means > bound)

    def exclusive_low(self, bound: float = 0.1):
        return np.flatnonzero(self.row_means < bound)

    def time_varying(self, bound: float = 0.05):
        return np.flatnonzero(self.row_stds > bound)


def export_weight_heatmap(pi: np.ndarray, modality: int, window: slice,
                          path=None) -> HeatmapSummary:
    """Write an L x T_window CSV of one modality's weights; summarize rows.

    Rows whose mean exceeds 0.9 (or falls below 0.1) mark latent
    coefficients exclusively routed to (or away from) the chosen modality.
    """
    pi = np.asarray(pi)
    T = pi.shape[1]
    start = 0 if window.start is None else window.start
    stop = T if window.stop is None else window.stop
    if not (0 <= start < stop <= T):
        raise ValueError("window out of range")
    block = pi[modality, start:stop, :].T       # (L, T_window)
    if path is not None:
        np.savetxt(path, block, delimiter=",", fmt="%.8g")
    return HeatmapSummary(row_means=block.mean(axis=1), row_stds=block.std(axis=1))


# ---------------------------------------------------------------------------
# ablation tables


@dataclass
class AblationRow:
    label: str
    report: RegionErrorReport | None
    f1: float | None
    checkpoint_sha: str | None
    missing: bool = False


@dataclass
class AblationTable:
    rows: list

    def to_tsv(self) -> str:
        header = ["label", *REPORT_COLUMNS, "lip_closure_f1", "checkpoint_sha256"]
        lines = ["\t".join(header)]
        for row in self.rows:
            if row.missing:
                lines.append("\t".join([row.label] + ["absent"] * 7))
                continue
            cells = [row.label]
            cells += [f"{getattr(row.report, c):.4f}" for c in REPORT_COLUMNS]
            cells.append(f"{row.f1:.4f}")
            cells.append(row.checkpoint_sha or "")
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        widths = 10
        head = f"{'label':16s}" + "".join(f"{c:>{widths}s}" for c in REPORT_COLUMNS)
        head += f"{'lip F1':>{widths}s}"
        lines = [head, "-" * len(head)]
        for row in self.rows:
            if row.missing:
                lines.append(f"{row.label:16s}" + "absent".rjust(widths))
                continue
            cells = "".join(f"{getattr(row.report, c):>{widths}.3f}"
                            for c in REPORT_COLUMNS)
            lines.append(f"{row.label:16s}{cells}{row.f1:>{widths}.3f}")
        return "\n".join(lines) + "\n"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_run_manifest(path):
    """Run manifest: one `label<TAB>checkpoint_path<TAB>eval_split` per line."""
    runs = []
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"manifest line needs 3 tab-separated fields: {raw!r}")
            runs.append(tuple(parts))
    return runs


def build_ablation_table(runs, evaluate_fn) -> AblationTable:
    """Assemble rows in manifest order; missing runs stay listed as absent.

    ``runs`` yields (label, checkpoint_path, split); ``evaluate_fn``
    maps (checkpoint_path, split) to (RegionErrorReport, f1).
    """
    rows = []
    for label, ckpt_path, split in runs:
        if not Path(ckpt_path).exists():
            rows.append(AblationRow(label, None, None, None, missing=True))
            continue
        report, f1 = evaluate_fn(ckpt_path, split)
        rows.append(AblationRow(label, report, f1, file_sha256(ckpt_path)))
    return AblationTable(rows=rows)

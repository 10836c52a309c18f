"""RMSE metrics, concordance reporting and checkpoint evaluation."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FrameTable, Recording
from .losses import ccc
from .model import AffectModel

PREDICTION_COLUMNS = ["recording_id", "t", "a_hat", "v_hat", "a", "v"]
REPORT_COLUMNS = ["E_a", "E_v", "E_av", "ccc_arousal", "ccc_valence", "n_frames", "fingerprint"]


def _check_series(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValueError("empty series")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _check_series(pred, truth)
    d = p - t
    return math.sqrt(math.fsum(d * d) / d.size)


def rmse_joint(a_hat, a, v_hat, v) -> float:
    """Joint RMSE: both dimensions' squared errors under a single 1/N."""
    pa, ta = _check_series(a_hat, a)
    pv, tv = _check_series(v_hat, v)
    if pa.size != pv.size:
        raise ValueError("arousal and valence series differ in length")
    da, dv = pa - ta, pv - tv
    return math.sqrt(math.fsum(np.concatenate([da * da, dv * dv])) / da.size)


@dataclass
class EvalReport:
    e_a: float
    e_v: float
    e_av: float
    ccc_a: float
    ccc_v: float
    n: int
    fingerprint: str

    def as_row(self) -> list:
        return [repr(self.e_a), repr(self.e_v), repr(self.e_av), repr(self.ccc_a), repr(self.ccc_v), self.n, self.fingerprint]

    def summary(self) -> str:
        return (
            f"frames evaluated : {self.n}\n"
            f"E_a   (arousal)  : {self.e_a:.6f}\n"
            f"E_v   (valence)  : {self.e_v:.6f}\n"
            f"E_av  (joint)    : {self.e_av:.6f}\n"
            f"CCC arousal      : {self.ccc_a:.6f}\n"
            f"CCC valence      : {self.ccc_v:.6f}\n"
            f"config           : {self.fingerprint}\n"
        )


def report_from_predictions(pred: np.ndarray, truth: np.ndarray, fingerprint: str = "") -> EvalReport:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    return EvalReport(
        e_a=rmse(pred[:, 0], truth[:, 0]),
        e_v=rmse(pred[:, 1], truth[:, 1]),
        e_av=rmse_joint(pred[:, 0], truth[:, 0], pred[:, 1], truth[:, 1]),
        ccc_a=ccc(pred[:, 0], truth[:, 0]),
        ccc_v=ccc(pred[:, 1], truth[:, 1]),
        n=len(pred),
        fingerprint=fingerprint,
    )


def fingerprint(model: AffectModel) -> str:
    blob = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def predict_table(model: AffectModel, table: FrameTable) -> np.ndarray:
    cfg = model.config
    if cfg.k + 1 != table.windows.shape[1]:
        raise ValueError(f"model window {cfg.k + 1} does not match data windows {table.windows.shape[1]}")
    dt = model.dtype
    images = table.images if cfg.use_visual else None
    audio = table.audio if cfg.use_audio else None
    if images is not None and images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.image_channels):
        raise ValueError(f"frames {images.shape[1:]} do not match the model's image geometry")
    if audio is not None and audio.shape[1] != cfg.audio_length:
        raise ValueError(f"audio frames of {audio.shape[1]} samples, model expects {cfg.audio_length}")
    chunked_images = None if images is None else _Widen(images, dt)
    chunked_audio = None if audio is None else _Widen(audio, dt)
    return model.predict_frames(chunked_images, chunked_audio, table.windows)


class _Widen:
    """Slice-on-demand view that casts float32 frames to the model dtype."""

    def __init__(self, arr: np.ndarray, dtype):
        self.arr, self.dtype = arr, dtype

    def __len__(self) -> int:
        return len(self.arr)

    def __getitem__(self, sl):
        return self.arr[sl].astype(self.dtype)


def evaluate_model(model: AffectModel, table: FrameTable) -> EvalReport:
    pred = predict_table(model, table)
    truth = table.labels[table.windows[:, -1]]
    return report_from_predictions(pred, truth, fingerprint(model))


def prediction_rows(model: AffectModel, table: FrameTable) -> list[list]:
    pred = predict_table(model, table)
    truth = table.labels[table.windows[:, -1]].astype(np.float64)
    return [
        [table.rec_ids[r], int(t), repr(float(p[0])), repr(float(p[1])), repr(float(y[0])), repr(float(y[1]))]
        for r, t, p, y in zip(table.window_rec, table.window_t, pred, truth)
    ]


def evaluate(
    checkpoint,
    recordings: Sequence[Recording],
    report_path=None,
    predictions_path=None,
) -> EvalReport:
    """Predict every valid window of every recording and write the report.

    Recordings are concatenated in the given order; the first k frames of
    each have no prediction and are not counted.
    """
    from .train import load_checkpoint

    model = checkpoint if isinstance(checkpoint, AffectModel) else load_checkpoint(checkpoint)[0]
    table = FrameTable.build(recordings, model.config.k)
    rows = prediction_rows(model, table)
    pred = np.array([[float(r[2]), float(r[3])] for r in rows])
    truth = np.array([[float(r[4]), float(r[5])] for r in rows])
    report = report_from_predictions(pred, truth, fingerprint(model))
    if predictions_path is not None:
        write_predictions(predictions_path, rows)
    if report_path is not None:
        write_report(report_path, report)
    return report


def write_predictions(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_COLUMNS)
        w.writerows(rows)


def read_predictions(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = [r["recording_id"] for r in rows]
    pred = np.array([[float(r["a_hat"]), float(r["v_hat"])] for r in rows])
    truth = np.array([[float(r["a"]), float(r["v"])] for r in rows])
    return ids, pred, truth


def write_report(path, report: EvalReport) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        w.writerow(report.as_row())
    path.with_suffix(".txt").write_text(report.summary())


def report_dict(report: EvalReport) -> dict:
    return asdict(report)

"""R-peak-aligned heartbeat segmentation and beat-set files."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .signal_io import EcgRecord, zscore

BEAT_WIDTH = 256
BEAT_FS = 500.0


@dataclass
class Heartbeat:
    samples: np.ndarray
    subject_id: str
    session_id: int
    peak_index: int
    degenerate: bool = False

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("heartbeat samples must be 1-D")


def segment(record: EcgRecord, peaks=None, w: int = BEAT_WIDTH):
    """Cut z-scored windows [p - w/4, p + 3w/4) around each peak.

    Peaks too close to either record boundary are skipped, not padded.
    Returns ``(beats, skipped)`` with len(beats) + skipped == len(peaks).
    """
    if w % 4 != 0:
        raise ValueError(f"window size must be divisible by 4, got {w}")
    if abs(record.fs - BEAT_FS) > 1e-6 * BEAT_FS:
        raise ValueError(f"segment expects a {BEAT_FS:g} Hz record "
                         f"(got {record.fs:g} Hz); resample first")
    if peaks is None:
        if record.rpeaks is None:
            raise ValueError("no peaks given and the record has no annotations")
        peaks = record.rpeaks
    peaks = np.asarray(peaks, dtype=np.int64)

    before = w // 4
    after = 3 * w // 4
    n = record.samples.size
    beats, skipped = [], 0
    for p in peaks:
        if p - before < 0 or p + after > n:
            skipped += 1
            continue
        window = record.samples[p - before:p + after]
        normalized, degenerate = zscore(window)
        beats.append(Heartbeat(normalized, record.subject_id,
                               record.session_id, int(p), degenerate))
    return beats, skipped


def segment_corpus(records, w: int = BEAT_WIDTH):
    """Segment every record; returns (beats, total skipped)."""
    all_beats, skipped = [], 0
    for rec in records:
        beats, s = segment(rec, w=w)
        all_beats.extend(beats)
        skipped += s
    return all_beats, skipped


def save_beats(beats, path, config_hash=None) -> None:
    """Rows of little-endian float32 plus a `.json` sidecar manifest."""
    if not beats:
        raise ValueError("refusing to write an empty beat set")
    w = beats[0].samples.size
    data = np.stack([b.samples for b in beats]).astype("<f4")
    if data.shape[1] != w:
        raise ValueError("beats have inconsistent widths")
    with open(path, "wb") as fh:
        fh.write(data.tobytes())
    sidecar = {
        "width": w,
        "count": len(beats),
        "rows": [{"subject_id": b.subject_id, "session_id": b.session_id,
                  "peak_index": b.peak_index, "degenerate": b.degenerate}
                 for b in beats],
    }
    if config_hash:
        sidecar["config_hash"] = config_hash
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_beats(path):
    with open(path + ".json") as fh:
        sidecar = json.load(fh)
    w, count = sidecar["width"], sidecar["count"]
    data = np.fromfile(path, dtype="<f4").reshape(count, w).astype(np.float64)
    beats = []
    for row, samples in zip(sidecar["rows"], data):
        beats.append(Heartbeat(samples, row["subject_id"], row["session_id"],
                               row["peak_index"], row["degenerate"]))
    return beats

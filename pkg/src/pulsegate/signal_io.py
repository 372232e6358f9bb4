"""ECG record ingestion, resampling, normalization, and synthetic corpora.

Records hold a single-channel signal in millivolts with an explicit sampling
rate. The synthetic generator builds per-subject waveforms as sums of
Gaussian bumps (P, Q, R, S, T) so that R-peak ground truth is exact, which
keeps detector and identification experiments self-contained.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

DEGENERATE_STD = 1e-8

WAVE_NAMES = ("P", "Q", "R", "S", "T")

# (amplitude mV, center offset ms, width ms) draw ranges per wave
_WAVE_RANGES = {
    "P": ((0.08, 0.22), (-190.0, -140.0), (18.0, 30.0)),
    "Q": ((-0.20, -0.06), (-35.0, -22.0), (6.0, 12.0)),
    "R": ((0.8, 1.6), (0.0, 0.0), (9.0, 13.0)),
    "S": ((-0.45, -0.12), (22.0, 35.0), (7.0, 13.0)),
    "T": ((0.15, 0.45), (180.0, 260.0), (40.0, 70.0)),
}
_HR_RANGE = (55.0, 90.0)
_JITTER_RANGE = (0.02, 0.06)
_NOISE_RANGE = (0.012, 0.035)

# minimum normalized L-inf separation between any two subjects' parameters
_SUBJECT_MARGIN = 0.08


@dataclass
class EcgRecord:
    samples: np.ndarray
    fs: float
    subject_id: str = ""
    session_id: int = 0
    rpeaks: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("record needs a non-empty 1-D sample array")
        if not self.fs > 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        if self.rpeaks is not None:
            ann = np.asarray(self.rpeaks, dtype=np.int64)
            if ann.size:
                if ann[0] < 0 or ann[-1] >= self.samples.size:
                    raise ValueError("R-peak annotation outside the record")
                if np.any(np.diff(ann) <= 0):
                    raise ValueError("R-peak annotations must be strictly increasing")
            self.rpeaks = ann

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.fs


@dataclass
class SynthSubjectParams:
    """Morphology of one synthetic subject.

    ``waves`` maps wave name to (amplitude mV, center offset ms relative to
    the R apex, width ms).
    """
    waves: dict = field(default_factory=dict)
    heart_rate_bpm: float = 70.0
    hr_jitter: float = 0.04
    noise_sigma: float = 0.02

    def __post_init__(self):
        for name, (amp, _, width) in self.waves.items():
            if width <= 0:
                raise ValueError(f"wave {name} width must be positive")
        r_amp = self.waves["R"][0]
        if not (r_amp > abs(self.waves["Q"][0]) and r_amp > abs(self.waves["S"][0])):
            raise ValueError("R amplitude must dominate Q and S")

    def vector(self) -> np.ndarray:
        """Parameters normalized to their draw ranges, for separation checks."""
        out = []
        for name in WAVE_NAMES:
            for value, (lo, hi) in zip(self.waves[name], _WAVE_RANGES[name]):
                span = hi - lo
                out.append(0.0 if span == 0 else (value - lo) / span)
        lo, hi = _HR_RANGE
        out.append((self.heart_rate_bpm - lo) / (hi - lo))
        return np.array(out)


def zscore(signal) -> tuple[np.ndarray, bool]:
    """Normalize to zero mean, unit population std.

    Returns ``(normalized, degenerate)``; a near-constant input (std at or
    below 1e-8) comes back as all zeros with the flag set.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot z-score an empty signal")
    std = x.std()
    if std <= DEGENERATE_STD:
        return np.zeros_like(x), True
    return (x - x.mean()) / std, False


def resample(record: EcgRecord, target_fs: float = 500.0) -> EcgRecord:
    """Cubic (Catmull-Rom) resampling to ``target_fs``, clamped ends.

    Annotations are rescaled and rounded to the nearest output sample.
    """
    if not target_fs > 0:
        raise ValueError("target sampling rate must be positive")
    if record.fs == target_fs:
        return record
    x = record.samples
    if x.size < 4:
        raise ValueError("cubic resampling needs at least 4 samples")

    ratio = target_fs / record.fs
    n_out = int(round(x.size * ratio))
    t = np.arange(n_out) / ratio
    i1 = np.minimum(t.astype(np.int64), x.size - 1)
    u = t - i1
    i0 = np.maximum(i1 - 1, 0)
    i2 = np.minimum(i1 + 1, x.size - 1)
    i3 = np.minimum(i1 + 2, x.size - 1)
    p0, p1, p2, p3 = x[i0], x[i1], x[i2], x[i3]
    y = 0.5 * (2.0 * p1
               + (p2 - p0) * u
               + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u ** 2
               + (3.0 * p1 - p0 - 3.0 * p2 + p3) * u ** 3)

    peaks = None
    if record.rpeaks is not None:
        peaks = np.rint(record.rpeaks * ratio).astype(np.int64)
        peaks = np.unique(np.clip(peaks, 0, n_out - 1))
    return EcgRecord(y, target_fs, record.subject_id, record.session_id, peaks)


def _draw_params(rng, noise_sigma=None) -> SynthSubjectParams:
    waves = {}
    for name in WAVE_NAMES:
        (alo, ahi), (clo, chi), (wlo, whi) = _WAVE_RANGES[name]
        waves[name] = (rng.uniform(alo, ahi), rng.uniform(clo, chi),
                       rng.uniform(wlo, whi))
    return SynthSubjectParams(
        waves=waves,
        heart_rate_bpm=rng.uniform(*_HR_RANGE),
        hr_jitter=rng.uniform(*_JITTER_RANGE),
        noise_sigma=rng.uniform(*_NOISE_RANGE) if noise_sigma is None
        else float(noise_sigma),
    )


def draw_subject_params(n_subjects: int, seed: int, noise_sigma=None):
    """Deterministic per-subject parameter draws with a separation guarantee.

    Any two subjects differ by at least _SUBJECT_MARGIN in some normalized
    wave/heart-rate parameter; candidates violating that are redrawn.
    """
    rng = np.random.default_rng([seed, 0xC0])
    out, vectors = [], []
    for i in range(n_subjects):
        for _ in range(500):
            cand = _draw_params(rng, noise_sigma)
            vec = cand.vector()
            if all(np.max(np.abs(vec - v)) >= _SUBJECT_MARGIN for v in vectors):
                out.append(cand)
                vectors.append(vec)
                break
        else:
            raise RuntimeError(f"could not separate subject {i} after 500 draws")
    return out


def _render_record(params: SynthSubjectParams, n_beats, fs, rng,
                   amp_scale=1.0):
    lead_in = 0.35
    rr = 60.0 / params.heart_rate_bpm
    gaps = rr * (1.0 + params.hr_jitter *
                 np.clip(rng.standard_normal(n_beats - 1), -2.5, 2.5))
    gaps = np.maximum(gaps, 0.3)
    r_times = lead_in + np.concatenate([[0.0], np.cumsum(gaps)])
    # snap apexes to the sample grid so the annotation is the exact argmax
    r_idx = np.rint(r_times * fs).astype(np.int64)
    r_times = r_idx / fs

    n = int(np.ceil((r_times[-1] + 0.45) * fs))
    t = np.arange(n) / fs
    clean = np.zeros(n)
    for tr in r_times:
        for name in WAVE_NAMES:
            amp, center_ms, width_ms = params.waves[name]
            c = tr + center_ms / 1000.0
            w = width_ms / 1000.0
            lo = max(int((c - 5 * w) * fs), 0)
            hi = min(int((c + 5 * w) * fs) + 1, n)
            if lo < hi:
                clean[lo:hi] += amp_scale * amp * np.exp(
                    -0.5 * ((t[lo:hi] - c) / w) ** 2)
    noisy = clean + rng.normal(0.0, params.noise_sigma, n)
    return noisy, clean, r_idx


def synth_corpus(n_subjects, beats_per_subject, fs=500.0, seed=0, *,
                 sessions=1, noise_sigma=None, amplitude_drift=0.05,
                 subject_prefix="s"):
    """Generate a labeled multi-subject corpus with exact R annotations.

    One record per (subject, session); sessions after the first scale all
    wave amplitudes by (1 + amplitude_drift) per step to mimic electrode or
    gain changes between acquisitions. ``subject_prefix`` names subjects
    (use a distinct prefix and seed for a disjoint population).
    """
    if n_subjects < 2:
        raise ValueError("need at least 2 subjects")
    if beats_per_subject < 1:
        raise ValueError("need at least 1 beat per subject")
    all_params = draw_subject_params(n_subjects, seed, noise_sigma)
    records = []
    for i, params in enumerate(all_params):
        for sess in range(sessions):
            rng = np.random.default_rng([seed, i, sess])
            noisy, _, r_idx = _render_record(
                params, beats_per_subject, fs, rng,
                amp_scale=(1.0 + amplitude_drift) ** sess)
            records.append(EcgRecord(noisy, fs,
                                     subject_id=f"{subject_prefix}{i:02d}",
                                     session_id=sess, rpeaks=r_idx))
    return records


# -- file formats ----------------------------------------------------------

def save_csv(record: EcgRecord, path, config_hash=None) -> None:
    """Write `time_s,ecg_mv[,rpeak]` rows; floats use round-trip repr."""
    peaks = set() if record.rpeaks is None else set(int(p) for p in record.rpeaks)
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        has_ann = record.rpeaks is not None
        fh.write("time_s,ecg_mv,rpeak\n" if has_ann else "time_s,ecg_mv\n")
        for i, v in enumerate(record.samples):
            row = f"{repr(i / record.fs)},{repr(float(v))}"
            if has_ann:
                row += f",{1 if i in peaks else 0}"
            fh.write(row + "\n")


def load_csv(path, subject_id=None, session_id=0) -> EcgRecord:
    times, values, peaks = [], [], []
    has_ann = False
    with open(path, newline="") as fh:
        lineno = 0
        header = None
        for raw in fh:
            lineno += 1
            if raw.startswith("#"):
                continue
            header = [c.strip() for c in raw.strip().split(",")]
            break
        if header not in (["time_s", "ecg_mv"], ["time_s", "ecg_mv", "rpeak"]):
            raise ValueError(f"{path}: line {lineno}: expected header "
                             f"'time_s,ecg_mv[,rpeak]', got {header}")
        has_ann = len(header) == 3
        for row in csv.reader(fh):
            lineno += 1
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno}: expected "
                                 f"{len(header)} columns, got {len(row)}")
            try:
                t = float(row[0])
                v = float(row[1])
                flag = int(float(row[2])) if has_ann else 0
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: malformed row {row}") \
                    from None
            if times and t <= times[-1]:
                raise ValueError(f"{path}: line {lineno}: time column is not "
                                 "strictly increasing")
            if has_ann and flag not in (0, 1):
                raise ValueError(f"{path}: line {lineno}: rpeak flag must be 0 or 1")
            times.append(t)
            values.append(v)
            if flag:
                peaks.append(len(values) - 1)
    if len(values) < 2:
        raise ValueError(f"{path}: need at least 2 rows to infer sampling rate")
    # the full span averages away per-row rounding in the time column
    fs = (len(times) - 1) / (times[-1] - times[0])
    if abs(fs - round(fs)) < 1e-6 * fs:
        fs = float(round(fs))
    if subject_id is None:
        subject_id = os.path.splitext(os.path.basename(path))[0]
    ann = np.array(peaks, dtype=np.int64) if has_ann else None
    return EcgRecord(np.array(values), fs, subject_id, session_id, ann)


def load_raw(path, fs, sample_format, gain=None, subject_id=None) -> EcgRecord:
    """Read a headerless little-endian sample dump.

    ``int16`` requires a positive gain (mV = raw / gain); ``float32`` is
    taken as millivolts directly.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if sample_format == "int16":
        if gain is None or gain <= 0:
            raise ValueError("int16 format requires a positive --gain")
        samples = np.frombuffer(blob, dtype="<i2").astype(np.float64) / gain
    elif sample_format == "float32":
        samples = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    else:
        raise ValueError(f"unknown sample format {sample_format!r}")
    if subject_id is None:
        subject_id = os.path.splitext(os.path.basename(path))[0]
    return EcgRecord(samples, fs, subject_id)


def save_corpus(records, out_dir, config_hash=None, extra=None) -> str:
    """Write one CSV per record plus a manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for rec in records:
        name = f"rec_{rec.subject_id}_{rec.session_id}.csv"
        save_csv(rec, os.path.join(out_dir, name), config_hash=config_hash)
        entries.append({
            "path": name,
            "subject_id": rec.subject_id,
            "session_id": rec.session_id,
            "fs": rec.fs,
            "n_samples": int(rec.samples.size),
            "n_rpeaks": 0 if rec.rpeaks is None else int(rec.rpeaks.size),
        })
    manifest = {"records": entries}
    if config_hash:
        manifest["config_hash"] = config_hash
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_corpus(corpus_dir):
    with open(os.path.join(corpus_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    records = []
    for entry in manifest["records"]:
        rec = load_csv(os.path.join(corpus_dir, entry["path"]),
                       subject_id=entry["subject_id"],
                       session_id=entry["session_id"])
        records.append(replace(rec, fs=entry["fs"]))
    return records

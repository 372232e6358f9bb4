"""Learned R-peak detection.

A 3-level 1-D encoder-decoder predicts a per-sample peak probability from
1024-sample windows. Each level is a multiresolution block (serial convs
whose outputs are concatenated plus a projected residual). The decoder
carries sigmoid heads at every resolution so training can supervise coarse
outputs against subsampled pulse trains.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import AdamState, LayerSpec, ModelGraph, adam_step, backward, \
    forward, loss_and_grad
from .signal_io import EcgRecord, zscore

WINDOW = 1024
STEP = 256
DEFAULT_AUX_WEIGHTS = {"half": 0.5, "quarter": 0.25}


@dataclass
class DetectorWindow:
    signal: np.ndarray
    target: np.ndarray
    aux_targets: tuple
    """aux_targets[i] has length len(target) >> (i + 1); a coarse bin is 1
    when any sample inside it is 1."""


@dataclass
class PeakProbabilityMap:
    probabilities: np.ndarray
    threshold: float


@dataclass
class PeakMatchReport:
    detected: int
    false_positives: int
    false_negatives: int
    temporal_errors: np.ndarray
    tolerance: int

    @property
    def true_positives(self) -> int:
        return self.detected - self.false_positives

    @property
    def sensitivity(self) -> float:
        truth = self.true_positives + self.false_negatives
        return self.true_positives / truth if truth else 0.0

    @property
    def temporal_mean(self) -> float:
        return float(self.temporal_errors.mean()) if self.temporal_errors.size else 0.0

    @property
    def temporal_std(self) -> float:
        return float(self.temporal_errors.std()) if self.temporal_errors.size else 0.0


def _subsample_pulse(target: np.ndarray, factor: int) -> np.ndarray:
    return target.reshape(-1, factor).max(axis=1)


def make_windows(record: EcgRecord, window: int = WINDOW, step: int = STEP,
                 depths: int = 2):
    """Slice overlapping training windows with per-depth subsampled targets."""
    if record.rpeaks is None:
        raise ValueError("record has no R-peak annotations")
    n = record.samples.size
    if n < window:
        raise ValueError(f"record of {n} samples is shorter than one "
                         f"{window}-sample window")
    pulse = np.zeros(n)
    pulse[record.rpeaks] = 1.0
    out = []
    for start in range(0, n - window + 1, step):
        sig, _ = zscore(record.samples[start:start + window])
        target = pulse[start:start + window]
        aux = tuple(_subsample_pulse(target, 2 ** (d + 1))
                    for d in range(depths))
        out.append(DetectorWindow(sig, target, aux))
    return out


def _multires_block(nodes, prefix, src, filters, kernel):
    widths = (filters // 4, filters // 4, filters // 2)
    taps = []
    prev = src
    for i, f in enumerate(widths):
        nodes.append(LayerSpec("conv1d", f"{prefix}_c{i}", (prev,),
                               {"filters": f, "kernel": kernel}))
        nodes.append(LayerSpec("batchnorm", f"{prefix}_cb{i}", (f"{prefix}_c{i}",), {}))
        nodes.append(LayerSpec("relu", f"{prefix}_cr{i}", (f"{prefix}_cb{i}",), {}))
        prev = f"{prefix}_cr{i}"
        taps.append(prev)
    nodes.append(LayerSpec("concat", f"{prefix}_cat", tuple(taps), {}))
    nodes.append(LayerSpec("conv1d", f"{prefix}_res", (src,),
                           {"filters": filters, "kernel": 1}))
    nodes.append(LayerSpec("add", f"{prefix}_add",
                           (f"{prefix}_cat", f"{prefix}_res"), {}))
    nodes.append(LayerSpec("batchnorm", f"{prefix}_bn", (f"{prefix}_add",), {}))
    nodes.append(LayerSpec("relu", f"{prefix}_out", (f"{prefix}_bn",), {}))
    return f"{prefix}_out"


def _head(nodes, prefix, src):
    nodes.append(LayerSpec("conv1d", f"{prefix}_conv", (src,),
                           {"filters": 1, "kernel": 1}))
    nodes.append(LayerSpec("sigmoid", prefix, (f"{prefix}_conv",), {}))
    return prefix


def build_detector(seed: int = 0, window: int = WINDOW, base_filters: int = 16,
                   kernel: int = 9) -> ModelGraph:
    """Encoder-decoder with skip connections and three sigmoid heads.

    Outputs: "main" at full resolution, "half" and "quarter" at the two
    coarser decoder depths.
    """
    nodes = []
    e1 = _multires_block(nodes, "e1", "signal", base_filters, kernel)
    nodes.append(LayerSpec("maxpool1d", "p1", (e1,), {"pool": 2}))
    e2 = _multires_block(nodes, "e2", "p1", base_filters * 2, kernel)
    nodes.append(LayerSpec("maxpool1d", "p2", (e2,), {"pool": 2}))
    bottom = _multires_block(nodes, "bottom", "p2", base_filters * 4, kernel)
    _head(nodes, "quarter", bottom)

    nodes.append(LayerSpec("upsample1d", "u2", (bottom,), {"factor": 2}))
    nodes.append(LayerSpec("concat", "skip2", ("u2", e2), {}))
    d2 = _multires_block(nodes, "d2", "skip2", base_filters * 2, kernel)
    _head(nodes, "half", d2)

    nodes.append(LayerSpec("upsample1d", "u1", (d2,), {"factor": 2}))
    nodes.append(LayerSpec("concat", "skip1", ("u1", e1), {}))
    d1 = _multires_block(nodes, "d1", "skip1", base_filters, kernel)
    _head(nodes, "main", d1)

    return ModelGraph(nodes, input_shapes={"signal": (1, window)},
                      output_names=("main", "half", "quarter"), seed=seed)


def _window_batches(windows, order, batch_size):
    for i in range(0, len(order), batch_size):
        yield [windows[j] for j in order[i:i + batch_size]]


def _detector_losses(graph, batch, mode, aux_weights):
    x = np.stack([w.signal for w in batch])[:, None, :]
    outs = forward(graph, {"signal": x}, mode=mode)
    if isinstance(outs, np.ndarray):
        outs = {"main": outs}
    total = 0.0
    grads = {}
    names = {"half": 0, "quarter": 1}
    main_bce, g = loss_and_grad("binary_crossentropy", outs["main"],
                                np.stack([w.target for w in batch])[:, None, :])
    total += main_bce
    grads["main"] = g
    for name, weight in aux_weights.items():
        t = np.stack([w.aux_targets[names[name]] for w in batch])[:, None, :]
        loss, g = loss_and_grad("binary_crossentropy", outs[name], t)
        total += weight * loss
        grads[name] = weight * g
    return total, grads, main_bce


def train_detector(windows, epochs: int = 100, seed: int = 0,
                   aux_weights=None, batch_size: int = 8, lr: float = 1e-3,
                   val_fraction: float = 0.2, graph: ModelGraph | None = None):
    """Train on an 80/20 shuffle split; returns (graph, per-epoch history).

    ``aux_weights`` maps coarse output names to loss weights; pass an empty
    dict to train on the full-resolution output alone.
    """
    if len(windows) < 2:
        raise ValueError("need at least 2 training windows")
    if aux_weights is None:
        aux_weights = dict(DEFAULT_AUX_WEIGHTS)
    if graph is None:
        graph = build_detector(seed=seed, window=windows[0].signal.size)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(windows))
    n_val = int(round(val_fraction * len(windows)))
    val_idx, train_idx = order[:n_val], order[n_val:]

    state = AdamState(lr=lr)
    history = []
    for epoch in range(epochs):
        perm = train_idx[rng.permutation(train_idx.size)]
        losses = []
        for batch in _window_batches(windows, perm, batch_size):
            total, grads, _ = _detector_losses(graph, batch, "train", aux_weights)
            if not np.isfinite(total):
                raise RuntimeError(f"training diverged at epoch {epoch}")
            backward(graph, grads)
            adam_step(state, graph.params, graph.grads)
            losses.append(total)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_idx.size:
            val_losses, val_main = [], []
            for batch in _window_batches(windows, val_idx, batch_size):
                total, _, main_bce = _detector_losses(graph, batch, "infer",
                                                      aux_weights)
                val_losses.append(total)
                val_main.append(main_bce)
            entry["val_loss"] = float(np.mean(val_losses))
            entry["val_main_bce"] = float(np.mean(val_main))
        history.append(entry)
    return graph, history


def compute_probability_map(graph: ModelGraph, samples, window: int = WINDOW,
                            step: int = STEP, batch_size: int = 32) -> np.ndarray:
    """Average per-sample peak probabilities over overlapping windows."""
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.size
    padded = samples if n >= window else np.pad(samples, (0, window - n))
    last = padded.size - window
    starts = list(range(0, last + 1, step))
    if starts[-1] != last:
        starts.append(last)

    sums = np.zeros(padded.size)
    counts = np.zeros(padded.size)
    for i in range(0, len(starts), batch_size):
        chunk = starts[i:i + batch_size]
        x = np.stack([zscore(padded[s:s + window])[0] for s in chunk])[:, None, :]
        probs = forward(graph, {"signal": x}, mode="infer")["main"][:, 0, :]
        for s, p in zip(chunk, probs):
            sums[s:s + window] += p
            counts[s:s + window] += 1.0
    return (sums / counts)[:n]


def detect_rpeaks(graph: ModelGraph, record: EcgRecord, threshold: float = 0.5,
                  min_distance: int = 100) -> np.ndarray:
    """Threshold the probability map and collapse clusters to their median.

    Above-threshold samples closer than ``min_distance`` belong to one
    cluster, so returned indices are pairwise at least ``min_distance``
    apart.
    """
    if abs(record.fs - 500.0) > 1e-6 * 500.0:
        raise ValueError(f"detector runs at 500 Hz (got {record.fs:g} Hz); "
                         "resample first")
    pmap = compute_probability_map(graph, record.samples)
    above = np.flatnonzero(pmap >= threshold)
    if above.size == 0:
        return np.array([], dtype=np.int64)
    cuts = np.flatnonzero(np.diff(above) >= min_distance) + 1
    clusters = np.split(above, cuts)
    return np.array([int(np.floor(np.median(c))) for c in clusters],
                    dtype=np.int64)


def evaluate_peaks(predicted, truth, tolerance: int = 37) -> PeakMatchReport:
    """Greedy nearest matching within tolerance; each truth used once."""
    predicted = np.asarray(predicted, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    for name, arr in (("predicted", predicted), ("truth", truth)):
        if arr.size > 1 and np.any(np.diff(arr) <= 0):
            raise ValueError(f"{name} peak indices must be strictly increasing")

    candidates = []
    for ti, t in enumerate(truth):
        lo = np.searchsorted(predicted, t - tolerance, side="left")
        hi = np.searchsorted(predicted, t + tolerance, side="right")
        for pi in range(lo, hi):
            candidates.append((abs(int(predicted[pi]) - int(t)), ti, pi))
    candidates.sort()

    used_t, used_p = set(), set()
    errors = []
    for err, ti, pi in candidates:
        if ti in used_t or pi in used_p:
            continue
        used_t.add(ti)
        used_p.add(pi)
        errors.append(err)
    matched = len(errors)
    return PeakMatchReport(
        detected=int(predicted.size),
        false_positives=int(predicted.size) - matched,
        false_negatives=int(truth.size) - matched,
        temporal_errors=np.array(errors, dtype=np.float64),
        tolerance=tolerance,
    )


def save_peaks(peaks, path, config_hash=None) -> None:
    """One peak index per line; optional leading config-hash comment."""
    with open(path, "w") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        for p in peaks:
            fh.write(f"{int(p)}\n")


def load_peaks(path) -> np.ndarray:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                out.append(int(line))
    return np.array(out, dtype=np.int64)

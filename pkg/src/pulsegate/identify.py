"""Closed-environment identification over segmented heartbeats.

One multiresolution conv block feeds pyramid pooling and a compact dense
classifier. The 128-unit dense layer doubles as the embedding tap for
verification: its pre-activation is read out through a sigmoid instead of
the classifier's ReLU.
"""
from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .engine import AdamState, LayerSpec, ModelGraph, adam_step, backward, \
    forward, load_model, loss_and_grad, save_model
from .engine.layers import sigmoid

EMBED_DIM = 128
SPLIT_SCHEMES = ("stratified-10-fold", "60-20-20", "cross-session")


@dataclass
class IdentifyModel:
    graph: ModelGraph
    classes: tuple = ()

    @property
    def n_persons(self) -> int:
        return self.graph.shapes["probs"][0]

    def class_index(self, subject_id) -> int:
        try:
            return self.classes.index(subject_id)
        except ValueError:
            raise ValueError(f"subject {subject_id!r} is not among the model "
                             "classes") from None


@dataclass
class ConfusionMatrix:
    classes: tuple
    counts: np.ndarray
    """counts[i, j] = beats of true class i predicted as class j."""

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class(self):
        """Per-class (tp, tn, fp, fn) arrays in class order."""
        tp = np.diag(self.counts).astype(np.int64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        tn = self.total - tp - fp - fn
        return tp, tn, fp, fn


@dataclass
class SaliencyMap:
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if np.any(self.scores < 0):
            raise ValueError("saliency scores must be non-negative")


@dataclass
class SplitPlan:
    scheme: str
    assignment: np.ndarray
    """Fold id per beat (stratified-10-fold) or partition id per beat
    (0=train, 1=val, 2=test for 60-20-20; 0/1 = session for cross-session)."""
    fold_count: int = 0

    def partitions(self, eval_fold=None):
        """Index arrays (train, val, test) for the given scheme."""
        a = self.assignment
        if self.scheme == "stratified-10-fold":
            if eval_fold is None:
                raise ValueError("stratified folds need an eval_fold")
            test = np.flatnonzero(a == eval_fold)
            train = np.flatnonzero(a != eval_fold)
            return train, np.array([], dtype=np.int64), test
        if self.scheme == "60-20-20":
            return (np.flatnonzero(a == 0), np.flatnonzero(a == 1),
                    np.flatnonzero(a == 2))
        if self.scheme == "cross-session":
            return (np.flatnonzero(a == 0), np.array([], dtype=np.int64),
                    np.flatnonzero(a == 1))
        raise ValueError(f"unknown scheme {self.scheme!r}")


def make_split(beats, scheme, seed: int = 0, fold_count: int = 10,
               train_session=None) -> SplitPlan:
    """Assign each beat to a fold or partition, stratified by subject."""
    if scheme not in SPLIT_SCHEMES:
        raise ValueError(f"scheme must be one of {SPLIT_SCHEMES}, got {scheme!r}")
    labels = [b.subject_id for b in beats]
    assignment = np.full(len(beats), -1, dtype=np.int64)
    rng = np.random.default_rng(seed)

    if scheme == "cross-session":
        sessions = sorted({b.session_id for b in beats})
        if len(sessions) != 2:
            raise ValueError(f"cross-session needs exactly 2 sessions, "
                             f"got {sessions}")
        if train_session is None:
            train_session = sessions[0]
        for i, b in enumerate(beats):
            assignment[i] = 0 if b.session_id == train_session else 1
        return SplitPlan(scheme, assignment)

    for subject in sorted(set(labels)):
        idx = np.array([i for i, s in enumerate(labels) if s == subject])
        idx = idx[rng.permutation(idx.size)]
        if scheme == "stratified-10-fold":
            assignment[idx] = np.arange(idx.size) % fold_count
        else:
            n_train = int(round(0.6 * idx.size))
            n_val = int(round(0.2 * idx.size))
            assignment[idx[:n_train]] = 0
            assignment[idx[n_train:n_train + n_val]] = 1
            assignment[idx[n_train + n_val:]] = 2
    return SplitPlan(scheme, assignment,
                     fold_count if scheme == "stratified-10-fold" else 0)


def build_identify_model(n_persons: int, seed: int = 0, beat_width: int = 256,
                         dtype=np.float32) -> IdentifyModel:
    """Multiresolution block, pyramid pooling, dense-128 head, softmax."""
    if n_persons < 2:
        raise ValueError("need at least 2 classes")
    nodes = []
    taps = []
    prev = "beat"
    for i, f in enumerate((32, 64, 128)):
        nodes.append(LayerSpec("conv1d", f"c{i}", (prev,),
                               {"filters": f, "kernel": 15}))
        nodes.append(LayerSpec("batchnorm", f"cb{i}", (f"c{i}",), {}))
        nodes.append(LayerSpec("relu", f"cr{i}", (f"cb{i}",), {}))
        prev = f"cr{i}"
        taps.append(prev)
    nodes.append(LayerSpec("concat", "cat", tuple(taps), {}))
    nodes.append(LayerSpec("conv1d", "res", ("beat",),
                           {"filters": 32 + 64 + 128, "kernel": 1}))
    nodes.append(LayerSpec("add", "block", ("cat", "res"), {}))
    nodes.append(LayerSpec("batchnorm", "bn", ("block",), {}))
    nodes.append(LayerSpec("relu", "act", ("bn",), {}))
    nodes.append(LayerSpec("spp", "pyramid", ("act",), {"windows": [8, 16, 32]}))
    nodes.append(LayerSpec("dense", "feat", ("pyramid",), {"units": EMBED_DIM}))
    nodes.append(LayerSpec("relu", "feat_act", ("feat",), {}))
    nodes.append(LayerSpec("dropout", "drop", ("feat_act",), {"rate": 0.25}))
    nodes.append(LayerSpec("dense", "logits", ("drop",), {"units": n_persons}))
    nodes.append(LayerSpec("softmax", "probs", ("logits",), {}))
    graph = ModelGraph(nodes, input_shapes={"beat": (1, beat_width)},
                       output_names=("probs",), dtype=dtype, seed=seed)
    return IdentifyModel(graph)


def _beat_matrix(beats) -> np.ndarray:
    return np.stack([b.samples for b in beats])[:, None, :]


def _one_hot(indices, n_classes) -> np.ndarray:
    out = np.zeros((len(indices), n_classes))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def predict_proba(model: IdentifyModel, beats, batch_size: int = 256) -> np.ndarray:
    chunks = []
    for i in range(0, len(beats), batch_size):
        x = _beat_matrix(beats[i:i + batch_size])
        chunks.append(forward(model.graph, {"beat": x}, mode="infer"))
    return np.concatenate(chunks, axis=0)


def train_identify(model: IdentifyModel, beats, plan: SplitPlan,
                   epochs: int = 500, batch_size: int = 32, lr: float = 3e-4,
                   seed: int = 0, eval_fold=None, patience=None):
    """Train on the plan's training partition; returns (model, history).

    ``patience`` (epochs without validation-loss improvement) enables early
    stopping; it is off by default.
    """
    train_idx, val_idx, _ = plan.partitions(eval_fold)
    if train_idx.size == 0:
        raise ValueError("training partition is empty")
    if not model.classes:
        model.classes = tuple(sorted({b.subject_id for b in beats}))
    if len(model.classes) != model.n_persons:
        raise ValueError(f"model has {model.n_persons} outputs but "
                         f"{len(model.classes)} subject classes")
    train_subjects = {beats[i].subject_id for i in train_idx}
    for cls in model.classes:
        if cls not in train_subjects:
            raise ValueError(f"class {cls!r} is absent from the training "
                             "partition")

    labels = np.array([model.class_index(b.subject_id) for b in beats])
    graph = model.graph
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    history = []
    best_val, since_best = np.inf, 0
    for epoch in range(epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        losses, correct = [], 0
        for i in range(0, order.size, batch_size):
            idx = order[i:i + batch_size]
            x = _beat_matrix([beats[j] for j in idx])
            t = _one_hot(labels[idx], model.n_persons)
            probs = forward(graph, {"beat": x}, mode="train")
            loss, g = loss_and_grad("categorical_crossentropy", probs, t)
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged at epoch {epoch}")
            backward(graph, g)
            adam_step(state, graph.params, graph.grads)
            losses.append(loss)
            correct += int((probs.argmax(axis=1) == labels[idx]).sum())
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                 "train_accuracy": correct / order.size}
        if val_idx.size:
            probs = predict_proba(model, [beats[j] for j in val_idx])
            val_loss, _ = loss_and_grad(
                "categorical_crossentropy", probs,
                _one_hot(labels[val_idx], model.n_persons))
            entry["val_loss"] = float(val_loss)
            entry["val_accuracy"] = float(
                (probs.argmax(axis=1) == labels[val_idx]).mean())
        history.append(entry)
        if patience is not None and val_idx.size:
            if entry["val_loss"] < best_val - 1e-9:
                best_val, since_best = entry["val_loss"], 0
            else:
                since_best += 1
                if since_best >= patience:
                    break
    return model, history


def accuracy_from_counts(tp, tn, fp, fn) -> float:
    """Share of correct decisions among the four outcome counts."""
    total = tp + tn + fp + fn
    if total == 0:
        raise ValueError("no counts")
    return (tp + tn) / total


def evaluate_identify(model: IdentifyModel, beats):
    """Confusion matrix plus micro accuracy and macro precision/recall/F1."""
    if not beats:
        raise ValueError("evaluation set is empty")
    labels = np.array([model.class_index(b.subject_id) for b in beats])
    probs = predict_proba(model, beats)
    preds = probs.argmax(axis=1)

    n = model.n_persons
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    cm = ConfusionMatrix(model.classes, counts)

    tp, _, fp, fn = cm.per_class()
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    metrics = {
        "accuracy": float((preds == labels).mean()),
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "f1": float(f1.mean()),
    }
    return cm, metrics


def fuse_majority(model: IdentifyModel, consecutive_beats, k: int):
    """Majority vote over the first k beats.

    Vote ties fall back to the highest probability summed across the k
    beats, then to the lowest class index.
    """
    if not 1 <= k <= len(consecutive_beats):
        raise ValueError(f"k must be in [1, {len(consecutive_beats)}], got {k}")
    probs = predict_proba(model, consecutive_beats[:k])
    votes = Counter(int(i) for i in probs.argmax(axis=1))
    top = max(votes.values())
    tied = [c for c, v in votes.items() if v == top]
    if len(tied) > 1:
        sums = probs.sum(axis=0)
        best = max(sums[c] for c in tied)
        tied = [c for c in tied if sums[c] == best]
    winner = min(tied)
    return model.classes[winner] if model.classes else winner


def fused_accuracy(model: IdentifyModel, beats, k: int) -> float:
    """Majority-vote accuracy over groups of k consecutive beats.

    Beats are grouped per (subject, session) in the given order; each full
    group of k yields one decision, leftovers are dropped.
    """
    groups = {}
    for b in beats:
        groups.setdefault((b.subject_id, b.session_id), []).append(b)
    correct = total = 0
    for (subject, _), items in sorted(groups.items()):
        for i in range(0, len(items) - k + 1, k):
            total += 1
            if fuse_majority(model, items[i:i + k], k) == subject:
                correct += 1
    if total == 0:
        raise ValueError(f"no subject has {k} consecutive beats")
    return correct / total


def cross_session_evaluate(beats, epochs: int = 50, seed: int = 0,
                           batch_size: int = 32, lr: float = 3e-4):
    """Train on one session, test on the other, both directions.

    Returns {"train0_test1": acc, "train1_test0": acc} keyed by the sorted
    session ids.
    """
    sessions = sorted({b.session_id for b in beats})
    if len(sessions) != 2:
        raise ValueError(f"cross-session evaluation needs exactly 2 sessions, "
                         f"got {sessions}")
    subjects = sorted({b.subject_id for b in beats})
    for subject in subjects:
        have = {b.session_id for b in beats if b.subject_id == subject}
        if have != set(sessions):
            raise ValueError(f"subject {subject!r} is missing a session")

    out = {}
    for train_session, test_session in (sessions, sessions[::-1]):
        plan = make_split(beats, "cross-session", train_session=train_session)
        model = build_identify_model(len(subjects), seed=seed,
                                     beat_width=beats[0].samples.size)
        model.classes = tuple(subjects)
        train_identify(model, beats, plan, epochs=epochs,
                       batch_size=batch_size, lr=lr, seed=seed)
        _, _, test_idx = plan.partitions()
        _, metrics = evaluate_identify(model, [beats[i] for i in test_idx])
        out[f"train{train_session}_test{test_session}"] = metrics["accuracy"]
    return out


def saliency(model: IdentifyModel, beat, label) -> SaliencyMap:
    """Absolute input gradient of the classification loss at ``label``."""
    idx = label if isinstance(label, (int, np.integer)) else model.class_index(label)
    x = np.asarray(beat.samples if hasattr(beat, "samples") else beat,
                   dtype=np.float64)[None, None, :]
    probs = forward(model.graph, {"beat": x}, mode="infer")
    _, g = loss_and_grad("categorical_crossentropy", probs,
                         _one_hot([idx], model.n_persons))
    store = backward(model.graph, g)
    return SaliencyMap(np.abs(store["beat"][0, 0, :]))


def embed(model: IdentifyModel, beat) -> np.ndarray:
    """128-dim embedding: sigmoid of the dense layer's pre-activation."""
    return embed_many(model, [beat])[0]


def embed_many(model: IdentifyModel, beats, batch_size: int = 256) -> np.ndarray:
    chunks = []
    for i in range(0, len(beats), batch_size):
        x = _beat_matrix(beats[i:i + batch_size])
        forward(model.graph, {"beat": x}, mode="infer")
        pre = model.graph.activation("feat").astype(np.float64)
        # float64 sigmoid plus a clip keeps saturated units inside (0, 1)
        chunks.append(np.clip(sigmoid(pre), 1e-12, 1.0 - 1e-12))
    return np.concatenate(chunks, axis=0)


def save_identify(model: IdentifyModel, path) -> None:
    save_model(model.graph, path)
    with open(path + ".json", "w") as fh:
        json.dump({"classes": list(model.classes)}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_identify(path) -> IdentifyModel:
    graph = load_model(path)
    classes = ()
    if os.path.exists(path + ".json"):
        with open(path + ".json") as fh:
            classes = tuple(json.load(fh)["classes"])
    return IdentifyModel(graph, classes)

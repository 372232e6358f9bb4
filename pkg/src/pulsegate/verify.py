"""Identity verification over frozen identification embeddings.

A small Siamese head scores pairs of 128-dim embeddings. Its three inputs
are symmetric functions of the pair (squared difference, element product,
and their concatenation), so the score is bit-exactly invariant to swapping
the operands. Cosine and Euclidean similarity backends share the same
threshold sweep for FAR/FRR/EER comparison.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .engine import AdamState, LayerSpec, ModelGraph, adam_step, backward, \
    forward, load_model, loss_and_grad, save_model
from .identify import IdentifyModel, embed_many

EMBED_DIM = 128
BACKENDS = ("siamese", "cosine", "euclidean")


def _pairwise(u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"embedding shapes differ: {u.shape} vs {v.shape}")
    return u, v


def squared_difference(u, v) -> np.ndarray:
    u, v = _pairwise(u, v)
    return (v - u) ** 2


def product_proximity(u, v) -> np.ndarray:
    u, v = _pairwise(u, v)
    return v * u


def combined_metric(u, v) -> np.ndarray:
    """Squared difference followed by product proximity, concatenated."""
    return np.concatenate([squared_difference(u, v), product_proximity(u, v)],
                          axis=-1)


@dataclass
class SiameseHead:
    graph: ModelGraph

    def scores(self, u, v) -> np.ndarray:
        """Batched head output for embedding arrays of shape (n, d)."""
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        feats = {
            "sqdiff": squared_difference(u, v),
            "prodprox": product_proximity(u, v),
            "combined": combined_metric(u, v),
        }
        return forward(self.graph, feats, mode="infer")[:, 0]


@dataclass
class Template:
    subject_id: str
    centroid: np.ndarray
    count: int

    def __post_init__(self):
        self.centroid = np.asarray(self.centroid, dtype=np.float64)
        if self.count < 1:
            raise ValueError("a template needs at least one enrolled embedding")


@dataclass
class PairSet:
    """Embedding pairs with {0,1} labels; matched pairs keep their subject."""
    u: np.ndarray
    v: np.ndarray
    label: np.ndarray
    subject: np.ndarray

    def __len__(self):
        return self.label.size

    @staticmethod
    def concatenate(parts):
        return PairSet(np.concatenate([p.u for p in parts]),
                       np.concatenate([p.v for p in parts]),
                       np.concatenate([p.label for p in parts]),
                       np.concatenate([p.subject for p in parts]))


@dataclass
class EerCurve:
    thresholds: np.ndarray
    far: np.ndarray
    frr: np.ndarray
    eer: float
    eer_threshold: float
    auc: float
    n_genuine: int
    n_imposter: int


def build_siamese_head(seed: int = 0, dim: int = EMBED_DIM,
                       dtype=np.float32) -> SiameseHead:
    """Three dense-32 branches over the pair features, merged to one score."""
    nodes = []
    for name in ("sqdiff", "prodprox", "combined"):
        nodes.append(LayerSpec("dense", f"{name}_fc", (name,), {"units": 32}))
        nodes.append(LayerSpec("relu", f"{name}_act", (f"{name}_fc",), {}))
    nodes.append(LayerSpec("concat", "merge",
                           ("sqdiff_act", "prodprox_act", "combined_act"), {}))
    nodes.append(LayerSpec("dense", "score_fc", ("merge",), {"units": 1}))
    nodes.append(LayerSpec("sigmoid", "score", ("score_fc",), {}))
    graph = ModelGraph(nodes,
                       input_shapes={"sqdiff": (dim,), "prodprox": (dim,),
                                     "combined": (2 * dim,)},
                       output_names=("score",), dtype=dtype, seed=seed)
    return SiameseHead(graph)


def make_training_pairs(embedder: IdentifyModel, beats, seed: int = 0,
                        matched_per_subject: int = 40,
                        mismatch_multiple: float = 1.0):
    """Build matched and mismatched embedding pairs from labeled beats.

    Returns (matched PairSet, mismatched PairSet). Matched pairs sample two
    distinct beats of one subject; mismatched pairs sample beats of two
    distinct subjects, ``mismatch_multiple`` times the matched count.
    """
    subjects = sorted({b.subject_id for b in beats})
    if len(subjects) < 2:
        raise ValueError("pair building needs at least 2 subjects")
    rng = np.random.default_rng(seed)
    emb = embed_many(embedder, beats)
    by_subject = {s: np.flatnonzero([b.subject_id == s for b in beats])
                  for s in subjects}

    mu, mv, msub = [], [], []
    for s in subjects:
        idx = by_subject[s]
        if idx.size < 2:
            raise ValueError(f"subject {s!r} has fewer than 2 beats")
        for _ in range(matched_per_subject):
            a, b = rng.choice(idx, size=2, replace=False)
            mu.append(emb[a])
            mv.append(emb[b])
            msub.append(s)
    matched = PairSet(np.array(mu), np.array(mv),
                      np.ones(len(mu)), np.array(msub, dtype=object))

    n_mismatch = int(round(mismatch_multiple * len(mu)))
    xu, xv = [], []
    for _ in range(n_mismatch):
        sa, sb = rng.choice(len(subjects), size=2, replace=False)
        a = rng.choice(by_subject[subjects[sa]])
        b = rng.choice(by_subject[subjects[sb]])
        xu.append(emb[a])
        xv.append(emb[b])
    mismatched = PairSet(np.array(xu), np.array(xv), np.zeros(n_mismatch),
                         np.array([""] * n_mismatch, dtype=object))
    return matched, mismatched


def smote_pairs(matched: PairSet, mismatched: PairSet, ratio: float = 21.5,
                k_neighbors: int = 5, seed: int = 0) -> PairSet:
    """Oversample matched pairs along nearest-neighbor segments.

    Each pair is a concatenated 2d-dim point; a synthetic point is
    x + r (nn - x) with r uniform in [0, 1) and nn one of the k nearest
    same-subject points. round(ratio * count) synthetics per subject.
    """
    if ratio < 0:
        raise ValueError("ratio must be non-negative")
    if ratio == 0:
        return PairSet.concatenate([matched, mismatched])
    rng = np.random.default_rng(seed)
    d = matched.u.shape[1]
    parts = [matched]
    for s in sorted(set(matched.subject)):
        idx = np.flatnonzero(matched.subject == s)
        pts = np.concatenate([matched.u[idx], matched.v[idx]], axis=1)
        n = idx.size
        if n < k_neighbors + 1:
            raise ValueError(f"subject {s!r} has {n} matched pairs; SMOTE "
                             f"with k={k_neighbors} needs at least "
                             f"{k_neighbors + 1}")
        dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
        np.fill_diagonal(dist, np.inf)
        nn_idx = np.argsort(dist, axis=1)[:, :k_neighbors]
        n_syn = int(round(ratio * n))
        base = rng.integers(0, n, size=n_syn)
        pick = nn_idx[base, rng.integers(0, k_neighbors, size=n_syn)]
        r = rng.uniform(0.0, 1.0, size=(n_syn, 1))
        syn = pts[base] + r * (pts[pick] - pts[base])
        parts.append(PairSet(syn[:, :d], syn[:, d:], np.ones(n_syn),
                             np.array([s] * n_syn, dtype=object)))
    parts.append(mismatched)
    return PairSet.concatenate(parts)


def _check_disjoint(embedder: IdentifyModel, subjects) -> None:
    overlap = sorted(set(embedder.classes) & set(subjects))
    if overlap:
        raise ValueError("verification subjects overlap the embedder's "
                         f"training subjects: {overlap}")


def train_siamese(embedder: IdentifyModel, pairs: PairSet, epochs: int = 75,
                  seed: int = 0, batch_size: int = 64, lr: float = 1e-3,
                  val_fraction: float = 0.2, head: SiameseHead | None = None):
    """Train the head on {0,1} labels with MSE; the embedder stays frozen.

    Returns (head, history). Raises if the pair subjects overlap the
    embedder's training classes.
    """
    _check_disjoint(embedder, {s for s in pairs.subject if s})
    before = embedder.graph.param_bytes()

    if head is None:
        head = build_siamese_head(seed=seed, dim=pairs.u.shape[1])
    graph = head.graph
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_val = int(round(val_fraction * len(pairs)))
    val_idx, train_idx = order[:n_val], order[n_val:]

    def batch_loss(idx, mode):
        u, v = pairs.u[idx], pairs.v[idx]
        feats = {"sqdiff": squared_difference(u, v),
                 "prodprox": product_proximity(u, v),
                 "combined": combined_metric(u, v)}
        out = forward(graph, feats, mode=mode)
        return out, loss_and_grad("mse", out, pairs.label[idx][:, None])

    state = AdamState(lr=lr)
    history = []
    for epoch in range(epochs):
        perm = train_idx[rng.permutation(train_idx.size)]
        losses = []
        for i in range(0, perm.size, batch_size):
            idx = perm[i:i + batch_size]
            _, (loss, g) = batch_loss(idx, "train")
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged at epoch {epoch}")
            backward(graph, g)
            adam_step(state, graph.params, graph.grads)
            losses.append(loss)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_idx.size:
            _, (val_loss, _) = batch_loss(val_idx, "infer")
            entry["val_loss"] = float(val_loss)
        history.append(entry)

    if embedder.graph.param_bytes() != before:
        raise AssertionError("embedder parameters changed during head training")
    return head, history


def enroll(subject_id, embeddings) -> Template:
    """Per-dimension arithmetic mean of the enrollment embeddings."""
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if emb.size == 0:
        raise ValueError("cannot enroll an empty embedding set")
    return Template(subject_id, emb.mean(axis=0), emb.shape[0])


def score_many(template: Template, embeddings, backend: str = "siamese",
               head: SiameseHead | None = None) -> np.ndarray:
    """Similarity in [0,1] of each embedding against the template."""
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    c = template.centroid
    if backend == "siamese":
        if head is None:
            raise ValueError("siamese backend needs a trained head")
        reps = np.repeat(c[None, :], emb.shape[0], axis=0)
        return head.scores(reps, emb)
    if backend == "cosine":
        norms = np.linalg.norm(emb, axis=1) * np.linalg.norm(c)
        if np.any(norms == 0):
            raise ValueError("cosine similarity is undefined for zero-norm "
                             "vectors")
        cos = emb @ c / norms
        return (1.0 + np.clip(cos, -1.0, 1.0)) / 2.0
    if backend == "euclidean":
        return 1.0 / (1.0 + np.linalg.norm(emb - c[None, :], axis=1))
    raise ValueError(f"backend must be one of {BACKENDS}, got {backend!r}")


def score(template: Template, embedding, backend: str = "siamese",
          head: SiameseHead | None = None) -> float:
    return float(score_many(template, [embedding], backend, head)[0])


def far_frr_eer(genuine_scores, imposter_scores,
                resolution: float = 1e-3) -> EerCurve:
    """FAR/FRR curves on a [0,1] grid plus the exact interpolated EER.

    FAR(th) counts imposter scores >= th; FRR(th) counts genuine scores
    < th. Both are step functions jumping only at score values, so the
    EER comes from the first nonpositive FAR-FRR value over the distinct
    scores, linearly interpolated from the previous threshold; the grid
    only samples the exported curves. AUC is the trapezoid area under
    the ROC (TAR against FAR).
    """
    genuine = np.sort(np.asarray(genuine_scores, dtype=np.float64))
    imposter = np.sort(np.asarray(imposter_scores, dtype=np.float64))
    for name, arr in (("genuine", genuine), ("imposter", imposter)):
        if arr.size == 0:
            raise ValueError(f"{name} score set is empty")
        if arr[0] < 0.0 or arr[-1] > 1.0:
            raise ValueError(f"{name} scores must lie in [0, 1]")

    def rates(th):
        far = (imposter.size - np.searchsorted(imposter, th, side="left")) \
            / imposter.size
        frr = np.searchsorted(genuine, th, side="left") / genuine.size
        return far, frr

    n_steps = int(round(1.0 / resolution))
    th = np.arange(n_steps + 1) * resolution
    far, frr = rates(th)

    cand = np.unique(np.concatenate([genuine, imposter, [1.0]]))
    cfar, cfrr = rates(cand)
    cdiff = cfar - cfrr
    cross = np.flatnonzero(cdiff <= 0.0)
    if cross.size == 0:
        # degenerate: the curves never meet inside [0,1]
        eer = float((cfar[-1] + cfrr[-1]) / 2.0)
        eer_th = float(cand[-1])
    else:
        i = int(cross[0])
        if i == 0:
            # FAR(0)=1 and FRR(0)=0 always, so the crossing starts at 0
            p_th, p_far, p_diff = 0.0, 1.0, 1.0
        else:
            p_th, p_far, p_diff = cand[i - 1], cfar[i - 1], cdiff[i - 1]
        t = p_diff / (p_diff - cdiff[i]) if cdiff[i] != 0.0 else 1.0
        eer = float(p_far + t * (cfar[i] - p_far))
        eer_th = float(p_th + t * (cand[i] - p_th))

    # trapezoid over the ROC; FAR decreases along the sweep
    tar = 1.0 - frr
    auc = float(np.sum((far[:-1] - far[1:]) * (tar[:-1] + tar[1:]) / 2.0))
    return EerCurve(th, far, frr, eer, eer_th, auc,
                    genuine.size, imposter.size)


def verification_experiment(embedder: IdentifyModel, beats,
                            head: SiameseHead | None = None,
                            enrollment_fraction: float = 0.4, k: int = 1,
                            backend: str = "siamese",
                            resolution: float = 1e-3):
    """Enroll-then-probe protocol over a labeled beat set.

    The first ``enrollment_fraction`` of each subject's beats (record
    order) forms their template; remaining beats score against every
    template. Decisions average ``k`` consecutive per-beat scores. Returns
    (EerCurve, stats) where stats counts trials and subjects skipped for
    having fewer than k evaluation beats.
    """
    if not 0.0 < enrollment_fraction < 1.0:
        raise ValueError("enrollment fraction must be in (0, 1); a fraction "
                         "of 1.0 leaves no evaluation trials")
    subjects = sorted({b.subject_id for b in beats})
    _check_disjoint(embedder, subjects)

    templates, eval_scores = {}, {}
    skipped = 0
    for s in subjects:
        own = [b for b in beats if b.subject_id == s]
        n_enroll = int(round(enrollment_fraction * len(own)))
        n_enroll = min(max(n_enroll, 1), len(own) - 1)
        emb = embed_many(embedder, own)
        templates[s] = enroll(s, emb[:n_enroll])
        eval_scores[s] = emb[n_enroll:]

    genuine, imposter = [], []
    for s in subjects:
        emb = eval_scores[s]
        if emb.shape[0] < k:
            skipped += 1
            continue
        n_dec = emb.shape[0] // k
        used = emb[:n_dec * k]
        for t in subjects:
            per_beat = score_many(templates[t], used, backend, head)
            decisions = per_beat.reshape(n_dec, k).mean(axis=1)
            (genuine if t == s else imposter).extend(decisions.tolist())

    if not genuine or not imposter:
        raise ValueError("no evaluation trials; loosen the enrollment "
                         "fraction or k")
    curve = far_frr_eer(genuine, imposter, resolution)
    stats = {"genuine_trials": len(genuine), "imposter_trials": len(imposter),
             "skipped_subjects": skipped}
    return curve, stats


# -- template files ---------------------------------------------------------

def save_template(template: Template, path) -> None:
    """subject id (u16 length + utf-8), count (u32), centroid (<f4)."""
    blob = template.subject_id.encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<H", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", template.count))
        fh.write(np.ascontiguousarray(template.centroid,
                                      dtype="<f4").tobytes())


def load_template(path) -> Template:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<H", fh.read(2))
        subject = fh.read(n).decode()
        (count,) = struct.unpack("<I", fh.read(4))
        centroid = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    return Template(subject, centroid, count)


def save_head(head: SiameseHead, path) -> None:
    save_model(head.graph, path)


def load_head(path) -> SiameseHead:
    return SiameseHead(load_model(path))

"""Split plans, identification training, fusion, saliency, embeddings."""
import collections
import types

import numpy as np
import pytest

from pulsegate import identify
from pulsegate.identify import (EMBED_DIM, SplitPlan, accuracy_from_counts,
                                build_identify_model, cross_session_evaluate,
                                embed, embed_many, evaluate_identify,
                                fuse_majority, fused_accuracy, load_identify,
                                make_split, predict_proba, saliency,
                                save_identify, train_identify)


def subject_counts(beats, plan, value):
    out = collections.Counter()
    for beat, a in zip(beats, plan.assignment):
        if a == value:
            out[beat.subject_id] += 1
    return out


def test_split_60_20_20_proportions(small_beats):
    plan = make_split(small_beats, "60-20-20", seed=1)
    assert np.all(plan.assignment >= 0)
    # 24 beats per subject: round(.6*24)=14 train, round(.2*24)=5 val, 5 test
    for value, want in ((0, 14), (1, 5), (2, 5)):
        counts = subject_counts(small_beats, plan, value)
        assert set(counts.values()) == {want}
    train, val, test = plan.partitions()
    assert train.size + val.size + test.size == len(small_beats)
    assert not (set(train) & set(test))


def test_split_stratified_folds(small_beats):
    plan = make_split(small_beats, "stratified-10-fold", seed=2)
    assert plan.fold_count == 10
    assert plan.assignment.min() == 0 and plan.assignment.max() == 9
    # 24 beats per subject spread over 10 folds: sizes 3,3,3,3,2,...,2
    for fold in range(10):
        counts = subject_counts(small_beats, plan, fold)
        assert set(counts.values()) == ({3} if fold < 4 else {2})
    train, val, test = plan.partitions(eval_fold=7)
    assert val.size == 0
    assert set(np.concatenate([train, test])) == set(range(len(small_beats)))
    with pytest.raises(ValueError, match="eval_fold"):
        plan.partitions()


def test_split_determinism(small_beats):
    a = make_split(small_beats, "60-20-20", seed=9).assignment
    b = make_split(small_beats, "60-20-20", seed=9).assignment
    c = make_split(small_beats, "60-20-20", seed=10).assignment
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_split_cross_session(two_session_beats):
    plan = make_split(two_session_beats, "cross-session")
    for beat, a in zip(two_session_beats, plan.assignment):
        assert a == (0 if beat.session_id == 0 else 1)
    swapped = make_split(two_session_beats, "cross-session", train_session=1)
    assert np.array_equal(swapped.assignment, 1 - plan.assignment)


def test_split_validation(small_beats):
    with pytest.raises(ValueError, match="scheme"):
        make_split(small_beats, "80-20")
    with pytest.raises(ValueError, match="exactly 2 sessions"):
        make_split(small_beats, "cross-session")
    plan = SplitPlan("nonsense", np.zeros(3, dtype=np.int64))
    with pytest.raises(ValueError, match="unknown scheme"):
        plan.partitions()


def test_model_shapes():
    model = build_identify_model(7, seed=0)
    assert model.n_persons == 7
    assert model.graph.shapes["probs"] == (7,)
    assert model.graph.shapes["feat"] == (EMBED_DIM,)
    with pytest.raises(ValueError, match="at least 2"):
        build_identify_model(1)


def test_predict_proba_rows_are_distributions(small_beats):
    model = build_identify_model(4, seed=3)
    probs = predict_proba(model, small_beats[:10])
    assert probs.shape == (10, 4)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    assert np.all(probs >= 0)


def test_training_learns_and_logs(trained_identify, small_beats):
    model, plan, history = trained_identify
    assert model.classes == ("s00", "s01", "s02", "s03")
    for entry in history:
        assert {"epoch", "train_loss", "train_accuracy", "val_loss",
                "val_accuracy"} <= set(entry)
    assert history[-1]["train_loss"] < history[0]["train_loss"]
    assert history[-1]["train_accuracy"] > history[0]["train_accuracy"]

    _, _, test_idx = plan.partitions()
    _, metrics = evaluate_identify(model, [small_beats[i] for i in test_idx])
    assert metrics["accuracy"] >= 0.5


def test_training_partition_errors(small_beats):
    model = build_identify_model(4, seed=0)
    everything_test = SplitPlan("60-20-20",
                                np.full(len(small_beats), 2, dtype=np.int64))
    with pytest.raises(ValueError, match="empty"):
        train_identify(model, small_beats, everything_test, epochs=1)

    assignment = np.array([2 if b.subject_id == "s03" else 0
                           for b in small_beats], dtype=np.int64)
    with pytest.raises(ValueError, match="absent"):
        train_identify(model, small_beats, SplitPlan("60-20-20", assignment),
                       epochs=1)


def test_training_class_count_mismatch(small_beats):
    model = build_identify_model(3, seed=0)
    plan = make_split(small_beats, "60-20-20", seed=0)
    with pytest.raises(ValueError, match="classes"):
        train_identify(model, small_beats, plan, epochs=1)


def test_early_stopping(small_beats):
    model = build_identify_model(4, seed=11)
    plan = make_split(small_beats, "60-20-20", seed=11)
    _, history = train_identify(model, small_beats, plan, epochs=50,
                                batch_size=32, seed=11, patience=1)
    assert len(history) < 50


def test_confusion_matches_manual_count(trained_identify, small_beats):
    model, _, _ = trained_identify
    subset = small_beats[::3]
    cm, metrics = evaluate_identify(model, subset)
    preds = predict_proba(model, subset).argmax(axis=1)
    labels = np.array([model.class_index(b.subject_id) for b in subset])

    want = np.zeros((4, 4), dtype=np.int64)
    for t, p in zip(labels, preds):
        want[t, p] += 1
    assert np.array_equal(cm.counts, want)
    assert cm.total == len(subset)
    assert metrics["accuracy"] == pytest.approx((preds == labels).mean())

    tp, tn, fp, fn = cm.per_class()
    assert np.array_equal(tp + fn, want.sum(axis=1))
    assert np.array_equal(tp + fp, want.sum(axis=0))
    assert np.all(tp + tn + fp + fn == cm.total)

    prec = [tp[i] / (tp[i] + fp[i]) if tp[i] + fp[i] else 0.0 for i in range(4)]
    rec = [tp[i] / (tp[i] + fn[i]) if tp[i] + fn[i] else 0.0 for i in range(4)]
    assert metrics["precision"] == pytest.approx(np.mean(prec))
    assert metrics["recall"] == pytest.approx(np.mean(rec))


def test_accuracy_from_counts():
    assert accuracy_from_counts(3, 5, 1, 1) == pytest.approx(0.8)
    assert accuracy_from_counts(np.int64(2), 0, 0, 2) == pytest.approx(0.5)
    with pytest.raises(ValueError, match="no counts"):
        accuracy_from_counts(0, 0, 0, 0)


def fake_probs_model(monkeypatch, rows, classes=("a", "b")):
    rows = np.asarray(rows, dtype=np.float64)
    monkeypatch.setattr(identify, "predict_proba",
                        lambda model, beats, **kw: rows[:len(beats)])
    return types.SimpleNamespace(classes=classes)


def test_fuse_majority_votes(monkeypatch):
    model = fake_probs_model(monkeypatch, [[0.9, 0.1], [0.8, 0.2], [0.1, 0.9]])
    assert fuse_majority(model, [0, 1, 2], 3) == "a"


def test_fuse_majority_tie_breaks_on_summed_probability(monkeypatch):
    model = fake_probs_model(monkeypatch, [[0.40, 0.60], [0.65, 0.35]])
    assert fuse_majority(model, [0, 1], 2) == "a"


def test_fuse_majority_double_tie_takes_lowest_index(monkeypatch):
    model = fake_probs_model(monkeypatch, [[0.6, 0.4], [0.4, 0.6]])
    assert fuse_majority(model, [0, 1], 2) == "a"


def test_fuse_majority_k_validation(monkeypatch):
    model = fake_probs_model(monkeypatch, [[1.0, 0.0]])
    with pytest.raises(ValueError, match="k must be"):
        fuse_majority(model, [0], 0)
    with pytest.raises(ValueError, match="k must be"):
        fuse_majority(model, [0], 2)


def test_fused_accuracy_groups_and_leftovers(monkeypatch):
    beats = [types.SimpleNamespace(subject_id=s, session_id=0)
             for s in ("x",) * 24 + ("y",) * 7]
    seen = []

    def fake_fuse(model, items, k):
        seen.append(len(items))
        return items[0].subject_id

    monkeypatch.setattr(identify, "fuse_majority", fake_fuse)
    # 24 beats give 4 groups of 5, 7 beats give 1; leftovers are dropped
    assert fused_accuracy(None, beats, 5) == 1.0
    assert seen == [5] * 5

    monkeypatch.setattr(identify, "fuse_majority",
                        lambda model, items, k: "nobody")
    assert fused_accuracy(None, beats, 5) == 0.0
    with pytest.raises(ValueError, match="consecutive"):
        fused_accuracy(None, beats, 30)


def test_fused_accuracy_on_trained_model(trained_identify, small_beats):
    model, plan, _ = trained_identify
    _, _, test_idx = plan.partitions()
    test_beats = [small_beats[i] for i in test_idx]
    acc = fused_accuracy(model, test_beats, 3)
    assert 0.0 <= acc <= 1.0


def test_cross_session_directions(two_session_beats):
    out = cross_session_evaluate(two_session_beats, epochs=2, seed=0)
    assert set(out) == {"train0_test1", "train1_test0"}
    for acc in out.values():
        assert 0.0 <= acc <= 1.0


def test_cross_session_requires_full_coverage(two_session_beats):
    broken = [b for b in two_session_beats
              if not (b.subject_id == "s01" and b.session_id == 1)]
    with pytest.raises(ValueError, match="missing a session"):
        cross_session_evaluate(broken, epochs=1)
    single = [b for b in two_session_beats if b.session_id == 0]
    with pytest.raises(ValueError, match="exactly 2"):
        cross_session_evaluate(single, epochs=1)


def test_saliency_shape_and_sign(trained_identify, small_beats):
    model, _, _ = trained_identify
    beat = small_beats[0]
    smap = saliency(model, beat, beat.subject_id)
    assert smap.scores.shape == (beat.samples.size,)
    assert np.all(smap.scores >= 0)
    by_index = saliency(model, beat, model.class_index(beat.subject_id))
    assert np.allclose(smap.scores, by_index.scores)
    with pytest.raises(ValueError, match="not among"):
        saliency(model, beat, "s99")


def test_embeddings_live_in_open_unit_interval(trained_identify, small_beats):
    model, _, _ = trained_identify
    vecs = embed_many(model, small_beats[:6])
    assert vecs.shape == (6, EMBED_DIM)
    assert np.all((vecs > 0.0) & (vecs < 1.0))
    assert np.allclose(embed(model, small_beats[0]), vecs[0])


def test_save_load_round_trip(tmp_path, trained_identify, small_beats):
    model, _, _ = trained_identify
    path = str(tmp_path / "id.pgm")
    save_identify(model, path)
    loaded = load_identify(path)
    assert loaded.classes == model.classes
    assert np.array_equal(predict_proba(loaded, small_beats[:8]),
                          predict_proba(model, small_beats[:8]))


def test_load_without_sidecar(tmp_path, trained_identify):
    model, _, _ = trained_identify
    path = str(tmp_path / "bare.pgm")
    save_identify(model, path)
    (tmp_path / "bare.pgm.json").unlink()
    assert load_identify(path).classes == ()

"""Pair features, Siamese head, templates, score backends, FAR/FRR/EER."""
import numpy as np
import pytest

from pulsegate.verify import (PairSet, Template, build_siamese_head,
                              combined_metric, enroll, far_frr_eer,
                              load_head, load_template, make_training_pairs,
                              product_proximity, save_head, save_template,
                              score, score_many, smote_pairs,
                              squared_difference, train_siamese,
                              verification_experiment)

import oracles


@pytest.fixture(scope="module")
def pair_bank():
    rng = np.random.default_rng(42)
    return rng.random((32, 128)), rng.random((32, 128))


def test_pair_features_match_manual_math(pair_bank):
    u, v = pair_bank
    assert np.array_equal(squared_difference(u, v), (v - u) ** 2)
    assert np.array_equal(product_proximity(u, v), u * v)
    both = combined_metric(u, v)
    assert both.shape == (32, 256)
    assert np.array_equal(both[:, :128], (v - u) ** 2)
    assert np.array_equal(both[:, 128:], u * v)


def test_pair_features_are_bit_symmetric(pair_bank):
    u, v = pair_bank
    assert np.array_equal(squared_difference(u, v), squared_difference(v, u))
    assert np.array_equal(product_proximity(u, v), product_proximity(v, u))
    assert np.array_equal(combined_metric(u, v), combined_metric(v, u))


def test_pair_features_reject_shape_mismatch():
    with pytest.raises(ValueError, match="shapes differ"):
        squared_difference(np.zeros(4), np.zeros(5))


def test_head_scores_shape_range_and_symmetry(pair_bank):
    u, v = pair_bank
    head = build_siamese_head(seed=7)
    s = head.scores(u, v)
    assert s.shape == (32,)
    assert np.all((s > 0.0) & (s < 1.0))
    assert np.array_equal(s, head.scores(v, u))
    one = head.scores(u[0], v[0])
    assert one.shape == (1,) and one[0] == s[0]


def test_make_training_pairs_counts(trained_identify, verification_beats):
    model, _, _ = trained_identify
    matched, mismatched = make_training_pairs(
        model, verification_beats, seed=3, matched_per_subject=6,
        mismatch_multiple=1.5)
    assert len(matched) == 4 * 6
    assert len(mismatched) == round(1.5 * 24)
    assert np.all(matched.label == 1.0) and np.all(mismatched.label == 0.0)
    assert set(matched.subject) == {"v00", "v01", "v02", "v03"}
    assert set(mismatched.subject) == {""}
    # matched pairs draw two distinct beats, so embeddings differ
    assert np.all(np.linalg.norm(matched.u - matched.v, axis=1) > 0)


def test_make_training_pairs_validation(trained_identify, verification_beats):
    model, _, _ = trained_identify
    only_one = [b for b in verification_beats if b.subject_id == "v00"]
    with pytest.raises(ValueError, match="at least 2 subjects"):
        make_training_pairs(model, only_one)
    starved = only_one[:1] + [b for b in verification_beats
                              if b.subject_id == "v01"]
    with pytest.raises(ValueError, match="fewer than 2 beats"):
        make_training_pairs(model, starved, matched_per_subject=2)


def synthetic_pairsets(seed=0, per_subject=8, dim=6):
    rng = np.random.default_rng(seed)
    parts = []
    for s in ("p", "q"):
        u = rng.random((per_subject, dim))
        v = rng.random((per_subject, dim))
        parts.append(PairSet(u, v, np.ones(per_subject),
                             np.array([s] * per_subject, dtype=object)))
    matched = PairSet.concatenate(parts)
    mism = PairSet(rng.random((5, dim)), rng.random((5, dim)), np.zeros(5),
                   np.array([""] * 5, dtype=object))
    return matched, mism


def test_smote_ratio_zero_concatenates():
    matched, mism = synthetic_pairsets()
    out = smote_pairs(matched, mism, ratio=0.0)
    assert len(out) == len(matched) + len(mism)
    assert np.array_equal(out.u, np.concatenate([matched.u, mism.u]))
    assert np.array_equal(out.label,
                          np.concatenate([matched.label, mism.label]))


def test_smote_synthetics_lie_on_neighbor_segments():
    matched, mism = synthetic_pairsets(seed=5)
    out = smote_pairs(matched, mism, ratio=2.0, k_neighbors=3, seed=1)
    n_syn = 2 * round(2.0 * 8)
    assert len(out) == len(matched) + n_syn + len(mism)

    new = slice(len(matched), len(matched) + n_syn)
    assert np.all(out.label[new] == 1.0)
    for s in ("p", "q"):
        origin = np.flatnonzero(matched.subject == s)
        cloud = np.concatenate([matched.u[origin], matched.v[origin]], axis=1)
        syn_idx = [i for i in range(*new.indices(len(out)))
                   if out.subject[i] == s]
        assert len(syn_idx) == 16
        for i in syn_idx:
            point = np.concatenate([out.u[i], out.v[i]])
            assert on_some_segment(point, cloud)


def on_some_segment(point, cloud):
    for a in range(cloud.shape[0]):
        for b in range(cloud.shape[0]):
            if a == b:
                continue
            seg = cloud[b] - cloud[a]
            t = np.dot(point - cloud[a], seg) / np.dot(seg, seg)
            if -1e-9 <= t <= 1.0 + 1e-9:
                close = cloud[a] + t * seg
                if np.linalg.norm(point - close) < 1e-9:
                    return True
    return False


def test_smote_validation():
    matched, mism = synthetic_pairsets(per_subject=4)
    with pytest.raises(ValueError, match="non-negative"):
        smote_pairs(matched, mism, ratio=-1.0)
    with pytest.raises(ValueError, match="at least 6"):
        smote_pairs(matched, mism, ratio=1.0, k_neighbors=5)


def test_train_siamese_learns_without_touching_embedder(
        trained_identify, verification_beats):
    model, _, _ = trained_identify
    matched, mism = make_training_pairs(model, verification_beats, seed=1,
                                        matched_per_subject=8,
                                        mismatch_multiple=1.0)
    pairs = PairSet.concatenate([matched, mism])
    frozen = model.graph.param_bytes()
    head, history = train_siamese(model, pairs, epochs=8, seed=1)
    assert model.graph.param_bytes() == frozen
    assert history[-1]["train_loss"] < history[0]["train_loss"]
    assert "val_loss" in history[0]

    s_match = head.scores(matched.u, matched.v)
    s_mism = head.scores(mism.u, mism.v)
    assert s_match.mean() > s_mism.mean()


def test_train_siamese_rejects_overlapping_subjects(trained_identify):
    model, _, _ = trained_identify
    rng = np.random.default_rng(0)
    pairs = PairSet(rng.random((4, 128)), rng.random((4, 128)),
                    np.ones(4), np.array(["s01"] * 4, dtype=object))
    with pytest.raises(ValueError, match="overlap"):
        train_siamese(model, pairs, epochs=1)


def test_enroll_takes_dimensionwise_mean():
    emb = np.array([[0.2, 0.4], [0.4, 0.8], [0.6, 0.6]])
    tpl = enroll("v09", emb)
    assert tpl.subject_id == "v09"
    assert tpl.count == 3
    assert np.allclose(tpl.centroid, [0.4, 0.6])
    single = enroll("v10", np.array([0.1, 0.9]))
    assert single.count == 1 and np.array_equal(single.centroid, [0.1, 0.9])
    with pytest.raises(ValueError, match="empty"):
        enroll("v11", np.zeros((0, 2)))


def test_cosine_backend_formula():
    tpl = Template("t", np.array([1.0, 0.0]), 1)
    probes = np.array([[2.0, 0.0], [0.0, 3.0], [-1.0, 0.0], [1.0, 1.0]])
    got = score_many(tpl, probes, backend="cosine")
    assert np.allclose(got, [1.0, 0.5, 0.0,
                             (1.0 + 1.0 / np.sqrt(2.0)) / 2.0])
    with pytest.raises(ValueError, match="zero-norm"):
        score(tpl, [0.0, 0.0], backend="cosine")


def test_euclidean_backend_formula():
    tpl = Template("t", np.array([0.5, 0.5]), 2)
    assert score(tpl, [0.5, 0.5], backend="euclidean") == 1.0
    assert score(tpl, [0.5, 1.5], backend="euclidean") == pytest.approx(0.5)
    assert score(tpl, [3.5, 4.5], backend="euclidean") == pytest.approx(1.0 / 6.0)


def test_siamese_backend_needs_head():
    tpl = Template("t", np.zeros(128), 1)
    with pytest.raises(ValueError, match="trained head"):
        score(tpl, np.zeros(128), backend="siamese")
    head = build_siamese_head(seed=0)
    val = score(tpl, np.full(128, 0.5), backend="siamese", head=head)
    assert 0.0 < val < 1.0
    with pytest.raises(ValueError, match="backend"):
        score(tpl, np.zeros(128), backend="manhattan")


def test_eer_perfectly_separated():
    curve = far_frr_eer([0.9, 0.95, 0.8], [0.1, 0.2, 0.05])
    assert curve.eer == 0.0
    assert 0.2 < curve.eer_threshold <= 0.8
    assert curve.auc == pytest.approx(1.0, abs=1e-6)
    assert curve.n_genuine == 3 and curve.n_imposter == 3


def test_eer_fully_overlapping():
    curve = far_frr_eer([0.5] * 10, [0.5] * 10)
    assert curve.eer == pytest.approx(0.5)


def test_eer_matches_loop_oracle():
    rng = np.random.default_rng(8)
    for trial in range(60):
        g = rng.beta(4, 2, size=rng.integers(5, 60))
        i = rng.beta(2, 4, size=rng.integers(5, 60))
        if trial % 2:
            g, i = np.round(g, 2), np.round(i, 2)
        curve = far_frr_eer(g, i)
        eer, th = oracles.eer_loop(g, i)
        assert curve.eer == pytest.approx(eer, abs=1e-9)
        assert curve.eer_threshold == pytest.approx(th, abs=1e-9)


def test_far_frr_grid_matches_counting():
    rng = np.random.default_rng(9)
    g = rng.random(40)
    i = rng.random(40) * 0.7
    curve = far_frr_eer(g, i, resolution=0.05)
    assert np.array_equal(curve.thresholds, np.arange(21) * 0.05)
    far, frr = oracles.far_frr_loop(g, i, curve.thresholds)
    assert np.array_equal(curve.far, far)
    assert np.array_equal(curve.frr, frr)
    assert curve.far[0] == 1.0 and curve.frr[0] == 0.0
    assert np.all(np.diff(curve.far) <= 0)
    assert np.all(np.diff(curve.frr) >= 0)


def test_eer_validation():
    with pytest.raises(ValueError, match="genuine score set is empty"):
        far_frr_eer([], [0.5])
    with pytest.raises(ValueError, match="imposter score set is empty"):
        far_frr_eer([0.5], [])
    with pytest.raises(ValueError, match="lie in"):
        far_frr_eer([1.2], [0.5])
    with pytest.raises(ValueError, match="lie in"):
        far_frr_eer([0.5], [-0.1])


def test_verification_experiment_counts(trained_identify, verification_beats):
    model, _, _ = trained_identify
    curve, stats = verification_experiment(model, verification_beats,
                                           backend="cosine",
                                           enrollment_fraction=0.4, k=1)
    # 18 beats/subject: round(0.4*18)=7 enrolled, 11 probes, 4 subjects
    assert stats == {"genuine_trials": 44, "imposter_trials": 132,
                     "skipped_subjects": 0}
    assert 0.0 <= curve.eer <= 1.0

    fused, stats4 = verification_experiment(model, verification_beats,
                                            backend="cosine",
                                            enrollment_fraction=0.4, k=4)
    assert stats4 == {"genuine_trials": 8, "imposter_trials": 24,
                      "skipped_subjects": 0}
    assert fused.n_genuine == 8


def test_verification_experiment_validation(trained_identify, small_beats,
                                            verification_beats):
    model, _, _ = trained_identify
    with pytest.raises(ValueError, match="fraction"):
        verification_experiment(model, verification_beats,
                                enrollment_fraction=1.0, backend="cosine")
    with pytest.raises(ValueError, match="overlap"):
        verification_experiment(model, small_beats, backend="cosine")
    with pytest.raises(ValueError, match="no evaluation trials"):
        verification_experiment(model, verification_beats, backend="cosine",
                                enrollment_fraction=0.4, k=12)


def test_template_file_round_trip(tmp_path):
    tpl = Template("v03", np.linspace(0.0, 1.0, 128), 9)
    path = str(tmp_path / "v03.tpl")
    save_template(tpl, path)
    back = load_template(path)
    assert back.subject_id == "v03"
    assert back.count == 9
    assert np.array_equal(back.centroid,
                          tpl.centroid.astype(np.float32).astype(np.float64))


def test_head_file_round_trip(tmp_path, pair_bank):
    u, v = pair_bank
    head = build_siamese_head(seed=13)
    path = str(tmp_path / "head.pgm")
    save_head(head, path)
    back = load_head(path)
    assert np.array_equal(head.scores(u, v), back.scores(u, v))

"""Records, normalization, resampling, synthesis, and file formats."""
import numpy as np
import pytest

from pulsegate import signal_io
from pulsegate.signal_io import (EcgRecord, SynthSubjectParams, load_csv,
                                 load_corpus, load_raw, resample, save_csv,
                                 save_corpus, synth_corpus, zscore)


def test_record_validation():
    with pytest.raises(ValueError, match="1-D"):
        EcgRecord(np.zeros((2, 2)), 500.0)
    with pytest.raises(ValueError, match="positive"):
        EcgRecord(np.zeros(4), 0.0)
    with pytest.raises(ValueError, match="outside"):
        EcgRecord(np.zeros(4), 500.0, rpeaks=[5])
    with pytest.raises(ValueError, match="increasing"):
        EcgRecord(np.zeros(4), 500.0, rpeaks=[2, 2])
    rec = EcgRecord([0.0, 1.0, 0.0], 250.0, rpeaks=[1])
    assert rec.duration_s == pytest.approx(3 / 250)


def test_zscore_normalizes_and_flags_flat_input():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    z, degenerate = zscore(x)
    assert not degenerate
    assert z.mean() == pytest.approx(0.0, abs=1e-12)
    assert z.std() == pytest.approx(1.0, abs=1e-12)

    z, degenerate = zscore(np.full(10, 3.7))
    assert degenerate
    assert np.array_equal(z, np.zeros(10))
    with pytest.raises(ValueError):
        zscore([])


def test_resample_identity_and_validation():
    rec = EcgRecord(np.arange(8.0), 500.0)
    assert resample(rec, 500.0) is rec
    with pytest.raises(ValueError, match="positive"):
        resample(rec, 0.0)
    with pytest.raises(ValueError, match="at least 4"):
        resample(EcgRecord(np.ones(3), 100.0), 200.0)


def test_resample_reproduces_quadratics_in_the_interior():
    """Catmull-Rom interpolation has quadratic precision away from the
    clamped ends."""
    fs_in, fs_out = 100.0, 360.0
    t = np.arange(64) / fs_in
    rec = EcgRecord(3.0 - 2.0 * t + 5.0 * t ** 2, fs_in)
    out = resample(rec, fs_out)
    t_out = np.arange(out.samples.size) / fs_out
    want = 3.0 - 2.0 * t_out + 5.0 * t_out ** 2
    interior = (t_out > 2 / fs_in) & (t_out < t[-1] - 2 / fs_in)
    assert np.allclose(out.samples[interior], want[interior], atol=1e-10)


def test_resample_rescales_annotations():
    rec = EcgRecord(np.sin(np.arange(100) / 5.0), 100.0, rpeaks=[10, 50, 90])
    out = resample(rec, 200.0)
    assert out.fs == 200.0
    assert out.samples.size == 200
    assert np.array_equal(out.rpeaks, [20, 100, 180])


def test_subject_params_validation():
    waves = {"P": (0.1, -160.0, 20.0), "Q": (-0.1, -30.0, 8.0),
             "R": (1.0, 0.0, 10.0), "S": (-0.2, 28.0, 9.0),
             "T": (0.3, 200.0, 50.0)}
    SynthSubjectParams(waves=waves)
    bad = dict(waves, R=(0.05, 0.0, 10.0))
    with pytest.raises(ValueError, match="dominate"):
        SynthSubjectParams(waves=bad)
    bad = dict(waves, T=(0.3, 200.0, 0.0))
    with pytest.raises(ValueError, match="width"):
        SynthSubjectParams(waves=bad)


def test_synth_corpus_annotations_are_exact_apexes():
    records = synth_corpus(3, 10, seed=42, noise_sigma=0.0)
    assert len(records) == 3
    for rec in records:
        assert rec.rpeaks.size == 10
        for p in rec.rpeaks:
            lo, hi = p - 40, p + 41
            assert lo >= 0 and hi <= rec.samples.size
            assert np.argmax(rec.samples[lo:hi]) == 40


def test_synth_corpus_is_deterministic_and_seed_sensitive():
    a = synth_corpus(2, 6, seed=7)
    b = synth_corpus(2, 6, seed=7)
    c = synth_corpus(2, 6, seed=8)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.samples, rb.samples)
        assert np.array_equal(ra.rpeaks, rb.rpeaks)
    assert not np.array_equal(a[0].samples, c[0].samples)


def test_synth_corpus_subjects_differ():
    records = synth_corpus(4, 8, seed=3, noise_sigma=0.0)
    flat = [r.samples[:1000] for r in records]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.allclose(flat[i], flat[j], atol=1e-3)


def test_synth_corpus_sessions_scale_amplitudes():
    records = synth_corpus(2, 6, seed=5, sessions=2, noise_sigma=0.0,
                           amplitude_drift=0.1)
    assert len(records) == 4
    first = [r for r in records if r.subject_id == "s00"]
    assert {r.session_id for r in first} == {0, 1}
    peak0 = first[0].samples[first[0].rpeaks].mean()
    peak1 = first[1].samples[first[1].rpeaks].mean()
    assert peak1 == pytest.approx(1.1 * peak0, rel=1e-2)


def test_synth_corpus_subject_prefix():
    records = synth_corpus(2, 4, seed=1, subject_prefix="probe")
    assert {r.subject_id for r in records} == {"probe00", "probe01"}


def test_synth_corpus_argument_validation():
    with pytest.raises(ValueError, match="2 subjects"):
        synth_corpus(1, 5)
    with pytest.raises(ValueError, match="1 beat"):
        synth_corpus(2, 0)


def test_csv_round_trip_is_exact(tmp_path):
    rec = synth_corpus(2, 5, seed=11)[0]
    path = tmp_path / "rec.csv"
    save_csv(rec, path)
    back = load_csv(path, subject_id=rec.subject_id)
    assert np.array_equal(back.samples, rec.samples)
    assert np.array_equal(back.rpeaks, rec.rpeaks)
    assert back.fs == rec.fs
    assert back.subject_id == rec.subject_id


def test_csv_config_hash_comment_preserved_and_skipped(tmp_path):
    rec = EcgRecord(np.arange(6.0), 500.0, rpeaks=[2])
    path = tmp_path / "rec.csv"
    save_csv(rec, path, config_hash="abc123")
    first = path.read_text().splitlines()[0]
    assert first == "# config_hash=abc123"
    back = load_csv(path)
    assert np.array_equal(back.samples, rec.samples)


def test_csv_malformed_rows_are_reported_with_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time_s,ecg_mv\n0.0,1.0\n0.002,oops\n")
    with pytest.raises(ValueError, match="line 3"):
        load_csv(path)
    path.write_text("time_s,ecg_mv\n0.004,1.0\n0.002,1.0\n")
    with pytest.raises(ValueError, match="increasing"):
        load_csv(path)
    path.write_text("volts,stuff\n0.0,1.0\n")
    with pytest.raises(ValueError, match="header"):
        load_csv(path)


def test_raw_formats_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    mv = rng.standard_normal(64)

    f32 = tmp_path / "a.f32"
    mv.astype("<f4").tofile(f32)
    rec = load_raw(f32, 360.0, "float32")
    assert rec.fs == 360.0
    assert np.allclose(rec.samples, mv.astype(np.float32))

    i16 = tmp_path / "a.i16"
    (mv * 1000).astype("<i2").tofile(i16)
    rec = load_raw(i16, 360.0, "int16", gain=1000.0)
    assert np.allclose(rec.samples, (mv * 1000).astype("<i2") / 1000.0)

    with pytest.raises(ValueError, match="gain"):
        load_raw(i16, 360.0, "int16")
    with pytest.raises(ValueError, match="format"):
        load_raw(i16, 360.0, "uint8")


def test_corpus_round_trip(tmp_path):
    records = synth_corpus(3, 6, seed=2, sessions=2)
    save_corpus(records, tmp_path / "corpus", config_hash="h1")
    back = load_corpus(tmp_path / "corpus")
    assert len(back) == len(records)
    for a, b in zip(records, back):
        assert a.subject_id == b.subject_id
        assert a.session_id == b.session_id
        assert a.fs == b.fs
        assert np.array_equal(a.samples, b.samples)
        assert np.array_equal(a.rpeaks, b.rpeaks)

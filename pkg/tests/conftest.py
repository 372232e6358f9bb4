import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from pulsegate import beats as beats_mod
from pulsegate import identify, signal_io


@pytest.fixture(scope="session")
def small_beats():
    """96 clean beats from 4 synthetic subjects, exact annotations."""
    records = signal_io.synth_corpus(4, 24, seed=123)
    beats, skipped = beats_mod.segment_corpus(records)
    assert skipped == 0
    return beats


@pytest.fixture(scope="session")
def two_session_beats():
    records = signal_io.synth_corpus(3, 14, seed=321, sessions=2)
    beats, _ = beats_mod.segment_corpus(records)
    return beats


@pytest.fixture(scope="session")
def trained_identify(small_beats):
    """A small trained classifier shared by the identify/verify tests."""
    plan = identify.make_split(small_beats, "60-20-20", seed=5)
    model = identify.build_identify_model(4, seed=5)
    model, history = identify.train_identify(model, small_beats, plan,
                                             epochs=6, batch_size=16, seed=5)
    return model, plan, history


@pytest.fixture(scope="session")
def verification_beats():
    """Beats from subjects the shared classifier has never seen."""
    records = signal_io.synth_corpus(4, 18, seed=777, subject_prefix="v")
    beats, _ = beats_mod.segment_corpus(records)
    return beats

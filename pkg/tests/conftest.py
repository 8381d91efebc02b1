"""Shared fixtures: tiny corpora and the printed-numbers fixture dump that
mirrors the reference length/error breakdown tables."""

import numpy as np
import pytest

from lmdst.corpus import BeliefState
from lmdst.evaluation import TurnPrediction

# (bucket label, representative length, total turns, correct turns)
TABLE_BUCKETS = [("0-99", 50, 2940, 2115),
                 ("100-199", 150, 2466, 1028),
                 ("200-299", 250, 1494, 356),
                 (">=300", 350, 468, 57)]
# error-class counts among the 3,812 incorrect turns
TABLE_ERRORS = {"over_prediction": 791, "partial_prediction": 1480,
                "false_prediction": 1541}


def _state(**kv):
    s = BeliefState()
    for key, value in kv.items():
        domain, slot = key.split("__")
        s.set(domain, slot, value)
    return s


def incorrect_pair(error_class):
    gold = _state(hotel__area="east", hotel__stars="4")
    if error_class == "over_prediction":
        pred = _state(hotel__area="east", hotel__stars="4", train__day="monday")
    elif error_class == "partial_prediction":
        pred = _state(hotel__area="east")
    else:
        pred = _state(hotel__area="west", hotel__stars="4")
    return pred, gold


def build_table_fixture():
    """7,368 predictions reproducing the reference length and error tables."""
    error_stream = ([("over_prediction",)] * TABLE_ERRORS["over_prediction"]
                    + [("partial_prediction",)] * TABLE_ERRORS["partial_prediction"]
                    + [("false_prediction",)] * TABLE_ERRORS["false_prediction"])
    preds = []
    cursor = 0
    for label, length, total, correct in TABLE_BUCKETS:
        for i in range(total):
            if i < correct:
                gold = _state(hotel__area="east")
                pred = gold.copy()
            else:
                (error_class,) = error_stream[cursor]
                cursor += 1
                pred, gold = incorrect_pair(error_class)
            preds.append(TurnPrediction(f"{label}-{i}", 0, length, pred, gold))
    assert cursor == len(error_stream)
    return preds


@pytest.fixture(scope="session")
def table_fixture_predictions():
    return build_table_fixture()


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)

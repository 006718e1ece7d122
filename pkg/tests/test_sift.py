import numpy as np
import pytest

from polqkd.config import Config
from polqkd.photonics import EVENT_DTYPE, PULSE_DTYPE, X, Z, DetectionEngine, PolarizationState
from polqkd.sift import (
    Announcement,
    SiftError,
    answer_announcement,
    basis_announcement_roundtrip,
    make_announcement,
    oracle_photon_tallies,
    sift,
    x_tallies,
)


@pytest.fixture(scope="module")
def detections():
    cfg = Config().replace(fiber_length=0.0, extra_loss=3.0, dead_time=1.6e-8, dark_rate=1e5)
    return DetectionEngine(cfg, np.random.default_rng(11)).run(PolarizationState(0.1, 0.2), 30_000)


def _tiny():
    records = np.zeros(4, dtype=PULSE_DTYPE)
    records["slot"] = [3, 7, 9, 12]
    records["basis"] = [Z, X, Z, Z]
    records["bit"] = [1, 0, 0, 1]
    records["intensity"] = [0, 1, 1, 0]
    events = np.zeros(4, dtype=EVENT_DTYPE)
    events["slot"] = [3, 7, 9, 12]
    events["basis"] = [Z, X, X, Z]
    events["bit"] = [1, 1, 0, 0]
    return records, events


def test_tiny_hand_example():
    records, events = _tiny()
    s = sift(records, events)
    assert s.n[Z].tolist() == [2, 0]
    assert s.m[Z].tolist() == [1, 0]
    assert s.n[X].tolist() == [0, 1]
    assert s.m[X].tolist() == [0, 1]
    assert s.discarded == 1
    assert s.raw_key_alice.tolist() == [1, 1]
    assert s.raw_key_bob.tolist() == [1, 0]


def test_sift_on_simulation(detections):
    records, events = detections
    s = sift(records, events)
    assert s.total == len(events)
    assert len(s.raw_key_alice) == s.n[Z].sum()
    # the mismatch rate is set by the basis choices
    p_match = 0.875 * 0.5 + 0.125 * 0.5
    assert s.n.sum() / s.total == pytest.approx(p_match, abs=0.02)


def test_announcement_round_trip_matches_oracle_sift(detections):
    records, events = detections
    ann, reply = basis_announcement_roundtrip(events, records)
    n_x, m_x = x_tallies(ann, reply)
    s = sift(records, events)
    assert n_x.tolist() == s.n[X].tolist()
    assert m_x.tolist() == s.m[X].tolist()
    z_kept = reply.keep & (ann.bases == Z)
    assert z_kept.sum() == s.n[Z].sum()


def test_announcement_carries_no_z_bits(detections):
    _, events = detections
    ann = make_announcement(events)
    assert len(ann.x_outcomes) == int((events["basis"] == X).sum())
    assert set(vars(ann)) == {"slots", "bases", "x_outcomes"}


def test_unknown_slot_is_a_desync():
    records, events = _tiny()
    events["slot"][2] = 10
    with pytest.raises(SiftError, match="desynchronized"):
        sift(records, events)
    with pytest.raises(SiftError):
        answer_announcement(make_announcement(events), records)


def test_malformed_announcements():
    records, _ = _tiny()
    with pytest.raises(SiftError):
        answer_announcement(Announcement(np.array([3, 7]), np.array([Z, X], np.uint8), np.array([], np.uint8)), records)
    with pytest.raises(SiftError):
        answer_announcement(Announcement(np.array([7, 3]), np.array([Z, Z], np.uint8), np.array([], np.uint8)), records)


def test_empty_inputs():
    records, _ = _tiny()
    empty = np.zeros(0, dtype=EVENT_DTYPE)
    assert sift(records, empty).total == 0
    reply = answer_announcement(make_announcement(empty), records)
    assert len(reply.keep) == 0


def test_oracle_photon_tallies(detections):
    records, events = detections
    truth = oracle_photon_tallies(records, events)
    s = sift(records, events)
    assert truth["z0"] + truth["z1"] <= s.n[Z].sum()
    assert truth["x1_err"] <= truth["x1"]
    assert truth["z1"] > truth["z0"]

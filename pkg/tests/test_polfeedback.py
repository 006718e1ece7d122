import inspect
import math

import numpy as np
import pytest

from polqkd.config import Config
from polqkd.photonics import PolarizationState, z_error_prob
from polqkd.polfeedback import (
    PATIENCE,
    EPCState,
    FeedbackController,
    closed_loop,
    drift_step,
    epc_apply,
    feedback_step,
    write_feedback_trace,
)


def test_epc_state_wraps_and_validates():
    s = EPCState((7.0, -1.0, 0.0))
    assert s.plates[0] == pytest.approx(7.0 - 2 * math.pi)
    assert s.plates[1] == pytest.approx(2 * math.pi - 1.0)
    with pytest.raises(ValueError):
        EPCState((0.0, 0.0))
    with pytest.raises(ValueError):
        EPCState(step_size=0.0)


def test_drift_step(rng):
    pol = PolarizationState(0.3, 0.4)
    assert drift_step(pol, 1.0, 0.0, rng) == pol
    with pytest.raises(ValueError):
        drift_step(pol, 0.0, 0.1, rng)
    wrapped = drift_step(PolarizationState(2 * math.pi - 1e-6), 1.0, 1e-9, np.random.default_rng(0))
    assert wrapped.theta < 1e-3 or wrapped.theta > 2 * math.pi - 1e-3


def test_drift_variance():
    rng = np.random.default_rng(0)
    r, steps = 0.01, 10_000
    theta = np.empty(steps)
    for trial in range(steps):
        # unwrapped increments: take the step from zero each time
        theta[trial] = (drift_step(PolarizationState(1.0), 1.0, r, rng).theta - 1.0)
    total_var = theta.var() * steps
    # variance of the sum of 10^4 steps is r^2 * 10^4; sample-variance s.e. ~ sqrt(2/N)
    assert total_var == pytest.approx(r**2 * steps, rel=3 * math.sqrt(2 / steps))


def test_epc_apply():
    pol = PolarizationState(0.4, 1.2)
    assert epc_apply(pol, EPCState()) == pol
    eff = epc_apply(pol, EPCState((0.0, 0.0, 1.2)))
    assert eff.phi == pytest.approx(0.0) and eff.theta == pytest.approx(0.4)
    eff = epc_apply(pol, EPCState((0.1, 0.3, 1.2)))
    assert z_error_prob(eff.theta, 0.01) == pytest.approx(0.01)


def test_feedback_reads_only_qbers():
    params = list(inspect.signature(FeedbackController.step).parameters)
    assert params == ["self", "qber_z", "qber_x"]
    assert list(inspect.signature(feedback_step).parameters) == ["qber_z", "qber_x", "controller"]


def test_step_shrinks_at_floor():
    cfg = Config().replace(pbs_extinction=30.0)
    trace = closed_loop(cfg, 300, np.random.default_rng(0))
    steps = [e.step_size for e in trace.controller.ledger]
    assert steps[0] == cfg.feedback.step_init
    assert min(steps[-50:]) <= 4 * cfg.feedback.step_min


def test_step_halves_after_patience_reverts():
    ctl = FeedbackController(Config().feedback, floor=0.01, rng=np.random.default_rng(0))
    ctl.step(0.012, 0.012)
    start = ctl.accepted.step_size
    # plates 0, 1 are scored on QBER_Z and plate 2 on a rising QBER_X: three reverts
    for qx in (0.013, 0.014, 0.015):
        ctl.step(0.015, qx)
    assert [e.action for e in ctl.ledger[1:]] == ["reverted"] * PATIENCE
    assert ctl.accepted.step_size == pytest.approx(start / 2)


def test_sustained_high_qber_resets_step():
    ctl = FeedbackController(Config().feedback, floor=0.01, rng=np.random.default_rng(0))
    ctl.step(0.012, 0.012)
    for qx in (0.013, 0.014, 0.015):
        ctl.step(0.015, qx)
    assert ctl.accepted.step_size < Config().feedback.step_init
    # one high window is not enough, a sustained one is
    for qz in (0.05, 0.05, 0.05, 0.05):
        ctl.step(qz, 0.05)
    assert ctl.accepted.step_size == pytest.approx(Config().feedback.step_init)


def test_kept_moves_never_increase_scored_qber():
    cfg = Config().replace(pbs_extinction=30.0, misalignment_angle0=0.3, drift_rate=0.005)
    trace = closed_loop(cfg, 2000, np.random.default_rng(1))
    kept = [e for e in trace.controller.ledger if e.action == "kept"]
    assert kept and all(e.scored <= e.baseline for e in kept)
    reverted = [e for e in trace.controller.ledger if e.action == "reverted"]
    assert all(e.scored > e.baseline for e in reverted)


@pytest.mark.parametrize("theta0", [0.0, 0.2, 0.5, math.pi / 4])
def test_converges_without_drift(theta0):
    cfg = Config().replace(pbs_extinction=30.0, misalignment_angle0=theta0, drift_rate=0.0)
    trace = closed_loop(cfg, 1000, np.random.default_rng(int(theta0 * 100)))
    floor = cfg.detector.extinction_floor
    assert trace.true_qber_z[-500:].max() < floor + 0.005


def test_feedback_disabled_keeps_plates():
    cfg = Config().replace(misalignment_angle0=0.2, enabled=False)
    trace = closed_loop(cfg, 50, np.random.default_rng(0))
    assert np.allclose(trace.true_qber_z, trace.true_qber_z[0])


def test_feedback_trace_csv(tmp_path):
    cfg = Config().replace(misalignment_angle0=0.2)
    trace = closed_loop(cfg, 20, np.random.default_rng(0))
    path = tmp_path / "fb.csv"
    write_feedback_trace(path, trace.controller.ledger)
    lines = path.read_text().splitlines()
    assert lines[0] == "window,qber_z,qber_x,plate0,plate1,plate2,step_size,action"
    assert len(lines) == 21
    assert lines[1].endswith("init")

"""Polarization drift and the trial-and-error EPC feedback loop.

The controller drives three phase plates.  Plates 0 and 1 rotate the
rectilinear frame (scored by QBER_Z), plate 2 only shifts the H/V phase
(scored by QBER_X).  Plates are treated as commuting additive phases.
The controller only ever sees the two QBER values of each window.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import Config, FeedbackParams
from .photonics import PolarizationState, x_error_prob, z_error_prob

TWO_PI = 2.0 * math.pi
# consecutive reverts before the step is halved; also the number of
# accepted-setting samples averaged for drift detection
PATIENCE = 3


@dataclass(frozen=True)
class EPCState:
    plates: tuple = (0.0, 0.0, 0.0)
    step_size: float = 0.05

    def __post_init__(self):
        if len(self.plates) != 3:
            raise ValueError("the EPC has three plates")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        object.__setattr__(self, "plates", tuple(float(p) % TWO_PI for p in self.plates))

    def moved(self, plate: int, delta: float) -> "EPCState":
        plates = list(self.plates)
        plates[plate] += delta
        return EPCState(tuple(plates), self.step_size)

    def with_step(self, step: float) -> "EPCState":
        return EPCState(self.plates, step)


def drift_step(pol: PolarizationState, dt: float, drift_rate: float, rng: np.random.Generator) -> PolarizationState:
    """Gaussian random-walk increment of both angles over ``dt`` seconds."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if drift_rate == 0:
        return pol
    sigma = drift_rate * math.sqrt(dt)
    d_theta, d_phi = rng.normal(0.0, sigma, 2)
    return PolarizationState(pol.theta + d_theta, pol.phi + d_phi)


def epc_apply(pol: PolarizationState, epc: EPCState) -> PolarizationState:
    p0, p1, p2 = epc.plates
    return PolarizationState(pol.theta - (p0 + p1), pol.phi - p2)


@dataclass
class FeedbackEntry:
    window: int
    qber_z: float
    qber_x: float
    plate: int  # plate judged in this window, -1 if none
    scored: float  # QBER that judged the trial
    baseline: float  # same QBER under the accepted setting
    action: str  # "kept", "reverted" or "init"
    plates: tuple
    step_size: float


@dataclass
class FeedbackController:
    """Round-robin perturb-and-observe controller.

    Call :meth:`step` once per measurement window with the QBERs measured
    under the plate setting returned by the previous call.
    """

    params: FeedbackParams = field(default_factory=FeedbackParams)
    floor: float = 0.01
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        self.accepted = EPCState(step_size=self.params.step_init)
        self.applied = self.accepted
        self.baseline: list[float] | None = None
        self.trial_plate = -1
        self.next_plate = 0
        self.reverts = 0
        self.window = 0
        self.history = (deque(maxlen=PATIENCE), deque(maxlen=PATIENCE))  # accepted (Z, X)
        self.ledger: list[FeedbackEntry] = []

    def step(self, qber_z: float, qber_x: float) -> EPCState:
        q = (qber_z, qber_x)
        if self.baseline is None:
            self.baseline = [qber_z, qber_x]
            self._remember()
            self._log(q, -1, math.nan, math.nan, "init")
        else:
            plate = self.trial_plate
            idx = 0 if plate < 2 else 1
            scored, base = q[idx], self.baseline[idx]
            if scored <= base:
                self.accepted = self.applied
                self.baseline[idx] = scored
                self.reverts = 0
                action = "kept"
            else:
                self.reverts += 1
                action = "reverted"
            # the other QBER is untouched by this plate: refresh its baseline
            self.baseline[1 - idx] = q[1 - idx]
            self._remember()
            self._adapt_step(float(np.mean(self.history[0])))
            self._log(q, plate, scored, base, action)
        self.window += 1
        return self._propose()

    def _remember(self) -> None:
        for hist, value in zip(self.history, self.baseline):
            hist.append(value)

    def _adapt_step(self, accepted_qber: float) -> None:
        # drift is judged on QBER_Z averaged over recent windows: a single
        # window, and the much smaller X sample, are too noisy for it
        step = self.accepted.step_size
        if accepted_qber > 2.0 * self.floor:
            # reopen the step to the misalignment the excess QBER implies
            implied = math.asin(math.sqrt(min(1.0, accepted_qber - self.floor)))
            step = max(step, min(self.params.step_init, implied))
            self.reverts = 0
        elif self.reverts >= PATIENCE:
            step = max(self.params.step_min, step / 2.0)
            self.reverts = 0
        self.accepted = self.accepted.with_step(step)

    def _propose(self) -> EPCState:
        plate = self.next_plate
        self.next_plate = (plate + 1) % 3
        sign = 1.0 if self.rng.random() < 0.5 else -1.0
        self.trial_plate = plate
        self.applied = self.accepted.moved(plate, sign * self.accepted.step_size)
        return self.applied

    def _log(self, q, plate, scored, base, action) -> None:
        self.ledger.append(
            FeedbackEntry(
                window=self.window,
                qber_z=q[0],
                qber_x=q[1],
                plate=plate,
                scored=scored,
                baseline=base,
                action=action,
                plates=self.applied.plates,
                step_size=self.accepted.step_size,
            )
        )


def feedback_step(qber_z: float, qber_x: float, controller: FeedbackController) -> EPCState:
    """Feed one window's QBERs to ``controller``; returns the plates for the next window."""
    return controller.step(qber_z, qber_x)


def write_feedback_trace(path, ledger: list[FeedbackEntry]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "qber_z", "qber_x", "plate0", "plate1", "plate2", "step_size", "action"])
        for e in ledger:
            w.writerow([e.window, f"{e.qber_z:.6f}", f"{e.qber_x:.6f}", *(f"{p:.6f}" for p in e.plates), f"{e.step_size:.6f}", e.action])


@dataclass
class LoopTrace:
    true_qber_z: np.ndarray
    true_qber_x: np.ndarray
    measured_qber_z: np.ndarray
    measured_qber_x: np.ndarray
    controller: FeedbackController


def closed_loop(
    cfg: Config,
    n_windows: int,
    rng: np.random.Generator,
    pol: PolarizationState | None = None,
    drift_rate: float | None = None,
    window_dt: float = 1.0,
    z_bits: int | None = None,
    x_bits: int | None = None,
) -> LoopTrace:
    """Run the controller against binomially sampled window QBERs.

    Each window holds ``z_bits`` sifted Z bits (one Cascade block by default)
    and ``x_bits`` X detections; the channel drifts by ``drift_rate`` over
    ``window_dt`` seconds between windows.
    """
    p = cfg.protocol
    floor = cfg.detector.extinction_floor
    pol = PolarizationState(theta=cfg.channel.misalignment_angle0) if pol is None else pol
    drift_rate = cfg.channel.drift_rate if drift_rate is None else drift_rate
    z_bits = p.n_z_ec if z_bits is None else z_bits
    if x_bits is None:
        # sifted X detections per sifted Z bit for the configured basis biases
        ratio = (p.p_x_alice * p.p_x_bob) / ((1 - p.p_x_alice) * (1 - p.p_x_bob))
        x_bits = max(1, round(z_bits * ratio))
    ctl = FeedbackController(cfg.feedback, floor, np.random.default_rng(rng.integers(2**63)))
    epc = ctl.applied
    out = np.empty((4, n_windows))
    for i in range(n_windows):
        eff = epc_apply(pol, epc)
        qz, qx = z_error_prob(eff.theta, floor), x_error_prob(eff.phi, floor)
        mz = rng.binomial(z_bits, qz) / z_bits
        mx = rng.binomial(x_bits, qx) / x_bits
        out[:, i] = qz, qx, mz, mx
        epc = ctl.step(mz, mx) if cfg.feedback.enabled else epc
        pol = drift_step(pol, window_dt, drift_rate, rng)
    return LoopTrace(out[0], out[1], out[2], out[3], ctl)

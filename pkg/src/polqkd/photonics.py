"""Quantum layer: weak coherent source, lossy fiber, passive two-detector receiver.

Two simulation paths share one physical model:

* per-pulse reference functions (:func:`alice_emit`, :func:`channel_transform`,
  :func:`bob_detect`) that step slot by slot, used at small scale and as an
  oracle in tests;
* :class:`DetectionEngine`, which jumps over empty slots with geometric
  gaps and samples the contents of the next clicking slot conditionally.

Source states are indexed ``3 * intensity + state`` with ``state`` 0 = H,
1 = V, 2 = +.  Bob's receiver routes each photon to the Z arm (time bin 0)
or the X arm (time bin 1, delayed by 800 ps) and projects it onto one of two
detectors; detector 0 reads H or +, detector 1 reads V or -.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernel
from .config import Config, DetectorParams, ProtocolParams, effective_transmittance

Z, X = 0, 1
MU1, MU2 = 0, 1
TWO_PI = 2.0 * math.pi

PULSE_DTYPE = np.dtype(
    [
        ("slot", np.int64),
        ("basis", np.uint8),
        ("bit", np.uint8),
        ("intensity", np.uint8),
        ("true_photons", np.int64),
    ]
)

EVENT_DTYPE = np.dtype(
    [
        ("slot", np.int64),
        ("basis", np.uint8),
        ("bit", np.uint8),
        ("detector", np.uint8),
        ("from_dark", np.bool_),
    ]
)


class NoDetectionsError(RuntimeError):
    """No click can ever occur with the given channel and detectors."""


@dataclass(frozen=True)
class PolarizationState:
    theta: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", self.theta % TWO_PI)
        object.__setattr__(self, "phi", self.phi % TWO_PI)


def z_error_prob(theta: float, floor: float) -> float:
    return min(1.0, math.sin(theta) ** 2 + floor)


def x_error_prob(phi: float, floor: float) -> float:
    return min(1.0, math.sin(phi / 2.0) ** 2 + floor)


def routing_table(pol: PolarizationState, det: DetectorParams, p_x_bob: float) -> np.ndarray:
    """Probability that one photon of each state lands on (detector, bin).

    Returns an array of shape ``(3, 2, 2)`` indexed ``[state, detector, bin]``.
    """
    floor = det.extinction_floor
    ez = z_error_prob(pol.theta, floor)
    ex = x_error_prob(pol.phi, floor)
    pz = 1.0 - p_x_bob
    table = np.empty((3, 2, 2))
    for bit in (0, 1):
        table[bit, bit, Z] = pz * (1.0 - ez)
        table[bit, 1 - bit, Z] = pz * ez
        table[bit, :, X] = p_x_bob / 2.0
    table[2, :, Z] = pz / 2.0
    table[2, 0, X] = p_x_bob * (1.0 - ex)
    table[2, 1, X] = p_x_bob * ex
    return table


def state_priors(params: ProtocolParams) -> np.ndarray:
    p_int = np.array([params.p_mu1, 1.0 - params.p_mu1])
    p_state = np.array([(1 - params.p_x_alice) / 2, (1 - params.p_x_alice) / 2, params.p_x_alice])
    return np.outer(p_int, p_state).ravel()


def dark_prob(det: DetectorParams, rep_rate: float) -> float:
    """Dark-count probability of one detector within one slot."""
    return min(1.0, det.dark_rate / rep_rate)


def detected_means(cfg: Config, pol: PolarizationState) -> np.ndarray:
    """Mean detected photons per (source state, detector, bin), shape (6, 2, 2)."""
    p = cfg.protocol
    lam = np.array([p.mu1, p.mu2]) * effective_transmittance(cfg.channel) * cfg.detector.efficiency
    table = routing_table(pol, cfg.detector, p.p_x_bob)
    return (lam[:, None, None, None] * table[None]).reshape(6, 2, 2)


def decode_states(states: np.ndarray):
    """Split packed source-state indices into (basis, bit, intensity)."""
    states = np.asarray(states)
    st = states % 3
    basis = np.where(st == 2, X, Z).astype(np.uint8)
    bit = np.where(st == 1, 1, 0).astype(np.uint8)
    intensity = (states // 3).astype(np.uint8)
    return basis, bit, intensity


# -- per-pulse reference path -------------------------------------------------


def alice_emit(rng: np.random.Generator, params: ProtocolParams, count: int, start_slot: int = 0) -> np.ndarray:
    """Draw ``count`` independent pulses; X-basis pulses always carry bit 0 (|+>)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = np.empty(count, dtype=PULSE_DTYPE)
    out["slot"] = np.arange(start_slot, start_slot + count)
    basis = (rng.random(count) < params.p_x_alice).astype(np.uint8)
    bits = rng.integers(0, 2, count, dtype=np.uint8)
    out["basis"] = basis
    out["bit"] = np.where(basis == X, 0, bits)
    intensity = np.where(rng.random(count) < params.p_mu1, MU1, MU2).astype(np.uint8)
    out["intensity"] = intensity
    mus = np.where(intensity == MU1, params.mu1, params.mu2)
    out["true_photons"] = rng.poisson(mus)
    return out


def channel_transform(true_photons, transmittance: float, rng: np.random.Generator):
    """Binomial thinning of the emitted photon numbers by the fiber."""
    if not 0.0 <= transmittance <= 1.0:
        raise ValueError("transmittance must lie in [0, 1]")
    return rng.binomial(true_photons, transmittance)


@dataclass
class DetectorClocks:
    """Slot index from which each detector is live again."""

    live_from: list = field(default_factory=lambda: [0, 0])

    def live(self, detector: int, slot: int) -> bool:
        return slot >= self.live_from[detector]


def dead_slots(det: DetectorParams, rep_rate: float) -> int:
    return max(1, math.ceil(det.dead_time * rep_rate - 1e-9))


def bob_detect(
    surviving: int,
    pulse,
    pol: PolarizationState,
    det: DetectorParams,
    params: ProtocolParams,
    clocks: DetectorClocks,
    rng: np.random.Generator,
):
    """Measure one slot; returns an ``EVENT_DTYPE`` record or ``None``."""
    slot = int(pulse["slot"])
    state = 2 if pulse["basis"] == X else int(pulse["bit"])
    table = routing_table(pol, det, params.p_x_bob)[state].ravel()  # det-major, bin-minor
    pd = dark_prob(det, params.rep_rate)
    hits = np.zeros((2, 2), dtype=bool)
    photon_hits = np.zeros((2, 2), dtype=bool)
    for _ in range(int(surviving)):
        if rng.random() >= det.efficiency:
            continue
        cell = rng.choice(4, p=table)
        photon_hits[cell // 2, cell % 2] = True
    hits |= photon_hits
    for j in (0, 1):
        if rng.random() < pd:
            hits[j, 0 if rng.random() < 0.5 else 1] = True

    clicks = {}
    for j in (0, 1):
        if not clocks.live(j, slot) or not hits[j].any():
            continue
        b = 0 if hits[j, 0] else 1
        clicks[j] = (b, not photon_hits[j, b])
    if not clicks:
        return None
    dead = dead_slots(det, params.rep_rate)
    for j in clicks:
        clocks.live_from[j] = slot + dead
    if len(clicks) == 2:
        if det.double_click == "discard":
            return None
        j = 0 if rng.random() < 0.5 else 1
    else:
        (j,) = clicks
    b, from_dark = clicks[j]
    return np.array((slot, b, j, j, from_dark), dtype=EVENT_DTYPE)


def simulate_slots(cfg: Config, pol: PolarizationState, n_slots: int, rng: np.random.Generator):
    """Slot-by-slot reference simulation; returns ``(pulses, events)``."""
    pulses = alice_emit(rng, cfg.protocol, n_slots)
    surviving = channel_transform(pulses["true_photons"], effective_transmittance(cfg.channel), rng)
    clocks = DetectorClocks()
    events = []
    for pulse, s in zip(pulses, surviving):
        ev = bob_detect(s, pulse, pol, cfg.detector, cfg.protocol, clocks, rng)
        if ev is not None:
            events.append(ev)
    return pulses, np.array(events, dtype=EVENT_DTYPE)


# -- skip-sampling engine ------------------------------------------------------


def skip_sample_next_detection(p: float, rng: np.random.Generator) -> int:
    """Number of slots up to and including the next one that clicks."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if p == 0.0:
        raise NoDetectionsError("no detections possible")
    return int(rng.geometric(p))


def click_table(cfg: Config, pol: PolarizationState, live=(True, True)):
    """Per-slot click statistics for each source state.

    Returns ``(single, double)`` where ``single[s, j, b]`` is the probability
    that only detector ``j`` clicks, in bin ``b``, and ``double[s]`` is the
    probability that both (live) detectors click.  Detectors not in ``live``
    never click.
    """
    means = detected_means(cfg, pol)
    pd = dark_prob(cfg.detector, cfg.protocol.rep_rate)
    a = means.sum(axis=2)
    silent = np.exp(-a) * (1 - pd)
    first_z = 1 - np.exp(-means[:, :, Z]) * (1 - pd / 2)
    first_x = np.exp(-means[:, :, Z]) * (1 - pd / 2) - silent
    first = np.stack([first_z, first_x], axis=2)
    live = np.asarray(live, dtype=bool)
    first = np.where(live[None, :, None], first, 0.0)
    silent = np.where(live[None, :], silent, 1.0)
    single = np.empty_like(first)
    single[:, 0] = first[:, 0] * silent[:, 1, None]
    single[:, 1] = first[:, 1] * silent[:, 0, None]
    double = (1 - silent[:, 0]) * (1 - silent[:, 1])
    return single, double


class DetectionEngine:
    """Stateful detection generator for one link run.

    Detector dead time is carried across calls; the polarization passed to
    :meth:`run` is held constant over that call.
    """

    def __init__(self, cfg: Config, rng: np.random.Generator, max_slot: int = 2**62):
        self.cfg = cfg
        self.rng = rng
        self.slot = 0
        self.live_from = np.zeros(2, dtype=np.int64)
        self.max_slot = max_slot
        self.n_double = 0
        self._u = np.empty(1 << 16)
        self._pos = len(self._u)
        self._dead = dead_slots(cfg.detector, cfg.protocol.rep_rate)
        self._undetected = np.array([cfg.protocol.mu1, cfg.protocol.mu2]) * (
            1 - effective_transmittance(cfg.channel) * cfg.detector.efficiency
        )

    def _tables(self, pol):
        prior = state_priors(self.cfg.protocol)
        p_eff = np.empty(3)
        post = np.empty((3, 6))
        src_prob = np.zeros((3, 6, 4))
        pd = dark_prob(self.cfg.detector, self.cfg.protocol.rep_rate)
        means = detected_means(self.cfg, pol)
        for case, live in enumerate([(True, True), (True, False), (False, True)]):
            quiet = np.ones(6)
            for j in (0, 1):
                if live[j]:
                    quiet *= np.exp(-means[:, j].sum(axis=1)) * (1 - pd)
            trig = prior * (1 - quiet)
            p_eff[case] = trig.sum()
            post[case] = np.cumsum(trig) / p_eff[case] if p_eff[case] > 0 else np.linspace(1 / 6, 1, 6)
            post[case, -1] = 1.0
            for j in (0, 1):
                if live[j]:
                    src_prob[case, :, 2 * j] = -np.expm1(-means[:, j].sum(axis=1))
                    src_prob[case, :, 2 * j + 1] = pd
        # P(source i fires | none before, at least one from i on)
        log_quiet = np.log1p(-np.minimum(src_prob, 1 - 1e-300))
        tail = -np.expm1(np.cumsum(log_quiet[..., ::-1], axis=-1)[..., ::-1])
        with np.errstate(divide="ignore", invalid="ignore"):
            src_cond = np.where(tail > 0, src_prob / tail, 0.0)
        return p_eff, post, src_prob, src_cond, means

    def run_raw(self, pol: PolarizationState, n_events: int, buffers=None):
        """Advance by up to ``n_events`` clicks into raw kernel buffers.

        ``buffers`` is ``(slot, state, photons, basis, detector, from_dark)``;
        returns ``(n, buffers)``.
        """
        if buffers is None:
            buffers = tuple(np.empty(n_events, dtype=dt) for dt in (np.int64,) * 5 + (np.bool_,))
        p_eff, post, src_prob, src_cond, means = self._tables(pol)
        n = 0
        while n < n_events:
            if self._pos + _kernel.MAX_DRAWS > len(self._u):
                self.rng.random(out=self._u)
                self._pos = 0
            got, self.slot, n_double, status, self._pos = _kernel.run_kernel(
                self._u,
                self._pos,
                self.slot,
                self.live_from,
                self._dead,
                self.max_slot,
                n_events - n,
                p_eff,
                post,
                src_prob,
                src_cond,
                means,
                self._undetected,
                self.cfg.detector.double_click == "random",
                *(buf[n:] for buf in buffers),
            )
            n += got
            self.n_double += n_double
            if status == _kernel.NO_DETECTIONS:
                raise NoDetectionsError("no detections possible")
            if status == _kernel.SLOT_LIMIT:
                break
        return n, buffers

    def run(self, pol: PolarizationState, n_events: int):
        """Generate the next ``n_events`` detections.

        Returns ``(records, events)``: Alice's ``PULSE_DTYPE`` records for the
        clicking slots (with oracle photon numbers) and Bob's events.
        Raises :class:`NoDetectionsError` when no click is possible.
        """
        n, (out_slot, out_state, out_photons, out_basis, out_det, out_dark) = self.run_raw(pol, n_events)
        records = np.empty(n, dtype=PULSE_DTYPE)
        records["slot"] = out_slot[:n]
        basis, bit, intensity = decode_states(out_state[:n])
        records["basis"] = basis
        records["bit"] = bit
        records["intensity"] = intensity
        records["true_photons"] = out_photons[:n]
        events = np.empty(n, dtype=EVENT_DTYPE)
        events["slot"] = out_slot[:n]
        events["basis"] = out_basis[:n]
        events["bit"] = out_det[:n]
        events["detector"] = out_det[:n]
        events["from_dark"] = out_dark[:n]
        return records, events

    def run_until(self, pol: PolarizationState, end_slot: int):
        """Generate all detections in slots ``[self.slot, end_slot)``."""
        saved = self.max_slot
        self.max_slot = min(saved, end_slot)
        chunks = []
        try:
            while self.slot < self.max_slot:
                chunks.append(self.run(pol, 65536))
        finally:
            self.max_slot = saved
        if not chunks:
            return np.empty(0, PULSE_DTYPE), np.empty(0, EVENT_DTYPE)
        return np.concatenate([c[0] for c in chunks]), np.concatenate([c[1] for c in chunks])


def write_trace(path, records: np.ndarray, events: np.ndarray) -> None:
    """CSV event trace; columns prefixed ``oracle_`` are simulator ground truth."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slot", "basis", "bit_sent", "intensity", "bit_measured", "detector", "oracle_from_dark", "oracle_true_photons", "alice_basis"])
        for rec, ev in zip(records, events):
            w.writerow(
                [
                    int(ev["slot"]),
                    "ZX"[ev["basis"]],
                    int(rec["bit"]),
                    "mu1" if rec["intensity"] == MU1 else "mu2",
                    int(ev["bit"]),
                    f"D{int(ev['detector'])}",
                    int(ev["from_dark"]),
                    int(rec["true_photons"]),
                    "ZX"[rec["basis"]],
                ]
            )

"""Alice and Bob endpoints and session orchestration.

A session collects detections in announcement rounds, reconciles
``n_z_ec``-bit blocks with Cascade until ``n_z_pa / n_z_ec`` blocks have
verified, bounds the key, and hashes it down.  Alice and Bob run as two
threads that share nothing but the link and the quantum channel.
"""

from __future__ import annotations

import json
import math
import queue
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import _kernel
from ..cascade import MIN_HASH_BITS, binary_entropy, ParityResponder, cascade_correct, default_passes, verification_hash_bits, verify_tag
from ..config import Config
from ..finitekey import F_EC_MODEL, FiniteKeyBounds, IntensityTallies, compute_bounds, model_polarization
from ..photonics import X, Z, DetectionEngine, NoDetectionsError, PolarizationState, write_trace
from ..polfeedback import EPCState, FeedbackController, drift_step, epc_apply, write_feedback_trace
from ..privamp import ToeplitzSeed, toeplitz_hash
from ..sift import SiftError, answer_announcement, Announcement
from . import wire
from .transport import TRANSPORTS, Endpoint, Tap, TransportError
from .wire import LinkMessage, MsgType, StatsBody

# verification failures tolerated per session before aborting
MAX_FAILED_BLOCKS = 5
# announcement rounds are sized with this margin over the expected Z yield
ROUND_MARGIN = 1.02


class SessionAborted(RuntimeError):
    pass


@dataclass
class SessionReport:
    distance: float
    skr: float
    qber_z: float
    qber_x: float
    l_total: int
    blocks_failed: int
    slots_sent: int
    leak: int
    mu1: float
    mu2: float
    p_mu1: float
    bounds: FiniteKeyBounds | None = None
    aborted: bool = False
    cause: str = ""

    def to_json(self) -> str:
        data = asdict(self)
        return json.dumps(data, sort_keys=True, default=float)


@dataclass
class SessionResult:
    report: SessionReport
    alice_key: np.ndarray
    bob_key: np.ndarray
    tap: Tap | None = None
    feedback: FeedbackController | None = None


class QuantumChannel:
    """Source, fiber and receiver shared by the two endpoints.

    Bob pulls detections; the matching pulse records are queued for Alice
    before Bob sees his events.  Bob also owns the EPC at his input.
    """

    def __init__(self, cfg: Config, rng: np.random.Generator, trace: bool = False):
        self.cfg = cfg
        self.engine = DetectionEngine(cfg, rng)
        self.rng = rng
        self.pol = PolarizationState(theta=cfg.channel.misalignment_angle0)
        self.epc = EPCState(step_size=cfg.feedback.step_init)
        self.to_alice: queue.Queue = queue.Queue()
        self.trace = [] if trace else None

    def set_epc(self, epc: EPCState) -> None:
        self.epc = epc

    def detect(self, n_events: int):
        start = self.engine.slot
        records, events = self.engine.run(epc_apply(self.pol, self.epc), n_events)
        end = self.engine.slot
        if end > start and self.cfg.channel.drift_rate > 0:
            self.pol = drift_step(self.pol, (end - start) / self.cfg.protocol.rep_rate, self.cfg.channel.drift_rate, self.rng)
        if self.trace is not None:
            self.trace.append((records, events))
        self.to_alice.put((records, end))
        return events, end


def _tallies_body(**kw) -> StatsBody:
    base = dict(n_z=(0, 0), n_x=(0, 0), m_x=(0, 0), m_z_total=0, leak=0, blocks_failed=0, slots_sent=0)
    base.update(kw)
    return StatsBody(**base)


def _check_efficiency(tallies: IntensityTallies, parity_bits: int, cfg: Config) -> None:
    """Abort when reconciliation disclosed more than ``f_ec_cap`` times the Shannon limit."""
    n = float(tallies.n_z.sum())
    limit = n * binary_entropy(tallies.m_z_total / n) if n else 0.0
    if limit > 0 and parity_bits > cfg.protocol.f_ec_cap * limit:
        raise SessionAborted(f"reconciliation efficiency {parity_bits / limit:.3f} above cap {cfg.protocol.f_ec_cap}")


def _key_length(tallies: IntensityTallies, leak: int, cfg: Config):
    bounds = compute_bounds(tallies, leak, cfg.protocol, cfg.security)
    bounds.l = min(bounds.l, cfg.protocol.n_z_pa)
    return bounds


class _Side:
    def __init__(self, cfg: Config, link: Endpoint, rng: np.random.Generator):
        self.cfg = cfg
        self.link = link
        self.rng = rng
        self.n = cfg.protocol.n_z_ec
        self.k = cfg.protocol.blocks_per_pa
        self.hash_bits = max(MIN_HASH_BITS, verification_hash_bits(cfg.security.eps_cor))

    def expect(self, *types: MsgType) -> LinkMessage:
        msg = self.link.recv()
        if msg.type == MsgType.ABORT:
            raise SessionAborted(msg.payload.decode(errors="replace") or "peer aborted")
        if msg.type not in types:
            raise SessionAborted(f"desynchronized: got {msg.type.name}, expected {'/'.join(t.name for t in types)}")
        return msg

    def abort(self, cause: str) -> None:
        try:
            self.link.send(LinkMessage(MsgType.ABORT, cause.encode()))
        except TransportError:
            pass


class Alice(_Side):
    def __init__(self, cfg, link, rng, channel: QuantumChannel):
        super().__init__(cfg, link, rng)
        self.channel = channel
        self.raw = np.empty(0, np.uint8)
        self.raw_int = np.empty(0, np.uint8)
        self.n_x = np.zeros(2, np.int64)
        self.m_x = np.zeros(2, np.int64)
        self.key_blocks: list[np.ndarray] = []
        self.n_z = np.zeros(2, np.int64)
        self.blocks: dict[int, tuple] = {}
        self.next_block = 0
        self.parity_bits = 0
        self.failed = 0
        self.slots_sent = 0
        self.secret = np.empty(0, np.uint8)
        self.bounds: FiniteKeyBounds | None = None

    def _records_until(self, covered: int) -> np.ndarray:
        chunks = []
        while self.slots_sent < covered:
            try:
                records, end = self.channel.to_alice.get(timeout=self.link.timeout)
            except queue.Empty:
                raise SessionAborted("desynchronized: announced slots were never emitted") from None
            chunks.append(records)
            self.slots_sent = end
        if self.slots_sent != covered:
            raise SessionAborted("desynchronized: announcement does not end on a batch boundary")
        return np.concatenate(chunks) if chunks else np.empty(0, _records_dtype())

    def _on_announce(self, payload: bytes) -> None:
        covered, slots, bases, x_out = wire.decode_announce(payload)
        records = self._records_until(covered)
        try:
            reply = answer_announcement(Announcement(slots, bases.astype(np.uint8), x_out), records)
        except SiftError as exc:
            raise SessionAborted(f"desynchronized: {exc}") from exc
        self.link.send(LinkMessage(MsgType.SIFT_REPLY, wire.encode_sift_reply(reply.keep, reply.x_intensity)))
        if len(slots) == 0:
            return
        rec = records[np.searchsorted(records["slot"], slots)]
        z = reply.keep & (bases == Z)
        self.raw = np.concatenate([self.raw, rec["bit"][z]])
        self.raw_int = np.concatenate([self.raw_int, rec["intensity"][z]])
        x_kept = x_out[reply.keep[bases == X]]
        self.n_x += np.bincount(reply.x_intensity, minlength=2)[:2]
        self.m_x += np.bincount(reply.x_intensity[x_kept == 1], minlength=2)[:2]

    def _block(self, b: int):
        if b == self.next_block:
            if len(self.raw) < self.n:
                raise SessionAborted(f"desynchronized: block {b} requested before {self.n} bits were sifted")
            self.blocks = {b: (self.raw[: self.n], self.raw_int[: self.n], None)}
            self.raw, self.raw_int = self.raw[self.n :], self.raw_int[self.n :]
            self.next_block += 1
        if b not in self.blocks:
            raise SessionAborted(f"desynchronized: unknown block {b}")
        return self.blocks[b]

    def _on_parity(self, payload: bytes) -> None:
        b, seed, passes, ranges = wire.decode_parity_req(payload)
        bits, ints, responder = self._block(b)
        if responder is None:
            responder = ParityResponder(bits, seed, passes)
            self.blocks[b] = (bits, ints, responder)
        if np.any(ranges[:, 0] >= passes) or np.any(ranges[:, 1] < 0) or np.any(ranges[:, 2] > self.n) or np.any(ranges[:, 1] >= ranges[:, 2]):
            raise SessionAborted("malformed parity request")
        answer = responder.answer(ranges)
        self.link.send(LinkMessage(MsgType.PARITY_RESP, wire.encode_parity_resp(b, answer)))

    def _on_verify(self, payload: bytes) -> None:
        b, seed, tag = wire.decode_verify(payload)
        bits, ints, responder = self._block(b)
        ok = bool(np.array_equal(verify_tag(bits, seed, len(tag)), tag))
        self.link.send(LinkMessage(MsgType.VERIFY_ACK, wire.encode_verify_ack(b, ok)))
        if ok:
            self.key_blocks.append(bits)
            self.n_z += np.bincount(ints, minlength=2)[:2]
            self.parity_bits += responder.disclosed if responder is not None else 0
        else:
            self.failed += 1

    def run(self) -> None:
        handlers = {
            MsgType.BASIS_ANNOUNCE: self._on_announce,
            MsgType.PARITY_REQ: self._on_parity,
            MsgType.VERIFY: self._on_verify,
        }
        while True:
            msg = self.expect(*handlers, MsgType.SESSION_STATS)
            if msg.type == MsgType.SESSION_STATS:
                self._finish(wire.decode_stats(msg.payload))
                return
            handlers[msg.type](msg.payload)

    def _finish(self, bob: StatsBody) -> None:
        leak = self.parity_bits + len(self.key_blocks) * self.hash_bits
        mine = _tallies_body(
            n_z=tuple(int(v) for v in self.n_z),
            n_x=tuple(int(v) for v in self.n_x),
            m_x=tuple(int(v) for v in self.m_x),
            leak=leak,
            blocks_failed=self.failed,
            slots_sent=self.slots_sent,
        )
        self.link.send(LinkMessage(MsgType.SESSION_STATS, wire.encode_stats(mine)))
        if (bob.leak, bob.n_x, bob.m_x, bob.blocks_failed, bob.slots_sent) != (leak, mine.n_x, mine.m_x, self.failed, self.slots_sent):
            raise SessionAborted("desynchronized: session statistics disagree")
        tallies = IntensityTallies(self.n_z, self.n_x, self.m_x, bob.m_z_total)
        _check_efficiency(tallies, self.parity_bits, self.cfg)
        self.bounds = _key_length(tallies, leak, self.cfg)
        key = np.concatenate(self.key_blocks)
        l = self.bounds.l
        prng_seed = int(self.rng.integers(0, 2**63))
        seed = ToeplitzSeed.from_prng(prng_seed, 0, len(key), l)
        self.link.send(LinkMessage(MsgType.PA_SEED, wire.encode_pa_seed(l, prng_seed, 0, seed.bits)))
        self.secret = toeplitz_hash(key, seed, l)


def _records_dtype():
    from ..photonics import PULSE_DTYPE

    return PULSE_DTYPE


class Bob(_Side):
    def __init__(self, cfg, link, rng, channel: QuantumChannel):
        super().__init__(cfg, link, rng)
        self.channel = channel
        p = cfg.protocol
        self.z_yield = (1 - p.p_x_alice) * (1 - p.p_x_bob)
        self.raw = np.empty(0, np.uint8)
        self.n_x = np.zeros(2, np.int64)
        self.m_x = np.zeros(2, np.int64)
        self.win_x = np.zeros(2, np.int64)  # (detections, errors) since last feedback window
        self.key_blocks: list[np.ndarray] = []
        self.m_z = 0
        self.leak = 0
        self.metered_parity_bits = 0
        self.failed = 0
        self.qbers: list[float] = []
        self.slots_sent = 0
        self.ctl = FeedbackController(cfg.feedback, cfg.detector.extinction_floor, np.random.default_rng(rng.integers(2**63)))
        self.channel.set_epc(self.ctl.applied)
        self.secret = np.empty(0, np.uint8)
        self.bounds: FiniteKeyBounds | None = None

    def _collect_round(self) -> None:
        need = self.n - len(self.raw)
        n_events = max(64, math.ceil(need / self.z_yield * ROUND_MARGIN))
        try:
            events, covered = self.channel.detect(n_events)
        except NoDetectionsError:
            raise SessionAborted("no detections") from None
        self.slots_sent = covered
        bases = events["basis"]
        x_out = events["bit"][bases == X]
        self.link.send(LinkMessage(MsgType.BASIS_ANNOUNCE, wire.encode_announce(covered, events["slot"], bases, x_out)))
        keep, x_int = wire.decode_sift_reply(self.expect(MsgType.SIFT_REPLY).payload)
        if len(keep) != len(events) or len(x_int) != int(keep[bases == X].sum()):
            raise SessionAborted("desynchronized: sift reply does not match announcement")
        self.raw = np.concatenate([self.raw, events["bit"][keep & (bases == Z)]])
        kept_x = x_out[keep[bases == X]]
        n_x = np.bincount(x_int, minlength=2)[:2]
        m_x = np.bincount(x_int[kept_x == 1], minlength=2)[:2]
        self.n_x += n_x
        self.m_x += m_x
        self.win_x += (n_x.sum(), m_x.sum())

    def _reconcile(self, b: int, block: np.ndarray):
        perm_seed = int(self.rng.integers(0, 2**63))
        schedule = self.cfg.protocol.cascade_schedule
        passes = default_passes(schedule)

        def ask(ranges):
            self.link.send(LinkMessage(MsgType.PARITY_REQ, wire.encode_parity_req(b, perm_seed, passes, ranges)))
            rb, bits = wire.decode_parity_resp(self.expect(MsgType.PARITY_RESP).payload)
            if rb != b or len(bits) != len(ranges):
                raise SessionAborted("desynchronized: parity response mismatch")
            self.metered_parity_bits += len(bits)
            return bits

        q = float(np.mean(self.qbers)) if self.qbers else self.cfg.protocol.q_prior
        q = min(max(q, 1e-3), 0.25)
        return cascade_correct(block, ask, q, perm_seed, passes, schedule)

    def run(self) -> None:
        b = 0
        while len(self.key_blocks) < self.k:
            while len(self.raw) < self.n:
                self._collect_round()
            block, self.raw = self.raw[: self.n], self.raw[self.n :]
            res = self._reconcile(b, block)
            hash_seed = int(self.rng.integers(0, 2**63))
            tag = verify_tag(res.corrected_bits, hash_seed, self.hash_bits)
            self.link.send(LinkMessage(MsgType.VERIFY, wire.encode_verify(b, hash_seed, tag)))
            ab, ok = wire.decode_verify_ack(self.expect(MsgType.VERIFY_ACK).payload)
            if ab != b:
                raise SessionAborted("desynchronized: verification ack for the wrong block")
            if ok:
                self.key_blocks.append(res.corrected_bits)
                self.m_z += res.corrections
                self.leak += res.leaked_bits + self.hash_bits
                self.qbers.append(res.qber_estimate)
            else:
                self.failed += 1
                if self.failed > MAX_FAILED_BLOCKS:
                    raise SessionAborted("verification failure budget exceeded")
            self._feedback(res.qber_estimate)
            b += 1
        self._finish()

    def _feedback(self, qber_z: float) -> None:
        if not self.cfg.feedback.enabled:
            return
        qber_x = self.win_x[1] / self.win_x[0] if self.win_x[0] else 0.0
        self.win_x[:] = 0
        self.channel.set_epc(self.ctl.step(qber_z, float(qber_x)))

    def _finish(self) -> None:
        mine = _tallies_body(
            n_x=tuple(int(v) for v in self.n_x),
            m_x=tuple(int(v) for v in self.m_x),
            m_z_total=self.m_z,
            leak=self.leak,
            blocks_failed=self.failed,
            slots_sent=self.slots_sent,
        )
        self.link.send(LinkMessage(MsgType.SESSION_STATS, wire.encode_stats(mine)))
        alice = wire.decode_stats(self.expect(MsgType.SESSION_STATS).payload)
        if (alice.leak, alice.n_x, alice.m_x) != (self.leak, mine.n_x, mine.m_x):
            raise SessionAborted("desynchronized: session statistics disagree")
        tallies = IntensityTallies(alice.n_z, self.n_x, self.m_x, self.m_z)
        _check_efficiency(tallies, self.leak - len(self.key_blocks) * self.hash_bits, self.cfg)
        self.bounds = _key_length(tallies, self.leak, self.cfg)
        l, _, _, seed_bits = wire.decode_pa_seed(self.expect(MsgType.PA_SEED).payload)
        key = np.concatenate(self.key_blocks)
        if l != self.bounds.l or len(seed_bits) != len(key) + l - 1 and l > 0:
            raise SessionAborted("desynchronized: privacy amplification parameters disagree")
        self.secret = toeplitz_hash(key, ToeplitzSeed(seed_bits), l)


def _run_side(side: _Side, errors: dict, name: str) -> None:
    try:
        side.run()
    except SessionAborted as exc:
        errors[name] = str(exc)
        side.abort(str(exc))
    except (TransportError, wire.FrameError) as exc:
        errors[name] = f"transport failure: {exc}"
        side.abort(errors[name])
    except Exception as exc:  # noqa: BLE001 - reported as an abort cause
        errors[name] = f"internal error: {exc!r}"
        side.abort(errors[name])


def run_session(
    cfg: Config,
    seed: int,
    transport: str = "queue",
    tap: Tap | None = None,
    trace_path=None,
    feedback_trace_path=None,
) -> SessionResult:
    """Run one complete key session between two endpoint threads."""
    ch_ss, a_ss, b_ss = np.random.SeedSequence(seed).spawn(3)
    channel = QuantumChannel(cfg, np.random.default_rng(ch_ss), trace=trace_path is not None)
    a_link, b_link = TRANSPORTS[transport](tap)
    alice = Alice(cfg, a_link, np.random.default_rng(a_ss), channel)
    bob = Bob(cfg, b_link, np.random.default_rng(b_ss), channel)
    errors: dict[str, str] = {}
    thread = threading.Thread(target=_run_side, args=(alice, errors, "alice"), daemon=True)
    thread.start()
    _run_side(bob, errors, "bob")
    thread.join()
    a_link.close()
    b_link.close()

    if trace_path is not None and channel.trace:
        recs = np.concatenate([r for r, _ in channel.trace])
        evs = np.concatenate([e for _, e in channel.trace])
        write_trace(trace_path, recs, evs)
    if feedback_trace_path is not None:
        write_feedback_trace(feedback_trace_path, bob.ctl.ledger)

    p = cfg.protocol
    verified = len(bob.key_blocks)
    slots = bob.slots_sent
    aborted = bool(errors)
    l = 0 if aborted or bob.bounds is None else bob.bounds.l
    report = SessionReport(
        distance=cfg.channel.fiber_length,
        skr=l / (slots / p.rep_rate) if slots else 0.0,
        qber_z=bob.m_z / (verified * p.n_z_ec) if verified else 0.0,
        qber_x=float(bob.m_x.sum() / bob.n_x.sum()) if bob.n_x.sum() else 0.0,
        l_total=l,
        blocks_failed=bob.failed,
        slots_sent=slots,
        leak=bob.leak,
        mu1=p.mu1,
        mu2=p.mu2,
        p_mu1=p.p_mu1,
        bounds=bob.bounds,
        aborted=aborted,
        cause=errors.get("bob") or errors.get("alice") or "",
    )
    empty = np.empty(0, np.uint8)
    return SessionResult(
        report,
        empty if aborted else alice.secret,
        empty if aborted else bob.secret,
        tap,
        bob.ctl,
    )


# -- statistics-only sessions -------------------------------------------------------


@dataclass
class CollectedStats:
    """Tallies of one PA block plus simulator ground truth."""

    tallies: IntensityTallies
    truth: dict = field(default_factory=dict)
    slots_sent: int = 0
    bounds: FiniteKeyBounds | None = None


_CHUNK = 1 << 18


def collect_statistics(cfg: Config, seed: int, pol: PolarizationState | None = None) -> CollectedStats:
    """Collection and sifting of one PA block without the classical exchange.

    The polarization is held at the feedback-locked setting and Z errors
    are counted from ground truth, which is what a verified Cascade run
    reports.  The key length charges the analytic reconciliation leak.
    """
    p = cfg.protocol
    pol = model_polarization(cfg) if pol is None else pol
    engine = DetectionEngine(cfg, np.random.default_rng(seed))
    acc = np.zeros(_kernel.N_TALLY, dtype=np.int64)
    buffers = None
    slots = 0
    while True:
        try:
            n, buffers = engine.run_raw(pol, _CHUNK, buffers)
        except NoDetectionsError:
            raise SessionAborted("no detections") from None
        slot, state, photons, basis, det, _ = buffers
        idx = _kernel.tally_events(n, state, photons, basis, det, p.n_z_pa, acc)
        if idx >= 0:
            slots = int(slot[idx]) + 1
            break
    n_z = acc[0:2]
    n_x = acc[2:4]
    m_z = acc[4:6]
    m_x = acc[6:8]
    tallies = IntensityTallies(n_z, n_x, m_x, int(m_z.sum()))
    q = tallies.m_z_total / p.n_z_pa
    lam = F_EC_MODEL * p.n_z_pa * binary_entropy(q) + p.blocks_per_pa * MIN_HASH_BITS
    truth = {
        "z0": int(acc[_kernel.T_Z0]),
        "z1": int(acc[_kernel.T_Z1]),
        "x0": int(acc[_kernel.T_X0]),
        "x1": int(acc[_kernel.T_X1]),
        "x1_err": int(acc[_kernel.T_X1_ERR]),
        "z1_err": int(acc[_kernel.T_Z1_ERR]),
        "mismatch": int(acc[_kernel.T_MISMATCH]),
    }
    return CollectedStats(tallies, truth, slots, _key_length(tallies, lam, cfg))

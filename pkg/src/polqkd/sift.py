"""Basis reconciliation.

Bob announces the slot and time-bin basis of every detection, plus the
outcome of X-basis detections (the X basis carries no key).  Alice answers
keep/discard per entry and, for kept X entries, her intensity label.  Z-basis
bit values never appear in either message.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .photonics import X, Z


class SiftError(RuntimeError):
    """Announcement refers to a slot Alice has no record of, or is malformed."""


def _zeros():
    return np.zeros((2, 2), dtype=np.int64)


@dataclass
class SiftedStats:
    """Per-(basis, intensity) tallies and the Z-basis raw key buffers.

    ``m[Z]`` is filled from the simulator's ground truth and is for reporting
    only; the protocol learns Z errors from Cascade.
    """

    n: np.ndarray = field(default_factory=_zeros)
    m: np.ndarray = field(default_factory=_zeros)
    raw_key_alice: np.ndarray = field(default_factory=lambda: np.empty(0, np.uint8))
    raw_key_bob: np.ndarray = field(default_factory=lambda: np.empty(0, np.uint8))
    z_intensity: np.ndarray = field(default_factory=lambda: np.empty(0, np.uint8))
    slots_sent: int = 0
    discarded: int = 0

    def merge(self, other: "SiftedStats") -> None:
        self.n += other.n
        self.m += other.m
        self.raw_key_alice = np.concatenate([self.raw_key_alice, other.raw_key_alice])
        self.raw_key_bob = np.concatenate([self.raw_key_bob, other.raw_key_bob])
        self.z_intensity = np.concatenate([self.z_intensity, other.z_intensity])
        self.slots_sent = max(self.slots_sent, other.slots_sent)
        self.discarded += other.discarded

    @property
    def total(self) -> int:
        return int(self.n.sum()) + self.discarded


def match_records(records: np.ndarray, slots: np.ndarray) -> np.ndarray:
    """Index into ``records`` (sorted by slot) for each announced slot."""
    idx = np.searchsorted(records["slot"], slots)
    ok = idx < len(records)
    ok[ok] = records["slot"][idx[ok]] == slots[ok]
    if not ok.all():
        bad = int(slots[~ok][0])
        raise SiftError(f"no record for announced slot {bad} (desynchronized)")
    return idx


def sift(records: np.ndarray, events: np.ndarray, slots_sent: int = 0) -> SiftedStats:
    """Sift Bob's events against Alice's records (oracle-side, one pass)."""
    stats = SiftedStats(slots_sent=slots_sent)
    if len(events) == 0:
        return stats
    rec = records[match_records(records, events["slot"])]
    keep = rec["basis"] == events["basis"]
    stats.discarded = int((~keep).sum())
    for b in (Z, X):
        sel = keep & (events["basis"] == b)
        wrong = rec["bit"][sel] != events["bit"][sel]
        inten = rec["intensity"][sel]
        stats.n[b] = np.bincount(inten, minlength=2)[:2]
        stats.m[b] = np.bincount(inten[wrong], minlength=2)[:2]
    zsel = keep & (events["basis"] == Z)
    stats.raw_key_alice = rec["bit"][zsel].astype(np.uint8)
    stats.raw_key_bob = events["bit"][zsel].astype(np.uint8)
    stats.z_intensity = rec["intensity"][zsel].astype(np.uint8)
    return stats


@dataclass
class Announcement:
    """Bob to Alice: detections in slot order, X outcomes for X entries only."""

    slots: np.ndarray
    bases: np.ndarray
    x_outcomes: np.ndarray  # one bit per X-basis entry, in order


@dataclass
class SiftReply:
    """Alice to Bob: keep flags, and intensity labels for kept X entries."""

    keep: np.ndarray
    x_intensity: np.ndarray  # one label per kept X entry, in order


def make_announcement(events: np.ndarray) -> Announcement:
    xs = events["basis"] == X
    return Announcement(
        slots=events["slot"].astype(np.int64),
        bases=events["basis"].astype(np.uint8),
        x_outcomes=events["bit"][xs].astype(np.uint8),
    )


def answer_announcement(ann: Announcement, records: np.ndarray) -> SiftReply:
    if len(ann.slots) != len(ann.bases) or len(ann.x_outcomes) != int((ann.bases == X).sum()):
        raise SiftError("malformed announcement")
    if len(ann.slots) and np.any(np.diff(ann.slots) <= 0):
        raise SiftError("announced slots not strictly increasing")
    if len(ann.slots) == 0:
        return SiftReply(keep=np.zeros(0, bool), x_intensity=np.zeros(0, np.uint8))
    rec = records[match_records(records, ann.slots)]
    keep = rec["basis"] == ann.bases
    x_keep = keep & (ann.bases == X)
    return SiftReply(keep=keep, x_intensity=rec["intensity"][x_keep].astype(np.uint8))


def basis_announcement_roundtrip(events: np.ndarray, records: np.ndarray):
    """Bob's announcement for ``events`` and Alice's reply to it."""
    ann = make_announcement(events)
    return ann, answer_announcement(ann, records)


def x_tallies(ann: Announcement, reply: SiftReply):
    """``(n_x, m_x)`` per intensity, computable by either party.

    Alice only ever prepares |+> in X, so a |-> outcome is an error.
    """
    x_entries = ann.bases == X
    kept_x = reply.keep[x_entries]
    outcomes = ann.x_outcomes[kept_x]
    labels = reply.x_intensity
    n_x = np.bincount(labels, minlength=2)[:2].astype(np.int64)
    m_x = np.bincount(labels[outcomes == 1], minlength=2)[:2].astype(np.int64)
    return n_x, m_x


def oracle_photon_tallies(records: np.ndarray, events: np.ndarray) -> dict:
    """Ground-truth counts of sifted detections by emitted photon number.

    Keys: ``z0``/``z1`` vacuum and single-photon Z detections, ``x1`` and
    ``x1_err`` single-photon X detections and their errors.
    """
    rec = records[match_records(records, events["slot"])]
    keep = rec["basis"] == events["basis"]
    z = keep & (events["basis"] == Z)
    x = keep & (events["basis"] == X)
    photons = rec["true_photons"]
    x_err = x & (events["bit"] == 1)
    return {
        "z0": int((z & (photons == 0)).sum()),
        "z1": int((z & (photons == 1)).sum()),
        "x0": int((x & (photons == 0)).sum()),
        "x1": int((x & (photons == 1)).sum()),
        "x1_err": int((x_err & (photons == 1)).sum()),
        "z1_err": int((z & (photons == 1) & (rec["bit"] != events["bit"])).sum()),
    }


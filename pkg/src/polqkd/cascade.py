"""Cascade error correction with exact disclosure accounting.

Bob drives the protocol.  He asks for the parities of index ranges of
Alice's (pass-permuted) block through a callable ``ask(ranges)`` and never
sends parities of his own, so the leak is exactly the number of parity bits
Alice returns.  Parities already disclosed, or implied by disclosed ones,
are cached and never requested twice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

N_PASSES = 16
CLASSIC_PASSES = 4
MIN_HASH_BITS = 64


def binary_entropy(x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary entropy undefined for {x!r}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


@dataclass
class ECBlockResult:
    corrected_bits: np.ndarray
    leaked_bits: int
    qber_estimate: float
    passes: int
    corrections: int
    rounds: int


def initial_block_size(q: float, n: int, schedule: str = "optimized") -> int:
    if schedule == "classic":
        k1 = math.ceil(0.73 / q)
    else:
        k1 = 2 ** math.ceil(math.log2(1.0 / q))
    return int(min(max(k1, 8), n // 2))


def pass_block_sizes(q: float, n: int, passes: int = N_PASSES, schedule: str = "optimized") -> list[int]:
    """Top-level block size of every pass.

    ``classic``: ``ceil(0.73/q)`` doubling each pass.  ``optimized``: a
    power-of-two first block near ``1/q``, doubled once, then half-key blocks
    for all remaining passes; the cheap half-key passes mop up the even
    error patterns the first two passes leave behind.
    """
    if schedule not in ("classic", "optimized"):
        raise ValueError(f"unknown Cascade schedule {schedule!r}")
    k1 = initial_block_size(q, n, schedule)
    if schedule == "classic":
        return [min(k1 << p, n // 2) for p in range(passes)]
    return [min(k1 << p, n // 2) if p < 2 else n // 2 for p in range(passes)]


def pass_permutations(n: int, seed: int, passes: int = N_PASSES) -> list[np.ndarray]:
    """Pass 1 keeps the natural order; later passes shuffle from a public seed."""
    rng = np.random.default_rng(seed)
    perms = [np.arange(n)]
    for _ in range(passes - 1):
        perms.append(rng.permutation(n))
    return perms


class ParityResponder:
    """Alice's side: answers range-parity requests on her fixed block."""

    def __init__(self, block: np.ndarray, seed: int, passes: int = N_PASSES):
        self.n = len(block)
        self._prefix = []
        for perm in pass_permutations(self.n, seed, passes):
            acc = np.zeros(self.n + 1, dtype=np.uint8)
            np.bitwise_xor.accumulate(block[perm], out=acc[1:])
            self._prefix.append(acc)
        self.disclosed = 0

    def answer(self, ranges: np.ndarray) -> np.ndarray:
        """Parities for rows ``(pass, start, end)`` of ``ranges``."""
        ranges = np.asarray(ranges, dtype=np.int64).reshape(-1, 3)
        out = np.empty(len(ranges), dtype=np.uint8)
        for p in np.unique(ranges[:, 0]):
            sel = ranges[:, 0] == p
            pre = self._prefix[int(p)]
            out[sel] = pre[ranges[sel, 2]] ^ pre[ranges[sel, 1]]
        self.disclosed += len(ranges)
        return out


AskFn = Callable[[np.ndarray], np.ndarray]


class _BobState:
    def __init__(self, bob_block, sizes, perms, ask):
        self.bits = np.array(bob_block, dtype=np.uint8)
        self.n = len(self.bits)
        self.sizes = sizes
        self.perms = perms
        self.inv = [np.argsort(p) for p in perms]
        self.views = [self.bits[p] for p in perms]
        self.ask_fn = ask
        self.known: dict[tuple[int, int, int], int] = {}
        self.diff: dict[int, np.ndarray] = {}
        self.leaked = 0
        self.rounds = 0
        self.corrections = 0

    def ask(self, keys: list[tuple[int, int, int]]) -> None:
        todo = sorted({k for k in keys if k not in self.known})
        if not todo:
            return
        bits = np.asarray(self.ask_fn(np.array(todo, dtype=np.int64)), dtype=np.uint8)
        if len(bits) != len(todo):
            raise RuntimeError("parity channel returned the wrong number of bits")
        self.leaked += len(todo)
        self.rounds += 1
        for k, b in zip(todo, bits):
            self.known[k] = int(b)

    def bob_parity(self, p: int, s: int, e: int) -> int:
        return int(self.views[p][s:e].sum() & 1)

    def open_pass(self, p: int, total_parity: int | None) -> int:
        k = self.sizes[p]
        starts = list(range(0, self.n, k))
        keys = [(p, s, min(s + k, self.n)) for s in starts]
        if total_parity is None:
            self.ask(keys)
        else:
            self.ask(keys[:-1])
            rest = 0
            for key in keys[:-1]:
                rest ^= self.known[key]
            self.known[keys[-1]] = total_parity ^ rest
        alice = np.array([self.known[key] for key in keys], dtype=np.uint8)
        bob = np.add.reduceat(self.views[p], starts) & 1
        self.diff[p] = (alice ^ bob).astype(np.uint8)
        total = 0
        for a in alice:
            total ^= int(a)
        return total

    def search(self, p: int, blocks: np.ndarray) -> list[int]:
        """Binary-search the odd blocks of pass ``p`` in lockstep."""
        k = self.sizes[p]
        active = []
        for b in blocks:
            s = int(b) * k
            e = min(s + k, self.n)
            active.append((s, e, self.known[(p, s, e)]))
        found = []
        while active:
            self.ask([(p, s, s + (e - s) // 2) for s, e, _ in active])
            nxt = []
            for s, e, par in active:
                m = s + (e - s) // 2
                left = self.known[(p, s, m)]
                right = par ^ left
                self.known.setdefault((p, m, e), right)
                if left != self.bob_parity(p, s, m):
                    s, e, par = s, m, left
                else:
                    s, e, par = m, e, right
                if e - s == 1:
                    found.append(int(self.perms[p][s]))
                else:
                    nxt.append((s, e, par))
            active = nxt
        return found

    def flip(self, i: int) -> None:
        self.bits[i] ^= 1
        self.corrections += 1
        for p, view in enumerate(self.views):
            pos = self.inv[p][i]
            view[pos] ^= 1
            if p in self.diff:
                self.diff[p][pos // self.sizes[p]] ^= 1

    def settle(self) -> None:
        """Search odd blocks, smallest block size first, until all are even."""
        while True:
            odd_pass = next((p for p in sorted(self.diff) if self.diff[p].any()), None)
            if odd_pass is None:
                return
            for i in self.search(odd_pass, np.flatnonzero(self.diff[odd_pass])):
                self.flip(i)


def cascade_correct(
    bob_block: np.ndarray,
    ask: AskFn,
    q_initial: float,
    seed: int,
    passes: int | None = None,
    schedule: str = "optimized",
) -> ECBlockResult:
    """Correct ``bob_block`` towards Alice's block.

    ``ask`` maps an ``(m, 3)`` array of ``(pass, start, end)`` ranges in the
    pass-permuted index space to Alice's parities.  ``seed`` fixes the public
    pass permutations and must match Alice's :class:`ParityResponder`.
    """
    n = len(bob_block)
    if not 0.0 < q_initial < 0.5:
        raise ValueError("q_initial must lie in (0, 0.5)")
    if passes is None:
        passes = default_passes(schedule)
    sizes = pass_block_sizes(q_initial, n, passes, schedule)
    state = _BobState(bob_block, sizes, pass_permutations(n, seed, passes), ask)
    total = None
    for p in range(passes):
        parity = state.open_pass(p, total)
        if total is None:
            total = parity
        state.settle()
    return ECBlockResult(
        corrected_bits=state.bits,
        leaked_bits=state.leaked,
        qber_estimate=state.corrections / n,
        passes=passes,
        corrections=state.corrections,
        rounds=state.rounds,
    )


def default_passes(schedule: str) -> int:
    return CLASSIC_PASSES if schedule == "classic" else N_PASSES


def reconcile(
    alice_block: np.ndarray,
    bob_block: np.ndarray,
    q_initial: float,
    seed: int,
    schedule: str = "optimized",
) -> ECBlockResult:
    """In-process Cascade between two local blocks."""
    if len(alice_block) != len(bob_block):
        raise ValueError("blocks must have equal length")
    passes = default_passes(schedule)
    responder = ParityResponder(np.asarray(alice_block, dtype=np.uint8), seed, passes)
    return cascade_correct(bob_block, responder.answer, q_initial, seed, passes, schedule)


def verification_hash_bits(eps_cor: float) -> int:
    """Hash length needed for correctness ``eps_cor``; at least 64 bits are used."""
    required = math.ceil(math.log2(1.0 / eps_cor))
    return required


def verify_tag(block: np.ndarray, seed: int, n_bits: int) -> np.ndarray:
    """Toeplitz hash of ``block`` under the public seed ``seed``."""
    from .privamp import ToeplitzSeed, toeplitz_hash

    return toeplitz_hash(block, ToeplitzSeed.from_prng(seed, 0, len(block), n_bits), n_bits)


def verify_block(alice_block: np.ndarray, bob_block: np.ndarray, seed: int, eps_cor: float = 1e-15):
    """Compare 2-universal hashes of both blocks; returns ``(passed, hash_bits)``."""
    n_bits = max(MIN_HASH_BITS, verification_hash_bits(eps_cor))
    ok = np.array_equal(verify_tag(alice_block, seed, n_bits), verify_tag(bob_block, seed, n_bits))
    return ok, n_bits


def leak_ledger_total(results, hash_bits: int = MIN_HASH_BITS) -> int:
    """Total disclosed bits: every parity plus one verification hash per block."""
    return sum(r.leaked_bits + hash_bits for r in results)


def efficiency(leaked: int, n: int, q: float) -> float:
    return leaked / (n * binary_entropy(q))

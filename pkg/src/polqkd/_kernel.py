"""Compiled event loop for the skip-sampling detection engine.

Slot contents are sampled conditionally on at least one live detector
clicking, so empty slots and slots seen only by a dead detector are jumped
over in a single geometric draw.  Randomness comes from a caller-filled
buffer of uniforms, so the caller's generator fully determines a run.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# live-set cases
BOTH, ONLY_D0, ONLY_D1 = 0, 1, 2

# kernel exit status
OK, NO_DETECTIONS, SLOT_LIMIT, NEED_UNIFORMS = 0, 1, 2, 3

# uniforms that one loop iteration may consume at most
MAX_DRAWS = 512
# photon numbers are truncated here (unreachable at the intensities used)
MAX_PHOTONS = 200


@njit(cache=True)
def _poisson(u, a, e):
    # inverse CDF with e = exp(-a); cheap for the small means met here
    pmf = e
    cdf = pmf
    n = 0
    while u > cdf and n < MAX_PHOTONS:
        n += 1
        pmf *= a / n
        cdf += pmf
    return n


@njit(cache=True)
def _truncated_poisson(u, a, e):
    # Poisson(a) conditioned on >= 1, by inverse CDF over the non-zero mass
    w = u * (1.0 - e)
    n = 1
    pmf = a * e
    while w > pmf and n < MAX_PHOTONS:
        w -= pmf
        n += 1
        pmf *= a / n
    return n


@njit(cache=True)
def run_kernel(
    u,
    pos,
    start_slot,
    live_from,
    dead_slots,
    max_slot,
    n_target,
    p_eff,
    post_cdf,
    src_prob,
    src_cond,
    means,
    undetected,
    random_double,
    out_slot,
    out_state,
    out_photons,
    out_basis,
    out_det,
    out_dark,
):
    """Advance the simulation until ``n_target`` events are recorded.

    ``u`` holds uniforms in [0, 1) consumed from index ``pos``.
    ``means[s, j, b]`` is the mean number of detected photons reaching
    detector ``j`` in time bin ``b`` for source state ``s`` (intensity-major,
    three polarization states per intensity).  ``src_prob[case, s, i]`` is
    the firing probability of source ``i`` (photons on D0, dark on D0,
    photons on D1, dark on D1; zero for dead detectors) and ``src_cond`` the
    same probability conditioned on no earlier source having fired but at
    least one remaining source firing.  Returns
    ``(n_events, next_slot, n_double, status, pos)``; ``live_from`` is
    updated in place.  ``NEED_UNIFORMS`` asks for a refilled buffer.
    """
    log_q = np.empty(3)
    for c in range(3):
        log_q[c] = np.log1p(-p_eff[c]) if p_eff[c] < 1.0 else -np.inf
    # per (state, detector): total detected mean, its exp(-a) and the Z-bin share
    a_tot = np.empty((6, 2))
    e_tot = np.empty((6, 2))
    z_frac = np.empty((6, 2))
    for s_ in range(6):
        for j in range(2):
            a = means[s_, j, 0] + means[s_, j, 1]
            a_tot[s_, j] = a
            e_tot[s_, j] = np.exp(-a)
            z_frac[s_, j] = means[s_, j, 0] / a if a > 0 else 0.0
    e_und = np.exp(-undetected)
    n_u = len(u)
    slot = start_slot
    n = 0
    n_double = 0
    status = OK
    photons = np.zeros(2, dtype=np.int64)
    z_hit = np.zeros(2, dtype=np.bool_)
    x_hit = np.zeros(2, dtype=np.bool_)
    dark_bin = np.full(2, -1, dtype=np.int64)
    while n < n_target:
        if slot >= max_slot:
            status = SLOT_LIMIT
            break
        if pos + MAX_DRAWS > n_u:
            status = NEED_UNIFORMS
            break
        live0 = slot >= live_from[0]
        live1 = slot >= live_from[1]
        if not live0 and not live1:
            slot = min(live_from[0], live_from[1])
            continue
        if live0 and live1:
            case = BOTH
        elif live0:
            case = ONLY_D0
        else:
            case = ONLY_D1
        p = p_eff[case]
        if p <= 0.0:
            if case == BOTH:
                status = NO_DETECTIONS
                break
            slot = live_from[1] if case == ONLY_D0 else live_from[0]
            continue
        if p >= 1.0:
            gap = 1
        else:
            gap = 1 + int(np.floor(np.log(1.0 - u[pos]) / log_q[case]))
        pos += 1
        ev = slot + gap - 1
        if case != BOTH:
            revive = live_from[1] if case == ONLY_D0 else live_from[0]
            if ev >= revive:
                slot = revive
                continue
        if ev >= max_slot:
            slot = max_slot
            continue

        r = u[pos]
        pos += 1
        s = 0
        while s < 5 and post_cdf[case, s] <= r:
            s += 1
        k = s // 3

        # independent sources on the live detectors, conditioned on >= 1 firing
        for j in range(2):
            photons[j] = 0
            z_hit[j] = False
            x_hit[j] = False
            dark_bin[j] = -1
        found = False
        for i in range(4):
            p_src = src_prob[case, s, i]
            if p_src <= 0.0:
                continue
            r = u[pos]
            pos += 1
            if found:
                fire = r < p_src
            else:
                fire = r < src_cond[case, s, i]
            if not fire:
                continue
            j = i // 2
            if i % 2 == 0:
                if found:
                    photons[j] = _poisson(u[pos], a_tot[s, j], e_tot[s, j])
                else:
                    photons[j] = _truncated_poisson(u[pos], a_tot[s, j], e_tot[s, j])
                pos += 1
            else:
                dark_bin[j] = 0 if u[pos] < 0.5 else 1
                pos += 1
            found = True
        for j in range(2):
            live = live0 if j == 0 else live1
            if not live:
                photons[j] = _poisson(u[pos], a_tot[s, j], e_tot[s, j])
                pos += 1
            elif photons[j] > 0:
                frac = z_frac[s, j]
                nz = 0
                for _ in range(photons[j]):
                    if u[pos] < frac:
                        nz += 1
                    pos += 1
                z_hit[j] = nz > 0
                x_hit[j] = nz < photons[j]

        click0 = -1
        click1 = -1
        dark0 = False
        dark1 = False
        for j in range(2):
            live = live0 if j == 0 else live1
            if not live:
                continue
            if z_hit[j] or dark_bin[j] == 0:
                b = 0
                from_dark = not z_hit[j]
            elif x_hit[j] or dark_bin[j] == 1:
                b = 1
                from_dark = not x_hit[j]
            else:
                continue
            if j == 0:
                click0 = b
                dark0 = from_dark
            else:
                click1 = b
                dark1 = from_dark

        total = photons[0] + photons[1] + _poisson(u[pos], undetected[k], e_und[k])
        pos += 1
        det = -1
        if click0 >= 0 and click1 >= 0:
            n_double += 1
            live_from[0] = ev + dead_slots
            live_from[1] = ev + dead_slots
            if random_double:
                det = 0 if u[pos] < 0.5 else 1
                pos += 1
        elif click0 >= 0:
            det = 0
            live_from[0] = ev + dead_slots
        elif click1 >= 0:
            det = 1
            live_from[1] = ev + dead_slots
        if det >= 0:
            out_slot[n] = ev
            out_state[n] = s
            out_photons[n] = total
            out_basis[n] = click0 if det == 0 else click1
            out_det[n] = det
            out_dark[n] = dark0 if det == 0 else dark1
            n += 1
        slot = ev + 1
    return n, slot, n_double, status, pos


# tally slots: n[basis, intensity] at 2*b+k, m[basis, intensity] at 4+2*b+k,
# then oracle counts of sifted detections by emitted photon number
T_Z0, T_Z1, T_X0, T_X1, T_X1_ERR, T_Z1_ERR, T_MISMATCH = 8, 9, 10, 11, 12, 13, 14
N_TALLY = 15


@njit(cache=True)
def tally_events(n, out_state, out_photons, out_basis, out_det, z_target, acc):
    """Sift ``n`` raw events into ``acc``; stop once ``z_target`` Z bits are kept.

    Returns the index of the event that completed the target, or -1.
    """
    for i in range(n):
        s = out_state[i]
        st = s % 3
        k = s // 3
        a_basis = 1 if st == 2 else 0
        b = out_basis[i]
        if a_basis != b:
            acc[T_MISMATCH] += 1
            continue
        bit = out_det[i]
        sent = 1 if st == 1 else 0
        err = 1 if bit != sent else 0
        acc[2 * b + k] += 1
        acc[4 + 2 * b + k] += err
        ph = out_photons[i]
        if b == 0:
            if ph == 0:
                acc[T_Z0] += 1
            elif ph == 1:
                acc[T_Z1] += 1
                acc[T_Z1_ERR] += err
            if acc[0] + acc[1] >= z_target:
                return i
        else:
            if ph == 0:
                acc[T_X0] += 1
            elif ph == 1:
                acc[T_X1] += 1
                acc[T_X1_ERR] += err
    return -1

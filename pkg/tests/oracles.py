"""Independent arbitrary-precision re-implementation of the key-length chain.

Written directly from the bound formulas with mpmath and no package code, so
it can serve as an oracle for :mod:`polqkd.finitekey`.
"""

from __future__ import annotations

from mpmath import mp, mpf, exp, log, sqrt, pi, floor

mp.dps = 60


def h2(x):
    x = mpf(x)
    if x <= 0 or x >= 1:
        return mpf(0)
    return -x * log(x, 2) - (1 - x) * log(1 - x, 2)


def taus(mu1, mu2, p1):
    mu1, mu2, p1 = mpf(mu1), mpf(mu2), mpf(p1)
    p2 = 1 - p1
    t0 = p1 * exp(-mu1) + p2 * exp(-mu2)
    t1 = p1 * mu1 * exp(-mu1) + p2 * mu2 * exp(-mu2)
    return t0, t1


def delta(n, eps):
    return sqrt(mpf(n) / 2 * log(1 / mpf(eps)))


def _pm(counts, d, mu1, mu2, p1):
    """n^- and n^+ per intensity, each rescaled by e^mu / p_mu."""
    out = []
    for c, mu, p in ((counts[0], mu1, p1), (counts[1], mu2, 1 - p1)):
        c = mpf(c)
        lo = c - d if c - d > 0 else mpf(0)
        out.append((exp(mu) / p * lo, exp(mu) / p * (c + d)))
    return out


def _s0_low(counts, eps, mu1, mu2, p1):
    t0, _ = taus(mu1, mu2, p1)
    (l1, h1), (l2, h2_) = _pm(counts, delta(sum(map(mpf, counts)), eps), mu1, mu2, p1)
    v = t0 * (mu1 * l2 - mu2 * h1) / (mu1 - mu2)
    return v if v > 0 else mpf(0)


def _s1_low(counts, eps, s0_high, mu1, mu2, p1):
    t0, t1 = taus(mu1, mu2, p1)
    (l1, h1), (l2, h2_) = _pm(counts, delta(sum(map(mpf, counts)), eps), mu1, mu2, p1)
    br = l2 - mu2**2 / mu1**2 * h1 - (mu1**2 - mu2**2) / mu1**2 * (s0_high / t0)
    v = t1 * mu1 / (mu2 * (mu1 - mu2)) * br
    return v if v > 0 else mpf(0)


def _high(errors, total, eps):
    e = sum(map(mpf, errors)) if isinstance(errors, (list, tuple)) else mpf(errors)
    v = 2 * (e + delta(e, eps))
    return min(v, mpf(total))


def _gamma(eps, lam, n, m):
    if n <= 0 or m <= 0 or lam <= 0 or lam >= 1:
        return mpf(0)
    var = lam * (1 - lam)
    arg = (n + m) / (2 * pi * n * m * var * mpf(eps) ** 2)
    if arg <= 1:
        return mpf(0)
    return sqrt((n + m) * var / (n * m) * log(arg))


def key_length(n_z, n_x, m_x, m_z, lam_ec, mu1, mu2, p1, eps_sec, eps_cor):
    """Return ``(l, intermediates)`` evaluated at high precision."""
    mu1, mu2, p1 = mpf(mu1), mpf(mu2), mpf(p1)
    eps = mpf(eps_sec) / 7
    _, t1 = taus(mu1, mu2, p1)
    nz_tot = mpf(n_z[0]) + mpf(n_z[1])
    nx_tot = mpf(n_x[0]) + mpf(n_x[1])
    s_z0_low = _s0_low(n_z, eps, mu1, mu2, p1)
    s_z0_high = max(_high(m_z, nz_tot, eps), s_z0_low)
    s_z1_low = _s1_low(n_z, eps, s_z0_high, mu1, mu2, p1)
    s_x0_low = _s0_low(n_x, eps, mu1, mu2, p1)
    s_x0_high = max(_high(list(m_x), nx_tot, eps), s_x0_low)
    s_x1_low = _s1_low(n_x, eps, s_x0_high, mu1, mu2, p1)
    (ml1, mh1), (ml2, mh2) = _pm(m_x, delta(mpf(m_x[0]) + mpf(m_x[1]), eps), mu1, mu2, p1)
    v = t1 * (mh1 - ml2) / (mu1 - mu2)
    v = min(max(v, mpf(0)), s_x1_low)
    if s_x1_low <= 0:
        phi = mpf("0.5")
    else:
        ratio = v / s_x1_low
        phi = ratio + _gamma(eps, ratio, s_z1_low, s_x1_low)
        phi = min(max(phi, mpf(0)), mpf("0.5"))
    raw = s_z0_low + s_z1_low * (1 - h2(phi)) - mpf(lam_ec) - 4 * log(7 / mpf(eps_sec), 2) - log(1 / mpf(eps_cor), 2)
    l = int(floor(raw)) if raw > 0 else 0
    return l, {
        "s_z0_low": s_z0_low,
        "s_z0_high": s_z0_high,
        "s_z1_low": s_z1_low,
        "s_x1_low": s_x1_low,
        "v_x1_high": v,
        "phi_z_high": phi,
        "raw": raw,
    }


def eq1(s_z0, s_z1, phi, lam, eps_sec, eps_cor):
    """The key-length formula alone, from given bounds."""
    raw = mpf(s_z0) + mpf(s_z1) * (1 - h2(phi)) - mpf(lam) - 4 * log(7 / mpf(eps_sec), 2) - log(1 / mpf(eps_cor), 2)
    return raw

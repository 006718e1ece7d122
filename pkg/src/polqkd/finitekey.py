"""One-decoy finite-key analysis and the analytic secret-key-rate model.

All counts are handled as reals; only the final key length is floored.
Every Hoeffding interval and the random-sampling correction draw on the same
per-term failure budget ``eps_sec / 7``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .cascade import MIN_HASH_BITS, binary_entropy
from .config import Config, ProtocolParams, SecurityParams
from .photonics import X, Z, PolarizationState, click_table, dead_slots, state_priors

EPS_TERMS = 7
# reconciliation efficiency assumed by the analytic model
F_EC_MODEL = 1.06


def _pair():
    return np.zeros(2)


@dataclass
class IntensityTallies:
    """Sifted counts per intensity (index 0 = mu1, 1 = mu2)."""

    n_z: np.ndarray = field(default_factory=_pair)
    n_x: np.ndarray = field(default_factory=_pair)
    m_x: np.ndarray = field(default_factory=_pair)
    m_z_total: float = 0.0

    def __post_init__(self):
        self.n_z = np.asarray(self.n_z, dtype=float)
        self.n_x = np.asarray(self.n_x, dtype=float)
        self.m_x = np.asarray(self.m_x, dtype=float)
        self.m_z_total = float(self.m_z_total)
        if self.n_z.shape != (2,) or self.n_x.shape != (2,) or self.m_x.shape != (2,):
            raise ValueError("tallies need one entry per intensity")
        counts = np.concatenate([self.n_z, self.n_x, self.m_x, [self.m_z_total]])
        if np.any(counts < 0):
            raise ValueError("tallies must be non-negative")
        if np.any(self.m_x > self.n_x) or self.m_z_total > self.n_z.sum():
            raise ValueError("error counts exceed detection counts")

    @classmethod
    def from_dict(cls, data: dict) -> "IntensityTallies":
        return cls(data["n_z"], data["n_x"], data["m_x"], data.get("m_z_total", 0.0))

    def to_dict(self) -> dict:
        return {
            "n_z": self.n_z.tolist(),
            "n_x": self.n_x.tolist(),
            "m_x": self.m_x.tolist(),
            "m_z_total": self.m_z_total,
        }


@dataclass
class FiniteKeyBounds:
    s_z0_low: float
    s_z0_high: float
    s_z1_low: float
    s_x0_low: float
    s_x1_low: float
    v_x1_high: float
    phi_z_high: float
    tau0: float
    tau1: float
    lambda_ec: float = 0.0
    l: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def tau(n: int, mu1: float, mu2: float, p_mu1: float) -> float:
    """Probability that the source emits exactly ``n`` photons."""
    if n not in (0, 1):
        raise ValueError("only n = 0 and n = 1 are used")
    total = 0.0
    for mu, p in ((mu1, p_mu1), (mu2, 1.0 - p_mu1)):
        total += p * math.exp(-mu) * mu**n / math.factorial(n)
    return total


def hoeffding_delta(n: float, eps: float) -> float:
    if n < 0 or not 0 < eps < 1:
        raise ValueError("need n >= 0 and 0 < eps < 1")
    return math.sqrt(n / 2.0 * math.log(1.0 / eps))


def _check_intensities(p: ProtocolParams) -> None:
    if p.mu1 == p.mu2:
        raise ValueError("degenerate intensities: mu1 == mu2")


def _scaled(counts: np.ndarray, delta: float, p: ProtocolParams):
    """``(lower, upper)`` Hoeffding bounds rescaled by ``e^mu / p_mu``."""
    mus = np.array([p.mu1, p.mu2])
    probs = np.array([p.p_mu1, 1.0 - p.p_mu1])
    scale = np.exp(mus) / probs
    low = scale * np.maximum(counts - delta, 0.0)
    high = scale * (counts + delta)
    return low, high


def _vacuum_low(counts, delta, p: ProtocolParams) -> float:
    low, high = _scaled(counts, delta, p)
    t0 = tau(0, p.mu1, p.mu2, p.p_mu1)
    return max(0.0, t0 * (p.mu1 * low[1] - p.mu2 * high[0]) / (p.mu1 - p.mu2))


def _single_low(counts, delta, s0_high, p: ProtocolParams) -> float:
    low, high = _scaled(counts, delta, p)
    mu1, mu2 = p.mu1, p.mu2
    t0 = tau(0, mu1, mu2, p.p_mu1)
    t1 = tau(1, mu1, mu2, p.p_mu1)
    bracket = low[1] - (mu2**2 / mu1**2) * high[0] - ((mu1**2 - mu2**2) / mu1**2) * (s0_high / t0)
    return max(0.0, t1 * mu1 / (mu2 * (mu1 - mu2)) * bracket)


def vacuum_bounds(t: IntensityTallies, p: ProtocolParams, eps: float):
    """``(s_z0_low, s_z0_high)``.

    The upper bound charges every Z error to the vacuum component, which
    errs with probability one half.
    """
    _check_intensities(p)
    n_total = t.n_z.sum()
    low = _vacuum_low(t.n_z, hoeffding_delta(n_total, eps), p)
    high = 2.0 * (t.m_z_total + hoeffding_delta(t.m_z_total, eps))
    high = min(high, n_total)
    return low, max(high, low)


def single_photon_bound(t: IntensityTallies, s_z0_high: float, p: ProtocolParams, eps: float, basis: int = Z) -> float:
    """Lower bound on single-photon detections in ``basis``."""
    _check_intensities(p)
    counts = t.n_z if basis == Z else t.n_x
    return _single_low(counts, hoeffding_delta(counts.sum(), eps), s_z0_high, p)


def x_vacuum_bounds(t: IntensityTallies, p: ProtocolParams, eps: float):
    _check_intensities(p)
    n_total = t.n_x.sum()
    m_total = t.m_x.sum()
    low = _vacuum_low(t.n_x, hoeffding_delta(n_total, eps), p)
    high = min(2.0 * (m_total + hoeffding_delta(m_total, eps)), n_total)
    return low, max(high, low)


def single_photon_errors_high(t: IntensityTallies, s_x1_low: float, p: ProtocolParams, eps: float) -> float:
    """Upper bound on X-basis errors caused by single photons."""
    _check_intensities(p)
    low, high = _scaled(t.m_x, hoeffding_delta(t.m_x.sum(), eps), p)
    t1 = tau(1, p.mu1, p.mu2, p.p_mu1)
    v = t1 * (high[0] - low[1]) / (p.mu1 - p.mu2)
    return float(min(max(v, 0.0), s_x1_low))


def gamma(eps: float, lam: float, n: float, m: float) -> float:
    """Random-sampling correction for inferring an error rate across bases."""
    if n <= 0 or m <= 0 or lam <= 0 or lam >= 1:
        return 0.0
    var = lam * (1 - lam)
    arg = (n + m) / (2 * math.pi * n * m * var * eps**2)
    if arg <= 1:
        return 0.0
    return math.sqrt((n + m) * var / (n * m) * math.log(arg))


def phase_error_bound(s_x1_low: float, v_x1_high: float, s_z1_low: float, eps: float) -> float:
    if s_x1_low <= 0:
        return 0.5
    ratio = v_x1_high / s_x1_low
    phi = ratio + gamma(eps, ratio, s_z1_low, s_x1_low)
    return min(max(phi, 0.0), 0.5)


def key_length_penalty(sec: SecurityParams) -> float:
    return 4 * math.log2(EPS_TERMS / sec.eps_sec) + math.log2(1 / sec.eps_cor)


def secret_key_length(bounds: FiniteKeyBounds, lambda_ec: float, sec: SecurityParams) -> int:
    raw = (
        bounds.s_z0_low
        + bounds.s_z1_low * (1 - binary_entropy(bounds.phi_z_high))
        - lambda_ec
        - key_length_penalty(sec)
    )
    return max(0, math.floor(raw))


def compute_bounds(t: IntensityTallies, lambda_ec: float, p: ProtocolParams, sec: SecurityParams) -> FiniteKeyBounds:
    """Run every bound for one privacy-amplification block and size the key."""
    eps = sec.eps_sec / EPS_TERMS
    s_z0_low, s_z0_high = vacuum_bounds(t, p, eps)
    s_z1_low = single_photon_bound(t, s_z0_high, p, eps, Z)
    s_x0_low, s_x0_high = x_vacuum_bounds(t, p, eps)
    s_x1_low = single_photon_bound(t, s_x0_high, p, eps, X)
    v_x1_high = single_photon_errors_high(t, s_x1_low, p, eps)
    phi = phase_error_bound(s_x1_low, v_x1_high, s_z1_low, eps)
    bounds = FiniteKeyBounds(
        s_z0_low=float(s_z0_low),
        s_z0_high=float(s_z0_high),
        s_z1_low=float(s_z1_low),
        s_x0_low=float(s_x0_low),
        s_x1_low=float(s_x1_low),
        v_x1_high=float(v_x1_high),
        phi_z_high=float(phi),
        tau0=tau(0, p.mu1, p.mu2, p.p_mu1),
        tau1=tau(1, p.mu1, p.mu2, p.p_mu1),
        lambda_ec=float(lambda_ec),
    )
    bounds.l = secret_key_length(bounds, lambda_ec, sec)
    return bounds


# -- analytic rate model --------------------------------------------------------


@dataclass
class ExpectedRun:
    """Expected statistics of one privacy-amplification block."""

    tallies: IntensityTallies
    slots: float
    qber_z: float
    qber_x: float
    lambda_ec: float
    bounds: FiniteKeyBounds
    skr: float


def model_polarization(cfg: Config) -> PolarizationState:
    # an active feedback loop holds the frames aligned on average
    if cfg.feedback.enabled:
        return PolarizationState()
    return PolarizationState(theta=cfg.channel.misalignment_angle0)


def expected_run(cfg: Config, pol: PolarizationState | None = None) -> ExpectedRun | None:
    """Expected tallies for one PA block, or ``None`` if nothing is ever detected."""
    p = cfg.protocol
    pol = model_polarization(cfg) if pol is None else pol
    prior = state_priors(p)
    single, double = click_table(cfg, pol)
    if float(prior @ (single.sum(axis=(1, 2)) + double)) <= 0:
        return None
    # non-paralyzable dead time per detector: live fraction 1 / (1 + r_j * D)
    dead = dead_slots(cfg.detector, p.rep_rate) if cfg.detector.dead_time > 0 else 0
    alone = [click_table(cfg, pol, live=(j == 0, j == 1))[0] for j in (0, 1)]
    fire = np.array([prior @ alone[j][:, j].sum(axis=1) for j in (0, 1)])
    live = 1.0 / (1.0 + fire * dead)
    # recorded singles: both detectors live, or only the clicking one is
    eff = live[0] * live[1] * single
    for j in (0, 1):
        eff[:, j] += live[j] * (1.0 - live[1 - j]) * alone[j][:, j]
    single = eff

    w = prior.reshape(2, 3)
    s = single.reshape(2, 3, 2, 2)
    # Z: states H (bit 0) and V (bit 1); detector j reads bit j
    nz = w[:, 0] * s[:, 0, :, Z].sum(axis=1) + w[:, 1] * s[:, 1, :, Z].sum(axis=1)
    mz = w[:, 0] * s[:, 0, 1, Z] + w[:, 1] * s[:, 1, 0, Z]
    nx = w[:, 2] * s[:, 2, :, X].sum(axis=1)
    mx = w[:, 2] * s[:, 2, 1, X]
    if nz.sum() <= 0:
        return None
    slots = p.n_z_pa / nz.sum()
    tallies = IntensityTallies(nz * slots, nx * slots, mx * slots, mz.sum() * slots)
    qz = float(mz.sum() / nz.sum())
    qx = float(mx.sum() / nx.sum()) if nx.sum() > 0 else 0.0
    lam = F_EC_MODEL * p.n_z_pa * binary_entropy(qz) + p.blocks_per_pa * MIN_HASH_BITS
    bounds = compute_bounds(tallies, lam, p, cfg.security)
    skr = bounds.l / (slots / p.rep_rate)
    return ExpectedRun(tallies, float(slots), qz, qx, lam, bounds, float(skr))


def expected_rate_model(cfg: Config, pol: PolarizationState | None = None) -> float:
    """Expected secret-key rate in bits per second of source time."""
    run = expected_run(cfg, pol)
    return 0.0 if run is None else run.skr


@dataclass
class OptimumResult:
    mu1: float
    mu2: float
    p_mu1: float
    skr: float


MU1_GRID = np.linspace(0.05, 0.9, 18)
P_GRID = np.linspace(0.1, 0.95, 18)
MU2_FRACTIONS = np.linspace(0.05, 0.95, 10)


def _rate_at(cfg: Config, mu1: float, mu2: float, p_mu1: float) -> float:
    if not (0.0 < mu2 < mu1 <= 1.5 and 0.0 < p_mu1 < 1.0):
        return 0.0
    trial = cfg.replace(mu1=float(mu1), mu2=float(mu2), p_mu1=float(p_mu1))
    return expected_rate_model(trial)


def optimize_params(distance: float, cfg: Config) -> OptimumResult:
    """Maximize the analytic rate over ``(mu1, mu2, p_mu1)`` at ``distance`` km.

    A fixed grid (``mu2`` expressed as a fraction of ``mu1``) seeds a
    Nelder-Mead refinement; the result is deterministic.
    """
    base = cfg.replace(fiber_length=float(distance))
    best = (0.0, cfg.protocol.mu1, cfg.protocol.mu2, cfg.protocol.p_mu1)
    for mu1 in MU1_GRID:
        for frac in MU2_FRACTIONS:
            mu2 = max(0.01, frac * mu1)
            if mu2 >= mu1:
                continue
            for p_mu1 in P_GRID:
                r = _rate_at(base, mu1, mu2, p_mu1)
                if r > best[0]:
                    best = (r, mu1, mu2, p_mu1)
    if best[0] <= 0:
        return OptimumResult(best[1], best[2], best[3], 0.0)

    def objective(x):
        return -_rate_at(base, *x)

    res = minimize(
        objective,
        np.array(best[1:]),
        method="Nelder-Mead",
        options={"xatol": 1e-4, "fatol": 1e-3, "maxiter": 400},
    )
    if -res.fun > best[0]:
        mu1, mu2, p_mu1 = (float(v) for v in res.x)
        return OptimumResult(mu1, mu2, p_mu1, float(-res.fun))
    return OptimumResult(*map(float, best[1:]), float(best[0]))

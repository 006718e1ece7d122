"""Protocol, channel, detector and security parameters.

Every other module reads its knobs from a :class:`Config`.  The JSON form is
flat: each key names a field of exactly one parameter group, and absent keys
fall back to the defaults below.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from typing import Any


class ConfigError(ValueError):
    """Raised for malformed or invalid configuration input."""


@dataclass(frozen=True)
class ProtocolParams:
    rep_rate: float = 625e6
    mu1: float = 0.33
    mu2: float = 0.14
    p_mu1: float = 0.75
    p_x_alice: float = 0.125
    p_x_bob: float = 0.5
    n_z_ec: int = 8192
    n_z_pa: int = 8_192_000
    # session-wide reconciliation efficiency above which a session aborts
    f_ec_cap: float = 1.5
    # QBER prior used to size the first Cascade pass of a session
    q_prior: float = 0.03
    # Cascade block-size schedule, "optimized" or "classic"
    cascade_schedule: str = "optimized"

    def validate(self) -> None:
        _check(self.rep_rate > 0, "rep_rate", "rep_rate > 0")
        _check(self.mu2 > 0, "mu2", "mu2 > 0 violated")
        _check(self.mu1 > self.mu2, "mu1", "mu1 > mu2 violated")
        for name in ("p_mu1", "p_x_alice", "p_x_bob"):
            value = getattr(self, name)
            _check(0 < value < 1, name, f"0 < {name} < 1 violated")
        _check(self.n_z_ec >= 16, "n_z_ec", "n_z_ec >= 16 violated")
        _check(
            self.n_z_pa >= self.n_z_ec and self.n_z_pa % self.n_z_ec == 0,
            "n_z_pa",
            "n_z_pa must be a positive multiple of n_z_ec",
        )
        _check(self.f_ec_cap >= 1, "f_ec_cap", "f_ec_cap >= 1 violated")
        _check(0 < self.q_prior < 0.5, "q_prior", "0 < q_prior < 0.5 violated")
        _check(
            self.cascade_schedule in ("optimized", "classic"),
            "cascade_schedule",
            "cascade_schedule must be 'optimized' or 'classic'",
        )

    @property
    def blocks_per_pa(self) -> int:
        return self.n_z_pa // self.n_z_ec


@dataclass(frozen=True)
class ChannelParams:
    fiber_length: float = 0.0
    attenuation: float = 0.2
    extra_loss: float = 9.8
    misalignment_angle0: float = 0.0
    drift_rate: float = 0.0

    def validate(self) -> None:
        _check(self.fiber_length >= 0, "fiber_length", "fiber_length >= 0 violated")
        _check(self.attenuation >= 0, "attenuation", "attenuation >= 0 violated")
        _check(self.extra_loss >= 0, "extra_loss", "extra_loss >= 0 violated")
        _check(self.drift_rate >= 0, "drift_rate", "drift_rate >= 0 violated")


@dataclass(frozen=True)
class DetectorParams:
    efficiency: float = 0.25
    dark_rate: float = 10.0
    dead_time: float = 30e-6
    pbs_extinction: float = 20.0
    # "discard" drops slots where both detectors click, "random" keeps one
    double_click: str = "discard"

    def validate(self) -> None:
        _check(0 <= self.efficiency <= 1, "efficiency", "0 <= efficiency <= 1 violated")
        _check(self.dark_rate >= 0, "dark_rate", "dark_rate >= 0 violated")
        _check(self.dead_time >= 0, "dead_time", "dead_time >= 0 violated")
        _check(self.pbs_extinction > 0, "pbs_extinction", "pbs_extinction > 0 violated")
        _check(
            self.double_click in ("discard", "random"),
            "double_click",
            "double_click must be 'discard' or 'random'",
        )

    @property
    def extinction_floor(self) -> float:
        """Additive error probability left by a finite PBS extinction ratio."""
        if math.isinf(self.pbs_extinction):
            return 0.0
        return 10.0 ** (-self.pbs_extinction / 10.0)


@dataclass(frozen=True)
class SecurityParams:
    eps_sec: float = 1e-9
    eps_cor: float = 1e-15

    def validate(self) -> None:
        _check(0 < self.eps_sec < 1, "eps_sec", "0 < eps_sec < 1 violated")
        _check(0 < self.eps_cor < 1, "eps_cor", "0 < eps_cor < 1 violated")


@dataclass(frozen=True)
class FeedbackParams:
    """Knobs of the trial-and-error polarization controller."""

    enabled: bool = True
    step_init: float = 0.05
    step_min: float = 0.002

    def validate(self) -> None:
        _check(self.step_init > 0, "step_init", "step_init > 0 violated")
        _check(
            0 < self.step_min <= self.step_init,
            "step_min",
            "0 < step_min <= step_init violated",
        )


@dataclass(frozen=True)
class Config:
    protocol: ProtocolParams = field(default_factory=ProtocolParams)
    channel: ChannelParams = field(default_factory=ChannelParams)
    detector: DetectorParams = field(default_factory=DetectorParams)
    security: SecurityParams = field(default_factory=SecurityParams)
    feedback: FeedbackParams = field(default_factory=FeedbackParams)

    def validate(self) -> "Config":
        for group in self._groups():
            group.validate()
        return self

    def _groups(self):
        return (self.protocol, self.channel, self.detector, self.security, self.feedback)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for group in self._groups():
            out.update(dataclasses.asdict(group))
        return out

    def replace(self, **changes: Any) -> "Config":
        """Return a validated copy with flat-key overrides applied."""
        merged = self.to_dict()
        for key in changes:
            if key not in _FIELD_GROUP:
                raise ConfigError(f"unknown config key {key!r}")
        merged.update(changes)
        return from_dict(merged)


_GROUPS = {
    "protocol": ProtocolParams,
    "channel": ChannelParams,
    "detector": DetectorParams,
    "security": SecurityParams,
    "feedback": FeedbackParams,
}
_FIELD_GROUP = {f.name: group for group, cls in _GROUPS.items() for f in fields(cls)}


def _check(ok: bool, name: str, message: str) -> None:
    if not ok:
        raise ConfigError(f"{name}: {message}")


def _coerce(cls, name: str, value: Any) -> Any:
    expected = {f.name: f.type for f in fields(cls)}[name]
    if expected == "int":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if expected == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if expected == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


def from_dict(data: dict[str, Any]) -> Config:
    """Build a validated :class:`Config` from a flat mapping."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    per_group: dict[str, dict[str, Any]] = {g: {} for g in _GROUPS}
    for key, value in data.items():
        group = _FIELD_GROUP.get(key)
        if group is None:
            raise ConfigError(f"unknown config key {key!r}")
        per_group[group][key] = _coerce(_GROUPS[group], key, value)
    cfg = Config(**{g: _GROUPS[g](**kw) for g, kw in per_group.items()})
    return cfg.validate()


def load_config(text: str) -> Config:
    """Parse a JSON document into a validated :class:`Config`."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}") from exc
    return from_dict(data)


def dump_config(cfg: Config) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


def effective_transmittance(channel: ChannelParams) -> float:
    """Fiber plus insertion-loss transmittance, as a probability."""
    loss_db = channel.fiber_length * channel.attenuation + channel.extra_loss
    return 10.0 ** (-loss_db / 10.0)

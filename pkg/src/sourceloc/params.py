"""Epidemic rate constants and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import InputError


@dataclass(frozen=True)
class EpidemicParams:
    """Global parameters of the SIRB metapopulation model.

    Rates are per day. Defaults are the KwaZulu-Natal calibration values.
    """

    mu: float = 4.2e-5
    gamma: float = 0.2
    alpha: float = 0.0
    sigma: float = 0.05
    mu_B: float = 0.2
    rho: float = 0.0
    beta_max: float = 1.0
    theta_max: float = 15.0
    m: float = 0.3
    D: float = 50.0
    horizon_days: int = 100
    dt: float = 0.1
    seed_fraction: float = 0.001
    arrival_threshold: float = 0.001

    def __post_init__(self):
        for name in ("mu", "gamma", "alpha", "rho", "beta_max", "theta_max"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise InputError(f"{name} must be a finite rate >= 0, got {v!r}")
        if not self.mu_B > 0:
            raise InputError(f"mu_B must be > 0, got {self.mu_B!r}")
        if not 0 < self.sigma <= 1:
            raise InputError(f"sigma must be in (0, 1], got {self.sigma!r}")
        if not 0 <= self.m <= 1:
            raise InputError(f"m must be in [0, 1], got {self.m!r}")
        if not self.D > 0:
            raise InputError(f"D must be > 0, got {self.D!r}")
        if not self.dt > 0:
            raise InputError(f"dt must be > 0, got {self.dt!r}")
        if int(self.horizon_days) != self.horizon_days or self.horizon_days < 1:
            raise InputError(f"horizon_days must be an integer >= 1, got {self.horizon_days!r}")
        if not 0 < self.seed_fraction <= 1:
            raise InputError(f"seed_fraction must be in (0, 1], got {self.seed_fraction!r}")
        if not 0 < self.arrival_threshold < 1:
            raise InputError(
                f"arrival_threshold must be in (0, 1), got {self.arrival_threshold!r}"
            )
        if self.gamma + self.alpha + self.mu <= 0:
            raise InputError("gamma + alpha + mu must be > 0")

    @property
    def n_steps(self) -> int:
        """Number of dt windows covering the horizon."""
        return int(round(self.horizon_days / self.dt))

    def replace(self, **changes) -> "EpidemicParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Short stable hash of the parameter values."""
        return hashlib.sha256(dump_config(self.to_dict()).encode()).hexdigest()[:16]


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(EpidemicParams)}


def parse_config(text: str, path=None) -> dict[str, str]:
    """Parse flat ``key = value`` text; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"expected 'key = value', got {raw.strip()!r}", lineno, path)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InputError("empty key", lineno, path)
        if key in out:
            raise InputError(f"duplicate key {key!r}", lineno, path)
        out[key] = value
    return out


def dump_config(values: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def params_from_mapping(values: dict[str, str], path=None) -> EpidemicParams:
    """Build params from string values; unknown keys are errors."""
    kwargs = {}
    for key, value in values.items():
        if key not in _FIELD_TYPES:
            raise InputError(f"unknown parameter {key!r}", path=path)
        try:
            kwargs[key] = int(value) if _FIELD_TYPES[key] in (int, "int") else float(value)
        except ValueError:
            raise InputError(f"{key}: cannot parse {value!r} as a number", path=path) from None
    return EpidemicParams(**kwargs)


def load_params(path) -> EpidemicParams:
    """Read an :class:`EpidemicParams` config file; missing keys keep defaults."""
    path = Path(path)
    return params_from_mapping(parse_config(path.read_text(encoding="utf-8"), path), path)


def save_params(params: EpidemicParams, path) -> None:
    Path(path).write_text(dump_config(params.to_dict()), encoding="utf-8")

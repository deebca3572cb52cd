"""Interpolant schedules kappa(t) and their time derivatives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODALITIES = ("x", "a", "c", "e")

# default cosine exponents: positions settle first, then types, then charges/bonds
DEFAULT_NU = {"x": 1.0, "a": 1.5, "c": 2.0, "e": 2.0}


@dataclass(frozen=True)
class InterpolantSchedule:
    kind: str = "linear"
    nu: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.nu > 0:
            raise ValueError("schedule exponent nu must be positive")

    def to_json(self) -> dict:
        return {"kind": self.kind, "nu": self.nu}


def _check_t(t):
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(np.isnan(arr)):
        raise ValueError(f"time outside [0, 1]: {t}")
    return arr


def kappa(schedule: InterpolantSchedule, t):
    """kappa(t); linear gives t, cosine gives 1 - cos^2(pi/2 * t^nu)."""
    t = _check_t(t)
    if schedule.kind == "linear":
        out = t.copy()
    else:
        out = 1.0 - np.cos(0.5 * np.pi * t**schedule.nu) ** 2
    return float(out) if out.ndim == 0 else out


def kappa_dot(schedule: InterpolantSchedule, t):
    t = _check_t(t)
    if schedule.kind == "linear":
        out = np.ones_like(t)
    else:
        nu = schedule.nu
        # d/dt [1 - cos^2(u)] = sin(2u) du/dt with u = (pi/2) t^nu
        out = 0.5 * np.pi * nu * np.power(t, nu - 1.0) * np.sin(np.pi * t**nu)
    return float(out) if out.ndim == 0 else out


def default_schedules(variant: str) -> dict:
    if variant == "ctmc":
        return {m: InterpolantSchedule("linear") for m in MODALITIES}
    return {m: InterpolantSchedule("cosine", DEFAULT_NU[m]) for m in MODALITIES}

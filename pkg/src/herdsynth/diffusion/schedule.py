from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ScheduleError, TimestepError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Per-step noise variances; index ``t - 1`` holds step ``t`` (1-based)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float
    kind: str = "linear"

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise TimestepError(f"timestep {t} outside [1, {self.T}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "kind": self.kind}


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for a in (beta, alpha, alpha_bar):
        a.flags.writeable = False
    return NoiseSchedule(beta, alpha, alpha_bar, float(beta_start), float(beta_end), kind)


def forward_sample(x0: np.ndarray, t, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one timestep per leading-axis sample.
    """
    sched.check_t(t)
    ab = sched.alpha_bar[np.asarray(t) - 1]
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (np.ndim(x0) - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise

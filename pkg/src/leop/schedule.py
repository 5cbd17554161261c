"""Variance-preserving noise schedules.

``alpha[t]`` is the signal fraction and ``sigma[t] = 1 - alpha[t]`` the noise
variance of the marginal at step ``t``. Step quantities link consecutive steps:
``alpha_step[t] = alpha[t] / alpha[t-1]`` and
``sigma_step[t] = sigma[t] - alpha_step[t] * sigma[t-1]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

CLIP = 1e-4


class ScheduleError(ValueError):
    pass


class StepParams(NamedTuple):
    alpha_step: float
    sigma_step: float
    beta_tilde: float
    coef_xt: float  # posterior-mean weight on x^t
    coef_x0: float  # posterior-mean weight on the clean estimate


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    alpha_step: np.ndarray
    sigma_step: np.ndarray
    kind: str = "polynomial"
    power: float = 2.0

    def header(self) -> dict:
        return {"kind": self.kind, "T": self.T, "power": self.power}

    def check_step(self, t: int, lo: int = 0) -> None:
        if not (lo <= t <= self.T):
            raise ScheduleError(f"step {t} outside [{lo}, {self.T}]")


def build_schedule(kind: str = "polynomial", T: int = 100, power: float = 2.0) -> NoiseSchedule:
    """Polynomial schedule ``alpha[t] = (1 - (t/T)^power)^2`` clipped to [1e-4, 1 - 1e-4].

    Step 0 is the clean data (``alpha[0] = 1`` exactly) so that the closed-form
    marginals equal the composition of single-step kernels starting from data.
    """
    if kind != "polynomial":
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    alpha = np.clip((1.0 - (steps / T) ** power) ** 2, CLIP, 1.0 - CLIP)
    alpha[0] = 1.0
    # monotonicity repair: clipping can create plateaus; keep a strict decrease
    for t in range(1, T + 1):
        if alpha[t] >= alpha[t - 1]:
            alpha[t] = alpha[t - 1] * (1.0 - 1e-12)
    sigma = 1.0 - alpha
    alpha_step = np.ones(T + 1)
    sigma_step = np.zeros(T + 1)
    alpha_step[1:] = alpha[1:] / alpha[:-1]
    sigma_step[1:] = sigma[1:] - alpha_step[1:] * sigma[:-1]
    sigma_step = np.maximum(sigma_step, 0.0)
    return NoiseSchedule(T, alpha, sigma, alpha_step, sigma_step, kind, float(power))


def snr(s: NoiseSchedule, t: int) -> float:
    s.check_step(t)
    if s.sigma[t] == 0.0:
        return float("inf")
    return float(s.alpha[t] / s.sigma[t])


def step_params(s: NoiseSchedule, t: int) -> StepParams:
    s.check_step(t, lo=1)
    a_bar, s_bar = s.alpha_step[t], s.sigma_step[t]
    sig_t, sig_prev = s.sigma[t], s.sigma[t - 1]
    beta = s_bar * sig_prev / sig_t
    coef_xt = np.sqrt(a_bar) * sig_prev / sig_t
    coef_x0 = np.sqrt(s.alpha[t - 1]) * s_bar / sig_t
    return StepParams(float(a_bar), float(s_bar), float(beta), float(coef_xt), float(coef_x0))


def step_table(s: NoiseSchedule) -> dict[str, np.ndarray]:
    """Vectorized step quantities indexed by t (entries at t=0 are zero)."""
    out = {k: np.zeros(s.T + 1) for k in ("beta_tilde", "coef_xt", "coef_x0")}
    t = np.arange(1, s.T + 1)
    out["beta_tilde"][1:] = s.sigma_step[t] * s.sigma[t - 1] / s.sigma[t]
    out["coef_xt"][1:] = np.sqrt(s.alpha_step[t]) * s.sigma[t - 1] / s.sigma[t]
    out["coef_x0"][1:] = np.sqrt(s.alpha[t - 1]) * s.sigma_step[t] / s.sigma[t]
    return out

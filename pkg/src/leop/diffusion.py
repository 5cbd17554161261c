"""Forward kernels and exact posteriors for mask coordinates and categories.

Coordinates follow ``q(x^t | x^{t-1}) = N(sqrt(alpha_step) x^{t-1}, sigma_step I)``.
Categorical rows mix with the uniform distribution:
``q(v^t | v^{t-1}) = C(sqrt(alpha_step) v^{t-1} + (1 - sqrt(alpha_step)) / K)``,
which keeps every row on the simplex and composes to the closed-form marginal.

All functions take torch tensors. ``t`` is either an int or a LongTensor with one
entry per item of the leading batch dimension.
"""
from __future__ import annotations

import numpy as np
import torch

from .schedule import NoiseSchedule, ScheduleError

SIMPLEX_TOL = 1e-6
DEGENERATE_NORM = 1e-30


class DiffusionError(ValueError):
    pass


class DegeneratePosteriorError(DiffusionError):
    pass


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather ``values[t]`` and shape it to broadcast against ``like``."""
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        out = table[t.long()]
        return out.reshape(out.shape + (1,) * (like.ndim - out.ndim))
    return table[int(t)]


def _check_t(s: NoiseSchedule, t, lo: int) -> None:
    tt = t if isinstance(t, torch.Tensor) else torch.tensor(t)
    if tt.numel() and (int(tt.min()) < lo or int(tt.max()) > s.T):
        raise ScheduleError(f"step outside [{lo}, {s.T}]")


def _check_simplex(p: torch.Tensor) -> None:
    if p.numel() == 0:
        return
    if (p.min() < -SIMPLEX_TOL) or ((p.sum(-1) - 1.0).abs().max() > SIMPLEX_TOL):
        raise DiffusionError("categorical rows must lie on the probability simplex")


def gaussian_noise(rng: np.random.Generator, shape, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(rng.standard_normal(tuple(shape)), dtype=like.dtype)


# --------------------------------------------------------------------------- coordinates


def q_step_coords(x_prev: torch.Tensor, s: NoiseSchedule, t, rng: np.random.Generator) -> torch.Tensor:
    _check_t(s, t, 1)
    mean = _coef(np.sqrt(s.alpha_step), t, x_prev) * x_prev
    std = _coef(np.sqrt(s.sigma_step), t, x_prev)
    return mean + std * gaussian_noise(rng, x_prev.shape, x_prev)


def q_marginal_coords(x0: torch.Tensor, s: NoiseSchedule, t, rng: np.random.Generator) -> torch.Tensor:
    _check_t(s, t, 0)
    mean = _coef(np.sqrt(s.alpha), t, x0) * x0
    std = _coef(np.sqrt(s.sigma), t, x0)
    return mean + std * gaussian_noise(rng, x0.shape, x0)


def q_posterior_coords(x_t: torch.Tensor, x0_hat: torch.Tensor, s: NoiseSchedule, t):
    """Mean and variance of ``q(x^{t-1} | x^t, x^0 = x0_hat)``."""
    _check_t(s, t, 1)
    tt = t if isinstance(t, torch.Tensor) else torch.tensor(int(t))
    prev = tt - 1
    sig_t = _coef(s.sigma, tt, x_t)
    sig_prev = _coef(s.sigma, prev, x_t)
    a_bar = _coef(s.alpha_step, tt, x_t)
    s_bar = _coef(s.sigma_step, tt, x_t)
    a_prev = _coef(s.alpha, prev, x_t)
    mean = (torch.sqrt(a_bar) * sig_prev / sig_t) * x_t + (torch.sqrt(a_prev) * s_bar / sig_t) * x0_hat
    var = s_bar * sig_prev / sig_t
    return mean, var


# --------------------------------------------------------------------------- categories


def q_step_categorical(p_prev: torch.Tensor, K: int, s: NoiseSchedule, t, check: bool = True) -> torch.Tensor:
    _check_t(s, t, 1)
    if check:
        _check_simplex(p_prev)
    keep = _coef(np.sqrt(s.alpha_step), t, p_prev)
    return keep * p_prev + (1.0 - keep) / K


def q_marginal_categorical(p0: torch.Tensor, K: int, s: NoiseSchedule, t, check: bool = True) -> torch.Tensor:
    _check_t(s, t, 0)
    if check:
        _check_simplex(p0)
    keep = _coef(np.sqrt(s.alpha), t, p0)
    return keep * p0 + (1.0 - keep) / K


def q_posterior_categorical(p_t: torch.Tensor, p0: torch.Tensor, K: int, s: NoiseSchedule, t,
                            check: bool = True) -> torch.Tensor:
    """``q(v^{t-1} | v^t, v^0)`` proportional to step-likelihood times (t-1)-marginal."""
    _check_t(s, t, 1)
    if check:
        _check_simplex(p_t)
        _check_simplex(p0)
    tt = t if isinstance(t, torch.Tensor) else torch.tensor(int(t))
    likelihood = q_step_categorical(p_t, K, s, tt, check=False)
    prior = q_marginal_categorical(p0, K, s, tt - 1, check=False)
    unnorm = likelihood * prior
    z = unnorm.sum(-1, keepdim=True)
    if z.numel() and float(z.detach().min()) < DEGENERATE_NORM:
        raise DegeneratePosteriorError("posterior normalization below 1e-30")
    return unnorm / z


def posterior_rows_or_prior(p_t: torch.Tensor, p0: torch.Tensor, K: int, s: NoiseSchedule, t):
    """Posterior rows, replacing degenerate rows by the uniform prior.

    Returns the rows and a boolean (..., 1) tensor marking the replaced rows.
    """
    tt = t if isinstance(t, torch.Tensor) else torch.tensor(int(t))
    unnorm = q_step_categorical(p_t, K, s, tt, check=False) * q_marginal_categorical(p0, K, s, tt - 1, check=False)
    z = unnorm.sum(-1, keepdim=True)
    bad = z < DEGENERATE_NORM
    rows = torch.where(bad, torch.full_like(unnorm, 1.0 / K), unnorm / z.clamp_min(DEGENERATE_NORM))
    return rows, bad


def sample_categorical(probs: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Draw one-hot rows by inverse-CDF with uniforms from ``rng``."""
    u = torch.as_tensor(rng.random(probs.shape[:-1]), dtype=probs.dtype)
    cdf = probs.cumsum(-1)
    idx = (cdf < (u * cdf[..., -1]).unsqueeze(-1)).sum(-1).clamp_max(probs.shape[-1] - 1)
    return torch.nn.functional.one_hot(idx, probs.shape[-1]).to(probs.dtype)


def sample_symmetric_categorical(probs: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Sample (..., N, N, K) bond rows on the upper triangle and mirror them."""
    n = probs.shape[-2]
    iu = torch.triu_indices(n, n, offset=1)
    upper = sample_categorical(probs[..., iu[0], iu[1], :], rng)
    out = torch.zeros_like(probs)
    out[..., iu[0], iu[1], :] = upper
    out[..., iu[1], iu[0], :] = upper
    out[..., torch.arange(n), torch.arange(n), 0] = 1.0
    return out


def kl_categorical(q: torch.Tensor, p: torch.Tensor, eps: float = 1e-30) -> torch.Tensor:
    """Row-wise KL(q || p) with the 0 log 0 = 0 convention."""
    q_safe = q.clamp_min(eps)
    return torch.where(q > 0, q * (torch.log(q_safe) - torch.log(p.clamp_min(eps))), torch.zeros_like(q)).sum(-1)

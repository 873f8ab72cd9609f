"""Linear noise schedule and the closed-form diffusion quantities built on it.

Steps are 1-based: ``t`` runs from 1 (least noise) to ``T``. Arrays are stored
0-based, so step ``t`` lives at index ``t - 1``. ``alpha_bar_prev[t-1]`` is
``alpha_bar_{t-1}`` with the convention ``alpha_bar_0 = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SINGULAR_ALPHA_BAR = 1e-12


def _out_dtype(*arrays) -> np.dtype:
    # float32 in -> float32 out; float64 callers keep full precision
    return np.result_type(np.float32, *(np.asarray(a).dtype for a in arrays))


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    posterior_var: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_step(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")
        return t

    def posterior_coefs(self, t: int) -> tuple[float, float]:
        """(x0 coefficient, xt coefficient) of the posterior mean at step t."""
        t = self.check_step(t)
        ab, ab_prev = self.alpha_bar[t - 1], self.alpha_bar_prev[t - 1]
        beta, alpha = self.beta[t - 1], self.alpha[t - 1]
        return np.sqrt(ab_prev) * beta / (1.0 - ab), np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)


def schedule_from_betas(beta) -> DiffusionSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ValueError("beta must be a non-empty 1-d array")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("every beta must lie strictly between 0 and 1")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    for arr in (beta, alpha, alpha_bar, alpha_bar_prev, posterior_var):
        arr.setflags(write=False)
    return DiffusionSchedule(beta, alpha, alpha_bar, alpha_bar_prev, posterior_var)


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T))


def schedule_from_config(cfg: dict) -> DiffusionSchedule:
    d = cfg.get("diffusion", {})
    return build_linear_schedule(int(d.get("steps", 1000)), float(d.get("beta_start", 1e-4)), float(d.get("beta_end", 0.02)))


def q_sample(x0, t: int, eps, sched: DiffusionSchedule) -> np.ndarray:
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t = sched.check_step(t)
    ab = sched.alpha_bar[t - 1]
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(_out_dtype(x0, eps))


def q_sample_batch(x0: np.ndarray, t: np.ndarray, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Per-sample steps ``t`` (1-based, shape [N]) over a batch [N, ...]."""
    t = np.asarray(t)
    if t.min() < 1 or t.max() > sched.T:
        raise ValueError("step out of range")
    ab = sched.alpha_bar[t - 1].reshape((-1,) + (1,) * (x0.ndim - 1))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(_out_dtype(x0, eps))


def predict_x0(xt, eps_hat, t: int, sched: DiffusionSchedule) -> np.ndarray:
    t = sched.check_step(t)
    ab = sched.alpha_bar[t - 1]
    if ab < SINGULAR_ALPHA_BAR:
        raise FloatingPointError(f"alpha_bar at step {t} is {ab:.3g}; x0 recovery is singular")
    return ((np.asarray(xt) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)).astype(_out_dtype(xt, eps_hat))


def posterior_mean(x0, xt, t: int, sched: DiffusionSchedule) -> np.ndarray:
    """Mean of q(x_{t-1} | x_t, x_0); at t=1 this is x0 itself."""
    c0, ct = sched.posterior_coefs(t)
    return (c0 * np.asarray(x0) + ct * np.asarray(xt)).astype(_out_dtype(x0, xt))

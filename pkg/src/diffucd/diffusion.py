"""Schedule-dependent DDPM math, independent of the noise-predictor architecture.

All array operations accept numpy arrays or torch tensors; ``t`` may be a
scalar timestep or a per-item vector (broadcast over the trailing axes).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    eps_coef: np.ndarray
    kind: str = "custom"
    beta_start: float = float("nan")
    beta_end: float = float("nan")

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta, strict: bool = True, **meta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64).reshape(-1)
        if beta.size < 1:
            raise ValueError("schedule needs at least one timestep")
        if strict and not ((beta > 0) & (beta < 1)).all():
            raise ValueError("every beta_t must lie in the open interval (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if strict and (np.diff(alpha_bar) >= 0).any():
            raise ValueError("alpha_bar must be strictly decreasing")
        var = np.zeros_like(beta)
        # sigma_0 = 0: the last reverse step is deterministic
        with np.errstate(invalid="ignore", divide="ignore"):
            var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
        var[beta == 0] = 0.0
        for a in (beta, alpha, alpha_bar, var):
            a.setflags(write=False)
        sigma = np.sqrt(var)
        # beta_t / sqrt(1 - alpha_bar_t); exactly 0 where beta_t = 0
        eps_coef = np.zeros_like(beta)
        nz = beta != 0
        eps_coef[nz] = beta[nz] / np.sqrt(1.0 - alpha_bar[nz])
        for a in (sigma, eps_coef):
            a.setflags(write=False)
        return cls(beta, alpha, alpha_bar, sigma, eps_coef, **meta)

    def identity(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_linear_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule.from_betas(beta, kind="linear", beta_start=float(beta_start), beta_end=float(beta_end))


def schedule_from_identity(ident: dict) -> NoiseSchedule:
    if ident.get("kind") != "linear":
        raise ValueError(f"cannot rebuild schedule of kind {ident.get('kind')!r}")
    return make_linear_schedule(int(ident["T"]), float(ident["beta_start"]), float(ident["beta_end"]))


def _check_t(t, sched: NoiseSchedule):
    tt = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if tt.dtype.kind not in "iu":
        if not np.all(tt == np.round(tt)):
            raise ValueError(f"timestep must be an integer, got {t}")
        tt = tt.astype(np.int64)
    if np.any(tt < 0) or np.any(tt >= sched.T):
        raise ValueError(f"timestep out of range [0, {sched.T}): {t}")
    return tt


def _coef(values: np.ndarray, t, like):
    """Gather ``values[t]`` shaped to broadcast against ``like``."""
    v = values[t]
    if np.ndim(v) == 0:
        return float(v)
    v = v.reshape((-1,) + (1,) * (like.ndim - 1))
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(v, dtype=like.dtype, device=like.device)
    return v.astype(like.dtype, copy=False)


def _check_same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def forward_diffuse(x0, t, eps, sched: NoiseSchedule):
    t = _check_t(t, sched)
    _check_same_shape(x0, eps, "forward_diffuse")
    return x0 * _coef(np.sqrt(sched.alpha_bar), t, x0) + eps * _coef(np.sqrt(1.0 - sched.alpha_bar), t, x0)


def estimate_x0(xt, t, eps_hat, sched: NoiseSchedule):
    t = _check_t(t, sched)
    _check_same_shape(xt, eps_hat, "estimate_x0")
    return (xt - _coef(np.sqrt(1.0 - sched.alpha_bar), t, xt) * eps_hat) / _coef(np.sqrt(sched.alpha_bar), t, xt)


def reverse_step(xt, t, eps_hat, z, sched: NoiseSchedule):
    t = _check_t(t, sched)
    _check_same_shape(xt, eps_hat, "reverse_step")
    _check_same_shape(xt, z, "reverse_step")
    mean = (xt - _coef(sched.eps_coef, t, xt) * eps_hat) / _coef(np.sqrt(sched.alpha), t, xt)
    return mean + _coef(sched.sigma, t, xt) * z


def noise_loss(eps, eps_hat):
    """Per-item sum of squared errors, averaged over the batch (axis 0)."""
    _check_same_shape(eps, eps_hat, "noise_loss")
    if eps.shape[0] == 0:
        raise ValueError("noise_loss needs a nonempty batch")
    sq = (eps - eps_hat) ** 2
    per_item = sq.reshape(sq.shape[0], -1).sum(1)
    return per_item.mean()


Predictor = Callable[[np.ndarray, int, object], np.ndarray]


def sample(predictor: Predictor, shape, cond, sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0."""
    x = rng.standard_normal(shape)
    for t in range(sched.T - 1, -1, -1):
        eps_hat = np.asarray(predictor(x, t, cond), dtype=np.float64)
        if eps_hat.shape != x.shape:
            raise ValueError(f"predictor returned shape {eps_hat.shape}, expected {x.shape}")
        z = rng.standard_normal(shape) if t > 0 else np.zeros(shape)
        x = reverse_step(x, t, eps_hat, z, sched)
    return x

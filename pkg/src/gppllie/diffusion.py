"""Forward corruption, the noise-prediction training objective, and
deterministic strided reverse sampling in latent space."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .tensor import Tensor

X0_CLAMP = 3.0


@dataclass(frozen=True)
class DiffusionSchedule:
    """beta/alpha sequences over T steps; alpha_bars[0] = 1 (empty product)."""

    betas: np.ndarray        # [T], f64
    alphas: np.ndarray       # [T], f64
    alpha_bars: np.ndarray   # [T+1], f64

    def __post_init__(self):
        b = self.betas
        if not ((b > 0) & (b < 1)).all():
            raise ValidationError("betas must lie strictly inside (0,1)")
        if (np.diff(b) < 0).any():
            raise ValidationError("betas must be non-decreasing")
        ab = self.alpha_bars
        if ab[0] != 1.0 or (np.diff(ab) >= 0).any():
            raise ValidationError("alpha_bars must start at 1 and strictly decrease")

    @property
    def total_steps(self) -> int:
        return len(self.betas)


def make_linear_schedule(total_steps: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> DiffusionSchedule:
    if total_steps < 1:
        raise ValidationError("schedule needs at least one step")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValidationError(
            f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, total_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _bar_coeffs(sched: DiffusionSchedule, t, ndim: int, dtype):
    """sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t), shaped to broadcast."""
    t_arr = np.asarray(t)
    if (t_arr < 0).any() or (t_arr > sched.total_steps).any():
        raise ValidationError(f"timestep out of range 0..{sched.total_steps}: {t}")
    ab = sched.alpha_bars[t_arr]
    c1 = np.sqrt(ab).astype(dtype)
    c2 = np.sqrt(1.0 - ab).astype(dtype)
    if t_arr.ndim == 1:
        shape = (len(t_arr),) + (1,) * (ndim - 1)
        c1, c2 = c1.reshape(shape), c2.reshape(shape)
    return c1, c2


def q_sample(z0: Tensor, t, eps: Tensor, sched: DiffusionSchedule) -> Tensor:
    """Forward marginal: z_t = sqrt(ab_t) z0 + sqrt(1-ab_t) eps."""
    if eps.shape != z0.shape:
        raise ValidationError(f"eps shape {eps.shape} must match z0 shape {z0.shape}")
    c1, c2 = _bar_coeffs(sched, t, z0.ndim, z0.dtype)
    return T.add(T.mul(z0, Tensor(c1, dtype=z0.dtype)),
                 T.mul(eps, Tensor(c2, dtype=z0.dtype)))


Model = Callable[[Tensor, object, Tensor, object], Tensor]


def training_loss(model: Model, z0: Tensor, z_ll: Tensor, prior,
                  sched: DiffusionSchedule, rng: np.random.Generator) -> Tensor:
    """Draw t ~ U{1..T} and eps ~ N(0,I); return MSE(eps, model(z_t, t, ...))."""
    batched = z0.ndim == 4
    if batched:
        t = rng.integers(1, sched.total_steps + 1, size=z0.shape[0])
    else:
        t = int(rng.integers(1, sched.total_steps + 1))
    eps = Tensor(rng.standard_normal(z0.shape).astype(z0.dtype), dtype=z0.dtype)
    z_t = q_sample(z0, t, eps, sched)
    eps_hat = model(z_t, t, z_ll, prior)
    diff = T.sub(eps_hat, eps)
    return T.mean(T.mul(diff, diff))


def ddim_timesteps(total_steps: int, steps: int) -> list[int]:
    """``steps`` timesteps uniformly strided over {1..T}, descending from T."""
    if not 1 <= steps <= total_steps:
        raise ValidationError(f"steps must lie in 1..{total_steps}, got {steps}")
    ts = [int(round(total_steps - k * total_steps / steps)) for k in range(steps)]
    out = []
    for v in ts:
        v = max(1, min(total_steps, v))
        if not out or v < out[-1]:
            out.append(v)
    return out


def ddim_sample(model: Model, z_ll: Tensor, prior, sched: DiffusionSchedule,
                steps: int = 25, seed: int = 0) -> Tensor:
    """Deterministic (eta=0) strided reverse sampling from pure noise.

    Each update projects to x0_hat = (z_t - sqrt(1-ab_t) eps_hat)/sqrt(ab_t),
    clamps it to +-X0_CLAMP, and re-noises deterministically at the previous
    strided timestep. Bit-stable for a fixed seed.
    """
    ts = ddim_timesteps(sched.total_steps, steps)
    rng = np.random.default_rng([seed, 0xDD1])
    z = rng.standard_normal(z_ll.shape).astype(z_ll.dtype)
    with T.no_grad():
        for i, t in enumerate(ts):
            eps_hat = model(Tensor(z, dtype=z_ll.dtype), t, z_ll, prior).data
            ab_t = sched.alpha_bars[t]
            x0 = (z - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
            x0 = np.clip(x0, -X0_CLAMP, X0_CLAMP)
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            ab_p = sched.alpha_bars[t_prev]
            z = np.sqrt(ab_p) * x0 + np.sqrt(1.0 - ab_p) * eps_hat
    return Tensor(z.astype(z_ll.dtype), dtype=z_ll.dtype)

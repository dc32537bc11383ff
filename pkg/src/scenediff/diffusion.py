"""Noise schedule, forward corruption, deterministic reverse steps and the
noise-prediction objectives (plain and temporally conditioned)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import torch

from .temporal import inject_motion

Step = Union[int, torch.Tensor]
# net(a_k, k, condition) -> predicted noise, same shape as a_k
NoiseModel = Callable[[torch.Tensor, Step, Union[torch.Tensor, None]], torch.Tensor]


@dataclass
class DiffusionConfig:
    steps: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.02
    reverse_steps_at_inference: int = 20

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps (K) must be >= 1")
        for name in ("beta_start", "beta_end"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not 0 <= self.reverse_steps_at_inference <= self.steps:
            raise ValueError("reverse_steps_at_inference must be in [0, K]")


@dataclass(frozen=True)
class NoiseSchedule:
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor

    @property
    def K(self) -> int:
        return self.beta.numel()

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        beta = torch.as_tensor(betas, dtype=torch.float64).flatten()
        if beta.numel() == 0 or not bool(((beta > 0) & (beta < 1)).all()):
            raise ValueError("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        bars = [float(alpha[0])]
        for a in alpha[1:].tolist():
            bars.append(bars[-1] * a)
        return cls(beta, alpha, torch.tensor(bars, dtype=torch.float64))


def make_schedule(config: DiffusionConfig) -> NoiseSchedule:
    """Linear beta schedule over K steps."""
    config.validate()
    return NoiseSchedule.from_betas(torch.linspace(config.beta_start, config.beta_end, config.steps, dtype=torch.float64))


def _check_step(k: Step, sched: NoiseSchedule) -> None:
    lo, hi = (int(k.min()), int(k.max())) if torch.is_tensor(k) else (k, k)
    if lo < 1 or hi > sched.K:
        raise ValueError(f"diffusion step must be in [1, {sched.K}], got {k}")


def _coef(values: torch.Tensor, k: Step, like: torch.Tensor) -> torch.Tensor:
    if torch.is_tensor(k) and k.dim() > 0:
        c = values[k.long() - 1].to(like.dtype)
        return c.reshape((-1,) + (1,) * (like.dim() - 1))
    return values[int(k) - 1].to(like.dtype)


def forward_diffuse(a0: torch.Tensor, k: Step, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if eps.shape != a0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match tensor shape {tuple(a0.shape)}")
    _check_step(k, sched)
    ab = _coef(sched.alpha_bar, k, a0)
    return ab.sqrt() * a0 + (1 - ab).sqrt() * eps


def reverse_step(a_k: torch.Tensor, k: Step, eps_pred: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if eps_pred.shape != a_k.shape:
        raise ValueError(f"predicted noise shape {tuple(eps_pred.shape)} does not match {tuple(a_k.shape)}")
    _check_step(k, sched)
    alpha = _coef(sched.alpha, k, a_k)
    beta = _coef(sched.beta, k, a_k)
    ab = _coef(sched.alpha_bar, k, a_k)
    return (a_k - beta / (1 - ab).sqrt() * eps_pred) / alpha.sqrt()


def denoise_loop(
    a_noisy: torch.Tensor,
    condition: torch.Tensor | None,
    sched: NoiseSchedule,
    net: NoiseModel,
    steps: int,
    *,
    motion: torch.Tensor | None = None,
    motion_scale: torch.Tensor | float | None = None,
) -> torch.Tensor:
    """Run ``steps`` reverse steps from ``k = steps`` down to 1.

    When ``motion`` (an (N, N) speed matrix) is given it is added to the
    running tensor before every noise prediction.
    """
    if not 0 <= steps <= sched.K:
        raise ValueError(f"steps must be in [0, {sched.K}]")
    if condition is not None and condition.shape != a_noisy.shape:
        raise ValueError("condition must have the same shape as the noisy tensor")
    a = a_noisy
    for k in range(steps, 0, -1):
        if motion is not None:
            a = inject_motion(a, motion, motion_scale)
        a = reverse_step(a, k, net(a, k, condition), sched)
        if not torch.isfinite(a).all():
            raise FloatingPointError(f"non-finite values after reverse step k={k}")
    return a


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    err = (pred - target) ** 2
    if mask is None:
        return err.mean()
    m = mask.to(err.dtype)[..., None]
    denom = m.sum() * err.shape[-1]
    if denom == 0:
        return err.sum() * 0.0
    return (err * m).sum() / denom


def _noise_loss(a0, condition, net, sched, rng, mask):
    batched = a0.dim() == 4
    k = torch.randint(1, sched.K + 1, (a0.shape[0] if batched else 1,), generator=rng)
    step = k if batched else int(k[0])
    eps = torch.randn(a0.shape, generator=rng, dtype=a0.dtype)
    pred = net(forward_diffuse(a0, step, eps, sched), step, condition)
    return masked_mse(pred, eps, mask)


def denoising_loss(
    a0_gt: torch.Tensor,
    net: NoiseModel,
    sched: NoiseSchedule,
    rng: torch.Generator | None = None,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Noise-prediction MSE with k ~ U{1..K}. ``mask`` restricts the mean to valid pairs."""
    return _noise_loss(a0_gt, None, net, sched, rng, mask)


def conditional_denoising_loss(
    a0_t: torch.Tensor,
    a0_prev: torch.Tensor | None,
    net: NoiseModel,
    sched: NoiseSchedule,
    rng: torch.Generator | None = None,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """As ``denoising_loss`` with the previous clean tensor as condition (zeros for a first frame)."""
    condition = torch.zeros_like(a0_t) if a0_prev is None else a0_prev
    return _noise_loss(a0_t, condition, net, sched, rng, mask)

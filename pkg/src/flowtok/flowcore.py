"""Rectified-flow math: interpolation, velocity targets, losses, and timestep schedules.

All functions are pure; the only state they touch is the torch.Generator
passed in for sampling. Tensors are plain torch tensors on CPU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

SCHEDULE_KINDS = ("uniform", "logit_normal", "shift")


@dataclass
class NoiseSchedule:
    """Timestep sampling distribution plus the noise-intensity multiplier gamma."""

    kind: str = "uniform"
    shift: float = 1.0            # s, used when kind == "shift"
    lognorm_mu: float = 0.0       # used when kind == "logit_normal"
    lognorm_sigma: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}, expected one of {SCHEDULE_KINDS}")
        if self.shift <= 0:
            raise ValueError(f"shift factor must be positive, got {self.shift}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.lognorm_sigma <= 0:
            raise ValueError(f"lognorm_sigma must be positive, got {self.lognorm_sigma}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "shift": self.shift,
            "lognorm_mu": self.lognorm_mu,
            "lognorm_sigma": self.lognorm_sigma,
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(**d)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_t(t):
    tmin = float(t.min()) if torch.is_tensor(t) else float(t)
    tmax = float(t.max()) if torch.is_tensor(t) else float(t)
    if tmin < 0.0 or tmax > 1.0:
        raise ValueError(f"t must lie in [0, 1], got range [{tmin}, {tmax}]")


def _broadcast_t(t, x: torch.Tensor):
    """Reshape a per-sample t vector so it broadcasts over x's trailing dims."""
    if not torch.is_tensor(t):
        return torch.as_tensor(t, dtype=x.dtype)
    if t.ndim == 0:
        return t.to(x.dtype)
    if t.shape[0] != x.shape[0]:
        raise ValueError(f"per-sample t has length {t.shape[0]} but batch is {x.shape[0]}")
    return t.to(x.dtype).reshape(-1, *([1] * (x.ndim - 1)))


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    """Forward-flow state x_t = (1 - t) * x0 + t * x1.

    t may be a scalar or a per-sample vector matching the leading dim.
    """
    _check_same_shape(x0, x1, "interpolate")
    _check_t(t)
    tb = _broadcast_t(t, x0)
    return (1.0 - tb) * x0 + tb * x1


def velocity_target(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """Constant velocity of the linear forward flow, x1 - x0."""
    _check_same_shape(x0, x1, "velocity_target")
    return x1 - x0


def rf_loss(v_pred: torch.Tensor, x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the predicted velocity and x1 - x0."""
    _check_same_shape(v_pred, x0, "rf_loss")
    _check_same_shape(x0, x1, "rf_loss")
    return (v_pred - (x1 - x0)).pow(2).mean()


def shift_factor(r: int, d: int) -> float:
    """Dimension-dependent shift s = sqrt(4096 / (r^2 * d)).

    r is the latent grid side length in tokens, d the per-token channel count.
    """
    if r < 1 or d < 1:
        raise ValueError(f"r and d must be positive integers, got r={r}, d={d}")
    return math.sqrt(4096.0 / (r * r * d))


def shift_map(t_prime, s: float):
    """Map a uniform draw t' through t = s*t' / (1 + (s - 1)*t').

    Identity at s=1; endpoints 0 and 1 are preserved for every s > 0.
    Accepts floats or tensors.
    """
    if s <= 0:
        raise ValueError(f"shift factor must be positive, got {s}")
    _check_t(t_prime)
    return (s * t_prime) / (1.0 + (s - 1.0) * t_prime)


def shift_map_inverse(t, s: float):
    """Inverse of shift_map: t' = t / (s - (s - 1)*t)."""
    if s <= 0:
        raise ValueError(f"shift factor must be positive, got {s}")
    _check_t(t)
    return t / (s - (s - 1.0) * t)


def sample_timesteps(schedule: NoiseSchedule, n: int, generator: torch.Generator) -> torch.Tensor:
    """Draw n timesteps in [0, 1] according to the schedule."""
    if schedule.kind == "uniform":
        return torch.rand(n, generator=generator)
    if schedule.kind == "shift":
        t_prime = torch.rand(n, generator=generator)
        return shift_map(t_prime, schedule.shift)
    if schedule.kind == "logit_normal":
        z = torch.randn(n, generator=generator) * schedule.lognorm_sigma + schedule.lognorm_mu
        return torch.sigmoid(z)
    raise ValueError(f"unknown schedule kind {schedule.kind!r}")


def sample_timestep(schedule: NoiseSchedule, generator: torch.Generator) -> float:
    """Single-draw convenience wrapper around sample_timesteps."""
    return float(sample_timesteps(schedule, 1, generator)[0])


def scale_noise(eps: torch.Tensor, gamma: float) -> torch.Tensor:
    """Noise endpoint x1 = gamma * eps; gamma=1 is the standard Gaussian endpoint."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return gamma * eps

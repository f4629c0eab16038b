"""Euler ODE sampling from noise to latents with timestep shift, classifier-free
guidance and weak-model (auto) guidance, plus latent-to-image generation.

Sign convention: the learned velocity points from data to noise (v = x1 - x0),
so integration runs t from 1 down to 0 with negative increments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import flowcore
from .generator import DiT, LatentStats, predict_velocity

GUIDANCE_MODES = ("none", "cfg", "autoguidance")


@dataclass
class SamplingConfig:
    steps: int = 150
    guidance_mode: str = "none"
    guidance_scale: float = 1.29
    schedule: flowcore.NoiseSchedule = field(default_factory=lambda: flowcore.NoiseSchedule(kind="shift"))
    class_id: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.guidance_mode not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode {self.guidance_mode!r}")


def time_grid(steps: int, schedule: flowcore.NoiseSchedule) -> torch.Tensor:
    """Descending t values from 1 to 0, shift-mapped when the schedule shifts."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    t_prime = torch.linspace(1.0, 0.0, steps + 1, dtype=torch.float64)
    s = schedule.shift if schedule.kind == "shift" else 1.0
    grid = flowcore.shift_map(t_prime, s)
    grid[0], grid[-1] = 1.0, 0.0  # exact endpoints
    return grid


def guided_velocity(v_primary: torch.Tensor, v_reference: torch.Tensor | None,
                    scale: float, mode: str) -> torch.Tensor:
    """reference + scale * (primary - reference); mode "none" or scale 1 is primary exactly."""
    if mode not in GUIDANCE_MODES:
        raise ValueError(f"unknown guidance mode {mode!r}")
    if mode == "none" or scale == 1.0:
        return v_primary
    if v_reference is None:
        raise ValueError(f"guidance mode {mode!r} needs a reference prediction")
    if v_primary.shape != v_reference.shape:
        raise ValueError(
            f"shape mismatch {tuple(v_primary.shape)} vs {tuple(v_reference.shape)}"
        )
    return v_reference + scale * (v_primary - v_reference)


def euler_sample(primary_fn, config: SamplingConfig, shape: tuple,
                 generator: torch.Generator, reference_fn=None) -> torch.Tensor:
    """Integrate dx/dt = v from x(1) = gamma * eps down to x(0).

    primary_fn / reference_fn: callables (x, t) -> velocity.
    """
    eps = torch.randn(shape, generator=generator)
    x = flowcore.scale_noise(eps, config.schedule.gamma)
    grid = time_grid(config.steps, config.schedule)
    for i in range(config.steps):
        t_cur, t_next = float(grid[i]), float(grid[i + 1])
        v = primary_fn(x, t_cur)
        if config.guidance_mode != "none" and config.guidance_scale != 1.0:
            if reference_fn is None:
                raise ValueError(f"guidance mode {config.guidance_mode!r} needs a reference model")
            v = guided_velocity(v, reference_fn(x, t_cur), config.guidance_scale, config.guidance_mode)
        x = x + (t_next - t_cur) * v
        if not torch.isfinite(x).all():
            raise RuntimeError(f"non-finite sampler state after step {i} (t={t_cur:.4f})")
    return x


def model_velocity_fns(model: DiT, config: SamplingConfig, reference_model: DiT | None = None):
    """Primary/reference velocity callables for a sampling config.

    cfg mode references the primary model's unconditional branch; autoguidance
    references the weak model's conditional branch.
    """
    def primary(x, t):
        with torch.no_grad():
            return predict_velocity(model, x, t, config.class_id)

    if config.guidance_mode == "cfg":
        def reference(x, t):
            with torch.no_grad():
                return predict_velocity(model, x, t, None)
    elif config.guidance_mode == "autoguidance":
        if reference_model is None:
            raise ValueError("autoguidance needs a weak reference model")
        def reference(x, t):
            with torch.no_grad():
                return predict_velocity(reference_model, x, t, config.class_id)
    else:
        reference = None
    return primary, reference


@torch.no_grad()
def sample_latents(model: DiT, config: SamplingConfig, n: int, generator: torch.Generator,
                   reference_model: DiT | None = None, batch_size: int = 128) -> torch.Tensor:
    """n normalized latent samples for config.class_id."""
    primary, reference = model_velocity_fns(model, config, reference_model)
    out = []
    shape_tail = (model.cfg.tokens, model.cfg.latent_dim)
    for start in range(0, n, batch_size):
        b = min(batch_size, n - start)
        out.append(euler_sample(primary, config, (b, *shape_tail), generator, reference))
    return torch.cat(out)


@torch.no_grad()
def generate_images(model: DiT, tokenizer, latent_stats: LatentStats, config: SamplingConfig,
                    n: int, generator: torch.Generator, reference_model: DiT | None = None,
                    class_ids=None) -> torch.Tensor:
    """Sampled images (n, H, W, 3) in [0, 1].

    class_ids, when given, overrides config.class_id per chunk of samples.
    """
    if class_ids is None:
        class_ids = [config.class_id] * n
    if len(class_ids) != n:
        raise ValueError("class_ids length must equal n")
    latents = []
    # group contiguous runs of the same class to batch them
    start = 0
    while start < n:
        end = start
        while end < n and class_ids[end] == class_ids[start]:
            end += 1
        cfg = SamplingConfig(steps=config.steps, guidance_mode=config.guidance_mode,
                             guidance_scale=config.guidance_scale, schedule=config.schedule,
                             class_id=class_ids[start])
        latents.append(sample_latents(model, cfg, end - start, generator, reference_model))
        start = end
    z = latent_stats.denormalize(torch.cat(latents))
    images = []
    for s in range(0, n, 256):
        images.append(tokenizer.decode_pixels(z[s:s + 256]).clamp(0.0, 1.0))
    return torch.cat(images).permute(0, 2, 3, 1).contiguous()

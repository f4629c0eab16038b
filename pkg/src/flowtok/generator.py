"""Class-conditional diffusion transformer trained with rectified flow on
normalized tokenizer latents, with EMA and class drop for guidance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from . import flowcore
from .vit import AdaLNBlock, make_pos_embed, timestep_embedding

SIZE_PRESETS = {
    # size_tag: (depth, width, heads)
    "S": (3, 64, 4),
    "B": (4, 96, 4),
    "XL": (6, 128, 4),
}


@dataclass
class DiTConfig:
    latent_dim: int = 16
    tokens: int = 16
    depth: int = 4
    width: int = 96
    heads: int = 4
    head_depth: int = 2
    head_width: int = 192
    class_count: int = 8
    class_drop_prob: float = 0.1
    size_tag: str = "B"
    # optimization
    lr: float = 2e-4
    final_lr: float = 2e-5
    epochs: int = 20
    batch_size: int = 128
    grad_clip: float = 1.0
    ema_rate: float = 0.9995
    train_on_posterior_means: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.class_drop_prob <= 1.0):
            raise ValueError("class_drop_prob must lie in [0, 1]")
        if self.width % self.heads != 0:
            raise ValueError("width must be divisible by heads")

    @classmethod
    def from_size(cls, size_tag: str, **overrides) -> "DiTConfig":
        depth, width, heads = SIZE_PRESETS[size_tag]
        return cls(depth=depth, width=width, heads=heads, head_width=2 * width,
                   size_tag=size_tag, **overrides)


@dataclass
class LatentStats:
    mean: torch.Tensor  # (d,)
    std: torch.Tensor   # (d,)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.std + self.mean


@torch.no_grad()
def compute_latent_stats(tokenizer, images: torch.Tensor, batch_size: int = 256) -> LatentStats:
    """Per-channel mean/std of posterior means over an encoded image set."""
    means = []
    for start in range(0, images.shape[0], batch_size):
        post = tokenizer.encode(images[start:start + batch_size])
        means.append(post.mean)
    flat = torch.cat(means).reshape(-1, tokenizer.cfg.latent_dim)
    mean = flat.mean(dim=0)
    std = flat.std(dim=0)
    bad = (std < 1e-6).nonzero().flatten().tolist()
    if bad:
        raise ValueError(f"degenerate latent channels with ~zero std: {bad}")
    return LatentStats(mean=mean, std=std)


class DiT(nn.Module):
    """adaLN DiT over latent token grids with a wider shallow decoupled head."""

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        self.cfg = cfg
        cond = cfg.width
        self.in_proj = nn.Linear(cfg.latent_dim, cfg.width)
        self.pos = make_pos_embed(cfg.tokens, cfg.width)
        self.t_mlp = nn.Sequential(nn.Linear(cond, cond), nn.SiLU(), nn.Linear(cond, cond))
        # one extra embedding row is the learned unconditional (null) class
        self.class_embed = nn.Embedding(cfg.class_count + 1, cond)
        self.blocks = nn.ModuleList(
            AdaLNBlock(cfg.width, cfg.heads, cond) for _ in range(cfg.depth)
        )
        self.head_in = nn.Linear(cfg.width, cfg.head_width)
        self.head_blocks = nn.ModuleList(
            AdaLNBlock(cfg.head_width, cfg.heads, cond) for _ in range(cfg.head_depth)
        )
        self.final_norm = nn.LayerNorm(cfg.head_width, elementwise_affine=False)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(cond, 2 * cfg.head_width))
        nn.init.zeros_(self.final_ada[1].weight)
        nn.init.zeros_(self.final_ada[1].bias)
        self.out_proj = nn.Linear(cfg.head_width, cfg.latent_dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    @property
    def null_class(self) -> int:
        return self.cfg.class_count

    def forward(self, xt: torch.Tensor, t: torch.Tensor, class_ids: torch.Tensor) -> torch.Tensor:
        b = xt.shape[0]
        if xt.shape[1:] != (self.cfg.tokens, self.cfg.latent_dim):
            raise ValueError(
                f"expected latents of shape (B, {self.cfg.tokens}, {self.cfg.latent_dim}), got {tuple(xt.shape)}"
            )
        if t.ndim == 0:
            t = t.expand(b)
        cond = self.t_mlp(timestep_embedding(t, self.cfg.width)) + self.class_embed(class_ids)
        x = self.in_proj(xt) + self.pos
        for blk in self.blocks:
            x = blk(x, cond)
        x = self.head_in(x)
        for blk in self.head_blocks:
            x = blk(x, cond)
        shift, scale = self.final_ada(cond).chunk(2, dim=-1)
        x = self.final_norm(x) * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)
        return self.out_proj(x)


def predict_velocity(model: DiT, xt: torch.Tensor, t, class_id: int | None) -> torch.Tensor:
    """Velocity prediction for one class id (or the unconditional embedding for None)."""
    if class_id is None:
        cid = model.null_class
    else:
        if not (0 <= class_id < model.cfg.class_count):
            raise ValueError(f"class_id {class_id} out of range [0, {model.cfg.class_count})")
        cid = class_id
    ids = torch.full((xt.shape[0],), cid, dtype=torch.long)
    t = torch.as_tensor(t, dtype=torch.float32)
    return model(xt, t, ids)


def ema_update(online: dict, ema: dict, rate: float) -> dict:
    """In-place ema <- rate * ema + (1 - rate) * online over matching tensor maps."""
    if not (0.0 < rate < 1.0):
        raise ValueError(f"ema rate must lie in (0, 1), got {rate}")
    if set(online.keys()) != set(ema.keys()):
        missing = set(online) ^ set(ema)
        raise ValueError(f"tensor map key mismatch: {sorted(missing)}")
    with torch.no_grad():
        for k, v in ema.items():
            if v.dtype.is_floating_point:
                v.mul_(rate).add_(online[k], alpha=1.0 - rate)
            else:
                v.copy_(online[k])
    return ema


@dataclass
class DiTTrainState:
    model: DiT
    cfg: DiTConfig
    schedule: flowcore.NoiseSchedule
    stats: LatentStats
    opt: torch.optim.Optimizer
    ema: dict = field(default_factory=dict)
    step: int = 0

    def ema_init(self):
        self.ema = {k: v.detach().clone() for k, v in self.model.state_dict().items()}

    def ema_model(self) -> DiT:
        snap = DiT(self.cfg)
        snap.load_state_dict(self.ema)
        snap.eval()
        return snap


def dit_train_step(state: DiTTrainState, latents: torch.Tensor, labels: torch.Tensor,
                   generator: torch.Generator) -> list[tuple[int, str, str, float]]:
    """One rectified-flow step on normalized latents with class drop and EMA."""
    cfg = state.cfg
    b = latents.shape[0]
    t = flowcore.sample_timesteps(state.schedule, b, generator)
    eps = torch.randn(latents.shape, generator=generator)
    x1 = flowcore.scale_noise(eps, state.schedule.gamma)
    xt = flowcore.interpolate(latents, x1, t)
    drop = torch.rand(b, generator=generator) < cfg.class_drop_prob
    ids = torch.where(drop, torch.full_like(labels, state.model.null_class), labels)
    v_pred = state.model(xt, t, ids)
    loss = flowcore.rf_loss(v_pred, latents, x1)
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite rf loss at step {state.step}")
    state.opt.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
    state.opt.step()
    ema_update(state.model.state_dict(), state.ema, cfg.ema_rate)
    state.step += 1
    return [(state.step, "train", "dit_rf_loss", float(loss.detach()))]

"""Semantic distillation along the forward flow: the lightweight semantic
decoder, the cosine alignment loss, and masked feature reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from . import flowcore
from .tokenizer import MaskSpec, Tokenizer, reparameterize, sample_mask, trivial_mask
from .vit import TransformerBlock, make_pos_embed

_NORM_FLOOR = 1e-8


@dataclass
class SemanticDecoderConfig:
    depth: int = 2
    width: int = 48
    heads: int = 4
    parameter_budget: int = 60_000

    def check_budget(self, actual: int):
        lo, hi = 0.8 * self.parameter_budget, 1.2 * self.parameter_budget
        if not (lo <= actual <= hi):
            raise ValueError(
                f"semantic decoder has {actual} parameters, outside +-20% of budget {self.parameter_budget}"
            )


class SemanticDecoder(nn.Module):
    """Small transformer mapping (noised) visible latents to teacher-feature space
    at every token position, with learned mask tokens at masked slots."""

    def __init__(self, cfg: SemanticDecoderConfig, latent_dim: int, total_patches: int,
                 teacher_dim: int, check_budget: bool = True):
        super().__init__()
        self.cfg = cfg
        self.total_patches = total_patches
        self.in_proj = nn.Linear(latent_dim, cfg.width)
        self.mask_token = nn.Parameter(torch.zeros(cfg.width))
        self.pos = make_pos_embed(total_patches, cfg.width)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)
        self.out_proj = nn.Linear(cfg.width, teacher_dim)
        if check_budget:
            cfg.check_budget(sum(p.numel() for p in self.parameters()))

    def forward(self, xt_visible: torch.Tensor, mask: MaskSpec) -> torch.Tensor:
        """(B, n_visible, latent_dim) -> (B, total_patches, teacher_dim)."""
        b, nv, _ = xt_visible.shape
        if nv != len(mask.visible_indices):
            raise ValueError(f"got {nv} visible tokens for {len(mask.visible_indices)} visible indices")
        if mask.total != self.total_patches:
            raise ValueError(f"mask covers {mask.total} patches, expected {self.total_patches}")
        x = self.mask_token.expand(b, self.total_patches, self.cfg.width).clone()
        x[:, mask.visible_indices, :] = self.in_proj(xt_visible)
        x = x + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.out_proj(self.norm(x))


def decode_semantics(sem: SemanticDecoder, xt_visible: torch.Tensor, mask: MaskSpec) -> torch.Tensor:
    return sem(xt_visible, mask)


def _token_cosine(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    nu = pred.norm(dim=-1).clamp_min(_NORM_FLOOR)
    nv = target.norm(dim=-1).clamp_min(_NORM_FLOOR)
    return (pred * target).sum(dim=-1) / (nu * nv)


def fsd_loss(sem_pred: torch.Tensor, vfm_features: torch.Tensor,
             region: str = "all", mask: MaskSpec | None = None) -> torch.Tensor:
    """1 - mean per-token cosine between predicted and teacher features.

    region restricts the averaged tokens ("all", "masked", "visible"); an empty
    region yields zero loss.
    """
    if sem_pred.shape[:-1] != vfm_features.shape[:-1]:
        raise ValueError(
            f"token-count mismatch {tuple(sem_pred.shape)} vs {tuple(vfm_features.shape)}"
        )
    if sem_pred.shape[-1] != vfm_features.shape[-1]:
        raise ValueError("feature dims differ; project before calling fsd_loss")
    per_token = 1.0 - _token_cosine(sem_pred, vfm_features)  # (..., tokens)
    if region == "all" or mask is None:
        return per_token.mean()
    idx = mask.masked_indices if region == "masked" else mask.visible_indices
    if len(idx) == 0:
        return torch.zeros(())
    return per_token[..., idx].mean()


def rad_loss(tokenizer: Tokenizer, sem: SemanticDecoder, teacher_bundle, images: torch.Tensor,
             generator: torch.Generator, schedule: flowcore.NoiseSchedule,
             mask: MaskSpec | None = None, t: torch.Tensor | None = None,
             eps: torch.Tensor | None = None, region: str = "all"):
    """Masked flow-state distillation loss against full-image teacher features.

    Returns (loss, diagnostics); diagnostics split the loss into masked-region
    and visible-region means.
    """
    from . import teacher as teacher_mod

    cfg = tokenizer.cfg
    if mask is None:
        mask = sample_mask(generator, cfg.total_patches, cfg.mask_ratio_min, cfg.mask_ratio_max)
    post = tokenizer.encode_visible(images, mask)
    x0_vis = reparameterize(post, generator=generator)
    if t is None:
        t = flowcore.sample_timesteps(schedule, images.shape[0], generator)
    if eps is None:
        eps = torch.randn(x0_vis.shape, generator=generator)
    x1_vis = flowcore.scale_noise(eps, schedule.gamma)
    xt_vis = flowcore.interpolate(x0_vis, x1_vis, t)

    sem_pred = sem(xt_vis, mask)
    vfm = teacher_mod.extract_features(teacher_bundle, images, target_grid=cfg.tokens_per_side)
    per_token = 1.0 - _token_cosine(sem_pred, vfm)

    n_m, n_v = len(mask.masked_indices), len(mask.visible_indices)
    masked_mean = per_token[..., mask.masked_indices].mean() if n_m else torch.zeros(())
    visible_mean = per_token[..., mask.visible_indices].mean()
    if region == "all":
        loss = per_token.mean()
    elif region == "masked":
        loss = masked_mean
    elif region == "visible":
        loss = visible_mean
    else:
        raise ValueError(f"bad region {region!r}")
    diagnostics = {
        "masked_mean": float(masked_mean.detach()),
        "visible_mean": float(visible_mean.detach()),
        "n_masked": n_m,
        "n_visible": n_v,
        "effective_ratio": mask.effective_ratio,
    }
    return loss, diagnostics

"""Frozen feature teacher: a small ViT classifier trained on the toy dataset.

It stands in for a large pretrained backbone, serving three roles: per-token
features for semantic distillation, intermediate features for the perceptual
loss, and logits for the inception-score proxy.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import dataset as ds
from .vit import PatchEmbed, TransformerBlock, make_pos_embed


@dataclass
class TeacherConfig:
    image_size: int = 16
    patch_size: int = 4
    depth: int = 3
    width: int = 64
    heads: int = 4
    class_count: int = 8
    epochs: int = 40
    batch_size: int = 128
    lr: float = 1e-3
    min_train_acc: float = 0.9
    seed: int = 0


class TeacherViT(nn.Module):
    def __init__(self, cfg: TeacherConfig):
        super().__init__()
        self.cfg = cfg
        self.patch = PatchEmbed(cfg.image_size, cfg.patch_size, 3, cfg.width)
        self.pos = make_pos_embed(self.patch.num_patches, cfg.width)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, cfg.class_count)

    def tokens(self, images, depth: int | None = None):
        """Token features after `depth` blocks (default: all, post final norm)."""
        x = self.patch(images) + self.pos
        stop = len(self.blocks) if depth is None else depth
        for blk in self.blocks[:stop]:
            x = blk(x)
        if depth is None:
            x = self.norm(x)
        return x

    def forward(self, images):
        return self.head(self.tokens(images).mean(dim=1))


def state_fingerprint(module: nn.Module) -> str:
    """Content hash over named parameters and buffers, order-independent."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TeacherBundle:
    model: TeacherViT
    feature_dim: int
    class_count: int
    fingerprint: str
    frozen: bool = True

    @classmethod
    def wrap(cls, model: TeacherViT) -> "TeacherBundle":
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return cls(
            model=model,
            feature_dim=model.cfg.width,
            class_count=model.cfg.class_count,
            fingerprint=state_fingerprint(model),
        )


def train_teacher(data: ds.ShapesDataset, cfg: TeacherConfig, metrics_hook=None) -> TeacherBundle:
    """Train the classifier to the configured train-accuracy floor, then freeze."""
    torch.manual_seed(cfg.seed)
    model = TeacherViT(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    step = 0
    for epoch in range(cfg.epochs):
        for x, y in ds.batches(data, "train", cfg.batch_size, cfg.seed, epoch):
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if metrics_hook is not None:
                metrics_hook(step, "train", "teacher_loss", float(loss.detach()))

    model.eval()
    with torch.no_grad():
        x, y = data.split("train")
        acc = float((model(x).argmax(dim=1) == y).float().mean())
    if metrics_hook is not None:
        metrics_hook(step, "train", "teacher_acc", acc)
    if acc < cfg.min_train_acc:
        raise RuntimeError(
            f"teacher train accuracy {acc:.3f} below floor {cfg.min_train_acc}; "
            "increase teacher.epochs or check the dataset"
        )
    return TeacherBundle.wrap(model)


@torch.no_grad()
def extract_features(bundle: TeacherBundle, images: torch.Tensor, target_grid: int | None = None) -> torch.Tensor:
    """Per-token feature grid of the final pre-pooling layer, (B, tokens, feature_dim).

    If target_grid is given and smaller than the teacher's grid, features are
    average-pooled down to align; an impossible alignment raises.
    """
    feats = bundle.model.tokens(images)
    if target_grid is not None:
        g = bundle.model.patch.grid
        if g != target_grid:
            if g % target_grid != 0:
                raise ValueError(f"cannot pool teacher grid {g} down to {target_grid}")
            k = g // target_grid
            b, _, c = feats.shape
            f = feats.view(b, g, g, c).permute(0, 3, 1, 2)
            f = F.avg_pool2d(f, k)
            feats = f.permute(0, 2, 3, 1).reshape(b, target_grid * target_grid, c)
    return feats


@torch.no_grad()
def perceptual_features(bundle: TeacherBundle, images: torch.Tensor) -> torch.Tensor:
    """Mid-depth token features used by the perceptual loss (gradient-free teacher side)."""
    return bundle.model.tokens(images, depth=max(1, bundle.model.cfg.depth // 2))


def perceptual_features_grad(bundle: TeacherBundle, images: torch.Tensor) -> torch.Tensor:
    """Same as perceptual_features but keeps the graph so gradients reach the input."""
    return bundle.model.tokens(images, depth=max(1, bundle.model.cfg.depth // 2))


@torch.no_grad()
def extract_logits(bundle: TeacherBundle, images: torch.Tensor) -> torch.Tensor:
    return bundle.model(images)

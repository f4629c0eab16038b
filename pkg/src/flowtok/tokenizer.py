"""ViT tokenizer: masked encoding into a KL-regularized latent grid and pixel
decoding from noised, mask-completed latents, plus the pixel-side loss terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import flowcore, teacher as teacher_mod
from .vit import PatchEmbed, TransformerBlock, make_pos_embed, unpatchify

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


@dataclass
class TokenizerConfig:
    image_size: int = 16
    patch_size: int = 4
    encoder_depth: int = 3
    encoder_width: int = 64
    encoder_heads: int = 4
    decoder_depth: int = 3
    decoder_width: int = 64
    decoder_heads: int = 4
    latent_dim: int = 16
    # loss weights
    lambda_rec: float = 1.0
    lambda_per: float = 1.0
    lambda_gan: float = 0.5
    lambda_kl: float = 1e-6
    lambda_sem: float = 1.0
    adversarial_enabled: bool = False
    # training-path toggles (ablation arms flip these)
    mask_enabled: bool = True
    flow_enabled: bool = True
    sem_enabled: bool = True
    sem_region: str = "all"       # "all" | "masked" | "visible"
    mask_ratio_min: float = -0.1
    mask_ratio_max: float = 0.4
    # optimization
    lr: float = 4e-4
    epochs: int = 32
    batch_size: int = 64
    warmup_frac: float = 0.25
    ema_rate: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        for name in ("lambda_rec", "lambda_per", "lambda_gan", "lambda_kl", "lambda_sem"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.sem_region not in ("all", "masked", "visible"):
            raise ValueError(f"bad sem_region {self.sem_region!r}")

    @property
    def tokens_per_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def total_patches(self) -> int:
        return self.tokens_per_side ** 2


@dataclass
class LatentPosterior:
    mean: torch.Tensor    # (B, tokens, d)
    logvar: torch.Tensor  # (B, tokens, d), clamped

    def __post_init__(self):
        self.logvar = self.logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)
        if not torch.isfinite(self.mean).all():
            raise ValueError("posterior mean contains non-finite values")


@dataclass
class MaskSpec:
    ratio: float
    effective_ratio: float
    visible_indices: torch.Tensor  # sorted LongTensor
    masked_indices: torch.Tensor   # sorted LongTensor

    @property
    def total(self) -> int:
        return len(self.visible_indices) + len(self.masked_indices)


def sample_mask(generator: torch.Generator, total_patches: int,
                ratio_min: float = -0.1, ratio_max: float = 0.4,
                forced_ratio: float | None = None) -> MaskSpec:
    """Draw a mask ratio from U(ratio_min, ratio_max); negative means no mask."""
    if total_patches < 1:
        raise ValueError("total_patches must be >= 1")
    if forced_ratio is None:
        ratio = float(torch.rand(1, generator=generator)) * (ratio_max - ratio_min) + ratio_min
    else:
        ratio = forced_ratio
    effective = max(ratio, 0.0)
    n_masked = round(effective * total_patches)
    n_masked = min(n_masked, total_patches - 1)  # keep at least one visible patch
    perm = torch.randperm(total_patches, generator=generator)
    masked = perm[:n_masked].sort().values
    visible = perm[n_masked:].sort().values
    return MaskSpec(ratio=ratio, effective_ratio=effective,
                    visible_indices=visible, masked_indices=masked)


def trivial_mask(total_patches: int) -> MaskSpec:
    return MaskSpec(ratio=0.0, effective_ratio=0.0,
                    visible_indices=torch.arange(total_patches),
                    masked_indices=torch.arange(0))


class Tokenizer(nn.Module):
    """Encoder producing per-token Gaussian posteriors and a pixel decoder that
    reconstructs images from mask-completed latent grids."""

    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.latent_dim
        # encoder
        self.patch = PatchEmbed(cfg.image_size, cfg.patch_size, 3, cfg.encoder_width)
        self.enc_pos = make_pos_embed(cfg.total_patches, cfg.encoder_width)
        self.enc_blocks = nn.ModuleList(
            TransformerBlock(cfg.encoder_width, cfg.encoder_heads) for _ in range(cfg.encoder_depth)
        )
        self.enc_norm = nn.LayerNorm(cfg.encoder_width)
        self.enc_head = nn.Linear(cfg.encoder_width, 2 * d)
        # latent-space mask token used to complete grids before decoding
        self.mask_token = nn.Parameter(torch.zeros(d))
        # pixel decoder
        self.dec_in = nn.Linear(d, cfg.decoder_width)
        self.dec_pos = make_pos_embed(cfg.total_patches, cfg.decoder_width)
        self.dec_blocks = nn.ModuleList(
            TransformerBlock(cfg.decoder_width, cfg.decoder_heads) for _ in range(cfg.decoder_depth)
        )
        self.dec_norm = nn.LayerNorm(cfg.decoder_width)
        self.dec_out = nn.Linear(cfg.decoder_width, cfg.patch_size ** 2 * 3)

    # -- encoding ---------------------------------------------------------

    def _encoder_tokens(self, images, visible: torch.Tensor, penultimate: bool = False):
        x = self.patch(images) + self.enc_pos
        if len(visible) != self.cfg.total_patches:
            x = x[:, visible, :]
        blocks = self.enc_blocks[:-1] if penultimate else self.enc_blocks
        for blk in blocks:
            x = blk(x)
        if not penultimate:
            x = self.enc_norm(x)
        return x

    def encode(self, images: torch.Tensor) -> LatentPosterior:
        """Posterior over all tokens; deterministic given weights and input."""
        return self.encode_visible(images, trivial_mask(self.cfg.total_patches))

    def encode_visible(self, images: torch.Tensor, mask: MaskSpec) -> LatentPosterior:
        """Posterior over visible tokens only, ordered by ascending original index."""
        if len(mask.visible_indices) == 0:
            raise ValueError("mask leaves no visible patches")
        if mask.total != self.cfg.total_patches:
            raise ValueError(f"mask covers {mask.total} patches, expected {self.cfg.total_patches}")
        x = self._encoder_tokens(images, mask.visible_indices)
        mean, logvar = self.enc_head(x).chunk(2, dim=-1)
        return LatentPosterior(mean=mean, logvar=logvar)

    def penultimate_features(self, images: torch.Tensor) -> torch.Tensor:
        """Second-last encoder layer token features, (B, tokens, encoder_width)."""
        return self._encoder_tokens(images, torch.arange(self.cfg.total_patches), penultimate=True)

    # -- decoding ---------------------------------------------------------

    def complete_tokens(self, latent_visible: torch.Tensor, mask: MaskSpec) -> torch.Tensor:
        """Scatter visible latents into a full grid, filling masked slots with the mask token."""
        b, nv, d = latent_visible.shape
        if nv != len(mask.visible_indices):
            raise ValueError(f"got {nv} visible latents for {len(mask.visible_indices)} visible indices")
        full = self.mask_token.expand(b, mask.total, d).clone()
        full[:, mask.visible_indices, :] = latent_visible
        return full

    def decode_pixels(self, latent_full: torch.Tensor) -> torch.Tensor:
        """Full latent grid (B, total_patches, d) to an image batch (B, 3, H, W)."""
        if latent_full.shape[1] != self.cfg.total_patches:
            raise ValueError(
                f"decoder expects {self.cfg.total_patches} tokens, got {latent_full.shape[1]}"
            )
        x = self.dec_in(latent_full) + self.dec_pos
        for blk in self.dec_blocks:
            x = blk(x)
        x = self.dec_out(self.dec_norm(x))
        return unpatchify(x, self.cfg.patch_size, 3)

    def encoder_parameters(self):
        mods = [self.patch, self.enc_blocks, self.enc_norm, self.enc_head]
        for m in mods:
            yield from m.parameters()
        yield self.enc_pos

    def decoder_parameters(self):
        for m in (self.dec_in, self.dec_blocks, self.dec_norm, self.dec_out):
            yield from m.parameters()
        yield self.dec_pos
        yield self.mask_token


def reparameterize(post: LatentPosterior, generator: torch.Generator | None = None,
                   eps: torch.Tensor | None = None) -> torch.Tensor:
    """x0 = mean + exp(0.5 * logvar) * eps, eps ~ N(0, 1)."""
    if eps is None:
        eps = torch.randn(post.mean.shape, generator=generator)
    return post.mean + torch.exp(0.5 * post.logvar) * eps


def kl_loss(post: LatentPosterior) -> torch.Tensor:
    """Mean KL to the standard normal: 0.5 * (mu^2 + e^logvar - 1 - logvar)."""
    return 0.5 * (post.mean.pow(2) + post.logvar.exp() - 1.0 - post.logvar).mean()


def reconstruction_loss(i_hat: torch.Tensor, i: torch.Tensor) -> torch.Tensor:
    if i_hat.shape != i.shape:
        raise ValueError(f"shape mismatch {tuple(i_hat.shape)} vs {tuple(i.shape)}")
    return F.mse_loss(i_hat, i)


def perceptual_loss(i_hat: torch.Tensor, i: torch.Tensor, teacher: teacher_mod.TeacherBundle) -> torch.Tensor:
    """MSE between frozen-teacher intermediate features of reconstruction and input."""
    if i_hat.shape != i.shape:
        raise ValueError(f"shape mismatch {tuple(i_hat.shape)} vs {tuple(i.shape)}")
    target = teacher_mod.perceptual_features(teacher, i)
    pred = teacher_mod.perceptual_features_grad(teacher, i_hat)
    return F.mse_loss(pred, target)


class PatchDiscriminator(nn.Module):
    """Tiny conv discriminator producing a grid of real/fake scores."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, channels, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels * 2, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(channels * 2, 1, 3, padding=1),
        )

    def forward(self, images):
        return self.net(images)


def hinge_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def hinge_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return -fake_scores.mean()


def adversarial_losses(i_hat: torch.Tensor, i: torch.Tensor, discriminator: PatchDiscriminator,
                       enabled: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """(generator hinge loss, discriminator hinge loss) for a reconstruction batch."""
    if not enabled:
        raise ValueError("adversarial loss requested but adversarial_enabled is false")
    if i_hat.shape != i.shape:
        raise ValueError(f"shape mismatch {tuple(i_hat.shape)} vs {tuple(i.shape)}")
    gen = hinge_g_loss(discriminator(i_hat))
    disc = hinge_d_loss(discriminator(i.detach()), discriminator(i_hat.detach()))
    return gen, disc


# -- training steps -------------------------------------------------------


@dataclass
class TokenizerTrainState:
    tok: Tokenizer
    sem: "nn.Module | None"
    teacher: teacher_mod.TeacherBundle
    cfg: TokenizerConfig
    schedule: flowcore.NoiseSchedule
    opt: torch.optim.Optimizer
    disc: PatchDiscriminator | None = None
    disc_opt: torch.optim.Optimizer | None = None
    ema: dict = field(default_factory=dict)
    step: int = 0

    def ema_init(self):
        self.ema = {k: v.detach().clone() for k, v in self.tok.state_dict().items()}

    def ema_tokenizer(self) -> Tokenizer:
        """Snapshot tokenizer carrying the EMA weights."""
        snap = Tokenizer(self.cfg)
        snap.load_state_dict(self.ema)
        snap.eval()
        return snap


def tokenizer_losses(state: TokenizerTrainState, images: torch.Tensor, mask: MaskSpec,
                     t: torch.Tensor, eps_flow: torch.Tensor, eps_rep: torch.Tensor):
    """All Eq-style loss terms for one batch given externally drawn randomness.

    Returns (total, terms dict, aux dict). Pure given the draws; the train step
    and the gradient tests both go through here.
    """
    from . import semdistill  # local import to avoid a cycle

    cfg = state.cfg
    post = state.tok.encode_visible(images, mask)
    x0_vis = reparameterize(post, eps=eps_rep)

    if cfg.flow_enabled:
        x1_vis = flowcore.scale_noise(eps_flow, state.schedule.gamma)
        xt_vis = flowcore.interpolate(x0_vis, x1_vis, t)
    else:
        xt_vis = x0_vis

    terms = {}
    full = state.tok.complete_tokens(xt_vis, mask)
    i_hat = state.tok.decode_pixels(full)
    terms["rec"] = reconstruction_loss(i_hat, images)
    terms["per"] = perceptual_loss(i_hat, images, state.teacher)
    terms["kl"] = kl_loss(post)

    if cfg.sem_enabled:
        if state.sem is None:
            raise ValueError("sem_enabled but no semantic decoder in the train state")
        sem_pred = state.sem(xt_vis, mask)
        vfm = teacher_mod.extract_features(state.teacher, images, target_grid=cfg.tokens_per_side)
        terms["sem"] = semdistill.fsd_loss(sem_pred, vfm, region=cfg.sem_region, mask=mask)
    else:
        terms["sem"] = torch.zeros(())

    disc_loss = None
    if cfg.adversarial_enabled:
        if state.disc is None:
            raise ValueError("adversarial_enabled but no discriminator in the train state")
        terms["gan"], disc_loss = adversarial_losses(i_hat, images, state.disc)
    else:
        terms["gan"] = torch.zeros(())

    total = (cfg.lambda_rec * terms["rec"] + cfg.lambda_per * terms["per"]
             + cfg.lambda_gan * terms["gan"] + cfg.lambda_kl * terms["kl"]
             + cfg.lambda_sem * terms["sem"])
    aux = {"i_hat": i_hat, "disc_loss": disc_loss, "posterior": post}
    return total, terms, aux


def draw_step_randomness(state: TokenizerTrainState, batch_size: int, generator: torch.Generator):
    """One (mask, t, flow noise, reparam noise) draw for a training step."""
    cfg = state.cfg
    if cfg.mask_enabled:
        mask = sample_mask(generator, cfg.total_patches, cfg.mask_ratio_min, cfg.mask_ratio_max)
    else:
        mask = trivial_mask(cfg.total_patches)
    n_vis = len(mask.visible_indices)
    if cfg.flow_enabled:
        t = flowcore.sample_timesteps(state.schedule, batch_size, generator)
    else:
        t = torch.zeros(batch_size)
    eps_flow = torch.randn((batch_size, n_vis, cfg.latent_dim), generator=generator)
    eps_rep = torch.randn((batch_size, n_vis, cfg.latent_dim), generator=generator)
    return mask, t, eps_flow, eps_rep


def _check_finite(total, terms, step):
    if not torch.isfinite(total):
        dump = {k: float(v) for k, v in terms.items()}
        raise RuntimeError(f"non-finite tokenizer loss at step {step}: {dump}")


def tokenizer_train_step(state: TokenizerTrainState, images: torch.Tensor,
                         generator: torch.Generator) -> list[tuple[int, str, str, float]]:
    """One optimization step; returns MetricRecord rows (step, split, metric, value)."""
    mask, t, eps_flow, eps_rep = draw_step_randomness(state, images.shape[0], generator)
    total, terms, aux = tokenizer_losses(state, images, mask, t, eps_flow, eps_rep)
    _check_finite(total, terms, state.step)
    state.opt.zero_grad()
    total.backward()
    state.opt.step()
    if state.cfg.adversarial_enabled and aux["disc_loss"] is not None:
        state.disc_opt.zero_grad()
        aux["disc_loss"].backward()
        state.disc_opt.step()
    with torch.no_grad():
        online = state.tok.state_dict()
        r = state.cfg.ema_rate
        for k, v in state.ema.items():
            if v.dtype.is_floating_point:
                v.mul_(r).add_(online[k], alpha=1.0 - r)
            else:
                v.copy_(online[k])
    state.step += 1
    records = [(state.step, "train", f"tok_{k}", float(v.detach())) for k, v in terms.items()]
    records.append((state.step, "train", "tok_total", float(total.detach())))
    return records


def encoder_checksum(tok: Tokenizer) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, t in sorted(tok.state_dict().items()):
        if name.startswith(("patch.", "enc_")):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def decoder_finetune_step(state: TokenizerTrainState, images: torch.Tensor) -> list[tuple[int, str, str, float]]:
    """Decoder-only finetuning: frozen encoder, clean unmasked latents, no KL/sem terms."""
    for p in state.tok.encoder_parameters():
        if p.requires_grad:
            raise AssertionError("decoder finetuning requires a frozen encoder")
    cfg = state.cfg
    with torch.no_grad():
        post = state.tok.encode(images)
    i_hat = state.tok.decode_pixels(post.mean)
    terms = {"rec": reconstruction_loss(i_hat, images),
             "per": perceptual_loss(i_hat, images, state.teacher)}
    total = cfg.lambda_rec * terms["rec"] + cfg.lambda_per * terms["per"]
    disc_loss = None
    if cfg.adversarial_enabled:
        gan, disc_loss = adversarial_losses(i_hat, images, state.disc)
        terms["gan"] = gan
        total = total + cfg.lambda_gan * gan
    _check_finite(total, terms, state.step)
    state.opt.zero_grad()
    total.backward()
    state.opt.step()
    if disc_loss is not None:
        state.disc_opt.zero_grad()
        disc_loss.backward()
        state.disc_opt.step()
    state.step += 1
    records = [(state.step, "finetune", f"tok_{k}", float(v.detach())) for k, v in terms.items()]
    records.append((state.step, "finetune", "tok_total", float(total.detach())))
    return records

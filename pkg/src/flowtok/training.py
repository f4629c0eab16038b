"""Training loops wiring the per-step functions to data, LR schedules and EMA."""

from __future__ import annotations

import math

import torch

from . import dataset as ds
from . import flowcore, generator as gen_mod, semdistill, teacher as teacher_mod, tokenizer as tok_mod


def tokenizer_schedule(cfg: tok_mod.TokenizerConfig) -> flowcore.NoiseSchedule:
    """Shift schedule matching the tokenizer's latent grid and dimension."""
    s = flowcore.shift_factor(cfg.tokens_per_side, cfg.latent_dim)
    return flowcore.NoiseSchedule(kind="shift", shift=s)


def warmup_cosine_lr(step: int, total: int, base_lr: float, warmup_frac: float) -> float:
    warmup = max(1, int(total * warmup_frac))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def linear_decay_lr(step: int, total: int, base_lr: float, final_lr: float) -> float:
    frac = min(1.0, step / max(1, total))
    return base_lr + (final_lr - base_lr) * frac


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def build_tokenizer_state(cfg: tok_mod.TokenizerConfig, teacher_bundle: teacher_mod.TeacherBundle,
                          sem_cfg: semdistill.SemanticDecoderConfig | None = None,
                          schedule: flowcore.NoiseSchedule | None = None,
                          init_encoder_from_teacher: bool = False) -> tok_mod.TokenizerTrainState:
    torch.manual_seed(cfg.seed)
    tok = tok_mod.Tokenizer(cfg)
    if init_encoder_from_teacher:
        copy_teacher_into_encoder(teacher_bundle, tok)
    sem = None
    params = list(tok.parameters())
    if cfg.sem_enabled:
        sem_cfg = sem_cfg or semdistill.SemanticDecoderConfig()
        sem = semdistill.SemanticDecoder(sem_cfg, cfg.latent_dim, cfg.total_patches,
                                         teacher_bundle.feature_dim)
        params += list(sem.parameters())
    disc = disc_opt = None
    if cfg.adversarial_enabled:
        disc = tok_mod.PatchDiscriminator()
        disc_opt = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=(0.9, 0.95))
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.95))
    if schedule is None:
        schedule = tokenizer_schedule(cfg)
    state = tok_mod.TokenizerTrainState(tok=tok, sem=sem, teacher=teacher_bundle, cfg=cfg,
                                        schedule=schedule, opt=opt, disc=disc, disc_opt=disc_opt)
    state.ema_init()
    return state


def copy_teacher_into_encoder(bundle: teacher_mod.TeacherBundle, tok: tok_mod.Tokenizer):
    """Initialize encoder weights from the teacher where shapes line up."""
    src = bundle.model.state_dict()
    dst = tok.state_dict()
    mapping = {"patch.": "patch.", "pos": "enc_pos", "blocks.": "enc_blocks.", "norm.": "enc_norm."}
    copied = {}
    for sk, sv in src.items():
        for pre, to in mapping.items():
            if sk.startswith(pre):
                dk = to + sk[len(pre):] if pre.endswith(".") else to
                if dk in dst and dst[dk].shape == sv.shape:
                    copied[dk] = sv.clone()
    dst.update(copied)
    tok.load_state_dict(dst)
    return sorted(copied)


def train_tokenizer(data: ds.ShapesDataset, teacher_bundle: teacher_mod.TeacherBundle,
                    cfg: tok_mod.TokenizerConfig, metrics_hook=None,
                    sem_cfg: semdistill.SemanticDecoderConfig | None = None,
                    schedule: flowcore.NoiseSchedule | None = None,
                    init_encoder_from_teacher: bool = False) -> tok_mod.TokenizerTrainState:
    state = build_tokenizer_state(cfg, teacher_bundle, sem_cfg, schedule, init_encoder_from_teacher)
    g = torch.Generator().manual_seed(cfg.seed + 1)
    steps_per_epoch = math.ceil(data.size("train") / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    for epoch in range(cfg.epochs):
        for x, _ in ds.batches(data, "train", cfg.batch_size, cfg.seed, epoch):
            _set_lr(state.opt, warmup_cosine_lr(state.step, total, cfg.lr, cfg.warmup_frac))
            records = tok_mod.tokenizer_train_step(state, x, g)
            if metrics_hook is not None:
                for rec in records:
                    metrics_hook(*rec)
    return state


def finetune_decoder(data: ds.ShapesDataset, state: tok_mod.TokenizerTrainState,
                     epochs: int, metrics_hook=None) -> tok_mod.TokenizerTrainState:
    """Freeze the encoder and retrain only the pixel decoder."""
    cfg = state.cfg
    for p in state.tok.encoder_parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(state.tok.decoder_parameters(), lr=cfg.lr, betas=(0.9, 0.95))
    ft = tok_mod.TokenizerTrainState(tok=state.tok, sem=None, teacher=state.teacher, cfg=cfg,
                                     schedule=state.schedule, opt=opt,
                                     disc=state.disc, disc_opt=state.disc_opt, step=0)
    steps_per_epoch = math.ceil(data.size("train") / cfg.batch_size)
    total = steps_per_epoch * epochs
    for epoch in range(epochs):
        for x, _ in ds.batches(data, "train", cfg.batch_size, cfg.seed + 77, epoch):
            _set_lr(opt, warmup_cosine_lr(ft.step, total, cfg.lr, 0.1))
            records = tok_mod.decoder_finetune_step(ft, x)
            if metrics_hook is not None:
                for rec in records:
                    metrics_hook(*rec)
    return ft


def encode_dataset_latents(tokenizer, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    with torch.no_grad():
        out = []
        for start in range(0, images.shape[0], batch_size):
            out.append(tokenizer.encode(images[start:start + batch_size]).mean)
    return torch.cat(out)


def train_dit(data: ds.ShapesDataset, tokenizer, cfg: gen_mod.DiTConfig,
              schedule_kind: str = "shift", gamma: float = 1.0,
              metrics_hook=None) -> gen_mod.DiTTrainState:
    """Train the diffusion transformer on normalized posterior-mean latents."""
    images, labels = data.split("train")
    stats = gen_mod.compute_latent_stats(tokenizer, images)
    raw = encode_dataset_latents(tokenizer, images)
    if not cfg.train_on_posterior_means:
        with torch.no_grad():
            g0 = torch.Generator().manual_seed(cfg.seed + 2)
            post = tokenizer.encode(images)
            raw = tok_mod.reparameterize(post, generator=g0)
    latents = stats.normalize(raw)

    r = tokenizer.cfg.tokens_per_side
    s = flowcore.shift_factor(r, cfg.latent_dim)
    if schedule_kind == "shift":
        schedule = flowcore.NoiseSchedule(kind="shift", shift=s, gamma=gamma)
    elif schedule_kind == "uniform":
        schedule = flowcore.NoiseSchedule(kind="uniform", gamma=gamma)
    elif schedule_kind == "logit_normal":
        schedule = flowcore.NoiseSchedule(kind="logit_normal", gamma=gamma)
    else:
        raise ValueError(f"unknown schedule kind {schedule_kind!r}")

    torch.manual_seed(cfg.seed)
    model = gen_mod.DiT(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.95), weight_decay=0.0)
    state = gen_mod.DiTTrainState(model=model, cfg=cfg, schedule=schedule, stats=stats, opt=opt)
    state.ema_init()

    g = torch.Generator().manual_seed(cfg.seed + 1)
    n = latents.shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    for epoch in range(cfg.epochs):
        order = ds.epoch_permutation(n, cfg.seed, epoch)
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size].copy())
            _set_lr(opt, linear_decay_lr(state.step, total, cfg.lr, cfg.final_lr))
            records = gen_mod.dit_train_step(state, latents[idx], labels[idx], g)
            if metrics_hook is not None:
                for rec in records:
                    metrics_hook(*rec)
    return state

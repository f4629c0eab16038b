"""Glue between ExperimentConfig and the training/eval modules: builds typed
component configs, runs pipeline stages, and persists/loads checkpoints.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

from .. import dataset as ds
from .. import evalsuite, flowcore, generator as gen_mod, sampler as sampler_mod
from .. import semdistill, teacher as teacher_mod, tokenizer as tok_mod, training
from .checkpoint import CheckpointBundle, load_checkpoint, save_checkpoint
from .config import ExperimentConfig


# -- config adapters ------------------------------------------------------


def dataset_spec_from(cfg: ExperimentConfig) -> ds.DatasetSpec:
    return ds.DatasetSpec(**cfg.section("dataset"))


def teacher_config_from(cfg: ExperimentConfig) -> teacher_mod.TeacherConfig:
    sec = cfg.section("teacher")
    return teacher_mod.TeacherConfig(
        image_size=cfg.get("dataset.image_size"),
        patch_size=cfg.get("tokenizer.patch_size"),
        class_count=cfg.get("dataset.class_count"),
        **sec,
    )


def tokenizer_config_from(cfg: ExperimentConfig) -> tok_mod.TokenizerConfig:
    sec = cfg.section("tokenizer")
    sec.pop("init_encoder_from_teacher")
    sec.pop("sem_timestep_conditioning")
    return tok_mod.TokenizerConfig(image_size=cfg.get("dataset.image_size"), **sec)


def sem_config_from(cfg: ExperimentConfig) -> semdistill.SemanticDecoderConfig:
    return semdistill.SemanticDecoderConfig(**cfg.section("semdec"))


def dit_config_from(cfg: ExperimentConfig, weak: bool = False) -> gen_mod.DiTConfig:
    sec = cfg.section("generator")
    size_tag = sec.pop("size_tag")
    schedule_kind = sec.pop("schedule_kind")
    gamma = sec.pop("gamma")
    if weak:
        bad = cfg.section("bad_generator")
        size_tag = bad["size_tag"]
        sec["epochs"] = bad["epochs"]
    tok_cfg = tokenizer_config_from(cfg)
    dit_cfg = gen_mod.DiTConfig.from_size(
        size_tag,
        latent_dim=tok_cfg.latent_dim,
        tokens=tok_cfg.total_patches,
        class_count=cfg.get("dataset.class_count"),
        **sec,
    )
    return dit_cfg


def sampling_config_from(cfg: ExperimentConfig, tok_cfg: tok_mod.TokenizerConfig) -> sampler_mod.SamplingConfig:
    sec = cfg.section("sampler")
    s = flowcore.shift_factor(tok_cfg.tokens_per_side, tok_cfg.latent_dim)
    schedule = flowcore.NoiseSchedule(kind="shift", shift=s, gamma=cfg.get("generator.gamma"))
    return sampler_mod.SamplingConfig(
        steps=sec["steps"], guidance_mode=sec["guidance_mode"],
        guidance_scale=sec["guidance_scale"], schedule=schedule, class_id=sec["class_id"],
    )


# -- pipeline stages ------------------------------------------------------


def run_gen_data(cfg: ExperimentConfig, out_dir) -> Path:
    spec = dataset_spec_from(cfg)
    if spec.source == "synthetic":
        return ds.generate_synthetic(spec, out_dir)
    return ds.ingest_folder(spec.source, spec, out_dir)


def run_train_teacher(cfg: ExperimentConfig, data_dir, out_path, metrics_hook=None) -> teacher_mod.TeacherBundle:
    data = ds.ShapesDataset(data_dir)
    tcfg = teacher_config_from(cfg)
    bundle = teacher_mod.train_teacher(data, tcfg, metrics_hook)
    ck = CheckpointBundle(kind="teacher", config_hash=cfg.hash(),
                          meta={"config": asdict(tcfg), "fingerprint": bundle.fingerprint})
    ck.add_module("model", bundle.model)
    save_checkpoint(ck, out_path)
    return bundle


def load_teacher(path, **kw) -> teacher_mod.TeacherBundle:
    ck = load_checkpoint(path, **kw)
    if ck.kind != "teacher":
        raise ValueError(f"{path} holds a {ck.kind!r} checkpoint, expected teacher")
    tcfg = teacher_mod.TeacherConfig(**ck.meta["config"])
    model = teacher_mod.TeacherViT(tcfg)
    model.load_state_dict(ck.module_state("model"))
    return teacher_mod.TeacherBundle.wrap(model)


def save_tokenizer_state(state: tok_mod.TokenizerTrainState, cfg_hash: str, out_path,
                         finetuned: bool = False):
    ck = CheckpointBundle(kind="tokenizer", step=state.step, config_hash=cfg_hash,
                          meta={"config": asdict(state.cfg),
                                "schedule": state.schedule.to_dict(),
                                "teacher_fingerprint": state.teacher.fingerprint,
                                "finetuned": finetuned})
    ck.add_module("tok", state.tok)
    ck.tensors.update({f"ema.{k}": v.detach().clone() for k, v in state.ema.items()})
    if state.sem is not None:
        ck.add_module("sem", state.sem)
        ck.meta["sem_config"] = asdict(state.sem.cfg)
    save_checkpoint(ck, out_path)


def run_train_tokenizer(cfg: ExperimentConfig, data_dir, teacher_bundle, out_path,
                        metrics_hook=None) -> tok_mod.TokenizerTrainState:
    data = ds.ShapesDataset(data_dir)
    tok_cfg = tokenizer_config_from(cfg)
    schedule = training.tokenizer_schedule(tok_cfg)
    schedule.gamma = cfg.get("generator.gamma")  # one gamma for FSD and DiT noise
    state = training.train_tokenizer(
        data, teacher_bundle, tok_cfg, metrics_hook,
        sem_cfg=sem_config_from(cfg) if tok_cfg.sem_enabled else None,
        schedule=schedule,
        init_encoder_from_teacher=cfg.get("tokenizer.init_encoder_from_teacher"),
    )
    save_tokenizer_state(state, cfg.hash(), out_path)
    return state


def load_tokenizer(path, use_ema: bool = True, **kw) -> tok_mod.Tokenizer:
    ck = load_checkpoint(path, **kw)
    if ck.kind != "tokenizer":
        raise ValueError(f"{path} holds a {ck.kind!r} checkpoint, expected tokenizer")
    cfg = tok_mod.TokenizerConfig(**ck.meta["config"])
    tok = tok_mod.Tokenizer(cfg)
    tok.load_state_dict(ck.module_state("ema" if use_ema else "tok"))
    tok.eval()
    return tok


def run_finetune_decoder(cfg: ExperimentConfig, data_dir, teacher_bundle, tokenizer_path,
                         out_path, metrics_hook=None) -> tok_mod.Tokenizer:
    """Finetune the pixel decoder of the (EMA) tokenizer with a frozen encoder."""
    data = ds.ShapesDataset(data_dir)
    tok = load_tokenizer(tokenizer_path, use_ema=True)
    base = tok_mod.TokenizerTrainState(
        tok=tok, sem=None, teacher=teacher_bundle, cfg=tok.cfg,
        schedule=training.tokenizer_schedule(tok.cfg),
        opt=torch.optim.Adam(tok.decoder_parameters(), lr=tok.cfg.lr),
    )
    ft = training.finetune_decoder(data, base, cfg.get("finetune.epochs"), metrics_hook)
    ft.ema = {k: v.detach().clone() for k, v in ft.tok.state_dict().items()}
    save_tokenizer_state(ft, cfg.hash(), out_path, finetuned=True)
    return ft.tok


def run_train_dit(cfg: ExperimentConfig, data_dir, tokenizer_path, out_path,
                  weak: bool = False, metrics_hook=None) -> gen_mod.DiTTrainState:
    data = ds.ShapesDataset(data_dir)
    tok = load_tokenizer(tokenizer_path, use_ema=True)
    dit_cfg = dit_config_from(cfg, weak=weak)
    state = training.train_dit(data, tok, dit_cfg,
                               schedule_kind=cfg.get("generator.schedule_kind"),
                               gamma=cfg.get("generator.gamma"), metrics_hook=metrics_hook)
    ck = CheckpointBundle(kind="dit", step=state.step, config_hash=cfg.hash(),
                          meta={"config": asdict(state.cfg),
                                "schedule": state.schedule.to_dict(),
                                "latent_stats": {"mean": state.stats.mean.tolist(),
                                                 "std": state.stats.std.tolist()}})
    ck.add_module("model", state.model)
    ck.tensors.update({f"ema.{k}": v.detach().clone() for k, v in state.ema.items()})
    save_checkpoint(ck, out_path)
    return state


def load_dit(path, use_ema: bool = True, **kw):
    """Returns (model, latent_stats, schedule)."""
    ck = load_checkpoint(path, **kw)
    if ck.kind != "dit":
        raise ValueError(f"{path} holds a {ck.kind!r} checkpoint, expected dit")
    cfg = gen_mod.DiTConfig(**ck.meta["config"])
    model = gen_mod.DiT(cfg)
    model.load_state_dict(ck.module_state("ema" if use_ema else "model"))
    model.eval()
    stats = gen_mod.LatentStats(
        mean=torch.tensor(ck.meta["latent_stats"]["mean"]),
        std=torch.tensor(ck.meta["latent_stats"]["std"]),
    )
    schedule = flowcore.NoiseSchedule.from_dict(ck.meta["schedule"])
    return model, stats, schedule


# -- evaluation helpers ---------------------------------------------------


def probe_on_flow(tok: tok_mod.Tokenizer, data: ds.ShapesDataset, t: float, gamma: float,
                  seed: int = 0, source: str = "latent", split: str = "val",
                  apply_shift: bool = True) -> evalsuite.ProbeReport:
    """Linear probe on flow states at nominal time t.

    The nominal t lives on the uniform (pre-shift) grid and is mapped through
    the tokenizer's dimension-dependent shift, the same convention training
    and sampling use, so a given nominal t stresses latents of every dimension
    equally. apply_shift=False probes at the raw t instead.
    """
    images, labels = data.split(split)
    t_eff = t
    if apply_shift and source == "latent":
        s = flowcore.shift_factor(tok.cfg.tokens_per_side, tok.cfg.latent_dim)
        t_eff = float(flowcore.shift_map(t, s))
    report = evalsuite.probe_on_flow_averaged(tok, images, labels.numpy(), t_eff, gamma,
                                              seed=seed, source=source)
    report.t = t
    return report


def eval_generation_arm(cfg: ExperimentConfig, tok, dit_state_or_path, data: ds.ShapesDataset,
                        teacher_bundle, seed: int = 0, reference_model=None) -> dict:
    if isinstance(dit_state_or_path, (str, Path)):
        model, stats, _ = load_dit(dit_state_or_path)
    else:
        model, stats = dit_state_or_path.ema_model(), dit_state_or_path.stats
    samp = sampling_config_from(cfg, tok.cfg)
    ref_images, _ = data.split("val")
    g = torch.Generator().manual_seed(seed)
    out = evalsuite.evaluate_generation(model, tok, stats, teacher_bundle,
                                        cfg.get("eval.n_gen"), ref_images, samp, g,
                                        reference_model=reference_model)
    out.pop("images")
    return out

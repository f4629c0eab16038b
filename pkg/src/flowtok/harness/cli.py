"""Command-line experiment surface."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .. import dataset as ds
from .. import evalsuite, sampler as sampler_mod
from . import ablate as ablate_mod
from . import pipeline
from .checkpoint import read_header
from .config import ConfigError, ExperimentConfig
from .metrics import MetricsLogger, read_metrics

COMMANDS = ("gen-data", "train-teacher", "train-tokenizer", "finetune-decoder",
            "train-dit", "train-bad-dit", "sample", "probe", "eval-gen", "eval-rec",
            "export-features", "ablate", "report")


def _add_common(p):
    p.add_argument("--config", help="config file of section.key=value lines")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--run-root", default=None, help="run directory root (env FLOWTOK_RUN_ROOT)")
    p.add_argument("--out", default=None, help="explicit output directory")
    p.add_argument("--allow-hash-mismatch", action="store_true",
                   help="proceed when a checkpoint's config hash differs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowtok")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, **flags):
        p = sub.add_parser(name)
        _add_common(p)
        for flag, kw in flags.items():
            p.add_argument(flag, **kw)
        return p

    cmd("gen-data")
    cmd("train-teacher", **{"--data": {"required": True}})
    cmd("train-tokenizer", **{"--data": {"required": True}, "--teacher": {"required": True}})
    cmd("finetune-decoder", **{"--data": {"required": True}, "--teacher": {"required": True},
                               "--tokenizer": {"required": True}})
    cmd("train-dit", **{"--data": {"required": True}, "--tokenizer": {"required": True}})
    cmd("train-bad-dit", **{"--data": {"required": True}, "--tokenizer": {"required": True}})
    cmd("sample", **{"--dit": {"required": True}, "--tokenizer": {"required": True},
                     "--bad-dit": {"default": None}, "--n": {"type": int, "default": None},
                     "--seed": {"type": int, "default": None}})
    cmd("probe", **{"--data": {"required": True}, "--tokenizer": {"required": True},
                    "--t": {"type": float, "default": None},
                    "--source": {"default": "latent", "choices": ["latent", "second_last_layer"]}})
    cmd("eval-gen", **{"--data": {"required": True}, "--dit": {"required": True},
                       "--tokenizer": {"required": True}, "--teacher": {"required": True},
                       "--bad-dit": {"default": None}})
    cmd("eval-rec", **{"--data": {"required": True}, "--tokenizer": {"required": True},
                       "--teacher": {"required": True}})
    cmd("export-features", **{"--data": {"required": True}, "--tokenizer": {"required": True},
                              "--index": {"type": int, "default": 0}})
    cmd("ablate", **{"--grid": {"required": True}, "--data": {"required": True},
                     "--seeds": {"default": "0,1,2"}})
    cmd("report", **{"--runs": {"nargs": "+", "required": True}})
    return ap


def make_run_dir(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        run = Path(args.out)
    else:
        root = Path(args.run_root or os.environ.get("FLOWTOK_RUN_ROOT", "runs"))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run = root / f"{args.command}-{cfg.hash()[:8]}-{stamp}"
    run.mkdir(parents=True, exist_ok=True)
    cfg.write(run / "config.txt")
    return run


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config, args.set)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        return run_command(args, cfg)
    except (ConfigError, ValueError, RuntimeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def run_command(args, cfg: ExperimentConfig) -> int:
    run = make_run_dir(args, cfg)
    kw = {}
    if getattr(args, "allow_hash_mismatch", False):
        kw = {"allow_hash_mismatch": True}

    if args.command == "gen-data":
        pipeline.run_gen_data(cfg, run)
        print(run)

    elif args.command == "train-teacher":
        with MetricsLogger(run / "metrics.csv") as log:
            pipeline.run_train_teacher(cfg, args.data, run / "teacher.ckpt", log.log)
        print(run / "teacher.ckpt")

    elif args.command == "train-tokenizer":
        teacher = pipeline.load_teacher(args.teacher, **kw)
        with MetricsLogger(run / "metrics.csv") as log:
            pipeline.run_train_tokenizer(cfg, args.data, teacher, run / "tokenizer.ckpt", log.log)
        print(run / "tokenizer.ckpt")

    elif args.command == "finetune-decoder":
        teacher = pipeline.load_teacher(args.teacher, **kw)
        with MetricsLogger(run / "metrics.csv") as log:
            pipeline.run_finetune_decoder(cfg, args.data, teacher, args.tokenizer,
                                          run / "tokenizer_ft.ckpt", log.log)
        print(run / "tokenizer_ft.ckpt")

    elif args.command in ("train-dit", "train-bad-dit"):
        with MetricsLogger(run / "metrics.csv") as log:
            pipeline.run_train_dit(cfg, args.data, args.tokenizer, run / "dit.ckpt",
                                   weak=(args.command == "train-bad-dit"), metrics_hook=log.log)
        print(run / "dit.ckpt")

    elif args.command == "sample":
        tok = pipeline.load_tokenizer(args.tokenizer, **kw)
        model, stats, _ = pipeline.load_dit(args.dit, **kw)
        reference = None
        samp = pipeline.sampling_config_from(cfg, tok.cfg)
        if samp.guidance_mode == "autoguidance":
            if not args.bad_dit:
                raise ValueError("autoguidance sampling needs --bad-dit")
            reference, _, _ = pipeline.load_dit(args.bad_dit, **kw)
        n = args.n if args.n is not None else cfg.get("sampler.n")
        seed = args.seed if args.seed is not None else cfg.get("sampler.seed")
        g = torch.Generator().manual_seed(seed)
        images = sampler_mod.generate_images(model, tok, stats, samp, n, g,
                                             reference_model=reference)
        from PIL import Image
        for i in range(n):
            arr = (images[i].numpy() * 255.0).round().astype(np.uint8)
            Image.fromarray(arr).save(run / f"sample_{i:05d}.png")
        manifest = {
            "seed": seed, "n": n, "config_hash": cfg.hash(),
            "sampling": {"steps": samp.steps, "guidance_mode": samp.guidance_mode,
                         "guidance_scale": samp.guidance_scale, "class_id": samp.class_id,
                         "schedule": samp.schedule.to_dict()},
            "checkpoints": {"dit": read_header(args.dit)["config_hash"],
                            "tokenizer": read_header(args.tokenizer)["config_hash"]},
        }
        (run / "manifest.json").write_text(json.dumps(manifest, indent=2))
        print(run)

    elif args.command == "probe":
        data = ds.ShapesDataset(args.data)
        tok = pipeline.load_tokenizer(args.tokenizer, **kw)
        t = args.t if args.t is not None else cfg.get("eval.probe_t")
        report = pipeline.probe_on_flow(tok, data, t, cfg.get("generator.gamma"),
                                        seed=cfg.get("eval.seed"), source=args.source)
        (run / "probe_report.json").write_text(report.to_json())
        print(report.to_json())

    elif args.command == "eval-gen":
        data = ds.ShapesDataset(args.data)
        tok = pipeline.load_tokenizer(args.tokenizer, **kw)
        teacher = pipeline.load_teacher(args.teacher, **kw)
        reference = None
        if cfg.get("sampler.guidance_mode") == "autoguidance":
            if not args.bad_dit:
                raise ValueError("autoguidance eval needs --bad-dit")
            reference, _, _ = pipeline.load_dit(args.bad_dit, **kw)
        out = pipeline.eval_generation_arm(cfg, tok, args.dit, data, teacher,
                                           seed=cfg.get("eval.seed"), reference_model=reference)
        with MetricsLogger(run / "metrics.csv") as log:
            log.log(0, "eval", "fid_proxy", out["fid_proxy"])
            log.log(0, "eval", "is_proxy", out["is_proxy"])
        print(json.dumps({k: out[k] for k in ("fid_proxy", "is_proxy")}, indent=2))

    elif args.command == "eval-rec":
        data = ds.ShapesDataset(args.data)
        tok = pipeline.load_tokenizer(args.tokenizer, **kw)
        teacher = pipeline.load_teacher(args.teacher, **kw)
        out = evalsuite.evaluate_reconstruction(tok, teacher, data.split("test")[0])
        with MetricsLogger(run / "metrics.csv") as log:
            log.log(0, "eval", "rfid_proxy", out["rfid_proxy"])
            log.log(0, "eval", "psnr", out["psnr"])
        print(json.dumps(out, indent=2))

    elif args.command == "export-features":
        data = ds.ShapesDataset(args.data)
        tok = pipeline.load_tokenizer(args.tokenizer, **kw)
        images, _ = data.split("test")
        evalsuite.feature_structure_export(tok, images[args.index], out_dir=run,
                                           tag=f"img{args.index:05d}")
        print(run)

    elif args.command == "ablate":
        seeds = tuple(int(s) for s in args.seeds.split(","))
        out = ablate_mod.run_ablation(args.grid, cfg, args.data, run, seeds=seeds)
        print(json.dumps(out["verdict"], indent=2))
        return 0 if out["verdict"].get("pass") else 1

    elif args.command == "report":
        rows = []
        for run_dir in args.runs:
            run_dir = Path(run_dir)
            arm = run_dir.name
            seed = 0
            cfg_file = run_dir / "config.txt"
            if cfg_file.exists():
                try:
                    seed = ExperimentConfig.load(cfg_file).get("tokenizer.seed")
                except ConfigError:
                    pass
            mfile = run_dir / "metrics.csv"
            if not mfile.exists():
                continue
            last: dict[tuple, float] = {}
            for step, split, metric, value in read_metrics(mfile):
                last[(split, metric)] = value
            for (split, metric), value in sorted(last.items()):
                rows.append((arm, f"{split}/{metric}", value, seed))
        out_file = run / "report.csv"
        with open(out_file, "w", newline="") as f:
            f.write(ablate_mod.REPORT_COMMENT + "\n")
            w = csv.writer(f)
            w.writerow(["arm", "metric", "value", "seed"])
            for row in rows:
                w.writerow(row)
        print(out_file)

    else:
        raise ValueError(f"unknown command {args.command!r}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

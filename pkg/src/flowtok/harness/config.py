"""Flat-namespaced experiment configuration: section.key=value lines with typed
defaults, strict unknown-key rejection, and a stable content hash.
"""

from __future__ import annotations

import copy
import hashlib
from pathlib import Path


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict] = {
    "dataset": {
        "source": "synthetic",
        "image_size": 16,
        "class_count": 8,
        "train_count": 2048,
        "val_count": 512,
        "test_count": 512,
        "generation_seed": 0,
        "hflip": False,
    },
    "teacher": {
        "depth": 3,
        "width": 64,
        "heads": 4,
        "epochs": 40,
        "batch_size": 128,
        "lr": 1e-3,
        "min_train_acc": 0.9,
        "seed": 0,
    },
    "tokenizer": {
        "patch_size": 4,
        "encoder_depth": 3,
        "encoder_width": 64,
        "encoder_heads": 4,
        "decoder_depth": 3,
        "decoder_width": 64,
        "decoder_heads": 4,
        "latent_dim": 16,
        "lambda_rec": 1.0,
        "lambda_per": 1.0,
        "lambda_gan": 0.5,
        "lambda_kl": 1e-6,
        "lambda_sem": 1.0,
        "adversarial_enabled": False,
        "mask_enabled": True,
        "flow_enabled": True,
        "sem_enabled": True,
        "sem_region": "all",
        "sem_timestep_conditioning": False,
        "mask_ratio_min": -0.1,
        "mask_ratio_max": 0.4,
        "lr": 4e-4,
        "epochs": 32,
        "batch_size": 64,
        "warmup_frac": 0.25,
        "ema_rate": 0.999,
        "init_encoder_from_teacher": False,
        "seed": 0,
    },
    "semdec": {
        "depth": 2,
        "width": 48,
        "heads": 4,
        "parameter_budget": 60000,
    },
    "generator": {
        "size_tag": "B",
        "head_depth": 2,
        "class_drop_prob": 0.1,
        "schedule_kind": "shift",
        "gamma": 1.0,
        "lr": 2e-4,
        "final_lr": 2e-5,
        "epochs": 20,
        "batch_size": 128,
        "grad_clip": 1.0,
        "ema_rate": 0.9995,
        "train_on_posterior_means": True,
        "seed": 0,
    },
    "bad_generator": {
        "size_tag": "S",
        "epochs": 2,
    },
    "sampler": {
        "steps": 50,
        "guidance_mode": "none",
        "guidance_scale": 1.29,
        "class_id": 0,
        "n": 64,
        "seed": 0,
    },
    "finetune": {
        "epochs": 10,
    },
    "eval": {
        "n_gen": 512,
        "probe_t": 0.5,
        "probe_max_iter": 1000,
        "seed": 0,
    },
}


class ExperimentConfig:
    """Resolved configuration: DEFAULTS overlaid with file lines and overrides."""

    def __init__(self, values: dict[str, dict] | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        if values:
            for section, kv in values.items():
                for key, val in kv.items():
                    self.set(f"{section}.{key}", val)

    # -- access -----------------------------------------------------------

    def get(self, dotted: str):
        section, key = self._split(dotted)
        return self.values[section][key]

    def section(self, name: str) -> dict:
        if name not in self.values:
            raise ConfigError(f"unknown config section {name!r}")
        return copy.deepcopy(self.values[name])

    def _split(self, dotted: str):
        if "." not in dotted:
            raise ConfigError(f"config key must look like section.key, got {dotted!r}")
        section, key = dotted.split(".", 1)
        if section not in self.values:
            raise ConfigError(f"unknown config section {section!r} in {dotted!r}")
        if key not in self.values[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        return section, key

    # -- mutation ---------------------------------------------------------

    def set(self, dotted: str, value):
        section, key = self._split(dotted)
        default = DEFAULTS[section][key]
        self.values[section][key] = self._coerce(dotted, value, default)

    @staticmethod
    def _coerce(dotted: str, value, default):
        if isinstance(value, str) and not isinstance(default, str):
            text = value.strip()
            if isinstance(default, bool):
                if text.lower() in ("true", "1", "yes"):
                    return True
                if text.lower() in ("false", "0", "no"):
                    return False
                raise ConfigError(f"{dotted}: expected a boolean, got {value!r}")
            try:
                if isinstance(default, int):
                    return int(text)
                if isinstance(default, float):
                    return float(text)
            except ValueError as e:
                raise ConfigError(f"{dotted}: {e}") from None
            return text
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{dotted}: expected a boolean, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{dotted}: expected a number, got {value!r}")
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{dotted}: expected a number, got {value!r}")
            return float(value)
        return value

    def apply_overrides(self, overrides):
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            dotted, value = item.split("=", 1)
            self.set(dotted.strip(), value)

    # -- serialization ----------------------------------------------------

    def lines(self) -> list[str]:
        out = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                out.append(f"{section}.{key}={self.values[section][key]!r}")
        return out

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.lines()).encode()).hexdigest()

    def write(self, path):
        Path(path).write_text("# flowtok-config-v1\n" + "\n".join(self.lines()) + "\n")

    @classmethod
    def load(cls, path=None, overrides=None) -> "ExperimentConfig":
        cfg = cls()
        if path is not None:
            for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected section.key=value, got {raw!r}")
                dotted, value = line.split("=", 1)
                try:
                    value = value.strip()
                    if value and value[0] in "'\"" and value[-1:] == value[0]:
                        value = value[1:-1]
                    cfg.set(dotted.strip(), value)
                except ConfigError as e:
                    raise ConfigError(f"{path}:{lineno}: {e}") from None
        cfg.apply_overrides(overrides)
        return cfg

"""Synthetic labeled shapes dataset plus a loader for class-folder image trees.

Everything is deterministic given the generation seed: regenerating a dataset
with the same spec produces bit-identical PNG files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = (
    (220, 60, 50),    # red
    (60, 110, 220),   # blue
    (60, 190, 90),    # green
    (230, 200, 60),   # yellow
)
_SUPERSAMPLE = 8


@dataclass
class DatasetSpec:
    source: str = "synthetic"     # "synthetic" or a folder path
    image_size: int = 16
    class_count: int = 8
    train_count: int = 2048
    val_count: int = 512
    test_count: int = 512
    generation_seed: int = 0
    hflip: bool = False

    def __post_init__(self):
        if self.source == "synthetic" and self.class_count > 16:
            raise ValueError(f"synthetic source supports at most 16 classes, got {self.class_count}")


def _render_shape(rng: np.random.Generator, size: int, label: int, class_count: int) -> np.ndarray:
    """Render one image: class = shape x color combination, randomized pose."""
    n_colors = max(1, class_count // len(SHAPES))
    shape = SHAPES[label % len(SHAPES)]
    color = COLORS[(label // len(SHAPES)) % n_colors if n_colors > 1 else 0]
    color = tuple(int(np.clip(c + rng.integers(-25, 26), 0, 255)) for c in color)

    big = size * _SUPERSAMPLE
    bg = int(rng.integers(10, 70))
    img = Image.new("RGB", (big, big), (bg, bg, bg))
    draw = ImageDraw.Draw(img)

    scale = rng.uniform(0.45, 0.8)
    half = scale * big / 2
    cx = rng.uniform(half, big - half)
    cy = rng.uniform(half, big - half)
    box = (cx - half, cy - half, cx + half, cy + half)

    if shape == "circle":
        draw.ellipse(box, fill=color)
    elif shape == "square":
        draw.rectangle(box, fill=color)
    elif shape == "triangle":
        draw.polygon([(cx, cy - half), (cx - half, cy + half), (cx + half, cy + half)], fill=color)
    elif shape == "cross":
        w = half * 0.42
        draw.rectangle((cx - w, cy - half, cx + w, cy + half), fill=color)
        draw.rectangle((cx - half, cy - w, cx + half, cy + w), fill=color)

    img = img.resize((size, size), Image.LANCZOS)
    return np.asarray(img, dtype=np.uint8)


def generate_synthetic(spec: DatasetSpec, out_dir) -> Path:
    """Materialize the synthetic dataset: PNG images plus a JSONL manifest."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.generation_seed)

    records = []
    for split, count in (("train", spec.train_count), ("val", spec.val_count), ("test", spec.test_count)):
        for i in range(count):
            label = i % spec.class_count  # uniform class histogram by construction
            arr = _render_shape(rng, spec.image_size, label, spec.class_count)
            rel = f"images/{split}_{i:05d}.png"
            Image.fromarray(arr).save(out / rel)
            records.append({"path": rel, "label": label, "split": split})

    with open(out / "manifest.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    with open(out / "spec.json", "w") as f:
        json.dump(vars(spec), f, indent=2, sort_keys=True)
    return out


def ingest_folder(folder, spec: DatasetSpec, out_dir) -> Path:
    """Build a manifest cache for a class_name/image_file tree with deterministic splits."""
    folder = Path(folder)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    classes = sorted(p.name for p in folder.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise ValueError(f"folder source needs >= 2 class subdirectories, found {len(classes)}")

    files = []
    for ci, cname in enumerate(classes):
        for img in sorted((folder / cname).iterdir()):
            if img.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"):
                files.append((str(img.resolve()), ci))
    rng = np.random.default_rng(spec.generation_seed)
    order = rng.permutation(len(files))
    n_val, n_test = spec.val_count, spec.test_count
    records = []
    for rank, idx in enumerate(order):
        path, label = files[idx]
        split = "val" if rank < n_val else ("test" if rank < n_val + n_test else "train")
        records.append({"path": path, "label": label, "split": split})
    with open(out / "manifest.jsonl", "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    with open(out / "spec.json", "w") as f:
        json.dump({**vars(spec), "classes": classes}, f, indent=2, sort_keys=True)
    return out


class ShapesDataset:
    """In-memory view over a materialized dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        with open(self.root / "spec.json") as f:
            meta = json.load(f)
        self.image_size = meta["image_size"]
        self.class_count = meta["class_count"]
        self._splits: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        records: dict[str, list] = {"train": [], "val": [], "test": []}
        with open(self.root / "manifest.jsonl") as f:
            for line in f:
                rec = json.loads(line)
                records[rec["split"]].append(rec)
        for split, recs in records.items():
            if not recs:
                continue
            imgs = np.stack([self._load(rec["path"]) for rec in recs])
            labels = np.array([rec["label"] for rec in recs], dtype=np.int64)
            self._splits[split] = (
                torch.from_numpy(imgs),
                torch.from_numpy(labels),
            )

    def _load(self, rel) -> np.ndarray:
        p = Path(rel)
        if not p.is_absolute():
            p = self.root / rel
        img = Image.open(p).convert("RGB")
        if img.size != (self.image_size, self.image_size):
            img = img.resize((self.image_size, self.image_size), Image.LANCZOS)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        return arr.transpose(2, 0, 1)  # CHW in [0, 1]

    def split(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        """(images, labels) tensors for a split; images are (N, 3, H, W) in [0, 1]."""
        if name not in self._splits:
            raise ValueError(f"split {name!r} not present (have {sorted(self._splits)})")
        return self._splits[name]

    def size(self, name: str) -> int:
        return self._splits[name][0].shape[0] if name in self._splits else 0


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(dataset: ShapesDataset, split: str, batch_size: int, seed: int, epoch: int, hflip: bool = False):
    """Deterministic shuffled batch stream covering the split exactly once."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    images, labels = dataset.split(split)
    n = images.shape[0]
    if batch_size > n:
        raise ValueError(f"batch_size {batch_size} exceeds split size {n}")
    order = epoch_permutation(n, seed, epoch)
    flip_rng = np.random.default_rng([seed, epoch, 1])
    for start in range(0, n, batch_size):
        idx = torch.from_numpy(order[start:start + batch_size].copy())
        x, y = images[idx], labels[idx]
        if hflip:
            flips = torch.from_numpy(flip_rng.random(len(idx)) < 0.5)
            x = torch.where(flips.view(-1, 1, 1, 1), x.flip(-1), x)
        yield x, y


def dataset_fingerprint(root) -> str:
    """Content hash over the manifest and every image file."""
    root = Path(root)
    h = hashlib.sha256()
    h.update((root / "manifest.jsonl").read_bytes())
    for p in sorted((root / "images").iterdir()) if (root / "images").exists() else []:
        h.update(p.read_bytes())
    return h.hexdigest()

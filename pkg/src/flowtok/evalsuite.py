"""Measurements: linear probing on flow states, Frechet/inception proxies in
teacher feature space, PSNR, and feature-structure exports.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from scipy import linalg
from sklearn.linear_model import LogisticRegression

from . import teacher as teacher_mod
from .sampler import SamplingConfig, generate_images


@dataclass
class ProbeConfig:
    max_iter: int = 1000
    c: float = 10.0
    train_frac: float = 0.75
    # accuracy at t > 0 is averaged over this many independent noise draws to
    # keep single-draw variance from drowning small effects
    noise_draws: int = 5


@dataclass
class ProbeReport:
    t: float
    feature_source: str  # "latent" | "second_last_layer"
    accuracy: float
    class_count: int
    n_train: int
    n_test: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@torch.no_grad()
def probe_features_on_flow(tokenizer, images: torch.Tensor, t: float, gamma: float,
                           generator: torch.Generator, source: str = "latent") -> np.ndarray:
    """Mean-pooled features of x_t = (1 - t) x0 + t * gamma * eps, one row per image.

    source "latent" pools posterior means; "second_last_layer" pools the
    encoder's penultimate block output (t is ignored for that source).
    """
    if not (0.0 <= t <= 1.0):
        raise ValueError("t must lie in [0, 1]")
    feats = []
    for start in range(0, images.shape[0], 256):
        batch = images[start:start + 256]
        if source == "second_last_layer":
            f = tokenizer.penultimate_features(batch)
        elif source == "latent":
            x0 = tokenizer.encode(batch).mean
            if t > 0:
                eps = torch.randn(x0.shape, generator=generator)
                f = (1.0 - t) * x0 + t * gamma * eps
            else:
                f = x0
        else:
            raise ValueError(f"unknown feature source {source!r}")
        feats.append(f.mean(dim=1))
    return torch.cat(feats).numpy()


def linear_probe(features: np.ndarray, labels: np.ndarray, config: ProbeConfig | None = None,
                 t: float = 0.0, feature_source: str = "latent", seed: int = 0) -> ProbeReport:
    """Multinomial logistic probe on a deterministic train/test split."""
    config = config or ProbeConfig()
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("linear probe needs at least 2 classes")
    counts = np.bincount(labels)
    if counts[counts > 0].min() < 10:
        raise ValueError("linear probe needs at least 10 samples per class")
    n = len(labels)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(config.train_frac * n))
    tr, te = order[:n_train], order[n_train:]
    try:
        clf = LogisticRegression(max_iter=config.max_iter, C=config.c)
        clf.fit(features[tr], labels[tr])
        acc = float(clf.score(features[te], labels[te]))
    except Exception:
        acc = 1.0 / len(classes)  # degenerate features: report chance, never crash
    return ProbeReport(t=t, feature_source=feature_source, accuracy=acc,
                       class_count=len(classes), n_train=len(tr), n_test=len(te))


def probe_on_flow_averaged(tokenizer, images: torch.Tensor, labels: np.ndarray, t: float,
                           gamma: float, seed: int = 0, source: str = "latent",
                           config: ProbeConfig | None = None) -> ProbeReport:
    """Linear probe on flow states, accuracy averaged over independent noise draws.

    At t = 0 (or for the encoder-layer source) the features are deterministic
    and a single probe is fitted.
    """
    config = config or ProbeConfig()
    draws = 1 if (t == 0.0 or source == "second_last_layer") else config.noise_draws
    reports = []
    for k in range(draws):
        g = torch.Generator().manual_seed(seed * 1000 + k)
        feats = probe_features_on_flow(tokenizer, images, t, gamma, g, source=source)
        reports.append(linear_probe(feats, labels, config, t=t, feature_source=source, seed=seed))
    mean_acc = float(np.mean([r.accuracy for r in reports]))
    first = reports[0]
    return ProbeReport(t=t, feature_source=source, accuracy=mean_acc,
                       class_count=first.class_count, n_train=first.n_train,
                       n_test=first.n_test)


@dataclass
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean dim {d}")
        self.cov = 0.5 * (self.cov + self.cov.T)  # enforce symmetry


def summarize_features(features: np.ndarray) -> GaussianSummary:
    f = np.asarray(features, dtype=np.float64)
    return GaussianSummary(mean=f.mean(axis=0), cov=np.cov(f, rowvar=False))


def _check_psd(cov: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    if w.min() < -tol * max(1.0, abs(w.max())):
        raise ValueError(f"covariance is not PSD within tolerance (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (v * w) @ v.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2})."""
    if a.mean.shape != b.mean.shape:
        raise ValueError("dimension mismatch between summaries")
    cov_a = _check_psd(a.cov)
    cov_b = _check_psd(b.cov)
    diff = a.mean - b.mean
    covmean = linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    fd = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(covmean))
    return max(fd, 0.0)


def inception_score_proxy(logits: np.ndarray) -> float:
    """exp(mean KL(p(y|x) || p(y))) from classifier logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] < 2:
        raise ValueError("inception score needs at least 2 samples")
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    marginal = p.mean(axis=0)
    eps = 1e-12
    kl = (p * (np.log(p + eps) - np.log(marginal + eps))).sum(axis=1)
    return float(np.exp(kl.mean()))


def psnr(i: torch.Tensor, i_hat: torch.Tensor) -> float:
    """-10 log10(MSE) for images in [0, 1]; identical images report +inf."""
    if i.shape != i_hat.shape:
        raise ValueError(f"shape mismatch {tuple(i.shape)} vs {tuple(i_hat.shape)}")
    mse = float((i - i_hat).pow(2).mean())
    if mse == 0.0:
        return float("inf")
    return -10.0 * math.log10(mse)


@torch.no_grad()
def feature_structure_export(tokenizer, image: torch.Tensor, out_dir=None, tag: str = "features"):
    """Per-token PCA projection (3 components) and cosine-to-global map.

    Returns dict with "pca_projection" (r, r, 3) and "cosine_map" (r, r); when
    out_dir is given, writes plain-text grids plus a JSON sidecar.
    """
    if image.ndim == 3:
        image = image.unsqueeze(0)
    tokens = tokenizer.encode(image).mean[0]  # (T, d)
    r = tokenizer.cfg.tokens_per_side
    x = tokens.numpy().astype(np.float64)
    centered = x - x.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int((s > 1e-10 * max(1.0, s.max(initial=0.0))).sum())
    comps = np.zeros((3, x.shape[1]))
    comps[:min(3, rank)] = vt[:min(3, rank)]
    pca = (centered @ comps.T).reshape(r, r, 3)

    g = x.mean(axis=0)
    num = x @ g
    den = np.maximum(np.linalg.norm(x, axis=1) * np.linalg.norm(g), 1e-8)
    cosine = (num / den).reshape(r, r)

    result = {"pca_projection": pca, "cosine_map": cosine, "components": comps}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        np.savetxt(out / f"{tag}_pca.txt", pca.reshape(r * r, 3))
        np.savetxt(out / f"{tag}_cosine.txt", cosine)
        sidecar = {
            "pca_file": f"{tag}_pca.txt", "pca_shape": [r, r, 3],
            "cosine_file": f"{tag}_cosine.txt", "cosine_shape": [r, r],
            "latent_dim": tokenizer.cfg.latent_dim,
        }
        (out / f"{tag}_sidecar.json").write_text(json.dumps(sidecar, indent=2))
    return result


@torch.no_grad()
def teacher_feature_vectors(bundle: teacher_mod.TeacherBundle, images: torch.Tensor) -> np.ndarray:
    """Mean-pooled teacher features, one row per image (the FID-proxy embedding)."""
    out = []
    for start in range(0, images.shape[0], 256):
        out.append(teacher_mod.extract_features(bundle, images[start:start + 256]).mean(dim=1))
    return torch.cat(out).numpy()


@torch.no_grad()
def evaluate_generation(dit, tokenizer, latent_stats, bundle: teacher_mod.TeacherBundle,
                        n_gen: int, reference_images: torch.Tensor, config: SamplingConfig,
                        generator: torch.Generator, reference_model=None) -> dict:
    """FID-proxy and IS-proxy of class-balanced generated samples vs a reference set."""
    k = bundle.class_count
    class_ids = [i % k for i in range(n_gen)]
    class_ids.sort()
    images = generate_images(dit, tokenizer, latent_stats, config, n_gen, generator,
                             reference_model=reference_model, class_ids=class_ids)
    images_chw = images.permute(0, 3, 1, 2)
    gen_feats = teacher_feature_vectors(bundle, images_chw)
    ref_feats = teacher_feature_vectors(bundle, reference_images)
    fid = frechet_distance(summarize_features(gen_feats), summarize_features(ref_feats))
    logits = []
    for start in range(0, images_chw.shape[0], 256):
        logits.append(teacher_mod.extract_logits(bundle, images_chw[start:start + 256]))
    is_proxy = inception_score_proxy(torch.cat(logits).numpy())
    return {"fid_proxy": fid, "is_proxy": is_proxy, "n_gen": n_gen, "images": images}


@torch.no_grad()
def evaluate_reconstruction(tokenizer, bundle: teacher_mod.TeacherBundle,
                            images: torch.Tensor) -> dict:
    """rFID-proxy and PSNR of decode(encode(x)) posterior-mean reconstructions."""
    recon = []
    for start in range(0, images.shape[0], 256):
        post = tokenizer.encode(images[start:start + 256])
        recon.append(tokenizer.decode_pixels(post.mean).clamp(0.0, 1.0))
    recon = torch.cat(recon)
    fid = frechet_distance(
        summarize_features(teacher_feature_vectors(bundle, recon)),
        summarize_features(teacher_feature_vectors(bundle, images)),
    )
    return {"rfid_proxy": fid, "psnr": psnr(images, recon)}

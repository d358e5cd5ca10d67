"""Metrics and evaluation protocols: Frechet distance between feature
distributions, SSIM, the R/G/R+G classification protocol, feature-space
export for t-SNE-style analysis, and report generation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F
from sklearn.metrics import silhouette_score

from . import dataforge, featex
from .nets import ConfigError

FEATURE_SOURCES = ("encoder", "residual", "extractor")


@dataclass
class FeatureSample:
    vector: np.ndarray
    source: str
    label: str


@dataclass
class EvalReport:
    fid: float
    ssim: float
    cls_accuracy: dict[str, float]
    silhouette: dict[str, float]
    config_fingerprint: str

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=1)


# ---------------------------------------------------------------------------
# Frechet distance

def fid(feats_a: np.ndarray, feats_b: np.ndarray, eps: float = 1e-6,
        imag_tol: float = 1e-3) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    Covariances are shrunk by eps * I before the matrix square root so small
    desk-scale samples stay well-conditioned.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ConfigError(f"fid expects two (n, d) sets, got {a.shape} and {b.shape}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    d = a.shape[1]
    cov_a = np.cov(a, rowvar=False).reshape(d, d) + eps * np.eye(d)
    cov_b = np.cov(b, rowvar=False).reshape(d, d) + eps * np.eye(d)
    sqrtm = scipy.linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(sqrtm):
        resid = np.abs(sqrtm.imag).max()
        if resid > imag_tol:
            raise ConfigError(f"matrix square root has imaginary residual {resid:.2e}; "
                              "covariances too ill-conditioned for a Frechet distance")
        sqrtm = sqrtm.real
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a + cov_b - 2.0 * sqrtm))


# ---------------------------------------------------------------------------
# SSIM

def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    xs = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-xs.pow(2) / (2 * sigma * sigma))
    g = g / g.sum()
    return g.outer(g)


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 2.0,
         k1: float = 0.01, k2: float = 0.03, window: int = 11,
         sigma: float = 1.5) -> float:
    """Mean local structural similarity over Gaussian windows, in [-1, 1].

    Images are (3, S, S) or (B, 3, S, S) in [-1, 1]; data_range defaults to 2.
    """
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ConfigError(f"ssim: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    ch = a.shape[1]
    w = _gaussian_window(window, sigma).expand(ch, 1, window, window)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    mu_a = F.conv2d(a, w, groups=ch)
    mu_b = F.conv2d(b, w, groups=ch)
    var_a = F.conv2d(a * a, w, groups=ch) - mu_a * mu_a
    var_b = F.conv2d(b * b, w, groups=ch) - mu_b * mu_b
    cov = F.conv2d(a * b, w, groups=ch) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# R / G / R+G classification protocol

def _train_protocol_classifier(images: torch.Tensor, labels: torch.Tensor,
                               image_size: int, seed: int, epochs: int):
    present = set(labels.tolist())
    if len(present) < featex.N_CLASSES:
        missing = [dataforge.EXPRESSIONS[i] for i in range(featex.N_CLASSES)
                   if i not in present]
        raise ConfigError(f"classes missing from protocol training set: {missing}")
    return featex.train_expression_backend(images, labels, image_size,
                                           epochs=epochs, seed=seed)


def _accuracy(clf, images, labels) -> float:
    return float((clf.predict(images) == labels).float().mean())


def cls_protocol(train_real, test_real, edited, image_size: int,
                 seed: int = 1234, epochs: int = 40) -> dict[str, float]:
    """The three-column protocol. Each argument is (images, labels); edited
    images carry the reference's expression label as target.

    R: classifier trained on real training images, scored on real test images.
    G: the same classifier scored on the edited images.
    R+G: a fresh classifier trained on real+edited, scored on real test images.
    """
    tr_x, tr_y = train_real
    te_x, te_y = test_real
    ed_x, ed_y = edited
    clf_r = _train_protocol_classifier(tr_x, tr_y, image_size, seed, epochs)
    acc_r = _accuracy(clf_r, te_x, te_y)
    acc_g = _accuracy(clf_r, ed_x, ed_y)
    clf_rg = _train_protocol_classifier(torch.cat([tr_x, ed_x]),
                                        torch.cat([tr_y, ed_y]),
                                        image_size, seed, epochs)
    acc_rg = _accuracy(clf_rg, te_x, te_y)
    return {"R": acc_r, "G": acc_g, "R+G": acc_rg}


# ---------------------------------------------------------------------------
# feature export + clustering proxy

def export_features(model, records, store: dataforge.ImageStore,
                    neutral_backend) -> list[FeatureSample]:
    """Emit encoder, residual and extractor features with evaluation labels."""
    model.eval()
    samples = []
    with torch.no_grad():
        for r in records:
            img = store.batch([r.path])
            neu = neutral_backend.neutralize(img)
            c = model.encoder(img)
            c_n = model.encoder(neu)
            attr = model.extractor(c, c_n)
            for source, feat in (("encoder", c), ("residual", c - c_n),
                                 ("extractor", attr)):
                samples.append(FeatureSample(
                    vector=feat.flatten().numpy().copy(),
                    source=source, label=r.expression))
    return samples


def write_features(samples: list[FeatureSample], path: str) -> None:
    with open(path, "w") as f:
        for s in samples:
            vec = " ".join(f"{v:.6g}" for v in s.vector)
            f.write(f"{s.source} {s.label} {vec}\n")


def silhouette_by_source(samples: list[FeatureSample]) -> dict[str, float]:
    out = {}
    for source in FEATURE_SOURCES:
        group = [s for s in samples if s.source == source]
        if not group:
            continue
        x = np.stack([s.vector for s in group])
        y = [s.label for s in group]
        out[source] = float(silhouette_score(x, y, metric="euclidean"))
    return out

"""Frozen pre-trained feature extractors.

Two roles: an expression-feature backend (penultimate layer of an expression
classifier, used by the mutual-information regularizer and by evaluation) and
a perceptual backend (intermediate activations of an autoencoder trunk, used
by the decoder/reconstruction losses). Desk-scale backends are trained on the
synthetic corpus; full-scale backends plug in through the same interface.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import nets
from .nets import ConfigError

N_CLASSES = 7


@dataclass
class PerceptualFeature:
    data: torch.Tensor
    layer_id: str


def _frozen(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


def _checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class _ExprClassifier(nn.Module):
    def __init__(self, image_size: int, width: int = 32, feat_dim: int = 512):
        super().__init__()
        c = width
        self.trunk = nn.Sequential(
            nn.Conv2d(3, c, 4, 2, 1), nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(c, 2 * c, 4, 2, 1), nn.BatchNorm2d(2 * c), nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(2 * c, 4 * c, 4, 2, 1), nn.BatchNorm2d(4 * c), nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(4 * c, 8 * c, 4, 2, 1), nn.BatchNorm2d(8 * c), nn.LeakyReLU(0.1, inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.fc1 = nn.Linear(8 * c, feat_dim)
        self.fc2 = nn.Linear(feat_dim, N_CLASSES)
        self.feat_dim = feat_dim
        self.image_size = image_size

    def features(self, img):
        h = self.trunk(img).flatten(1)
        return F.relu(self.fc1(h))

    def forward(self, img):
        return self.fc2(self.features(img))


class ExpressionBackend:
    """Frozen expression classifier; exposes penultimate-layer features."""

    kind = "expression"

    def __init__(self, net: _ExprClassifier):
        self.net = _frozen(net)
        self.feat_dim = net.feat_dim
        self.image_size = net.image_size

    def features(self, img: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.net.features(img)

    def logits(self, img: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.net(img)

    def predict(self, img: torch.Tensor) -> torch.Tensor:
        return self.logits(img).argmax(dim=1)

    def checksum(self) -> str:
        return _checksum(self.net)


class _ConvAutoencoder(nn.Module):
    layer_ids = ("conv1", "conv2", "conv3")

    def __init__(self, image_size: int, width: int = 32):
        super().__init__()
        c = width
        self.conv1 = nn.Sequential(nn.Conv2d(3, c, 4, 2, 1), nn.LeakyReLU(0.1, inplace=True))
        self.conv2 = nn.Sequential(nn.Conv2d(c, 2 * c, 4, 2, 1), nn.LeakyReLU(0.1, inplace=True))
        self.conv3 = nn.Sequential(nn.Conv2d(2 * c, 4 * c, 4, 2, 1), nn.LeakyReLU(0.1, inplace=True))
        self.dec = nn.Sequential(
            nn.Upsample(scale_factor=2), nn.Conv2d(4 * c, 2 * c, 3, 1, 1), nn.LeakyReLU(0.1, inplace=True),
            nn.Upsample(scale_factor=2), nn.Conv2d(2 * c, c, 3, 1, 1), nn.LeakyReLU(0.1, inplace=True),
            nn.Upsample(scale_factor=2), nn.Conv2d(c, 3, 3, 1, 1),
        )
        self.image_size = image_size

    def encode(self, img, layer: str):
        h = self.conv1(img)
        if layer == "conv1":
            return h
        h = self.conv2(h)
        if layer == "conv2":
            return h
        h = self.conv3(h)
        if layer == "conv3":
            return h
        raise ConfigError(f"unknown perceptual layer {layer!r}")

    def forward(self, img):
        return self.dec(self.encode(img, "conv3"))


class PerceptualBackend:
    """Frozen autoencoder trunk; one configurable feature layer."""

    kind = "perceptual"

    def __init__(self, net: _ConvAutoencoder, layer_id: str = "conv3"):
        if layer_id not in net.layer_ids:
            raise ConfigError(f"unknown perceptual layer {layer_id!r}")
        self.net = _frozen(net)
        self.layer_id = layer_id
        self.image_size = net.image_size

    def features(self, img: torch.Tensor, layer_id: str | None = None) -> PerceptualFeature:
        # no no_grad: gradients must flow into the images (params stay frozen)
        layer = layer_id or self.layer_id
        return PerceptualFeature(self.net.encode(img, layer), layer)

    def checksum(self) -> str:
        return _checksum(self.net)


def phi_distance(a, b, backend: PerceptualBackend | None = None) -> torch.Tensor:
    """Mean-squared perceptual feature distance.

    Accepts either two images plus a backend, or two PerceptualFeature values
    from the same layer.
    """
    if backend is not None:
        if a.shape != b.shape:
            raise ConfigError(f"phi_distance: shape mismatch {tuple(a.shape)} vs "
                              f"{tuple(b.shape)}")
        a = backend.features(a)
        b = backend.features(b)
    if a.layer_id != b.layer_id:
        raise ConfigError(f"phi_distance: layer id mismatch {a.layer_id!r} vs "
                          f"{b.layer_id!r}")
    return (a.data - b.data).pow(2).mean()


# ---------------------------------------------------------------------------
# desk-scale backend training

def train_expression_backend(images: torch.Tensor, labels: torch.Tensor,
                             image_size: int, epochs: int = 60,
                             batch_size: int = 32, lr: float = 2e-3,
                             seed: int = 0) -> ExpressionBackend:
    """Train the small expression classifier on preprocessed images."""
    torch.manual_seed(seed)
    net = _ExprClassifier(image_size)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    n = images.shape[0]
    net.train()
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            if len(idx) < 2:
                continue
            opt.zero_grad()
            loss = F.cross_entropy(net(images[idx]), labels[idx])
            loss.backward()
            opt.step()
    return ExpressionBackend(net)


def train_perceptual_backend(images: torch.Tensor, image_size: int,
                             epochs: int = 60, batch_size: int = 32,
                             lr: float = 2e-3, seed: int = 0,
                             layer_id: str = "conv3") -> PerceptualBackend:
    """Train the autoencoder trunk on preprocessed images."""
    torch.manual_seed(seed + 1)
    net = _ConvAutoencoder(image_size)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed + 1)
    n = images.shape[0]
    net.train()
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            opt.zero_grad()
            loss = F.mse_loss(net(images[idx]), images[idx])
            loss.backward()
            opt.step()
    return PerceptualBackend(net, layer_id)


# ---------------------------------------------------------------------------
# registry

def save_backend(backend, directory: str, name: str) -> None:
    os.makedirs(directory, exist_ok=True)
    params = nets.params_from_module(backend.net, f"featex-{backend.kind}",
                                     backend.image_size)
    nets.save_checkpoint(params, os.path.join(directory, f"{name}.bin"))
    reg_path = os.path.join(directory, "registry.json")
    registry = {}
    if os.path.exists(reg_path):
        with open(reg_path) as f:
            registry = json.load(f)
    meta = {"file": f"{name}.bin", "kind": backend.kind,
            "image_size": backend.image_size}
    if backend.kind == "expression":
        meta["feat_dim"] = backend.feat_dim
    else:
        meta["layer_id"] = backend.layer_id
    registry[name] = meta
    with open(reg_path, "w") as f:
        json.dump(registry, f, indent=1)


def load_backend(directory: str, name: str):
    reg_path = os.path.join(directory, "registry.json")
    if not os.path.exists(reg_path):
        raise nets.CheckpointError(f"no backend registry under {directory}")
    with open(reg_path) as f:
        registry = json.load(f)
    if name not in registry:
        raise nets.CheckpointError(f"backend {name!r} not registered in {reg_path}")
    meta = registry[name]
    params = nets.load_checkpoint(os.path.join(directory, meta["file"]))
    if meta["kind"] == "expression":
        net = _ExprClassifier(meta["image_size"], feat_dim=meta["feat_dim"])
        nets.params_into_module(params, net, "featex-expression", meta["image_size"])
        return ExpressionBackend(net)
    net = _ConvAutoencoder(meta["image_size"])
    nets.params_into_module(params, net, "featex-perceptual", meta["image_size"])
    return PerceptualBackend(net, meta["layer_id"])

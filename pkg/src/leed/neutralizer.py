"""Neutral-face synthesis behind a stable interface.

Two desk-scale backends: an oracle that looks up each identity's ground-truth
neutral render, and a small learned image-to-image translator trained on
(expressive, neutral) pairs. Both are frozen during editing-model training.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import dataforge, nets


class IdentityMissError(LookupError):
    """Oracle backend could not match the input to a known identity."""


class OracleNeutralizer:
    """Identity -> neutral-image lookup.

    Inputs are matched to known identities by nearest neighbor over a gallery
    of that identity's images; unknown faces (distance above threshold) raise
    IdentityMissError. Optional jitter exercises robustness to imperfect
    neutrals.
    """

    kind = "oracle"

    def __init__(self, records: list[dataforge.FaceRecord], manifest: dict[str, str],
                 image_size: int, miss_threshold: float = 0.05,
                 jitter: float = 0.0, jitter_seed: int = 0):
        store = dataforge.ImageStore(image_size)
        self.image_size = image_size
        self.miss_threshold = miss_threshold
        self.jitter = jitter
        self._rng = np.random.default_rng(jitter_seed)
        self.identities = sorted(manifest)
        self.neutrals = torch.stack(
            [torch.from_numpy(store.get(manifest[i])) for i in self.identities])
        gallery, owners = [], []
        for r in records:
            gallery.append(torch.from_numpy(store.get(r.path)))
            owners.append(self.identities.index(r.identity))
        for i, ident in enumerate(self.identities):
            gallery.append(self.neutrals[i])
            owners.append(i)
        self._gallery = torch.stack(gallery).flatten(1)
        self._owners = torch.tensor(owners)

    @classmethod
    def from_dataset(cls, root: str, image_size: int, **kw) -> "OracleNeutralizer":
        with open(os.path.join(root, "neutral_manifest.json")) as f:
            manifest = json.load(f)
        train, test = dataforge.ingest(root)
        return cls(train + test, manifest, image_size, **kw)

    def identify(self, imgs: torch.Tensor) -> list[str]:
        flat = imgs.detach().flatten(1)
        d = torch.cdist(flat, self._gallery).pow(2) / flat.shape[1]
        best = d.argmin(dim=1)
        out = []
        for row, j in enumerate(best):
            if d[row, j].item() > self.miss_threshold:
                raise IdentityMissError(
                    f"no known identity within threshold (best mse "
                    f"{d[row, j].item():.4f} > {self.miss_threshold})")
            out.append(self.identities[self._owners[j].item()])
        return out

    def neutralize(self, imgs: torch.Tensor) -> torch.Tensor:
        idents = self.identify(imgs)
        out = torch.stack([self.neutrals[self.identities.index(i)] for i in idents])
        if self.jitter > 0:
            shift = self._rng.uniform(-self.jitter, self.jitter, (len(out), 1, 1, 1))
            out = out + torch.from_numpy(shift.astype(np.float32))
            out = out.clamp(-1, 1)
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.neutrals.numpy().tobytes())
        h.update(self._gallery.numpy().tobytes())
        return h.hexdigest()


class _TranslatorNet(nn.Module):
    def __init__(self, image_size: int, width: int = 32):
        super().__init__()
        c = width
        self.body = nn.Sequential(
            nn.Conv2d(3, c, 4, 2, 1), nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(c, 2 * c, 4, 2, 1), nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(2 * c, 4 * c, 4, 2, 1), nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(4 * c, 4 * c, 3, 1, 1), nn.LeakyReLU(0.1, inplace=True),
            nn.Upsample(scale_factor=2), nn.Conv2d(4 * c, 2 * c, 3, 1, 1), nn.LeakyReLU(0.1, inplace=True),
            nn.Upsample(scale_factor=2), nn.Conv2d(2 * c, c, 3, 1, 1), nn.LeakyReLU(0.1, inplace=True),
            nn.Upsample(scale_factor=2), nn.Conv2d(c, 3, 3, 1, 1), nn.Tanh(),
        )
        self.image_size = image_size

    def forward(self, img):
        return self.body(img)


class LearnedNeutralizer:
    """Small frozen encoder-decoder mapping any expression to neutral."""

    kind = "learned"

    def __init__(self, net: _TranslatorNet):
        for p in net.parameters():
            p.requires_grad_(False)
        self.net = net.eval()
        self.image_size = net.image_size

    def neutralize(self, imgs: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.net(imgs)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.net.state_dict().items()):
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def save(self, path: str) -> None:
        nets.save_checkpoint(
            nets.params_from_module(self.net, "neutralizer", self.image_size), path)

    @classmethod
    def load(cls, path: str) -> "LearnedNeutralizer":
        params = nets.load_checkpoint(path)
        net = _TranslatorNet(params.image_size)
        nets.params_into_module(params, net, "neutralizer", params.image_size)
        return cls(net)


def train_learned_neutralizer(expressive: torch.Tensor, neutral: torch.Tensor,
                              image_size: int, epochs: int = 80,
                              batch_size: int = 32, lr: float = 2e-3,
                              seed: int = 0) -> LearnedNeutralizer:
    """Supervised (expressive -> neutral) training on aligned pairs."""
    torch.manual_seed(seed + 2)
    net = _TranslatorNet(image_size)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed + 2)
    n = expressive.shape[0]
    net.train()
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            opt.zero_grad()
            loss = F.l1_loss(net(expressive[idx]), neutral[idx])
            loss.backward()
            opt.step()
    return LearnedNeutralizer(net)

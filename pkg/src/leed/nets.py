"""The seven trainable networks (encoder, decoder, extractor, interpolator,
critic, regularizer, siamese) plus parameter (de)serialization.

Reference geometry is image_size 128 with a 512x8x8 latent; the latent spatial
side scales as image_size / 16. Channel widths are fixed.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1
LEAKY_SLOPE = 0.01
LATENT_CHANNELS = 512


class ConfigError(ValueError):
    """Shape or configuration mismatch, named expected vs actual."""


class CheckpointError(RuntimeError):
    """Unreadable, truncated or architecture-mismatched checkpoint."""


def latent_side(image_size: int) -> int:
    if image_size % 16 != 0:
        raise ConfigError(f"image_size must be divisible by 16, got {image_size}")
    return image_size // 16


def _check_image(x: torch.Tensor, image_size: int, who: str) -> None:
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != image_size or x.shape[3] != image_size:
        raise ConfigError(f"{who}: expected (B, 3, {image_size}, {image_size}) input, "
                          f"got {tuple(x.shape)}")


def _check_code(x: torch.Tensor, image_size: int, who: str) -> None:
    s = latent_side(image_size)
    if x.dim() != 4 or x.shape[1] != LATENT_CHANNELS or x.shape[2] != s or x.shape[3] != s:
        raise ConfigError(f"{who}: expected (B, {LATENT_CHANNELS}, {s}, {s}) code, "
                          f"got {tuple(x.shape)}")


class Encoder(nn.Module):
    """VGG-style encoder: four 2x max-pool stages, linear final conv."""

    def __init__(self, image_size: int = 128):
        super().__init__()
        self.image_size = image_size
        layers = []

        def conv(cin, cout, act=True):
            layers.append(nn.Conv2d(cin, cout, 3, 1, 1))
            if act:
                layers.append(nn.ReLU(inplace=True))

        conv(3, 64); conv(64, 64)
        layers.append(nn.MaxPool2d(2))
        conv(64, 128); conv(128, 128)
        layers.append(nn.MaxPool2d(2))
        conv(128, 256); conv(256, 256); conv(256, 256); conv(256, 256)
        layers.append(nn.MaxPool2d(2))
        conv(256, 512); conv(512, 512); conv(512, 512); conv(512, 512)
        layers.append(nn.MaxPool2d(2))
        conv(512, 512, act=False)
        self.body = nn.Sequential(*layers)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        _check_image(img, self.image_size, "encoder")
        return self.body(img)


class Decoder(nn.Module):
    """Mirror of the encoder: four upsample stages, linear final conv.

    Output is not clamped here; [-1, 1] clamping happens only at export so the
    perceptual-loss path keeps gradients.
    """

    def __init__(self, image_size: int = 128, upsample: str = "nearest"):
        super().__init__()
        self.image_size = image_size
        layers = []

        def conv(cin, cout, bn=True):
            layers.append(nn.Conv2d(cin, cout, 3, 1, 1))
            if bn:
                layers.append(nn.BatchNorm2d(cout))
                layers.append(nn.ReLU(inplace=True))

        def up():
            layers.append(nn.Upsample(scale_factor=2, mode=upsample))

        conv(512, 512)
        up()
        conv(512, 256); conv(256, 256); conv(256, 256); conv(256, 256)
        up()
        conv(256, 128); conv(128, 128); conv(128, 128); conv(128, 128)
        up()
        conv(128, 64); conv(64, 64)
        up()
        conv(64, 64)
        conv(64, 3, bn=False)
        self.body = nn.Sequential(*layers)

    def forward(self, code: torch.Tensor) -> torch.Tensor:
        _check_code(code, self.image_size, "decoder")
        if not torch.isfinite(code).all():
            raise ConfigError("decoder: non-finite latent code rejected")
        return self.body(code)


class _ResidualRefiner(nn.Module):
    """Three 512-channel convolutions applied as a residual on top of an
    analytic base (difference for the extractor, scaled sum for the
    interpolator). The final conv is zero-initialized so the initial mapping
    equals the analytic base exactly."""

    def __init__(self, image_size: int = 128):
        super().__init__()
        self.image_size = image_size
        self.body = nn.Sequential(
            nn.Conv2d(512, 512, 3, 1, 1), nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            nn.Conv2d(512, 512, 3, 1, 1), nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            nn.Conv2d(512, 512, 3, 1, 1),
        )
        last = self.body[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)


class Extractor(_ResidualRefiner):
    """Refines the raw latent displacement into a pure expression attribute."""

    def forward(self, c_expr: torch.Tensor, c_neutral: torch.Tensor) -> torch.Tensor:
        _check_code(c_expr, self.image_size, "extractor")
        if c_expr.shape[0] != c_neutral.shape[0]:
            raise ConfigError(f"extractor: batch mismatch {c_expr.shape[0]} vs "
                              f"{c_neutral.shape[0]}")
        base = c_expr - c_neutral
        return base + self.body(base)


class Interpolator(_ResidualRefiner):
    """Maps (identity code, scaled expression attribute) onto the code manifold."""

    def forward(self, c_identity: torch.Tensor, attr: torch.Tensor) -> torch.Tensor:
        _check_code(c_identity, self.image_size, "interpolator")
        base = c_identity + attr
        return base + self.body(base)

    def interpolate(self, c_identity: torch.Tensor, attr: torch.Tensor,
                    alpha) -> torch.Tensor:
        alpha = torch.as_tensor(alpha, dtype=c_identity.dtype,
                                device=c_identity.device)
        if not torch.isfinite(alpha).all():
            raise ConfigError("interpolator: alpha must be finite")
        while alpha.dim() < 4:
            alpha = alpha.unsqueeze(-1)
        return self.forward(c_identity, alpha * attr)


class Critic(nn.Module):
    """Latent-code critic: instance-normalized conv stack to 1024x1x1, mean-
    reduced to one scalar per sample."""

    def __init__(self, image_size: int = 128):
        super().__init__()
        self.image_size = image_size
        side = latent_side(image_size)
        layers = [nn.Conv2d(512, 256, 1, 1, 0),
                  nn.InstanceNorm2d(256, affine=True),
                  nn.LeakyReLU(LEAKY_SLOPE, inplace=True)]
        ch = 256
        while side > 2:
            nxt = min(ch * 2, 1024)
            layers += [nn.Conv2d(ch, nxt, 4, 2, 1),
                       nn.InstanceNorm2d(nxt, affine=True),
                       nn.LeakyReLU(LEAKY_SLOPE, inplace=True)]
            ch, side = nxt, side // 2
        layers.append(nn.Conv2d(ch, 1024, 2, 2, 0))
        self.body = nn.Sequential(*layers)

    def forward(self, code: torch.Tensor) -> torch.Tensor:
        _check_code(code, self.image_size, "critic")
        out = self.body(code)
        return out.mean(dim=(1, 2, 3))


class RegularizerQ(nn.Module):
    """Predicts a 16-dim expression summary from an expression attribute."""

    def __init__(self, image_size: int = 128):
        super().__init__()
        self.image_size = image_size
        side = latent_side(image_size)
        self.conv = nn.Sequential(
            nn.Conv2d(512, 512, side, 1, 0),
            nn.BatchNorm2d(512),
            nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
        )
        self.fc = nn.Sequential(
            nn.Linear(512, 128),
            nn.BatchNorm1d(128),
            nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            nn.Linear(128, 16),
        )

    def forward(self, attr: torch.Tensor) -> torch.Tensor:
        _check_code(attr, self.image_size, "regularizer")
        h = self.conv(attr).flatten(1)
        return self.fc(h)


class Siamese(nn.Module):
    """Strided conv stack halving the image down to 2x2, then a 1024-dim FC."""

    def __init__(self, image_size: int = 128):
        super().__init__()
        self.image_size = image_size
        layers, ch, side = [], 3, image_size
        nxt = 64
        while side > 2:
            layers += [nn.Conv2d(ch, nxt, 4, 2, 1),
                       nn.InstanceNorm2d(nxt, affine=True),
                       nn.LeakyReLU(LEAKY_SLOPE, inplace=True)]
            ch, side = nxt, side // 2
            nxt = min(nxt * 2, 2048)
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(ch * 2 * 2, 1024)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        _check_image(img, self.image_size, "siamese")
        h = self.body(img).flatten(1)
        return self.fc(h)


# ---------------------------------------------------------------------------
# parameter containers and checkpoint files

@dataclass
class NetworkParams:
    arch_id: str
    image_size: int
    step: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def arch_id_for(name: str, image_size: int) -> str:
    return f"{name}/v1/s{image_size}"


def params_from_module(module: nn.Module, name: str, image_size: int,
                       step: int = 0) -> NetworkParams:
    arrays = {k: v.detach().cpu().numpy().copy()
              for k, v in module.state_dict().items()}
    return NetworkParams(arch_id=arch_id_for(name, image_size),
                         image_size=image_size, step=step, arrays=arrays)


def params_into_module(params: NetworkParams, module: nn.Module, name: str,
                       image_size: int) -> None:
    expected = arch_id_for(name, image_size)
    if params.arch_id != expected:
        raise CheckpointError(f"architecture-id mismatch: checkpoint has "
                              f"{params.arch_id!r}, expected {expected!r}")
    state = {k: torch.from_numpy(v) for k, v in params.arrays.items()}
    module.load_state_dict(state)


def save_checkpoint(params: NetworkParams, path: str) -> None:
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION, "arch_id": params.arch_id,
            "image_size": params.image_size, "step": params.step,
            "names": sorted(params.arrays)}
    payload = {f"a_{k}": v for k, v in params.arrays.items()}
    payload["_meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_checkpoint(path: str) -> NetworkParams:
    try:
        with np.load(path) as z:
            meta = json.loads(bytes(z["_meta"]).decode())
            if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(
                    f"unsupported checkpoint format version {meta.get('format_version')}")
            arrays = {k: z[f"a_{k}"] for k in meta["names"]}
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return NetworkParams(arch_id=meta["arch_id"], image_size=meta["image_size"],
                         step=meta["step"], arrays=arrays)


# ---------------------------------------------------------------------------
# model bundle

NETWORK_NAMES = ("encoder", "decoder", "extractor", "interpolator",
                 "critic", "regularizer", "siamese")


class LEEDModel:
    """All seven networks plus the frozen feature-projection matrix used by
    the mutual-information regularizer."""

    def __init__(self, image_size: int = 128, upsample: str = "nearest",
                 feat_dim: int = 512, seed: int = 0):
        self.image_size = image_size
        self.feat_dim = feat_dim
        self.encoder = Encoder(image_size)
        self.decoder = Decoder(image_size, upsample=upsample)
        self.extractor = Extractor(image_size)
        self.interpolator = Interpolator(image_size)
        self.critic = Critic(image_size)
        self.regularizer = RegularizerQ(image_size)
        self.siamese = Siamese(image_size)
        # frozen random projection feat_dim -> 16, fixed at model creation
        rng = np.random.default_rng(seed)
        self.feat_proj = torch.from_numpy(
            (rng.standard_normal((feat_dim, 16)) / np.sqrt(feat_dim))
            .astype(np.float32))

    def networks(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in NETWORK_NAMES}

    def train(self):
        for net in self.networks().values():
            net.train()
        return self

    def eval(self):
        for net in self.networks().values():
            net.eval()
        return self

    def project_features(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != self.feat_dim:
            raise ConfigError(f"feature projection expects dim {self.feat_dim}, "
                              f"got {feats.shape[-1]}")
        return feats @ self.feat_proj.to(feats.dtype)

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name in NETWORK_NAMES:
            for k, v in sorted(getattr(self, name).state_dict().items()):
                h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]

    def save(self, directory: str, step: int = 0) -> None:
        import os
        os.makedirs(directory, exist_ok=True)
        for name, net in self.networks().items():
            save_checkpoint(params_from_module(net, name, self.image_size, step),
                            os.path.join(directory, f"{name}.bin"))
        extra = NetworkParams(arch_id=arch_id_for("meta", self.image_size),
                              image_size=self.image_size, step=step,
                              arrays={"feat_proj": self.feat_proj.numpy()})
        save_checkpoint(extra, os.path.join(directory, "meta.bin"))

    @classmethod
    def load(cls, directory: str, image_size: int | None = None) -> "LEEDModel":
        import os
        meta = load_checkpoint(os.path.join(directory, "meta.bin"))
        if image_size is not None and meta.image_size != image_size:
            raise CheckpointError(f"architecture-id mismatch: checkpoint was built "
                                  f"for image_size {meta.image_size}, requested {image_size}")
        model = cls(image_size=meta.image_size,
                    feat_dim=meta.arrays["feat_proj"].shape[0])
        model.feat_proj = torch.from_numpy(meta.arrays["feat_proj"].copy())
        for name, net in model.networks().items():
            params = load_checkpoint(os.path.join(directory, f"{name}.bin"))
            params_into_module(params, net, name, model.image_size)
        return model

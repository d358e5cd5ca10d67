"""Every training loss as a pure function from network outputs to scalars.

Sign conventions follow WGAN-GP: the critic scores real codes higher, so the
critic objective is mean(critic(fake)) - mean(critic(real)) + penalty and the
generator side minimizes -mean(critic(fake)). All element-wise losses are
means over elements so the default loss weights balance magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .nets import ConfigError

DEGENERATE_NORM_EPS = 1e-8

LOSS_NAMES = ("exp", "q", "extractor_total", "interp", "idt", "interpolator_total",
              "adv_d", "gp", "adv_ei", "siamese", "decoder_percep", "recon",
              "encoder_total")


@dataclass
class LossRecord:
    exp: float = 0.0
    q: float = 0.0
    extractor_total: float = 0.0
    interp: float = 0.0
    idt: float = 0.0
    interpolator_total: float = 0.0
    adv_d: float = 0.0
    gp: float = 0.0
    adv_ei: float = 0.0
    siamese: float = 0.0
    decoder_percep: float = 0.0
    recon: float = 0.0
    encoder_total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def as_line(self, step: int) -> str:
        parts = [f"step={step}"]
        parts += [f"{name}={getattr(self, name):.8g}" for name in LOSS_NAMES]
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> tuple[int, "LossRecord"]:
        items = dict(p.split("=", 1) for p in line.split())
        step = int(items.pop("step"))
        return step, cls(**{k: float(v) for k, v in items.items()})

    def check_finite(self) -> None:
        for name in LOSS_NAMES:
            v = getattr(self, name)
            if not (v == v and abs(v) != float("inf")):
                raise FloatingPointError(f"non-finite loss term {name!r}: {v}")

    def check_totals(self, lambda_q: float, lambda_recon: float,
                     lambda_s: float, rtol: float = 1e-6) -> None:
        def close(a, b):
            return abs(a - b) <= rtol * max(1.0, abs(a), abs(b))

        if not close(self.extractor_total, self.exp + lambda_q * self.q):
            raise AssertionError("extractor_total inconsistent with components")
        if not close(self.interpolator_total, self.interp + self.idt):
            raise AssertionError("interpolator_total inconsistent with components")
        if not close(self.encoder_total,
                     self.adv_ei + lambda_recon * self.recon + lambda_s * self.siamese):
            raise AssertionError("encoder_total inconsistent with components")


class DegenerateCounter:
    """Counts near-zero siamese transform vectors skipped by the cosine loss."""

    def __init__(self):
        self.count = 0


def expression_displacement(c_expr: torch.Tensor, c_neutral: torch.Tensor) -> torch.Tensor:
    """Raw latent displacement, the pseudo-label for the extractor. Detached:
    it is a constant target and carries no gradient into the encoder."""
    if c_expr.shape != c_neutral.shape:
        raise ConfigError(f"displacement: shape mismatch {tuple(c_expr.shape)} vs "
                          f"{tuple(c_neutral.shape)}")
    return (c_expr - c_neutral).detach()


def loss_exp(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ConfigError(f"loss_exp: shape mismatch {tuple(pred.shape)} vs "
                          f"{tuple(target.shape)}")
    return F.mse_loss(pred, target)


def loss_q(q_out: torch.Tensor, projected_feat: torch.Tensor) -> torch.Tensor:
    """Unit-variance Gaussian NLL of the regularizer's prediction against the
    projected expression feature, reduced to a mean-squared error."""
    if q_out.shape != projected_feat.shape:
        raise ConfigError(f"loss_q: projection dimension mismatch "
                          f"{tuple(q_out.shape)} vs {tuple(projected_feat.shape)}")
    return F.mse_loss(q_out, projected_feat)


def loss_extractor_total(l_exp, l_q, lambda_q: float = 0.01):
    return l_exp + lambda_q * l_q


def loss_interp(interp_out: torch.Tensor, linear_target: torch.Tensor,
                adv_term) -> torch.Tensor:
    return adv_term + F.mse_loss(interp_out, linear_target)


def loss_idt(recovered: torch.Tensor, c_input: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(recovered, c_input)


def gradient_penalty(critic, real_codes: torch.Tensor, interp_codes: torch.Tensor,
                     generator: torch.Generator | None = None) -> torch.Tensor:
    """Unit-gradient-norm penalty on per-sample random mixes of real and
    interpolated codes (before the lambda weight)."""
    if real_codes.shape != interp_codes.shape:
        raise ConfigError("gradient penalty requires equal real/interp shapes")
    b = real_codes.shape[0]
    eps = torch.rand(b, 1, 1, 1, generator=generator,
                     dtype=real_codes.dtype, device=real_codes.device)
    mixed = (eps * real_codes.detach() + (1.0 - eps) * interp_codes.detach())
    mixed.requires_grad_(True)
    scores = critic(mixed)
    grads = torch.autograd.grad(scores.sum(), mixed, create_graph=True)[0]
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def loss_adv_critic(critic, real_codes: torch.Tensor, interp_codes: torch.Tensor,
                    lambda_gp: float = 100.0,
                    generator: torch.Generator | None = None):
    """Returns (adv_d, gp); the critic objective is their sum."""
    adv_d = critic(interp_codes).mean() - critic(real_codes).mean()
    gp = lambda_gp * gradient_penalty(critic, real_codes, interp_codes, generator)
    return adv_d, gp


def loss_adv_generator(critic, interp_codes: torch.Tensor) -> torch.Tensor:
    return -critic(interp_codes).mean()


def loss_siamese(v_r: torch.Tensor, v_i: torch.Tensor,
                 counter: DegenerateCounter | None = None) -> torch.Tensor:
    """1 - cosine similarity between the two transform vectors, averaged over
    the batch. Near-zero vectors contribute 0 and bump the degenerate counter."""
    if v_r.dim() == 1:
        v_r, v_i = v_r.unsqueeze(0), v_i.unsqueeze(0)
    if v_r.shape != v_i.shape:
        raise ConfigError(f"loss_siamese: shape mismatch {tuple(v_r.shape)} vs "
                          f"{tuple(v_i.shape)}")
    nr = v_r.norm(2, dim=1)
    ni = v_i.norm(2, dim=1)
    ok = (nr > DEGENERATE_NORM_EPS) & (ni > DEGENERATE_NORM_EPS)
    if counter is not None:
        counter.count += int((~ok).sum().item())
    if not ok.any():
        return torch.zeros((), dtype=v_r.dtype, device=v_r.device)
    cos = (v_r[ok] * v_i[ok]).sum(dim=1) / (nr[ok] * ni[ok])
    return (1.0 - cos).sum() / v_r.shape[0]


def loss_decoder(percep) -> torch.Tensor:
    return percep


def loss_recon(percep) -> torch.Tensor:
    return percep


def loss_encoder_total(adv_ei, recon, siamese, lambda_recon: float = 10.0,
                       lambda_s: float = 1000.0):
    return adv_ei + lambda_recon * recon + lambda_s * siamese

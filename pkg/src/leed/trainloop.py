"""Training orchestration: per-step update schedule over critic, extractor+Q,
interpolator, encoder, siamese and decoder; optimizer settings, learning-rate
schedule, checkpointing, resume, and ablation switches.

Update order per step: critic first (fresh adversarial target), then the
extractor/regularizer pair, the interpolator, the encoder (siamese frozen),
the siamese network (encoder frozen), and the decoder last. The decoder's
perceptual objective shares its forward pass with the encoder's
reconstruction term; its gradients are recovered by rescaling, which keeps
the step exact while saving a full decode.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import yaml

from . import dataforge, featex, losses, neutralizer as neutralizer_mod
from .losses import DegenerateCounter, LossRecord
from .nets import LEEDModel

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    lambda_q: float = 0.01
    lambda_recon: float = 10.0
    lambda_s: float = 1000.0
    lambda_gp: float = 100.0
    batch_size: int = 24
    epochs: int = 100
    base_lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    n_critic: int = 1
    ablate_q: bool = False
    ablate_s: bool = False
    seed: int = 0
    image_size: int = 128
    alpha_max: float = 1.5
    upsample: str = "nearest"
    grad_clip: float = 0.0
    checkpoint_every: int = 10

    def validate(self) -> "TrainingConfig":
        for name in ("lambda_q", "lambda_recon", "lambda_s", "lambda_gp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        return self

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(dataclasses.asdict(self), f, sort_keys=False)

    @classmethod
    def load(cls, path: str) -> "TrainingConfig":
        with open(path) as f:
            data = yaml.safe_load(f)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data).validate()


def lr_at(config: TrainingConfig, epoch: float) -> float:
    """Constant for the first half of training, then linear decay to zero."""
    if epoch < 0 or epoch > config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    half = config.epochs / 2.0
    if epoch < half:
        return config.base_lr
    return config.base_lr * (config.epochs - epoch) / (config.epochs - half)


def parameter_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainState:
    config: TrainingConfig
    model: LEEDModel
    optimizers: dict[str, torch.optim.Adam]
    psi: featex.ExpressionBackend
    phi: featex.PerceptualBackend
    neutral_backend: object
    torch_gen: torch.Generator
    data_rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    degenerate: DegenerateCounter = field(default_factory=DegenerateCounter)


def _make_optimizers(model: LEEDModel, cfg: TrainingConfig):
    return {name: torch.optim.Adam(net.parameters(), lr=cfg.base_lr,
                                   betas=(cfg.beta1, cfg.beta2))
            for name, net in model.networks().items()}


def init_state(cfg: TrainingConfig, psi, phi, neutral_backend) -> TrainState:
    cfg.validate()
    torch.manual_seed(cfg.seed)
    model = LEEDModel(image_size=cfg.image_size, upsample=cfg.upsample,
                      feat_dim=psi.feat_dim, seed=cfg.seed).train()
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(config=cfg, model=model,
                      optimizers=_make_optimizers(model, cfg),
                      psi=psi, phi=phi, neutral_backend=neutral_backend,
                      torch_gen=gen,
                      data_rng=np.random.default_rng(cfg.seed + 2))


def _set_grad(nets_, flag: bool):
    for net in nets_:
        for p in net.parameters():
            p.requires_grad_(flag)


def _step_opt(opt, net, clip: float):
    if clip > 0:
        torch.nn.utils.clip_grad_norm_(net.parameters(), clip)
    opt.step()


def _finite(**named) -> None:
    for name, t in named.items():
        if not torch.isfinite(t.detach()).all():
            raise FloatingPointError(f"non-finite loss term {name!r}")


def train_step(state: TrainState, batch: dataforge.PairBatch) -> LossRecord:
    """One pass of the update schedule; mutates state in place and returns the
    complete loss record. Raises FloatingPointError on any non-finite term,
    before that term's update is applied."""
    cfg = state.config
    m = state.model
    opts = state.optimizers
    b = batch.inputs.shape[0]
    rec = LossRecord()

    imgs = torch.cat([batch.inputs, batch.input_neutrals,
                      batch.refs, batch.ref_neutrals])
    codes = m.encoder(imgs)
    c_ia, c_in, c_rb, c_rn = codes.split(b)
    d_ia, d_in, d_rb, d_rn = (c.detach() for c in (c_ia, c_in, c_rb, c_rn))
    real_codes = codes.detach()

    alpha = torch.rand(b, generator=state.torch_gen)

    # (1) critic
    with torch.no_grad():
        dex = m.extractor(d_rb, d_rn)
        c_hat = m.interpolator.interpolate(d_in, dex, alpha)
    for _ in range(cfg.n_critic):
        sel = torch.randint(0, real_codes.shape[0], (b,), generator=state.torch_gen)
        adv_d = m.critic(c_hat).mean() - m.critic(real_codes).mean()
        gp = cfg.lambda_gp * losses.gradient_penalty(
            m.critic, real_codes[sel], c_hat, state.torch_gen)
        _finite(adv_d=adv_d, gp=gp)
        opts["critic"].zero_grad(set_to_none=True)
        (adv_d + gp).backward()
        _step_opt(opts["critic"], m.critic, cfg.grad_clip)
    rec.adv_d = float(adv_d.detach())
    rec.gp = float(gp.detach())

    # (2) extractor + regularizer
    target = losses.expression_displacement(d_rb, d_rn)
    dex2 = m.extractor(d_rb, d_rn)
    l_exp = losses.loss_exp(dex2, target)
    if cfg.ablate_q:
        l_q = torch.zeros(())
    else:
        with torch.no_grad():
            proj = m.project_features(state.psi.features(batch.refs))
        l_q = losses.loss_q(m.regularizer(dex2), proj)
    l_x = losses.loss_extractor_total(l_exp, l_q, cfg.lambda_q)
    _finite(exp=l_exp, q=l_q)
    opts["extractor"].zero_grad(set_to_none=True)
    opts["regularizer"].zero_grad(set_to_none=True)
    l_x.backward()
    _step_opt(opts["extractor"], m.extractor, cfg.grad_clip)
    if not cfg.ablate_q:
        _step_opt(opts["regularizer"], m.regularizer, cfg.grad_clip)
    rec.exp = float(l_exp.detach())
    rec.q = float(l_q.detach())
    rec.extractor_total = float(l_x.detach())

    # (3) interpolator
    _set_grad([m.critic], False)
    with torch.no_grad():
        dex3 = m.extractor(d_rb, d_rn)
        dex_a = m.extractor(d_ia, d_in)
    c_hat3 = m.interpolator.interpolate(d_in, dex3, alpha)
    a4 = alpha.view(-1, 1, 1, 1)
    l_interp = losses.loss_interp(c_hat3, d_in + a4 * dex3,
                                  losses.loss_adv_generator(m.critic, c_hat3))
    l_idt = losses.loss_idt(m.interpolator(d_in, dex_a), d_ia)
    l_i = l_interp + l_idt
    _finite(interp=l_interp, idt=l_idt)
    opts["interpolator"].zero_grad(set_to_none=True)
    l_i.backward()
    _step_opt(opts["interpolator"], m.interpolator, cfg.grad_clip)
    _set_grad([m.critic], True)
    rec.interp = float(l_interp.detach())
    rec.idt = float(l_idt.detach())
    rec.interpolator_total = float(l_i.detach())

    # (4) encoder; the decoder's gradients for (6) are collected on the way
    _set_grad([m.extractor, m.interpolator, m.critic, m.decoder], False)
    dex4 = m.extractor(c_rb, c_rn)
    c_hat4 = m.interpolator.interpolate(c_in, dex4, alpha)
    adv_ei = losses.loss_adv_generator(m.critic, c_hat4)
    if cfg.ablate_s:
        i_b, l_s = None, torch.zeros(())
    else:
        i_b = m.decoder(m.interpolator(c_in, dex4))  # full-intensity edit
        with torch.no_grad():
            v_r = m.siamese(batch.refs) - m.siamese(batch.ref_neutrals)
            s_in = m.siamese(batch.input_neutrals)
        v_i = m.siamese(i_b) - s_in
        l_s = losses.loss_siamese(v_r, v_i, state.degenerate)
    _set_grad([m.decoder], True)  # reconstruction path carries decoder grads
    recon_img = m.decoder(c_ia)
    l_recon = losses.loss_recon(featex.phi_distance(recon_img, batch.inputs,
                                                    backend=state.phi))
    l_e = losses.loss_encoder_total(adv_ei, l_recon, l_s,
                                    cfg.lambda_recon, cfg.lambda_s)
    _finite(adv_ei=adv_ei, siamese=l_s, recon=l_recon)
    opts["encoder"].zero_grad(set_to_none=True)
    opts["decoder"].zero_grad(set_to_none=True)
    l_e.backward()
    _step_opt(opts["encoder"], m.encoder, cfg.grad_clip)
    _set_grad([m.extractor, m.interpolator, m.critic], True)
    rec.adv_ei = float(adv_ei.detach())
    rec.siamese = float(l_s.detach())
    rec.recon = float(l_recon.detach())
    rec.encoder_total = float(l_e.detach())

    # (5) siamese (encoder frozen: operates on detached images)
    if not cfg.ablate_s:
        v_i2 = m.siamese(i_b.detach()) - m.siamese(batch.input_neutrals)
        v_r2 = m.siamese(batch.refs) - m.siamese(batch.ref_neutrals)
        l_s2 = losses.loss_siamese(v_r2, v_i2, state.degenerate)
        _finite(siamese_step=l_s2)
        opts["siamese"].zero_grad(set_to_none=True)
        l_s2.backward()
        _step_opt(opts["siamese"], m.siamese, cfg.grad_clip)

    # (6) decoder: gradients were lambda_recon * dL_percep/dD from step (4)
    if cfg.lambda_recon > 0:
        for p in m.decoder.parameters():
            if p.grad is not None:
                p.grad /= cfg.lambda_recon
        _step_opt(opts["decoder"], m.decoder, cfg.grad_clip)
    else:
        out = m.decoder(c_ia.detach())
        l_d = losses.loss_decoder(featex.phi_distance(out, batch.inputs,
                                                      backend=state.phi))
        opts["decoder"].zero_grad(set_to_none=True)
        l_d.backward()
        _step_opt(opts["decoder"], m.decoder, cfg.grad_clip)
    rec.decoder_percep = rec.recon

    state.step += 1
    rec.check_finite()
    return rec


# ---------------------------------------------------------------------------
# checkpoint / resume

def save_train_state(state: TrainState, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    state.model.save(directory, step=state.step)
    torch.save({
        "step": state.step,
        "epoch": state.epoch,
        "optimizers": {k: o.state_dict() for k, o in state.optimizers.items()},
        "torch_gen": state.torch_gen.get_state(),
        "data_rng": state.data_rng.bit_generator.state,
        "degenerate": state.degenerate.count,
        "config": dataclasses.asdict(state.config),
    }, os.path.join(directory, "state.pt"))


def load_train_state(directory: str, psi, phi, neutral_backend) -> TrainState:
    extra = torch.load(os.path.join(directory, "state.pt"), weights_only=False)
    cfg = TrainingConfig(**extra["config"]).validate()
    model = LEEDModel.load(directory).train()
    opts = _make_optimizers(model, cfg)
    for k, o in opts.items():
        o.load_state_dict(extra["optimizers"][k])
    gen = torch.Generator()
    gen.set_state(extra["torch_gen"])
    rng = np.random.default_rng()
    rng.bit_generator.state = extra["data_rng"]
    state = TrainState(config=cfg, model=model, optimizers=opts, psi=psi,
                       phi=phi, neutral_backend=neutral_backend,
                       torch_gen=gen, data_rng=rng,
                       step=extra["step"], epoch=extra["epoch"])
    state.degenerate.count = extra["degenerate"]
    return state


# ---------------------------------------------------------------------------
# full runs

def prepare_backends(train_records, cfg: TrainingConfig, backends_dir: str,
                     epochs: int = 60):
    """Load the frozen feature backends from a registry, training them on the
    given records first if absent."""
    try:
        return (featex.load_backend(backends_dir, "psi"),
                featex.load_backend(backends_dir, "phi"))
    except Exception:
        pass
    store = dataforge.ImageStore(cfg.image_size)
    images = store.batch([r.path for r in train_records])
    labels = torch.tensor([dataforge.EXPRESSIONS.index(r.expression)
                           for r in train_records])
    log.info("training feature backends on %d images", len(train_records))
    psi = featex.train_expression_backend(images, labels, cfg.image_size,
                                          epochs=epochs, seed=cfg.seed)
    phi = featex.train_perceptual_backend(images, cfg.image_size,
                                          epochs=epochs, seed=cfg.seed)
    featex.save_backend(psi, backends_dir, "psi")
    featex.save_backend(phi, backends_dir, "phi")
    return psi, phi


def fit(cfg: TrainingConfig, dataset_root: str, out_dir: str,
        resume_from: str | None = None, log_every: int = 1) -> TrainState:
    """Run the full optimization on a dataset directory.

    Writes per-step loss lines to metrics.log, per-epoch means to epochs.log,
    and resumable checkpoints under ckpt/step-<n>/.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    cfg.save(os.path.join(out_dir, "config.yaml"))

    train_records, _ = dataforge.ingest(dataset_root, seed=cfg.seed)
    neutral = neutralizer_mod.OracleNeutralizer.from_dataset(
        dataset_root, cfg.image_size)
    psi, phi = prepare_backends(train_records, cfg,
                                os.path.join(out_dir, "backends"))

    if resume_from is not None:
        state = load_train_state(resume_from, psi, phi, neutral)
    else:
        state = init_state(cfg, psi, phi, neutral)

    store = dataforge.ImageStore(cfg.image_size)
    steps_per_epoch = max(1, len(train_records) // cfg.batch_size)
    frozen_sums = (psi.checksum(), phi.checksum(), neutral.checksum())

    metrics_path = os.path.join(out_dir, "metrics.log")
    epochs_path = os.path.join(out_dir, "epochs.log")
    mode = "a" if resume_from is not None else "w"
    t0 = time.time()
    with open(metrics_path, mode) as mf, open(epochs_path, mode) as ef:
        while state.epoch < cfg.epochs:
            lr = lr_at(cfg, state.epoch)
            for opt in state.optimizers.values():
                for g in opt.param_groups:
                    g["lr"] = lr
            sums = {}
            for _ in range(steps_per_epoch):
                batch = dataforge.make_pair_batch(
                    train_records, cfg.batch_size, state.data_rng,
                    state.neutral_backend, store)
                try:
                    rec = train_step(state, batch)
                except FloatingPointError:
                    save_train_state(state, os.path.join(out_dir, "ckpt", "last-finite"))
                    raise
                mf.write(rec.as_line(state.step) + "\n")
                for k, v in rec.as_dict().items():
                    sums[k] = sums.get(k, 0.0) + v
            state.epoch += 1
            means = {k: v / steps_per_epoch for k, v in sums.items()}
            ef.write(" ".join([f"epoch={state.epoch}"] +
                              [f"{k}={means[k]:.8g}" for k in losses.LOSS_NAMES]) + "\n")
            ef.flush()
            mf.flush()
            if state.epoch % log_every == 0:
                log.info("epoch %d/%d lr=%.2g extractor=%.4g encoder=%.4g (%.0fs)",
                         state.epoch, cfg.epochs, lr, means["extractor_total"],
                         means["encoder_total"], time.time() - t0)
            if (state.epoch % cfg.checkpoint_every == 0
                    or state.epoch == cfg.epochs):
                save_train_state(state, os.path.join(out_dir, "ckpt",
                                                     f"step-{state.step}"))
    assert (psi.checksum(), phi.checksum(), neutral.checksum()) == frozen_sums, \
        "frozen backend mutated during training"
    return state


def read_epoch_means(out_dir: str) -> list[dict[str, float]]:
    out = []
    with open(os.path.join(out_dir, "epochs.log")) as f:
        for line in f:
            items = dict(p.split("=", 1) for p in line.split())
            out.append({k: float(v) for k, v in items.items()})
    return out

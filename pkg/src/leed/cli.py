"""Command-line interface: train, eval, edit, synth-data, export-features,
serve."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
import torch

from . import dataforge, editsvc, evalbench, featex, trainloop
from .neutralizer import OracleNeutralizer
from .nets import LEEDModel

log = logging.getLogger(__name__)

DEFAULT_CKPT_ENV = "LEED_CKPT"


def _load_model_and_neutralizer(args):
    ckpt = args.ckpt or os.environ.get(DEFAULT_CKPT_ENV)
    if not ckpt:
        raise SystemExit("no checkpoint: pass --ckpt or set $LEED_CKPT")
    model = LEEDModel.load(ckpt)
    neutral = OracleNeutralizer.from_dataset(args.data, model.image_size)
    return model, neutral


def cmd_synth_data(args):
    records = dataforge.make_synthetic_dataset(
        args.out, n_identities=args.identities, seed=args.seed,
        image_size=args.image_size)
    print(f"wrote {len(records)} images under {args.out}")
    return 0


def cmd_train(args):
    if args.config:
        cfg = trainloop.TrainingConfig.load(args.config)
    else:
        cfg = trainloop.TrainingConfig()
    for name in ("epochs", "batch_size", "image_size", "seed", "base_lr"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    cfg.ablate_q = cfg.ablate_q or args.ablate_q
    cfg.ablate_s = cfg.ablate_s or args.ablate_s
    state = trainloop.fit(cfg, args.data, args.out, resume_from=args.resume)
    print(f"finished at step {state.step}; checkpoints under {args.out}/ckpt")
    return 0


def cmd_eval(args):
    from .evaluate import evaluate_run
    report = evaluate_run(args.run, args.data, n_triplets=args.triplets,
                          seed=args.seed)
    report.save(args.out)
    print(f"fid={report.fid:.3f} ssim={report.ssim:.4f} "
          f"cls={report.cls_accuracy} silhouette={report.silhouette}")
    return 0


def cmd_edit(args):
    model, neutral = _load_model_and_neutralizer(args)
    inp = torch.from_numpy(dataforge.load_image(args.input, model.image_size))
    ref = torch.from_numpy(dataforge.load_image(args.ref, model.image_size))
    seq = None
    if args.sequence:
        seq = [float(s) for s in args.sequence.split(",")]
    req = editsvc.EditRequest(input_image=inp, ref_image=ref,
                              alpha=args.alpha, return_sequence=seq)
    result = editsvc.edit(model, neutral, req, alpha_max=args.alpha_max)
    if seq is None:
        dataforge.save_image(result.images[0], args.out)
        print(f"wrote {args.out}")
    else:
        base, ext = os.path.splitext(args.out)
        for a, img in zip(result.alphas, result.images):
            path = f"{base}_a{a:g}{ext}"
            dataforge.save_image(img, path)
        strip = f"{base}_strip{ext}"
        dataforge.save_image(editsvc.image_strip(result.images), strip)
        print(f"wrote {len(result.images)} images + {strip}")
    return 0


def cmd_export_features(args):
    model, neutral = _load_model_and_neutralizer(args)
    train, test = dataforge.ingest(args.data, seed=args.seed)
    store = dataforge.ImageStore(model.image_size)
    samples = evalbench.export_features(model, train + test, store, neutral)
    evalbench.write_features(samples, args.out)
    print(f"wrote {len(samples)} feature samples to {args.out}")
    return 0


def cmd_serve(args):
    import uvicorn
    model, neutral = _load_model_and_neutralizer(args)
    app = editsvc.create_app(model, neutral, alpha_max=args.alpha_max)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leed", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-data", help="generate the synthetic face dataset")
    sp.add_argument("--identities", type=int, default=20)
    sp.add_argument("--out", required=True)
    sp.add_argument("--image-size", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train", help="train the editing model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--image-size", dest="image_size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--base-lr", dest="base_lr", type=float)
    sp.add_argument("--ablate-q", action="store_true")
    sp.add_argument("--ablate-s", action="store_true")
    sp.add_argument("--resume")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a training run")
    sp.add_argument("--run", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", default="report.json")
    sp.add_argument("--triplets", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("edit", help="edit one image with a reference expression")
    sp.add_argument("--ckpt")
    sp.add_argument("--data", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--sequence")
    sp.add_argument("--alpha-max", dest="alpha_max", type=float,
                    default=editsvc.DEFAULT_ALPHA_MAX)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_edit)

    sp = sub.add_parser("export-features", help="dump encoder/residual/extractor features")
    sp.add_argument("--ckpt")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_export_features)

    sp = sub.add_parser("serve", help="run the HTTP editing service")
    sp.add_argument("--ckpt")
    sp.add_argument("--data", required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--alpha-max", dest="alpha_max", type=float,
                    default=editsvc.DEFAULT_ALPHA_MAX)
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

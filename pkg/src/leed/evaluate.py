"""End-to-end evaluation of a training run on the synthetic corpus: edit
fidelity, identity preservation, intensity monotonicity, distribution and
similarity metrics, and the classification protocol."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import dataforge, editsvc, evalbench, featex
from .neutralizer import OracleNeutralizer
from .nets import LEEDModel

log = logging.getLogger(__name__)

EVAL_CLS_SEED = 777
ALPHA_LADDER = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class RunEvaluation:
    report: evalbench.EvalReport
    class_match_rate: float
    identity_match_rate: float
    monotonic_rate: float

    @property
    def silhouette(self):
        return self.report.silhouette


def load_run(run_dir: str, data_root: str):
    ckpt = editsvc.latest_checkpoint(run_dir)
    model = LEEDModel.load(ckpt)
    psi = featex.load_backend(os.path.join(run_dir, "backends"), "psi")
    neutral = OracleNeutralizer.from_dataset(data_root, model.image_size)
    return model, psi, neutral


def edit_batch(model: LEEDModel, neutral_backend, inputs: torch.Tensor,
               refs: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    """Batched edit pipeline at a single intensity."""
    model.eval()
    with torch.no_grad():
        i_n = neutral_backend.neutralize(inputs)
        r_n = neutral_backend.neutralize(refs)
        c_in = model.encoder(i_n)
        c_rn = model.encoder(r_n)
        c_rb = model.encoder(refs)
        attr = model.extractor(c_rb, c_rn)
        code = model.interpolator.interpolate(c_in, attr, alpha)
        return model.decoder(code).clamp(-1.0, 1.0)


def sample_triplets(test_records, by_class, n: int, rng: np.random.Generator):
    """(input record, reference record, ground-truth record) triples; the
    ground truth is the input identity's image of the reference's class."""
    triplets = []
    while len(triplets) < n:
        a = test_records[rng.integers(len(test_records))]
        r = test_records[rng.integers(len(test_records))]
        gt = by_class.get((a.identity, r.expression))
        if gt is None or r.identity == a.identity:
            continue
        triplets.append((a, r, gt))
    return triplets


def evaluate_run(run_dir: str, data_root: str, n_triplets: int = 200,
                 seed: int = 0, batch: int = 50) -> evalbench.EvalReport:
    return evaluate_run_detailed(run_dir, data_root, n_triplets, seed,
                                 batch).report


def evaluate_run_detailed(run_dir: str, data_root: str, n_triplets: int = 200,
                          seed: int = 0, batch: int = 50,
                          cls_epochs: int = 40) -> RunEvaluation:
    model, psi, neutral = load_run(run_dir, data_root)
    store = dataforge.ImageStore(model.image_size)
    train, test = dataforge.ingest(data_root, seed=seed)
    by_class = {(r.identity, r.expression): r for r in train + test}
    rng = np.random.default_rng(seed + 10)

    # held-out expression classifier, trained on the real training split only
    tr_x = store.batch([r.path for r in train])
    tr_y = torch.tensor([dataforge.EXPRESSIONS.index(r.expression) for r in train])
    te_x = store.batch([r.path for r in test])
    te_y = torch.tensor([dataforge.EXPRESSIONS.index(r.expression) for r in test])
    clf = featex.train_expression_backend(tr_x, tr_y, model.image_size,
                                          epochs=cls_epochs, seed=EVAL_CLS_SEED)

    # identity gallery: every identity's neutral render
    idents = neutral.identities
    gallery = neutral.neutrals.flatten(1)

    triplets = sample_triplets(test, by_class, n_triplets, rng)
    edits, probs_by_alpha = [], {a: [] for a in ALPHA_LADDER}
    for i in range(0, len(triplets), batch):
        chunk = triplets[i:i + batch]
        inputs = store.batch([t[0].path for t in chunk])
        refs = store.batch([t[1].path for t in chunk])
        for a in ALPHA_LADDER:
            out = edit_batch(model, neutral, inputs, refs, alpha=a)
            if a == 1.0:
                edits.append(out)
            p = torch.softmax(clf.logits(out), dim=1)
            probs_by_alpha[a].append(p)
    edits = torch.cat(edits)
    target_y = torch.tensor([dataforge.EXPRESSIONS.index(t[1].expression)
                             for t in triplets])

    class_match = float((clf.predict(edits) == target_y).float().mean())

    d = torch.cdist(edits.flatten(1), gallery)
    pred_ident = [idents[j] for j in d.argmin(dim=1)]
    identity_match = float(np.mean([p == t[0].identity
                                    for p, t in zip(pred_ident, triplets)]))

    probs = {a: torch.cat(v) for a, v in probs_by_alpha.items()}
    mono = []
    for i, t in enumerate(triplets):
        k = target_y[i]
        seq = [float(probs[a][i, k]) for a in ALPHA_LADDER]
        mono.append(all(seq[j + 1] >= seq[j] - 0.05 for j in range(len(seq) - 1)))
    monotonic_rate = float(np.mean(mono))

    fid_val = evalbench.fid(psi.features(te_x).numpy(),
                            psi.features(edits).numpy())
    gt_imgs = store.batch([t[2].path for t in triplets])
    ssim_val = float(np.mean([evalbench.ssim(edits[i], gt_imgs[i])
                              for i in range(len(triplets))]))

    cls_acc = evalbench.cls_protocol((tr_x, tr_y), (te_x, te_y),
                                     (edits, target_y), model.image_size,
                                     epochs=cls_epochs)

    samples = evalbench.export_features(model, test, store, neutral)
    silhouette = evalbench.silhouette_by_source(samples)

    report = evalbench.EvalReport(fid=fid_val, ssim=ssim_val,
                                  cls_accuracy=cls_acc, silhouette=silhouette,
                                  config_fingerprint=model.fingerprint())
    return RunEvaluation(report=report, class_match_rate=class_match,
                         identity_match_rate=identity_match,
                         monotonic_rate=monotonic_rate)

"""Dataset ingestion, preprocessing, splitting, pair-batch assembly and the
procedural synthetic-face generator.

Dataset layout on disk: ``root/<identity>/<expression>/<file>.png``.
The synthetic generator additionally writes ``specs.json`` (one entry per
rendered image) and ``neutral_manifest.json`` (identity -> neutral image path)
used by the oracle neutralizer.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

EXPRESSIONS = ("angry", "surprised", "sad", "happy", "neutral", "disgusted", "fearful")

EXPR_PARAM_NAMES = ("mouth_curve", "mouth_open", "eye_open", "brow_angle", "brow_raise")

# canonical expression-parameter vectors, one per class; neutral is the origin
CANONICAL_EXPRESSIONS = {
    "neutral":   (0.0, 0.0, 0.0, 0.0, 0.0),
    "happy":     (0.9, 0.35, 0.15, 0.1, 0.2),
    "sad":       (-0.8, 0.0, 0.0, -0.6, 0.15),
    "angry":     (-0.5, 0.15, 0.2, 0.9, 0.0),
    "surprised": (0.1, 0.9, 0.9, 0.0, 0.9),
    "disgusted": (-0.6, 0.45, 0.1, 0.5, 0.35),
    "fearful":   (-0.3, 0.6, 0.8, -0.4, 0.7),
}

_EXPR_LO = np.array([-1.0, 0.0, 0.0, -1.0, 0.0])
_EXPR_HI = np.array([1.0, 1.0, 1.0, 1.0, 1.0])

MAX_YAW_DEG = 30.0


@dataclass
class SyntheticFaceSpec:
    """Full parameterization of one rendered face."""

    # identity parameters
    face_ratio: float = 0.88     # head width/height ratio scale
    skin_tone: float = 0.65
    eye_spacing: float = 0.33    # half-distance between eye centers
    nose_len: float = 0.24
    hair_tone: float = 0.25
    # expression parameters; all-zero == neutral
    mouth_curve: float = 0.0     # [-1, 1], +1 max smile
    mouth_open: float = 0.0      # [0, 1]
    eye_open: float = 0.0        # [0, 1], extra widening over baseline
    brow_angle: float = 0.0      # [-1, 1], + lowers inner brow ends
    brow_raise: float = 0.0      # [0, 1]
    yaw: float = 0.0             # degrees, [-30, 30]

    def expression_params(self) -> np.ndarray:
        return np.array([self.mouth_curve, self.mouth_open, self.eye_open,
                         self.brow_angle, self.brow_raise], dtype=np.float64)


@dataclass
class FaceRecord:
    path: str
    identity: str
    expression: str
    pose: str | None = None  # frontal / profile-L / profile-R

    def __post_init__(self):
        if not self.identity:
            raise ValueError("identity must be nonempty")
        if self.expression not in EXPRESSIONS:
            raise ValueError(f"unknown expression label {self.expression!r}")


@dataclass
class PairBatch:
    """Aligned (input, reference, input-neutral, reference-neutral) tensors.

    Carries no expression labels by construction: the training path is
    label-free.
    """

    inputs: torch.Tensor
    refs: torch.Tensor
    input_neutrals: torch.Tensor
    ref_neutrals: torch.Tensor

    def __post_init__(self):
        n = self.inputs.shape[0]
        for t in (self.refs, self.input_neutrals, self.ref_neutrals):
            if t.shape[0] != n:
                raise ValueError("PairBatch tensors must share batch size")


# ---------------------------------------------------------------------------
# rendering

def _ramp(d, width):
    """Soft mask: 1 where d < 0, linear falloff over `width`."""
    return np.clip(0.5 - d / width, 0.0, 1.0)


def _clamp_spec(spec: SyntheticFaceSpec) -> SyntheticFaceSpec:
    p = spec.expression_params()
    q = np.clip(p, _EXPR_LO, _EXPR_HI)
    yaw = float(np.clip(spec.yaw, -MAX_YAW_DEG, MAX_YAW_DEG))
    if not np.allclose(p, q) or yaw != spec.yaw:
        log.warning("synthetic face params out of range; clamped")
        spec = SyntheticFaceSpec(
            face_ratio=spec.face_ratio, skin_tone=spec.skin_tone,
            eye_spacing=spec.eye_spacing, nose_len=spec.nose_len,
            hair_tone=spec.hair_tone, mouth_curve=float(q[0]),
            mouth_open=float(q[1]), eye_open=float(q[2]),
            brow_angle=float(q[3]), brow_raise=float(q[4]), yaw=yaw)
    return spec


def render_synthetic(spec: SyntheticFaceSpec, image_size: int = 128) -> np.ndarray:
    """Deterministic raster of a stylized face, (3, S, S) float32 in [-1, 1]."""
    spec = _clamp_spec(spec)
    s = image_size
    ys, xs = np.mgrid[0:s, 0:s]
    x = (xs + 0.5) / s * 2.0 - 1.0
    y = (ys + 0.5) / s * 2.0 - 1.0
    w = 3.0 / s  # anti-alias edge width in normalized units

    img = np.full((s, s, 3), 0.10, dtype=np.float64)

    def paint(mask, color):
        m = mask[..., None]
        img[:] = img * (1.0 - m) + np.asarray(color) * m

    skin = np.array([spec.skin_tone, spec.skin_tone * 0.82, spec.skin_tone * 0.70])
    hair = np.array([spec.hair_tone, spec.hair_tone * 0.85, spec.hair_tone * 0.75])

    # head ellipse
    a, b = 0.66 * spec.face_ratio, 0.82
    head_d = np.sqrt((x / a) ** 2 + ((y - 0.02) / b) ** 2) - 1.0
    head = _ramp(head_d, w)
    paint(head, skin)

    # hair: top band of the head
    paint(head * _ramp(y + 0.40, w), hair)

    dx = math.sin(math.radians(spec.yaw)) * 0.30

    # brows
    tilt = spec.brow_angle * 0.30
    for side in (-1.0, 1.0):
        cx = side * spec.eye_spacing + dx
        cy = -0.315 - 0.08 * spec.brow_raise
        line = cy + tilt * (x - cx) * (-side)
        band = _ramp(np.abs(y - line) - 0.017, w) * _ramp(np.abs(x - cx) - 0.085, w)
        paint(band, hair * 0.55)

    # eyes and pupils
    eh = 0.050 * (1.0 + 1.1 * spec.eye_open)
    for side in (-1.0, 1.0):
        cx = side * spec.eye_spacing + dx
        eye_d = np.sqrt(((x - cx) / 0.11) ** 2 + ((y + 0.18) / eh) ** 2) - 1.0
        eye = _ramp(eye_d, w)
        paint(eye, (0.95, 0.95, 0.95))
        pup_d = np.sqrt((x - cx - 0.05 * dx) ** 2 + (y + 0.18) ** 2) - 0.034
        paint(_ramp(pup_d, w) * eye, (0.06, 0.05, 0.05))

    # nose
    nose = (_ramp(np.abs(x - dx) - 0.020, w)
            * _ramp(np.abs(y - (-0.02 + spec.nose_len / 2)) - spec.nose_len / 2, w))
    paint(nose, skin * 0.72)

    # mouth: curved lip band with darker interior when open
    mw, cy = 0.20, 0.43
    xr = (x - dx) / mw
    line = cy + 0.16 * spec.mouth_curve * (xr ** 2 - 0.5)
    within = _ramp(np.abs(xr) - 1.0, w / mw)
    t = 0.030 + 0.085 * spec.mouth_open
    lip = _ramp(np.abs(y - line) - t, w) * within
    paint(lip, (0.55, 0.18, 0.18))
    t_in = t - 0.035
    if t_in > 0:
        interior = _ramp(np.abs(y - line) - t_in, w) * within
        paint(interior, (0.13, 0.05, 0.05))

    out = (img.transpose(2, 0, 1) * 2.0 - 1.0).astype(np.float32)
    return out


def feature_boxes(spec: SyntheticFaceSpec, image_size: int = 128) -> dict:
    """Pixel bounding boxes (r0, r1, c0, c1) covering every region an
    expression parameter can move, for this identity/yaw. Pixels outside the
    union are expression-invariant."""
    s = image_size
    dx = math.sin(math.radians(spec.yaw)) * 0.30
    pad = 4.0 / s

    def to_box(x0, x1, y0, y1):
        c0 = max(0, int((x0 - pad + 1) / 2 * s) - 1)
        c1 = min(s, int((x1 + pad + 1) / 2 * s) + 2)
        r0 = max(0, int((y0 - pad + 1) / 2 * s) - 1)
        r1 = min(s, int((y1 + pad + 1) / 2 * s) + 2)
        return (r0, r1, c0, c1)

    es = spec.eye_spacing
    boxes = {}
    # per-side eye+brow region: brows can rise by 0.08, eyes widen to 0.105
    for name, side in (("left_eye", -1.0), ("right_eye", 1.0)):
        cx = side * es + dx
        boxes[name] = to_box(cx - 0.13, cx + 0.13, -0.315 - 0.08 - 0.05, -0.18 + 0.11)
    t_max = 0.030 + 0.085
    boxes["mouth"] = to_box(dx - 0.21, dx + 0.21,
                            0.43 - 0.08 - t_max, 0.43 + 0.08 + t_max)
    return boxes


# ---------------------------------------------------------------------------
# synthetic dataset generation

def _sample_identity(rng: np.random.Generator) -> dict:
    return dict(
        face_ratio=float(rng.uniform(0.78, 0.98)),
        skin_tone=float(rng.uniform(0.45, 0.85)),
        eye_spacing=float(rng.uniform(0.26, 0.40)),
        nose_len=float(rng.uniform(0.18, 0.30)),
        hair_tone=float(rng.uniform(0.08, 0.55)),
    )


def pose_tag(yaw: float) -> str:
    if yaw < -10.0:
        return "profile-L"
    if yaw > 10.0:
        return "profile-R"
    return "frontal"


def save_image(img: np.ndarray, path: str) -> None:
    """Write a [-1, 1] CHW float image as 8-bit PNG."""
    arr = np.clip((img.transpose(1, 2, 0) + 1.0) * 127.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def make_synthetic_dataset(root: str, n_identities: int = 20, seed: int = 0,
                           image_size: int = 128, expr_jitter: float = 0.06,
                           yaw_range: float = 25.0) -> list[FaceRecord]:
    """Render the synthetic face corpus: one image per (identity, expression).

    Neutral images are the exact zero-deformation frontal render of each
    identity and double as the oracle-neutralizer targets.
    """
    rng = np.random.default_rng(seed)
    os.makedirs(root, exist_ok=True)
    records, specs, manifest = [], [], {}
    for k in range(n_identities):
        ident = f"id{k:03d}"
        idp = _sample_identity(rng)
        for expr in EXPRESSIONS:
            canon = np.array(CANONICAL_EXPRESSIONS[expr])
            if expr == "neutral":
                params, yaw = canon, 0.0
            else:
                params = np.clip(canon + rng.uniform(-expr_jitter, expr_jitter, 5),
                                 _EXPR_LO, _EXPR_HI)
                yaw = float(rng.uniform(-yaw_range, yaw_range))
            spec = SyntheticFaceSpec(**idp, mouth_curve=float(params[0]),
                                     mouth_open=float(params[1]), eye_open=float(params[2]),
                                     brow_angle=float(params[3]), brow_raise=float(params[4]),
                                     yaw=yaw)
            d = os.path.join(root, ident, expr)
            os.makedirs(d, exist_ok=True)
            path = os.path.join(d, "img000.png")
            save_image(render_synthetic(spec, image_size), path)
            records.append(FaceRecord(path=path, identity=ident, expression=expr,
                                      pose=pose_tag(yaw)))
            specs.append({"path": path, "identity": ident, "expression": expr,
                          **asdict(spec)})
            if expr == "neutral":
                manifest[ident] = path
    with open(os.path.join(root, "specs.json"), "w") as f:
        json.dump(specs, f, indent=1)
    with open(os.path.join(root, "neutral_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return records


# ---------------------------------------------------------------------------
# ingestion / preprocessing

def preprocess(img, image_size: int = 128) -> np.ndarray:
    """Center-crop to square, resize, scale 8-bit values to [-1, 1]; CHW."""
    if isinstance(img, np.ndarray):
        if img.dtype != np.uint8:
            raise ValueError("preprocess expects 8-bit HWC input arrays")
        img = Image.fromarray(img)
    wd, ht = img.size
    side = min(wd, ht)
    left, top = (wd - side) // 2, (ht - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if img.size != (image_size, image_size):
        img = img.resize((image_size, image_size), Image.BILINEAR)
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 127.5 - 1.0
    return arr.transpose(2, 0, 1)


def load_image(path: str, image_size: int = 128) -> np.ndarray:
    with Image.open(path) as im:
        return preprocess(im.convert("RGB"), image_size)


def ingest(root: str, seed: int = 0, train_frac: float = 0.9):
    """Walk the dataset layout and produce a deterministic identity-stratified
    train/test split. Returns (train_records, test_records)."""
    pose_by_path = {}
    specs_path = os.path.join(root, "specs.json")
    if os.path.exists(specs_path):
        with open(specs_path) as f:
            for entry in json.load(f):
                pose_by_path[entry["path"]] = pose_tag(entry["yaw"])

    records = []
    for ident in sorted(os.listdir(root)):
        ident_dir = os.path.join(root, ident)
        if not os.path.isdir(ident_dir):
            continue
        for expr in sorted(os.listdir(ident_dir)):
            if expr not in EXPRESSIONS:
                continue
            expr_dir = os.path.join(ident_dir, expr)
            for name in sorted(os.listdir(expr_dir)):
                path = os.path.join(expr_dir, name)
                try:
                    with Image.open(path) as im:
                        im.verify()
                except Exception:
                    log.warning("skipping unreadable image %s", path)
                    continue
                records.append(FaceRecord(path=path, identity=ident, expression=expr,
                                          pose=pose_by_path.get(path)))
    if not records:
        raise ValueError(f"no usable images found under {root}")

    rng = np.random.default_rng(seed)
    by_ident: dict[str, list[FaceRecord]] = {}
    for r in records:
        by_ident.setdefault(r.identity, []).append(r)
    train, test = [], []
    for ident in sorted(by_ident):
        group = by_ident[ident]
        idx = rng.permutation(len(group))
        n_test = int(round(len(group) * (1.0 - train_frac)))
        n_test = min(n_test, len(group) - 1)  # every identity stays in train
        test.extend(group[i] for i in idx[:n_test])
        train.extend(group[i] for i in idx[n_test:])
    return train, test


def write_split(path: str, train: list[FaceRecord], test: list[FaceRecord]) -> None:
    with open(path, "w") as f:
        json.dump({"train": [r.path for r in train],
                   "test": [r.path for r in test]}, f, indent=1)


class ImageStore:
    """Caching loader mapping record paths to preprocessed tensors."""

    def __init__(self, image_size: int):
        self.image_size = image_size
        self._cache: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        if path not in self._cache:
            self._cache[path] = load_image(path, self.image_size)
        return self._cache[path]

    def batch(self, paths) -> torch.Tensor:
        return torch.from_numpy(np.stack([self.get(p) for p in paths]))


def make_pair_batch(records: list[FaceRecord], batch_size: int,
                    rng: np.random.Generator, neutralizer,
                    store: ImageStore) -> PairBatch:
    """Sample (input, reference) pairs independently and attach neutrals."""
    if not records:
        raise ValueError("empty record list")
    idx_in = rng.integers(0, len(records), batch_size)
    idx_ref = rng.integers(0, len(records), batch_size)
    inputs = store.batch([records[i].path for i in idx_in])
    refs = store.batch([records[i].path for i in idx_ref])
    return PairBatch(
        inputs=inputs, refs=refs,
        input_neutrals=neutralizer.neutralize(inputs),
        ref_neutrals=neutralizer.neutralize(refs),
    )

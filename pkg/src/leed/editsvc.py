"""The user-facing editing pipeline: library call plus the HTTP service.

Pipeline per request: neutralize both faces, encode, extract the reference's
expression attribute, interpolate at each requested intensity, decode.
"""

from __future__ import annotations

import base64
import io
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from . import dataforge
from .nets import LEEDModel, CheckpointError

DEFAULT_ALPHA_MAX = 1.5


class EditError(RuntimeError):
    code = "EDIT_ERROR"


class AlphaRangeError(EditError):
    code = "ALPHA_RANGE"


class ImageDecodeError(EditError):
    code = "BAD_IMAGE"


@dataclass
class EditRequest:
    input_image: torch.Tensor      # (3, S, S) in [-1, 1]
    ref_image: torch.Tensor
    alpha: float = 1.0
    return_neutrals: bool = False
    return_sequence: list[float] | None = None


@dataclass
class EditResult:
    images: list[np.ndarray]       # (3, S, S) clamped to [-1, 1]
    alphas: list[float]
    neutrals: tuple | None
    seconds: float
    model_fingerprint: str


def _check_alphas(alphas, alpha_max: float) -> list[float]:
    out = []
    for a in alphas:
        a = float(a)
        if not np.isfinite(a) or a < 0 or a > alpha_max:
            raise AlphaRangeError(f"alpha {a} outside [0, {alpha_max}]")
        out.append(a)
    return out


def edit(model: LEEDModel, neutral_backend, req: EditRequest,
         alpha_max: float = DEFAULT_ALPHA_MAX,
         fingerprint: str | None = None) -> EditResult:
    """Run the full editing pipeline; deterministic per checkpoint."""
    alphas = _check_alphas(req.return_sequence or [req.alpha], alpha_max)
    t0 = time.time()
    model.eval()
    with torch.no_grad():
        inp = req.input_image.unsqueeze(0)
        ref = req.ref_image.unsqueeze(0)
        i_n = neutral_backend.neutralize(inp)
        r_n = neutral_backend.neutralize(ref)
        c_in = model.encoder(i_n)
        c_rn = model.encoder(r_n)
        c_rb = model.encoder(ref)
        attr = model.extractor(c_rb, c_rn)
        images = []
        for a in alphas:
            code = model.interpolator.interpolate(c_in, attr, a)
            img = model.decoder(code).clamp(-1.0, 1.0)
            images.append(img[0].numpy().copy())
    return EditResult(
        images=images, alphas=alphas,
        neutrals=(i_n[0].numpy().copy(), r_n[0].numpy().copy())
        if req.return_neutrals else None,
        seconds=time.time() - t0,
        model_fingerprint=fingerprint or model.fingerprint())


def to_png_bytes(img: np.ndarray) -> bytes:
    arr = np.clip((img.transpose(1, 2, 0) + 1.0) * 127.5, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def image_strip(images: list[np.ndarray]) -> np.ndarray:
    """Horizontal concatenation for interpolation/extrapolation strips."""
    return np.concatenate(images, axis=2)


# ---------------------------------------------------------------------------
# HTTP service

def create_app(model: LEEDModel, neutral_backend,
               alpha_max: float = DEFAULT_ALPHA_MAX):
    from fastapi import FastAPI, UploadFile, File, Query
    from fastapi.responses import JSONResponse, Response

    app = FastAPI(title="leed-editsvc")
    fingerprint = model.fingerprint()
    image_size = model.image_size

    def _decode_upload(data: bytes) -> torch.Tensor:
        try:
            with Image.open(io.BytesIO(data)) as im:
                arr = dataforge.preprocess(im.convert("RGB"), image_size)
        except ImageDecodeError:
            raise
        except Exception as e:
            raise ImageDecodeError(f"cannot decode uploaded image: {e}") from e
        return torch.from_numpy(arr)

    def _error(exc: EditError, status: int = 422):
        return JSONResponse(status_code=status,
                            content={"error": exc.code, "detail": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok", "model_fingerprint": fingerprint,
                "image_size": image_size}

    @app.get("/meta")
    def meta():
        return {"alpha_max": alpha_max, "image_size": image_size}

    @app.post("/edit")
    async def edit_endpoint(input: UploadFile = File(...),
                            reference: UploadFile = File(...),
                            alpha: float = Query(1.0),
                            sequence: str | None = Query(None),
                            format: str = Query("png")):
        try:
            inp = _decode_upload(await input.read())
            ref = _decode_upload(await reference.read())
            seq = None
            if sequence is not None:
                try:
                    seq = [float(s) for s in sequence.split(",") if s.strip()]
                except ValueError as e:
                    raise AlphaRangeError(f"bad sequence value: {e}") from e
            req = EditRequest(input_image=inp, ref_image=ref, alpha=alpha,
                              return_sequence=seq)
            result = edit(model, neutral_backend, req, alpha_max, fingerprint)
        except EditError as e:
            return _error(e)
        if format == "json" or seq is not None:
            return {"alphas": result.alphas,
                    "images": [base64.b64encode(to_png_bytes(i)).decode()
                               for i in result.images],
                    "model_fingerprint": result.model_fingerprint}
        return Response(content=to_png_bytes(result.images[0]),
                        media_type="image/png")

    return app


def latest_checkpoint(run_dir: str) -> str:
    ckpt_root = os.path.join(run_dir, "ckpt")
    if not os.path.isdir(ckpt_root):
        raise CheckpointError(f"no checkpoint directory under {run_dir}")
    steps = [(int(d.split("-")[1]), d) for d in os.listdir(ckpt_root)
             if d.startswith("step-")]
    if not steps:
        raise CheckpointError(f"no step checkpoints under {ckpt_root}")
    return os.path.join(ckpt_root, max(steps)[1])

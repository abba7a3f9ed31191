# serve/app.py
import logging
import os
from typing import List, Optional

import torch
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from scripts.errors import CelpError, DimensionError, TensorFormatError
from scripts.lps import LpsConfig, sample_latent_prototype
from scripts.tensorfile import decode_tensor
from scripts.utils import make_rng, setup_logging, split_seed

# -------- logging --------
setup_logging()
logger = logging.getLogger("celp.serve")


# -------- FastAPI app --------
app = FastAPI(title="Latent Prototype Mining API", version="0.1")


# -------- CORS configuration --------
# ALLOWED_ORIGINS is a comma-separated list; "*" allows every origin without credentials.
_allowed_env = os.environ.get("ALLOWED_ORIGINS", "").strip()
origins = [o.strip() for o in _allowed_env.split(",") if o.strip()] or ["http://localhost:5173", "http://localhost:3000"]
_wildcard = origins == ["*"]
app.add_middleware(
    CORSMiddleware,
    allow_origins=origins,
    allow_credentials=not _wildcard,
    allow_methods=["*"],
    allow_headers=["*"],
)
logger.info("CORS origins: %s", origins)


# -------- response models --------
class MineResponse(BaseModel):
    height: int
    width: int
    pseudo_mask: List[List[int]]
    prototype: List[float]
    center_index: int
    candidate_count: int


async def _read_tensor(upload: UploadFile, name: str):
    try:
        return decode_tensor(await upload.read())
    except TensorFormatError as e:
        raise HTTPException(status_code=400, detail=f"{name}: {e}")


# -------- health route --------
@app.get("/")
async def root():
    return {"status": "ok", "service": "celp-mine", "message": "ready"}


# -------- mining route --------
@app.post("/mine", response_model=MineResponse)
async def mine(
    feature_m: UploadFile = File(...),
    feature_h: UploadFile = File(...),
    mask: UploadFile = File(...),
    delta: float = Form(0.65),
    sigma: Optional[int] = Form(None),
    seed: int = Form(0),
):
    """
    Latent prototype sampling on uploaded tensor files (mid features, high
    features, u8 label mask). 422 when no latent region exists.
    """
    F_m = await _read_tensor(feature_m, "feature_m")
    F_h = await _read_tensor(feature_h, "feature_h")
    M = await _read_tensor(mask, "mask")
    if M.dtype != torch.uint8 or not set(torch.unique(M).tolist()) <= {0, 1, 255}:
        raise HTTPException(status_code=400, detail="mask: expected u8 labels in {0, 1, 255}")
    try:
        cfg = LpsConfig(delta=delta, sigma=sigma, seed=seed)
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    try:
        sample = sample_latent_prototype(F_m.double(), F_h.double(), M, cfg, make_rng(split_seed(seed)["lps"]))
    except DimensionError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except CelpError:
        logger.exception("mining failed")
        raise HTTPException(status_code=500, detail="Internal Server Error while mining.")
    if sample is None:
        raise HTTPException(status_code=422, detail="no latent region")
    h, w = sample.pseudo_mask.shape
    return MineResponse(
        height=h,
        width=w,
        pseudo_mask=sample.pseudo_mask.tolist(),
        prototype=sample.prototype.tolist(),
        center_index=sample.center_index,
        candidate_count=sample.candidate_count,
    )


# -------- uvicorn entry (if run directly) --------
if __name__ == "__main__":
    # run with: python -m serve.app  OR  uvicorn serve.app:app --host 0.0.0.0 --port 8000
    import uvicorn

    port = int(os.environ.get("PORT", 8000))
    uvicorn.run("serve.app:app", host="0.0.0.0", port=port, log_level="info")

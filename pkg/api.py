from typing import List, Optional

import uvicorn
from fastapi import Depends, FastAPI, File, HTTPException, Query, Response, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from config.config import Config
from dan_pipeline import DANPipeline
from src.errors import DanError

# Initialize FastAPI app
app = FastAPI(
    title="DAN Blind Super-Resolution API",
    description="Blind super-resolution with an unfolded alternating Restorer/Estimator network",
    version="1.0.0"
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


class KernelResponse(BaseModel):
    kernel_size: int
    kernel: List[List[float]]
    reduced: List[float]
    iterations: int


_pipeline: Optional[DANPipeline] = None


def get_pipeline() -> DANPipeline:
    """Pipeline for the checkpoint named by DAN_CHECKPOINT, loaded on first use"""
    global _pipeline
    if _pipeline is None:
        path = Config.checkpoint_path()
        if path is None:
            raise HTTPException(status_code=503, detail="DAN_CHECKPOINT is not set")
        try:
            _pipeline = DANPipeline.from_checkpoint(path)
        except DanError as e:
            raise HTTPException(status_code=503, detail=e.one_line())
    return _pipeline


async def _read_png(file: UploadFile, pipeline: DANPipeline):
    if file.content_type not in ("image/png", "application/octet-stream", None):
        raise HTTPException(status_code=400, detail=f"File {file.filename} is not a PNG")
    content = await file.read()
    return pipeline.png.decode(content, file.filename or "<upload>")


@app.get("/", tags=["Health"])
async def root():
    """Root endpoint - health check"""
    return {"message": "DAN Blind Super-Resolution API is running!"}


@app.get("/health", tags=["Health"])
async def health_check():
    """Health check endpoint"""
    return {
        "status": "healthy",
        "service": "DAN Blind Super-Resolution API",
        "checkpoint_configured": Config.checkpoint_path() is not None,
        "model_loaded": _pipeline is not None,
    }


@app.post("/super-resolve", tags=["Inference"])
async def super_resolve(
    file: UploadFile = File(...),
    iterations: Optional[int] = Query(None, ge=1),
    pipeline: DANPipeline = Depends(get_pipeline),
):
    """Super-resolve an uploaded LR PNG; returns the SR PNG at the upload's bit depth"""
    try:
        lr, bits = await _read_png(file, pipeline)
        sr, _, _ = pipeline.super_resolve(lr, iterations)
        return Response(content=pipeline.png.encode(sr, bit_depth=bits), media_type="image/png")
    except HTTPException:
        raise
    except DanError as e:
        raise HTTPException(status_code=400, detail=e.one_line())
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Super-resolution failed: {str(e)}")


@app.post("/estimate-kernel", response_model=KernelResponse, tags=["Inference"])
async def estimate_kernel(
    file: UploadFile = File(...),
    iterations: Optional[int] = Query(None, ge=1),
    pipeline: DANPipeline = Depends(get_pipeline),
):
    """Estimate the blur kernel of an uploaded LR PNG"""
    try:
        lr, _ = await _read_png(file, pipeline)
        return KernelResponse(**pipeline.estimate_kernel(lr, iterations))
    except HTTPException:
        raise
    except DanError as e:
        raise HTTPException(status_code=400, detail=e.one_line())
    except Exception as e:
        raise HTTPException(status_code=500, detail=f"Kernel estimation failed: {str(e)}")


if __name__ == "__main__":
    uvicorn.run(app, host="0.0.0.0", port=8001)

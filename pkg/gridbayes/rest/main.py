"""
REST API - gridbayes inference service

Serves one trained checkpoint:
- GET /model describes the network
- POST /predict grids radar detections and returns class and entropy grids
- Swagger/OpenAPI documentation at /docs

Run with `gridbayes serve --ckpt model.ckpt`, or
`uvicorn gridbayes.rest.main:create_app --factory` with GRIDBAYES_CHECKPOINT set.
"""

import logging
import os
from pathlib import Path
from typing import Optional

from fastapi import FastAPI

from .. import __version__
from ..errors import ConfigurationError
from ..services import CheckpointService
from .routers import model, predictions

logger = logging.getLogger(__name__)

CHECKPOINT_ENV = "GRIDBAYES_CHECKPOINT"


def create_app(checkpoint_path: Optional[str | Path] = None) -> FastAPI:
    """Build the app around a checkpoint file (default: $GRIDBAYES_CHECKPOINT)"""
    path = checkpoint_path or os.environ.get(CHECKPOINT_ENV)
    if not path:
        raise ConfigurationError(f"no checkpoint given and ${CHECKPOINT_ENV} is not set")

    app = FastAPI(
        title="gridbayes inference API",
        description="Radar grid segmentation with predictive, aleatoric and epistemic uncertainty",
        version=__version__,
        docs_url="/docs",
        redoc_url="/redoc",
    )
    app.state.checkpoint = CheckpointService.load_checkpoint(path)
    logger.info("serving %s checkpoint %s", app.state.checkpoint.network.variant.value, path)

    app.include_router(model.router, prefix="/model", tags=["Model"])
    app.include_router(predictions.router, prefix="/predict", tags=["Predictions"])

    @app.get("/", tags=["Root"])
    async def root():
        """Service information and links to documentation"""
        return {
            "message": "gridbayes inference API",
            "version": __version__,
            "variant": app.state.checkpoint.network.variant.value,
            "docs": "/docs",
            "endpoints": {
                "model": "/model",
                "predict": "/predict",
            },
        }

    @app.get("/health", tags=["Health"])
    async def health_check():
        """Health check endpoint"""
        return {"status": "healthy"}

    return app

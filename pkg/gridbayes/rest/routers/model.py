"""
Model router for the inference service.

Endpoints:
- GET /model - Summary of the loaded checkpoint
"""

from fastapi import APIRouter, Depends

from ...schemas import ModelResponse
from ...services import Checkpoint
from ..dependencies import get_checkpoint

router = APIRouter()


@router.get("", response_model=ModelResponse)
async def get_model(ckpt: Checkpoint = Depends(get_checkpoint)):
    """Variant, architecture, parameter counts and training length"""
    net = ckpt.network
    return ModelResponse(
        variant=net.variant,
        network=net.cfg,
        parameter_count=net.parameter_count(),
        conv_parameter_count=net.conv_parameter_count(),
        epochs_trained=len(ckpt.history),
    )

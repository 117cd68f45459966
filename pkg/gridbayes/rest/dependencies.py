"""
FastAPI dependencies for the inference service.

Dependencies:
- get_checkpoint: the checkpoint loaded by create_app

Prediction never mutates the network (no weight caching, no running
statistics update), so one checkpoint is shared by all requests.
"""

from fastapi import HTTPException, Request, status

from ..services import Checkpoint


def get_checkpoint(request: Request) -> Checkpoint:
    """
    Checkpoint held on the application state.

    Raises:
        HTTPException: 503 if the app was built without a checkpoint
    """
    ckpt = getattr(request.app.state, "checkpoint", None)
    if ckpt is None:
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
            detail="No checkpoint loaded",
        )
    return ckpt

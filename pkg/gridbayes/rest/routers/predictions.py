"""
Predictions router for the inference service.

Endpoints:
- POST /predict - Grid radar detections and return class and entropy grids
"""

import numpy as np
from fastapi import APIRouter, Depends, HTTPException, status

from ...errors import GridBayesError
from ...models import DetectionCloud
from ...schemas import PredictRequest, PredictResponse
from ...services import Checkpoint, SceneService, UncertaintyService
from ...tensor import default_dtype
from ..dependencies import get_checkpoint

router = APIRouter()


def _grid(values: np.ndarray) -> list:
    return np.round(values.astype(np.float64), 6).tolist()


@router.post("", response_model=PredictResponse)
def predict(
    request: PredictRequest,
    ckpt: Checkpoint = Depends(get_checkpoint),
):
    """
    MC prediction for one set of detections.

    **Request Body:**
    - detections: x, y in the reference ego frame, doppler, rcs, t_rel, sensor
    - mc_samples: sampled forward passes (forced to 1 for deterministic networks)
    - seed: seed of the sampling stream

    **Response:**
    - predicted class grid and H_p / H_a / H_e grids in nats, row 0 = rear-most
    """
    det = request.detections
    cloud = DetectionCloud(
        [d.x for d in det],
        [d.y for d in det],
        [d.doppler for d in det],
        [d.rcs for d in det],
        [d.t_rel for d in det],
        [d.sensor for d in det],
    )
    try:
        spec = ckpt.grid_spec()
        raw = SceneService.grid_project(cloud, spec)
        features = np.moveaxis(SceneService.normalize_features(raw, ckpt.feature_ranges), -1, 0)
        stack, maps = UncertaintyService.predict_maps(
            ckpt.network,
            features.astype(default_dtype()),
            request.mc_samples,
            np.random.default_rng(request.seed),
        )
    except GridBayesError as exc:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(exc))

    return PredictResponse(
        variant=ckpt.network.variant,
        c_l=spec.c_l,
        c_w=spec.c_w,
        mc_samples=stack.n,
        predicted_class=maps.predicted.tolist(),
        predictive_entropy=_grid(maps.predictive),
        aleatoric_entropy=_grid(maps.aleatoric),
        epistemic_entropy=_grid(maps.epistemic),
        mean_predictive_entropy=float(maps.predictive.mean()),
        mean_epistemic_entropy=float(maps.epistemic.mean()),
    )

"""
Tests for the REST inference service.
"""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from gridbayes.errors import ConfigurationError
from gridbayes.models import Variant
from gridbayes.rest.main import CHECKPOINT_ENV, create_app
from gridbayes.services import CheckpointService

DETECTIONS = [
    {"x": 3.2, "y": -1.1, "doppler": 0.0, "rcs": 5.0, "t_rel": 0.0, "sensor": 0},
    {"x": 3.4, "y": -0.8, "doppler": 0.0, "rcs": 4.0, "t_rel": 0.1, "sensor": 0},
    {"x": -2.0, "y": 4.5, "doppler": -3.0, "rcs": 1.0, "t_rel": 0.0, "sensor": 1},
]


@pytest.fixture(scope="module")
def checkpoint_file(tmp_path_factory, trained_checkpoint):
    path = tmp_path_factory.mktemp("rest") / "hybrid.ckpt"
    return CheckpointService.save_checkpoint(trained_checkpoint(Variant.HYBRID), path)


@pytest.fixture(scope="module")
def client(checkpoint_file):
    return TestClient(create_app(checkpoint_file))


class TestService:
    def test_health(self, client):
        response = client.get("/health")
        assert response.status_code == 200
        assert response.json() == {"status": "healthy"}

    def test_root(self, client):
        body = client.get("/").json()
        assert body["variant"] == "hybrid"
        assert body["endpoints"]["predict"] == "/predict"

    def test_model(self, client):
        body = client.get("/model").json()
        assert body["variant"] == "hybrid"
        assert body["network"]["c_l"] == 16
        assert body["epochs_trained"] == 2
        assert body["parameter_count"] > body["conv_parameter_count"] > 0

    def test_checkpoint_from_environment(self, checkpoint_file, monkeypatch):
        monkeypatch.setenv(CHECKPOINT_ENV, str(checkpoint_file))
        with TestClient(create_app()) as local:
            assert local.get("/health").status_code == 200

    def test_no_checkpoint(self, monkeypatch):
        monkeypatch.delenv(CHECKPOINT_ENV, raising=False)
        with pytest.raises(ConfigurationError):
            create_app()


class TestPredict:
    def test_grids(self, client):
        response = client.post("/predict", json={"detections": DETECTIONS, "mc_samples": 4, "seed": 1})
        assert response.status_code == 200
        body = response.json()
        assert (body["c_l"], body["c_w"], body["mc_samples"]) == (16, 16, 4)
        for key in ("predicted_class", "predictive_entropy", "aleatoric_entropy", "epistemic_entropy"):
            assert np.asarray(body[key]).shape == (16, 16)
        predictive = np.asarray(body["predictive_entropy"])
        epistemic = np.asarray(body["epistemic_entropy"])
        assert np.all(epistemic >= 0)
        assert np.all(predictive <= np.log(4) + 1e-6)
        assert set(np.unique(body["predicted_class"])) <= {0, 1, 2, 3}
        assert body["mean_epistemic_entropy"] == pytest.approx(epistemic.mean(), abs=1e-5)

    def test_same_seed_same_answer(self, client):
        payload = {"detections": DETECTIONS, "mc_samples": 3, "seed": 7}
        assert client.post("/predict", json=payload).json() == client.post("/predict", json=payload).json()

    def test_empty_scene(self, client):
        response = client.post("/predict", json={"detections": [], "mc_samples": 2})
        assert response.status_code == 200

    @pytest.mark.parametrize("payload", [
        {"detections": DETECTIONS, "mc_samples": 0},
        {"detections": DETECTIONS, "mc_samples": 5000},
        {"detections": [{"x": 1.0}]},
        {"detections": [{"x": 1.0, "y": 2.0, "t_rel": -0.1}]},
    ])
    def test_invalid_requests(self, client, payload):
        assert client.post("/predict", json=payload).status_code == 422

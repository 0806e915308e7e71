import pytest
from fastapi.testclient import TestClient
from unittest.mock import AsyncMock, MagicMock, patch

from app.main import app
from app.dependencies import get_service
from app.errors import ArtifactNotFoundError, InvalidInputError
from app.models import (
    LabeledPosture,
    ModelSummary,
    PoseVector,
    PostureSetManifest,
    PredictionResponse,
    SimilarityScore,
)
from app.services.postures import PostureService

# Initialize TestClient
client = TestClient(app)

IDENTITY_POSE = {"joints": [{"w": 1.0, "x": 0.0, "y": 0.0, "z": 0.0}] * 4}


@pytest.fixture
def mock_service():
    """
    Create a mock Service.
    Business methods return the Pydantic objects the routes expect.
    """
    service = MagicMock(spec=PostureService)
    service.canonical = AsyncMock()
    service.features = AsyncMock()
    service.similarity = AsyncMock()
    service.list_models = AsyncMock()
    service.predict = AsyncMock()
    return service

@pytest.fixture(autouse=True)
def override_dependency(mock_service):
    """
    Swap the real 'get_service' dependency for 'mock_service' in every test of this file.
    """
    app.dependency_overrides[get_service] = lambda: mock_service
    yield
    app.dependency_overrides = {}

# --- Tests ---

def test_root():
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["docs"] == "/docs"

def test_startup_logs_stored_models(caplog):
    repo = MagicMock()
    repo.list_models = AsyncMock(return_value=["virtual", "wearable"])
    with patch("app.main.get_repository", return_value=repo), caplog.at_level("INFO", logger="app.main"):
        with TestClient(app) as started:
            assert started.get("/").json()["version"] == "1.0.0"
    repo.list_models.assert_awaited_once()
    assert "Serving 2 stored models" in caplog.text

def test_canonical_postures(mock_service):
    mock_service.canonical.return_value = PostureSetManifest(
        seed=4, postures=[LabeledPosture(label=1, name="supine", pose=PoseVector.identity())]
    )

    response = client.get("/postures/canonical?seed=4")

    assert response.status_code == 200
    assert response.json()["postures"][0]["name"] == "supine"
    mock_service.canonical.assert_called_once_with(4)

def test_canonical_rejects_negative_seed():
    response = client.get("/postures/canonical?seed=-1")
    assert response.status_code == 422

def test_features(mock_service):
    mock_service.features.return_value = [0.0, 0.0, 1.0, 0.0] * 4

    response = client.post("/postures/features", json={"pose": IDENTITY_POSE})

    assert response.status_code == 200
    assert len(response.json()["features"]) == 16

def test_features_rejects_zero_quaternion():
    pose = {"joints": [{"w": 0.0, "x": 0.0, "y": 0.0, "z": 0.0}] * 4}
    response = client.post("/postures/features", json={"pose": pose})
    assert response.status_code == 422

def test_similarity(mock_service):
    mock_service.similarity.return_value = SimilarityScore(lambda_phi=2.0, lambda_theta=4.0)

    response = client.post("/postures/similarity", json={"x_a": [0.0] * 16, "x_b": [0.0] * 16})

    assert response.status_code == 200
    assert response.json() == {"lambda_phi": 2.0, "lambda_theta": 4.0, "lambda_total": 6.0}

def test_similarity_invalid_features(mock_service):
    mock_service.similarity.side_effect = InvalidInputError("feature axes must be unit vectors")

    response = client.post("/postures/similarity", json={"x_a": [0.0] * 16, "x_b": [0.0] * 16})

    assert response.status_code == 422
    assert "unit vectors" in response.json()["detail"]

def test_similarity_wrong_length():
    response = client.post("/postures/similarity", json={"x_a": [0.0] * 15, "x_b": [0.0] * 16})
    assert response.status_code == 422

def test_list_models(mock_service):
    mock_service.list_models.return_value = [
        ModelSummary(model_id="wearable", labels=[1, 2, 3], binaries=3, schema_version=1)
    ]

    response = client.get("/models")

    assert response.status_code == 200
    assert response.json()[0]["model_id"] == "wearable"

def test_predict(mock_service):
    mock_service.predict.return_value = PredictionResponse(model_id="wearable", label=3, losses=[0.5, 0.5, 0.0])

    response = client.post("/models/wearable/predict", json={"pose": IDENTITY_POSE})

    assert response.status_code == 200
    assert response.json()["label"] == 3
    assert mock_service.predict.call_args[0][0] == "wearable"

def test_predict_model_not_found(mock_service):
    mock_service.predict.side_effect = ArtifactNotFoundError("model 'ghost' not found")

    response = client.post("/models/ghost/predict", json={"pose": IDENTITY_POSE})

    assert response.status_code == 404
    assert response.json()["detail"] == "Model not found"

def test_predict_needs_one_input():
    response = client.post("/models/wearable/predict", json={})
    assert response.status_code == 422

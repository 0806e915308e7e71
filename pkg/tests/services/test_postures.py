import pytest
from unittest.mock import AsyncMock, MagicMock

import numpy as np

from app.errors import ArtifactNotFoundError, InvalidInputError
from app.models import PoseVector, PredictRequest
from app.services.augmentation import AugmentedDataset
from app.services.classifier import train_ecoc
from app.services.postures import PostureService
from app.storage.repository import ArtifactRepository


class TestPostureService:
    """Unit tests for the HTTP-facing Business Logic Layer."""

    @pytest.fixture
    def mock_repo(self):
        repo = MagicMock(spec=ArtifactRepository)
        repo.list_models = AsyncMock()
        repo.load_model = AsyncMock()
        return repo

    @pytest.fixture
    def service(self, mock_repo):
        return PostureService(repo=mock_repo)

    @pytest.fixture
    def model_record(self):
        rng = np.random.default_rng(0)
        identity = np.tile([0.0, 0.0, 1.0, 0.0], 4)
        flipped = np.tile([1.0, 0.0, 0.0, 1.5], 4)
        features = np.concatenate([identity + 0.01 * rng.normal(size=(6, 16)), flipped + 0.01 * rng.normal(size=(6, 16))])
        dataset = AugmentedDataset(features=features, labels=np.repeat([1, 2], 6))
        return train_ecoc(dataset, C=10.0, gamma=0.1).to_record()

    # --- Stateless utilities ---

    @pytest.mark.asyncio
    async def test_canonical_is_seeded(self, service):
        a = await service.canonical(3)
        b = await service.canonical(3)
        assert a == b
        assert len(a.postures) == 12

    @pytest.mark.asyncio
    async def test_features_of_identity(self, service):
        features = await service.features(PoseVector.identity())
        assert features == [0.0, 0.0, 1.0, 0.0] * 4

    @pytest.mark.asyncio
    async def test_similarity_self(self, service):
        x = [0.0, 0.0, 1.0, 0.5] * 4
        score = await service.similarity(x, x)
        assert score.total == pytest.approx(8.0)

    @pytest.mark.asyncio
    async def test_similarity_rejects_bad_axes(self, service):
        with pytest.raises(InvalidInputError):
            await service.similarity([0.0] * 16, [0.0, 0.0, 1.0, 0.0] * 4)

    # --- Stored models ---

    @pytest.mark.asyncio
    async def test_list_models_summarizes_records(self, service, mock_repo, model_record):
        mock_repo.list_models.return_value = ["wearable"]
        mock_repo.load_model.return_value = model_record

        result = await service.list_models()

        assert len(result) == 1
        assert result[0].model_id == "wearable"
        assert result[0].labels == [1, 2]
        assert result[0].binaries == 1
        mock_repo.load_model.assert_called_once_with("wearable")

    @pytest.mark.asyncio
    async def test_predict_from_pose(self, service, mock_repo, model_record):
        mock_repo.load_model.return_value = model_record

        result = await service.predict("m", PredictRequest(pose=PoseVector.identity()))

        assert result.label == 1
        assert result.model_id == "m"
        assert len(result.losses) == 2

    @pytest.mark.asyncio
    async def test_predict_from_features(self, service, mock_repo, model_record):
        mock_repo.load_model.return_value = model_record

        result = await service.predict("m", PredictRequest(features=[1.0, 0.0, 0.0, 1.5] * 4))

        assert result.label == 2

    @pytest.mark.asyncio
    async def test_predict_missing_model_propagates(self, service, mock_repo):
        mock_repo.load_model.side_effect = ArtifactNotFoundError("model 'x' not found")

        with pytest.raises(ArtifactNotFoundError):
            await service.predict("x", PredictRequest(pose=PoseVector.identity()))

    def test_request_needs_exactly_one_input(self):
        with pytest.raises(ValueError):
            PredictRequest()

import asyncio
from typing import List

import numpy as np

from app.models import (
    PostureSetManifest,
    PoseVector,
    PredictionResponse,
    PredictRequest,
    ModelSummary,
    SimilarityScore,
)
from app.services.augmentation import pose_to_features
from app.services.classifier import EcocModel, ecoc_predict
from app.services.evaluation import lambda_similarity
from app.services.simulation import canonical_postures
from app.storage.repository import ArtifactRepository


class PostureService:
    """
    Business Logic Layer for the HTTP surface.
    Read-only utilities over canonical postures and stored models.
    """
    def __init__(self, repo: ArtifactRepository):
        self.repo = repo

    async def canonical(self, seed: int) -> PostureSetManifest:
        return await asyncio.to_thread(canonical_postures, seed)

    async def features(self, pose: PoseVector) -> List[float]:
        return pose_to_features(pose).tolist()

    async def similarity(self, x_a: List[float], x_b: List[float]) -> SimilarityScore:
        return lambda_similarity(np.asarray(x_a), np.asarray(x_b))

    async def list_models(self) -> List[ModelSummary]:
        summaries = []
        for model_id in await self.repo.list_models():
            record = await self.repo.load_model(model_id)
            summaries.append(ModelSummary(
                model_id=model_id, labels=record.labels,
                binaries=len(record.binaries), schema_version=record.schema_version,
            ))
        return summaries

    async def predict(self, model_id: str, request: PredictRequest) -> PredictionResponse:
        record = await self.repo.load_model(model_id)
        model = EcocModel.from_record(record)
        x = pose_to_features(request.pose) if request.pose is not None else np.asarray(request.features)
        label, losses = await asyncio.to_thread(ecoc_predict, model, x)
        return PredictionResponse(model_id=model_id, label=label, losses=losses.tolist())

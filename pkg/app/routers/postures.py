import logging
from typing import List

from fastapi import APIRouter, Depends, HTTPException, Path, Query, status

from app.dependencies import get_service
from app.errors import ArtifactNotFoundError, InvalidInputError
from app.models import (
    FeaturesResponse,
    ModelSummary,
    PoseRequest,
    PostureSetManifest,
    PredictionResponse,
    PredictRequest,
    SimilarityRequest,
    SimilarityResponse,
)
from app.services.postures import PostureService

logger = logging.getLogger(__name__)

router = APIRouter(tags=["postures"])


@router.get("/postures/canonical", response_model=PostureSetManifest)
async def get_canonical_postures(
    seed: int = Query(0, ge=0, description="Generation seed"),
    service: PostureService = Depends(get_service)
):
    """
    The twelve canonical postures for a seed.
    """
    postures = await service.canonical(seed)
    logger.info(f"Generated canonical postures for seed {seed}")
    return postures


@router.post("/postures/features", response_model=FeaturesResponse)
async def get_features(
    request: PoseRequest,
    service: PostureService = Depends(get_service)
):
    """
    Sixteen-dimensional axis-angle feature vector of a pose.
    """
    return FeaturesResponse(features=await service.features(request.pose))


@router.post("/postures/similarity", response_model=SimilarityResponse)
async def get_similarity(
    request: SimilarityRequest,
    service: PostureService = Depends(get_service)
):
    """
    Axis and angle similarity between two feature vectors.
    """
    try:
        score = await service.similarity(request.x_a, request.x_b)
    except InvalidInputError as e:
        logger.warning(f"Similarity request rejected: {e}")
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e))
    return SimilarityResponse(lambda_phi=score.lambda_phi, lambda_theta=score.lambda_theta, lambda_total=score.total)


@router.get("/models", response_model=List[ModelSummary])
async def list_models(
    service: PostureService = Depends(get_service)
):
    """
    Retrieve all stored classifiers.
    """
    models = await service.list_models()
    logger.info(f"Fetched {len(models)} models")
    return models


@router.post("/models/{model_id}/predict", response_model=PredictionResponse)
async def predict(
    request: PredictRequest,
    model_id: str = Path(..., description="The ID of the stored model"),
    service: PostureService = Depends(get_service)
):
    """
    Classify one pose or feature vector with a stored model.
    """
    try:
        prediction = await service.predict(model_id, request)
    except ArtifactNotFoundError:
        logger.warning(f"Predict failed: model {model_id} not found")
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail="Model not found")
    except InvalidInputError as e:
        logger.warning(f"Predict failed for model {model_id}: {e}")
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e))
    logger.info(f"Model {model_id} predicted posture {prediction.label}")
    return prediction

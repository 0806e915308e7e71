from fastapi import Depends

from app.config import DATA_DIR
from app.services.postures import PostureService
from app.storage.engine import ArtifactEngine
from app.storage.repository import ArtifactRepository

# One engine per process so every request shares its lock and digest log
_artifact_engine = ArtifactEngine(root=DATA_DIR)


def get_repository() -> ArtifactRepository:
    """Models and artifacts under the configured data directory."""
    return ArtifactRepository(engine=_artifact_engine)


def get_service(repo: ArtifactRepository = Depends(get_repository)) -> PostureService:
    return PostureService(repo=repo)

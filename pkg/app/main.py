import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI

from app.config import DATA_DIR
from app.dependencies import get_repository
from app.routers import postures

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

API_VERSION = "1.0.0"


@asynccontextmanager
async def lifespan(app: FastAPI):
    models = await get_repository().list_models()
    logger.info(f"Serving {len(models)} stored models from {DATA_DIR}")
    yield
    logger.info("Posture API shutting down")


app = FastAPI(
    title="Sleep Posture API",
    description="One-shot sleep posture features, similarity and classification",
    version=API_VERSION,
    lifespan=lifespan,
)

app.include_router(postures.router)


@app.get("/")
async def root():
    """Service info and the endpoints worth starting from."""
    return {
        "message": "Sleep posture classification service",
        "version": API_VERSION,
        "docs": "/docs",
        "endpoints": ["/postures/canonical", "/postures/features", "/postures/similarity", "/models"],
    }

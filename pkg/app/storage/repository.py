import asyncio
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from app.errors import ArtifactNotFoundError
from app.models import (
    DatasetManifest,
    EcocModelRecord,
    PipelineConfig,
    PostureSetManifest,
    SessionsManifest,
)
from app.services.fusion import SensorModuleStream, read_imu_csv
from app.storage.engine import ArtifactEngine

logger = logging.getLogger(__name__)

MODELS = "models"


class ArtifactRepository:
    """
    Pure Data Access Layer.
    Maps configs, models, datasets, recordings and reports to files.
    """
    def __init__(self, engine: ArtifactEngine):
        self.engine = engine

    @property
    def root(self) -> Path:
        return self.engine.root

    async def _require(self, relative: str) -> None:
        if not await self.engine.exists(relative):
            raise ArtifactNotFoundError(f"artifact '{relative}' not found")

    # --- Configuration ---
    async def load_config(self, path: str) -> PipelineConfig:
        await self._require(path)
        data = await self.engine.read_document(path)
        return PipelineConfig.model_validate(data or {})

    async def load_sessions_manifest(self, path: str) -> SessionsManifest:
        await self._require(path)
        manifest = SessionsManifest.model_validate(await self.engine.read_document(path))
        base = self.engine.resolve(path).parent
        for entry in manifest.sessions:
            entry.paths = [p if p.is_absolute() else base / p for p in entry.paths]
        return manifest

    async def save_sessions_manifest(self, name: str, manifest: SessionsManifest) -> Path:
        return await self.engine.write_json(name, manifest.model_dump(mode="json"))

    # --- Models ---
    async def save_model(self, model_id: str, record: EcocModelRecord) -> Path:
        path = await self.engine.write_json(f"{MODELS}/{model_id}.json", record.model_dump(mode="json"))
        logger.info(f"Saved model '{model_id}' to {path}")
        return path

    async def load_model(self, model_id: str) -> EcocModelRecord:
        relative = model_id if model_id.endswith(".json") else f"{MODELS}/{model_id}.json"
        if not await self.engine.exists(relative):
            raise ArtifactNotFoundError(f"model '{model_id}' not found")
        return EcocModelRecord.model_validate(await self.engine.read_json(relative))

    async def list_models(self) -> List[str]:
        paths = await self.engine.list_dir(MODELS, "*.json")
        return [p.stem for p in paths]

    # --- Postures and motion ---
    async def save_postures(self, name: str, postures: PostureSetManifest) -> Path:
        return await self.engine.write_json(name, postures.model_dump(mode="json"))

    async def save_bvh(self, name: str, text: str) -> Path:
        return await self.engine.write_text(name, text)

    async def load_bvh(self, path: str) -> str:
        await self._require(path)
        return await self.engine.read_text(path)

    # --- Datasets ---
    async def save_dataset(self, name: str, frame: pd.DataFrame, manifest: DatasetManifest) -> Path:
        path = await self.engine.write_csv(f"{name}.csv", frame)
        await self.engine.write_json(f"{name}.manifest.json", manifest.model_dump(mode="json"))
        return path

    async def load_dataset(self, path: str) -> Tuple[pd.DataFrame, Optional[DatasetManifest]]:
        await self._require(path)
        frame = await self.engine.read_csv(path)
        sidecar = str(Path(path).with_suffix("")) + ".manifest.json"
        manifest = None
        if await self.engine.exists(sidecar):
            manifest = DatasetManifest.model_validate(await self.engine.read_json(sidecar))
        return frame, manifest

    async def save_table(self, name: str, frame: pd.DataFrame) -> Path:
        return await self.engine.write_csv(name, frame)

    async def load_table(self, path: str) -> pd.DataFrame:
        await self._require(path)
        return await self.engine.read_csv(path)

    # --- Recordings ---
    async def load_session(self, paths: Sequence[Path]) -> Dict[str, SensorModuleStream]:
        for path in paths:
            await self._require(str(path))
        resolved = [self.engine.resolve(str(p)) for p in paths]
        streams = await asyncio.to_thread(read_imu_csv, resolved)
        for path in resolved:
            await self.engine.record_input(str(path))
        return streams

    # --- Reports ---
    async def save_report(self, name: str, report, exclude: Optional[Set[str]] = None) -> Path:
        return await self.engine.write_json(name, report.model_dump(mode="json", exclude=exclude))

    async def save_matrix(
        self, name: str, matrix: np.ndarray, rows: Sequence, columns: Sequence, index_name: str = "label"
    ) -> Path:
        frame = pd.DataFrame(np.asarray(matrix), index=list(rows), columns=[str(c) for c in columns])
        frame.index.name = index_name
        return await self.engine.write_csv(name, frame, index=True)

    async def write_manifest(self, name: str = "manifest.json") -> Dict[str, str]:
        digests = dict(sorted(self.engine.written.items()))
        await self.engine.write_json(name, {"artifacts": digests})
        return digests

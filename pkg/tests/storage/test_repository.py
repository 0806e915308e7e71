import hashlib
import pytest
from pathlib import Path
from unittest.mock import AsyncMock, MagicMock

import numpy as np
import pandas as pd

from app.errors import ArtifactNotFoundError
from app.models import DatasetManifest, EcocModelRecord, NormalizationRecord, PipelineConfig, SvmRecord
from app.storage.engine import ArtifactEngine, file_digest
from app.storage.repository import ArtifactRepository


def sample_model_record() -> EcocModelRecord:
    return EcocModelRecord(
        labels=[1, 2],
        normalization=NormalizationRecord(shift=[0.0] * 16, scale=[1.0] * 16),
        encoding=[[1], [-1]],
        binaries=[SvmRecord(support_vectors=[[0.0] * 16], coefficients=[1.0], bias=0.0, C=1.0, gamma=0.5)],
    )


class TestArtifactRepository:

    @pytest.fixture
    def mock_engine(self):
        """Create a mock ArtifactEngine."""
        engine = MagicMock(spec=ArtifactEngine)
        engine.exists = AsyncMock(return_value=True)
        engine.read_json = AsyncMock()
        engine.write_json = AsyncMock(return_value=Path("out.json"))
        engine.read_document = AsyncMock()
        engine.read_csv = AsyncMock()
        engine.write_csv = AsyncMock()
        engine.list_dir = AsyncMock()
        engine.written = {}
        return engine

    @pytest.fixture
    def repository(self, mock_engine):
        """Create an ArtifactRepository instance injected with the mock engine."""
        return ArtifactRepository(mock_engine)

    # --- Test Models ---

    @pytest.mark.asyncio
    async def test_save_model_writes_json_record(self, repository, mock_engine):
        await repository.save_model("wearable", sample_model_record())

        mock_engine.write_json.assert_called_once()
        path, data = mock_engine.write_json.call_args[0]
        assert path == "models/wearable.json"
        assert data["labels"] == [1, 2]
        assert data["schema_version"] == 1

    @pytest.mark.asyncio
    async def test_load_model_validates_record(self, repository, mock_engine):
        mock_engine.read_json.return_value = sample_model_record().model_dump(mode="json")

        result = await repository.load_model("wearable")

        assert isinstance(result, EcocModelRecord)
        assert result.binaries[0].gamma == 0.5
        mock_engine.read_json.assert_called_once_with("models/wearable.json")

    @pytest.mark.asyncio
    async def test_load_model_not_found(self, repository, mock_engine):
        mock_engine.exists.return_value = False

        with pytest.raises(ArtifactNotFoundError):
            await repository.load_model("missing")
        mock_engine.read_json.assert_not_called()

    @pytest.mark.asyncio
    async def test_list_models_returns_stems(self, repository, mock_engine):
        mock_engine.list_dir.return_value = [Path("models/a.json"), Path("models/b.json")]

        assert await repository.list_models() == ["a", "b"]
        mock_engine.list_dir.assert_called_once_with("models", "*.json")

    # --- Test Configuration ---

    @pytest.mark.asyncio
    async def test_load_config_applies_defaults(self, repository, mock_engine):
        mock_engine.read_document.return_value = {"seed": 5, "repeats": 2}

        cfg = await repository.load_config("config.yaml")

        assert isinstance(cfg, PipelineConfig)
        assert cfg.seed == 5 and cfg.repeats == 2
        assert cfg.train_count == 500

    @pytest.mark.asyncio
    async def test_load_config_empty_document(self, repository, mock_engine):
        mock_engine.read_document.return_value = None

        cfg = await repository.load_config("empty.yaml")

        assert cfg.seed == 0

    # --- Test Datasets ---

    @pytest.mark.asyncio
    async def test_save_dataset_writes_table_and_sidecar(self, repository, mock_engine):
        frame = pd.DataFrame({"label": [1]})
        manifest = DatasetManifest(labels=[1], rows=1)

        await repository.save_dataset("train", frame, manifest)

        mock_engine.write_csv.assert_called_once_with("train.csv", frame)
        assert mock_engine.write_json.call_args[0][0] == "train.manifest.json"

    @pytest.mark.asyncio
    async def test_write_manifest_lists_digests(self, repository, mock_engine):
        mock_engine.written = {"b.csv": "2", "a.csv": "1"}

        digests = await repository.write_manifest()

        assert list(digests) == ["a.csv", "b.csv"]
        assert mock_engine.write_json.call_args[0] == ("manifest.json", {"artifacts": digests})


class TestArtifactEngine:
    """Runs the real engine against the pytest temp directory."""

    @pytest.fixture
    def engine(self, tmp_path):
        return ArtifactEngine(root=tmp_path)

    @pytest.mark.asyncio
    async def test_write_records_digest(self, engine, tmp_path):
        path = await engine.write_text("nested/file.txt", "hello")

        assert path == tmp_path / "nested" / "file.txt"
        assert engine.written["nested/file.txt"] == hashlib.sha256(b"hello").hexdigest()
        assert file_digest(path) == engine.written["nested/file.txt"]

    @pytest.mark.asyncio
    async def test_read_document_parses_yaml(self, engine, tmp_path):
        (tmp_path / "config.yaml").write_text("seed: 3\nsigma_phi_sq_grid: [20, 200]\n")

        data = await engine.read_document("config.yaml")

        assert data == {"seed": 3, "sigma_phi_sq_grid": [20, 200]}

    @pytest.mark.asyncio
    async def test_csv_is_byte_stable(self, engine):
        frame = pd.DataFrame({"a": [0.1, 1 / 3], "b": [1, 2]})

        await engine.write_csv("x.csv", frame)
        first = engine.written["x.csv"]
        await engine.write_csv("x.csv", frame)

        assert engine.written["x.csv"] == first
        back = await engine.read_csv("x.csv")
        np.testing.assert_allclose(back["a"], frame["a"], rtol=1e-8)

    @pytest.mark.asyncio
    async def test_list_dir_missing_directory(self, engine):
        assert await engine.list_dir("models") == []

    @pytest.mark.asyncio
    async def test_sessions_manifest_paths_resolve_against_manifest(self, engine, tmp_path):
        await engine.write_json("sessions/sessions.json", {"sessions": [
            {"label": 1, "trial": 1, "paths": ["posture01_trial1.csv"]},
        ]})

        manifest = await ArtifactRepository(engine).load_sessions_manifest("sessions/sessions.json")

        assert manifest.sessions[0].paths == [tmp_path / "sessions" / "posture01_trial1.csv"]
        assert manifest.sessions[0].split is None

    @pytest.mark.asyncio
    async def test_reads_record_input_digests(self, engine, tmp_path):
        (tmp_path / "config.yaml").write_text("seed: 3\n")
        await engine.write_csv("x.csv", pd.DataFrame({"a": [1.0]}))
        outside = tmp_path.parent / f"{tmp_path.name}_outside.txt"
        outside.write_text("elsewhere")

        await engine.read_document("config.yaml")
        await engine.read_csv("x.csv")
        await engine.record_input(str(outside))

        assert engine.read["config.yaml"] == hashlib.sha256(b"seed: 3\n").hexdigest()
        assert engine.read["x.csv"] == engine.written["x.csv"]
        assert engine.read[outside.as_posix()] == file_digest(outside)
        assert "config.yaml" not in engine.written

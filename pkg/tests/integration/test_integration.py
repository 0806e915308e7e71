import json

import pandas as pd
import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from app.cli import cli
from app.dependencies import get_repository
from app.main import app
from app.models import PipelineConfig
from app.services.pipeline import PipelineService
from app.storage.engine import ArtifactEngine
from app.storage.repository import ArtifactRepository

# Use TestClient as a context manager to handle startup/shutdown events if any
client = TestClient(app)

SMALL_CONFIG = """\
seed: 2
C: 10.0
gamma: 0.1
sigma_phi_sq_grid: [200.0]
sigma_theta_sq_grid: [100.0]
"""


@pytest.fixture
def temporary_repo(tmp_path):
    """
    A real Repository and Engine rooted in the pytest temp directory,
    so API calls never touch the configured data directory.
    """
    return ArtifactRepository(engine=ArtifactEngine(root=tmp_path))


@pytest.fixture(autouse=True)
def override_dependency(temporary_repo):
    app.dependency_overrides[get_repository] = lambda: temporary_repo
    yield
    app.dependency_overrides = {}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(SMALL_CONFIG)
    return path


def invoke(*args):
    return CliRunner().invoke(cli, [str(a) for a in args])


# --- API over stored models ---

@pytest.mark.asyncio
async def test_train_then_serve_model(temporary_repo, tmp_path):
    """
    Scenario: a model trained by the pipeline is listed and queried over HTTP.
    """
    cfg = PipelineConfig(out_dir=tmp_path, C=10.0, gamma=0.1)
    service = PipelineService(temporary_repo, cfg)
    await service.augment(200.0, 100.0, 4, name="train")
    await service.train(str(tmp_path / "train.csv"), model_id="virtual")

    # 1. List
    response = client.get("/models")
    assert response.status_code == 200
    summary = response.json()[0]
    assert summary["model_id"] == "virtual"
    assert summary["labels"] == list(range(1, 13))
    assert summary["binaries"] == 66

    # 2. Predict a canonical posture from its own pose
    canonical = client.get("/postures/canonical?seed=0").json()
    posture = canonical["postures"][4]
    response = client.post("/models/virtual/predict", json={"pose": posture["pose"]})
    assert response.status_code == 200
    assert response.json()["label"] == posture["label"]
    assert len(response.json()["losses"]) == 12

    # 3. Features of the same pose predict the same label
    features = client.post("/postures/features", json={"pose": posture["pose"]}).json()["features"]
    response = client.post("/models/virtual/predict", json={"features": features})
    assert response.json()["label"] == posture["label"]


def test_predict_unknown_model():
    pose = {"joints": [{"w": 1.0, "x": 0.0, "y": 0.0, "z": 0.0}] * 4}
    response = client.post("/models/ghost/predict", json={"pose": pose})
    assert response.status_code == 404


def test_similarity_of_a_pose_with_itself():
    canonical = client.get("/postures/canonical").json()
    pose = canonical["postures"][0]["pose"]
    x = client.post("/postures/features", json={"pose": pose}).json()["features"]

    response = client.post("/postures/similarity", json={"x_a": x, "x_b": x})

    assert response.status_code == 200
    assert response.json()["lambda_total"] == pytest.approx(8.0)


# --- Command line ---

def test_cli_simulate(tmp_path, config_file):
    result = invoke("--config", config_file, "--out-dir", tmp_path / "out", "simulate")

    assert result.exit_code == 0, result.output
    assert json.loads(result.stdout)["command"] == "simulate"
    assert (tmp_path / "out" / "sequence.bvh").exists()
    assert (tmp_path / "out" / "manifest.json").exists()


def test_cli_augment_train_evaluate(tmp_path, config_file):
    out = tmp_path / "out"
    base = ("--config", config_file, "--out-dir", out)

    result = invoke(*base, "augment", "--sigma-phi-sq", 200, "--sigma-theta-sq", 100, "--count", 4, "--name", "train")
    assert result.exit_code == 0, result.output
    result = invoke(*base, "--seed", 3, "augment", "--sigma-phi-sq", 200, "--sigma-theta-sq", 100,
                    "--count", 2, "--name", "test", "--split", "test")
    assert result.exit_code == 0, result.output

    result = invoke(*base, "train", out / "train.csv", "--model-id", "m")
    assert result.exit_code == 0, result.output
    assert (out / "models" / "m.json").exists()

    result = invoke(*base, "evaluate", "m", out / "test.csv")
    assert result.exit_code == 0, result.output
    summary = json.loads(result.stdout)
    assert 0.0 <= summary["macro_f1"] <= 1.0
    assert (out / "confusion.csv").exists()

    result = invoke(*base, "export-features", out / "train.csv", out / "test.csv")
    assert result.exit_code == 0, result.output
    exported = pd.read_csv(out / "features.csv")
    assert set(exported["split"]) == {"train", "test"}


def test_cli_invalid_config_exits_1(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("seed: 1\nunknown_option: true\n")

    result = invoke("--config", path, "--out-dir", tmp_path, "simulate")

    assert result.exit_code == 1


def test_cli_invalid_override_exits_1(tmp_path):
    result = invoke("--jobs", 0, "--out-dir", tmp_path, "simulate")
    assert result.exit_code == 1


def test_cli_missing_dataset_exits_2(tmp_path, config_file):
    result = invoke("--config", config_file, "--out-dir", tmp_path, "train", tmp_path / "absent.csv")
    assert result.exit_code == 2

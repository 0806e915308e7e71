import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app import config

Vector3 = Tuple[float, float, float]
JOINT_ORDER = ("right_wrist", "left_wrist", "right_ankle", "left_ankle")
MODULE_IDS = ("RW", "LW", "RA", "LA")


def _finite(values) -> bool:
    return all(math.isfinite(v) for v in values)


# --- Rotation value types ---
class UnitQuaternion(BaseModel):
    """Scalar-first rotation quaternion, normalized on construction."""
    model_config = ConfigDict(frozen=True)

    w: float
    x: float
    y: float
    z: float

    @model_validator(mode="before")
    @classmethod
    def normalize(cls, data):
        if isinstance(data, (list, tuple, np.ndarray)):
            data = dict(zip("wxyz", (float(v) for v in data)))
        if not isinstance(data, dict):
            return data
        comps = [float(data.get(k, 0.0)) for k in "wxyz"]
        if not _finite(comps):
            raise ValueError("quaternion components must be finite")
        norm = math.sqrt(sum(c * c for c in comps))
        if norm < 1e-12:
            raise ValueError("quaternion norm must be non-zero")
        return dict(zip("wxyz", (c / norm for c in comps)))

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(w=1.0, x=0.0, y=0.0, z=0.0)

    @classmethod
    def from_array(cls, q) -> "UnitQuaternion":
        return cls.model_validate(np.asarray(q, dtype=float))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])


class AxisAngleCartesian(BaseModel):
    model_config = ConfigDict(frozen=True)

    axis: Vector3
    angle: float = Field(..., description="Rotation angle in radians, [0, pi]")

    @field_validator("axis")
    @classmethod
    def unit_axis(cls, axis: Vector3) -> Vector3:
        norm = math.sqrt(sum(a * a for a in axis))
        if not _finite(axis) or abs(norm - 1.0) > 1e-6:
            raise ValueError(f"axis must be unit length, got norm {norm}")
        return tuple(a / norm for a in axis)

    @field_validator("angle")
    @classmethod
    def angle_range(cls, angle: float) -> float:
        if not -1e-9 <= angle <= math.pi + 1e-9:
            raise ValueError(f"angle {angle} outside [0, pi]")
        return min(max(angle, 0.0), math.pi)


class AxisAngleSpherical(BaseModel):
    """Axis as polar/azimuth angles plus rotation angle, all in degrees."""
    model_config = ConfigDict(frozen=True)

    polar: float = Field(..., ge=0.0, le=180.0)
    azimuth: float = Field(..., ge=0.0, lt=360.0)
    angle: float = Field(..., ge=0.0, le=180.0)


# --- Posture descriptors ---
class PoseVector(BaseModel):
    """Four joint orientations in right wrist, left wrist, right ankle, left ankle order."""
    model_config = ConfigDict(frozen=True)

    joints: Tuple[UnitQuaternion, UnitQuaternion, UnitQuaternion, UnitQuaternion]

    @classmethod
    def from_array(cls, quats) -> "PoseVector":
        quats = np.asarray(quats, dtype=float).reshape(4, 4)
        return cls(joints=tuple(UnitQuaternion.from_array(q) for q in quats))

    @classmethod
    def identity(cls) -> "PoseVector":
        return cls(joints=(UnitQuaternion.identity(),) * 4)

    def as_array(self) -> np.ndarray:
        return np.stack([q.as_array() for q in self.joints])


class JointPair(BaseModel):
    model_config = ConfigDict(frozen=True)

    parent: str = Field(..., min_length=1)
    child: str = Field(..., min_length=1)


class JointSet(BaseModel):
    """Parent/child segment names per extremity joint."""
    model_config = ConfigDict(frozen=True)

    right_wrist: JointPair = JointPair(parent="RightForeArm", child="RightHand")
    left_wrist: JointPair = JointPair(parent="LeftForeArm", child="LeftHand")
    right_ankle: JointPair = JointPair(parent="RightLeg", child="RightFoot")
    left_ankle: JointPair = JointPair(parent="LeftLeg", child="LeftFoot")

    def pairs(self) -> List[JointPair]:
        return [getattr(self, name) for name in JOINT_ORDER]


class LabeledPosture(BaseModel):
    label: int = Field(..., ge=1)
    name: str
    pose: PoseVector


class PostureSetManifest(BaseModel):
    seed: int
    postures: List[LabeledPosture]


# --- Augmentation ---
class AugmentSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    sigma_phi_sq: float = Field(..., ge=0.0, description="Axis variance in deg^2")
    sigma_theta_sq: float = Field(..., ge=0.0, description="Angle variance in deg^2")
    count: int = Field(..., ge=1, description="Rows per class, the shot included")
    seed: int = Field(0, ge=0, lt=2**64)


class DatasetManifest(BaseModel):
    labels: List[int]
    rows: int
    settings: Optional[AugmentSettings] = None
    seed: Optional[int] = None
    split: str = "train"
    provenance: Dict[str, str] = Field(default_factory=dict)


# --- Sensors ---
class ImuSample(BaseModel):
    model_config = ConfigDict(frozen=True)

    timestamp_us: int
    gyro: Vector3 = Field(..., description="rad/s")
    accel: Vector3
    mag: Vector3

    @field_validator("gyro", "accel", "mag")
    @classmethod
    def finite_components(cls, v: Vector3) -> Vector3:
        if not _finite(v):
            raise ValueError("sample components must be finite")
        return v


class FilterState(BaseModel):
    model_config = ConfigDict(frozen=True)

    q: UnitQuaternion = UnitQuaternion.identity()
    beta: float = Field(config.DEFAULT_BETA, gt=0.0, lt=1.0)
    gyro_only_steps: int = 0


class ImuNoiseModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    gyro_std: float = Field(0.005, ge=0.0, description="rad/s")
    accel_std: float = Field(0.05, ge=0.0, description="m/s^2")
    mag_std: float = Field(0.01, ge=0.0, description="fraction of unit field")
    gyro_bias: Vector3 = (0.0, 0.0, 0.0)

    @field_validator("gyro_bias")
    @classmethod
    def non_negative_bias(cls, v: Vector3) -> Vector3:
        if any(b < 0 for b in v):
            raise ValueError("gyro bias components must be non-negative")
        return v


class SessionEntry(BaseModel):
    label: int = Field(..., ge=1)
    trial: int = Field(1, ge=1)
    paths: List[Path] = Field(..., min_length=1)
    split: Optional[Literal["train", "test"]] = None


class SessionsManifest(BaseModel):
    sessions: List[SessionEntry]


# --- Pipeline configuration ---
class PipelineConfig(BaseModel):
    """Run configuration; defaults give the full experiment."""
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    sigma_phi_sq_grid: List[float] = Field(default_factory=lambda: list(config.SIGMA_PHI_SQ_GRID))
    sigma_theta_sq_grid: List[float] = Field(default_factory=lambda: list(config.SIGMA_THETA_SQ_GRID))
    train_count: int = Field(config.VIRTUAL_TRAIN_COUNT, ge=1)
    test_count: int = Field(config.VIRTUAL_TEST_COUNT, ge=1)
    wearable_train_count: int = Field(config.WEARABLE_TRAIN_COUNT, ge=1)
    wearable_setting: Tuple[float, float] = (800.0, 100.0)
    wearable_sweep: bool = Field(True, description="Also score the wearable test set over the augmentation grid")
    repeats: int = Field(config.REPEATS, ge=1)

    search_budget: int = Field(config.SEARCH_BUDGET, ge=1)
    search_bounds: Tuple[float, float] = config.SEARCH_BOUNDS
    search_strategy: Literal["random", "bayesian"] = "random"
    validation_fraction: float = Field(config.SEARCH_VALIDATION_FRACTION, gt=0.0, lt=1.0)
    search_max_rows_per_class: int = Field(config.SEARCH_MAX_ROWS_PER_CLASS, ge=2)
    tune_every_repeat: bool = False
    C: Optional[float] = Field(None, gt=0.0)
    gamma: Optional[float] = Field(None, gt=0.0)

    beta: float = Field(config.DEFAULT_BETA, gt=0.0, lt=1.0)
    warmup_s: float = Field(config.DEFAULT_WARMUP_S, ge=0.0)
    rate_hz: float = Field(config.DEFAULT_RATE_HZ, gt=0.0)
    initial_alignment: Literal["identity", "accel_mag"] = "accel_mag"

    hold_frames: int = Field(10, ge=1)
    transition_frames: int = Field(10, ge=1)
    session_duration_s: float = Field(15.0, gt=0.0)
    session_trials: int = Field(2, ge=2)
    test_axis_sigma_sq: float = Field(800.0, ge=0.0)
    test_angle_sigma_sq: float = Field(0.0, ge=0.0)
    noise: ImuNoiseModel = ImuNoiseModel()

    similarity_pair_cap: int = Field(config.SIMILARITY_PAIR_CAP, ge=1)
    no_augment: bool = False
    jobs: int = Field(1, ge=1)
    bvh_path: Optional[Path] = None
    sessions_path: Optional[Path] = None
    out_dir: Path = config.DATA_DIR / "runs"

    @field_validator("sigma_phi_sq_grid", "sigma_theta_sq_grid")
    @classmethod
    def positive_grid(cls, grid: List[float]) -> List[float]:
        if not grid or any(v <= 0 for v in grid):
            raise ValueError("grid values must be positive and non-empty")
        return grid

    @field_validator("wearable_setting")
    @classmethod
    def positive_setting(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if min(v) < 0:
            raise ValueError("augmentation variances must be non-negative")
        return v

    @field_validator("search_bounds")
    @classmethod
    def ordered_bounds(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if not 0 < v[0] <= v[1]:
            raise ValueError("search bounds must satisfy 0 < low <= high")
        return v


# --- Metrics and reports ---
class SimilarityScore(BaseModel):
    model_config = ConfigDict(frozen=True)

    lambda_phi: float = Field(..., ge=-4.0 - 1e-9, le=4.0 + 1e-9)
    lambda_theta: float = Field(..., ge=-1e-9, le=4.0 + 1e-9)

    @property
    def total(self) -> float:
        return self.lambda_phi + self.lambda_theta

    def model_dump_report(self) -> Dict[str, float]:
        return {"lambda_phi": self.lambda_phi, "lambda_theta": self.lambda_theta, "lambda": self.total}


class RunMetrics(BaseModel):
    repeat: int
    seed: int
    accuracy: float
    macro_f1: float
    C: float
    gamma: float


class MetricsReport(BaseModel):
    accuracy: float
    macro_f1: float
    per_class_f1: List[float]
    flagged_classes: List[int] = Field(default_factory=list, description="Classes absent from truth and predictions")
    confusion: List[List[int]]
    confusion_row_norm: List[List[float]]
    zero_support_rows: List[int] = Field(default_factory=list)
    runs: List[RunMetrics] = Field(default_factory=list)


class CellReport(BaseModel):
    sigma_phi_sq: float
    sigma_theta_sq: float
    accuracy_mean: float
    accuracy_std: float
    macro_f1_mean: float
    macro_f1_std: float
    runs: List[RunMetrics]


class ShotSelection(BaseModel):
    label: int
    trial: int
    row: int


class RunReport(BaseModel):
    command: str
    config: Dict
    cells: List[CellReport] = Field(default_factory=list)
    metrics: Optional[MetricsReport] = None
    shots: List[ShotSelection] = Field(default_factory=list)
    timing_s: float = 0.0
    digests: Dict[str, str] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict, description="SHA-256 of every file the run read")


# --- Persisted model records ---
class SvmRecord(BaseModel):
    support_vectors: List[List[float]]
    coefficients: List[float] = Field(..., description="alpha_k * y_k per support vector")
    bias: float
    C: float = Field(..., gt=0.0)
    gamma: float = Field(..., gt=0.0)


class NormalizationRecord(BaseModel):
    shift: List[float]
    scale: List[float]


class EcocModelRecord(BaseModel):
    schema_version: int = config.MODEL_SCHEMA_VERSION
    labels: List[int]
    normalization: NormalizationRecord
    encoding: List[List[int]]
    binaries: List[SvmRecord]


# --- API Input/Output Models ---
class PoseRequest(BaseModel):
    pose: PoseVector


class FeaturesResponse(BaseModel):
    features: List[float]


class SimilarityRequest(BaseModel):
    x_a: List[float] = Field(..., min_length=16, max_length=16)
    x_b: List[float] = Field(..., min_length=16, max_length=16)


class SimilarityResponse(BaseModel):
    lambda_phi: float
    lambda_theta: float
    lambda_total: float


class PredictRequest(BaseModel):
    pose: Optional[PoseVector] = None
    features: Optional[List[float]] = Field(None, min_length=16, max_length=16)

    @model_validator(mode="after")
    def exactly_one_input(self) -> "PredictRequest":
        if (self.pose is None) == (self.features is None):
            raise ValueError("provide exactly one of 'pose' or 'features'")
        return self


class PredictionResponse(BaseModel):
    model_id: str
    label: int
    losses: List[float]


class ModelSummary(BaseModel):
    model_id: str
    labels: List[int]
    binaries: int
    schema_version: int

"""
One-shot kinematic augmentation: Gaussian noise injected into the spherical
axis-angle form of each joint of a single posture observation.

Feature layout per joint is [axis_x, axis_y, axis_z, angle_rad]; joints follow
right wrist, left wrist, right ankle, left ankle.
"""
import logging
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from app.errors import InvalidInputError
from app.models import AugmentSettings, AxisAngleSpherical, DatasetManifest, PoseVector
from app.services.rotations import (
    axis_angle_to_quat,
    cartesian_to_spherical_axis,
    normalize,
    quat_to_axis_angle,
    spherical_to_cartesian_axis,
)

logger = logging.getLogger(__name__)

FEATURE_COLUMNS = [f"j{j}_{c}" for j in range(1, 5) for c in ("ax", "ay", "az", "theta")]


class PostureDictionary(BaseModel):
    """One reference observation per posture class."""
    model_config = ConfigDict(frozen=True)

    labels: List[int]
    poses: List[PoseVector]

    @model_validator(mode="after")
    def one_pose_per_class(self) -> "PostureDictionary":
        if not self.labels or len(self.labels) != len(self.poses):
            raise ValueError("labels and poses must be non-empty and of equal length")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("each class may appear only once")
        return self


class AugmentedDataset(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    features: np.ndarray
    labels: np.ndarray
    settings: Optional[AugmentSettings] = None

    @model_validator(mode="after")
    def shapes(self) -> "AugmentedDataset":
        if self.features.ndim != 2 or self.features.shape[1] != 16:
            raise ValueError(f"features must be (n, 16), got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("one label per feature row is required")
        return self

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> List[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def rows_of(self, label: int) -> np.ndarray:
        return self.features[self.labels == label]

    def subset(self, index: np.ndarray) -> "AugmentedDataset":
        return AugmentedDataset(features=self.features[index], labels=self.labels[index], settings=self.settings)


# --- Feature conversion ---
def poses_to_features(quats: np.ndarray) -> np.ndarray:
    """(..., 4 joints, 4) quaternions -> (..., 16) features."""
    axis, angle = quat_to_axis_angle(np.asarray(quats, dtype=float))
    blocks = np.concatenate([axis, angle[..., None]], axis=-1)
    return blocks.reshape(*blocks.shape[:-2], 16)


def pose_to_features(pose: PoseVector) -> np.ndarray:
    return poses_to_features(pose.as_array())


def features_to_poses(features: np.ndarray) -> np.ndarray:
    blocks = np.asarray(features, dtype=float).reshape(*np.shape(features)[:-1], 4, 4)
    return axis_angle_to_quat(blocks[..., :3], blocks[..., 3])


def features_to_pose(features: np.ndarray) -> PoseVector:
    return PoseVector.from_array(features_to_poses(features))


# --- Noise injection ---
def _wrap(polar: np.ndarray, azimuth: np.ndarray, angle: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reflect polar at the poles (flipping azimuth by 180°), wrap azimuth, clamp angle."""
    polar = np.mod(polar, 360.0)
    crossed = polar > 180.0
    polar = np.where(crossed, 360.0 - polar, polar)
    azimuth = np.mod(np.where(crossed, azimuth + 180.0, azimuth), 360.0)
    azimuth = np.where(azimuth >= 360.0, azimuth - 360.0, azimuth)
    return polar, azimuth, np.clip(angle, 0.0, 180.0)


def _perturb(axis: np.ndarray, angle: np.ndarray, settings: AugmentSettings, rng: np.random.Generator):
    """Perturb (n, 3) unit axes and (n,) angles in radians; unit axes are re-derived from the sphere."""
    polar, azimuth, angle_deg = cartesian_to_spherical_axis(axis, angle)
    sigma_phi, sigma_theta = np.sqrt(settings.sigma_phi_sq), np.sqrt(settings.sigma_theta_sq)
    d_polar = rng.normal(0.0, sigma_phi, size=polar.shape)
    d_azimuth = rng.normal(0.0, sigma_phi, size=azimuth.shape)
    d_angle = rng.normal(0.0, sigma_theta, size=angle_deg.shape)
    polar, azimuth, angle_deg = _wrap(polar + d_polar, azimuth + d_azimuth, angle_deg + d_angle)

    if settings.sigma_phi_sq > 0:
        axis, _ = spherical_to_cartesian_axis(polar, azimuth, angle_deg)
    if settings.sigma_theta_sq > 0:
        angle = np.radians(angle_deg)
    return axis, angle


def augment_joint(joint: AxisAngleSpherical, settings: AugmentSettings, rng: np.random.Generator) -> AxisAngleSpherical:
    sigma_phi, sigma_theta = np.sqrt(settings.sigma_phi_sq), np.sqrt(settings.sigma_theta_sq)
    polar, azimuth, angle = _wrap(
        np.array(joint.polar + rng.normal(0.0, sigma_phi)),
        np.array(joint.azimuth + rng.normal(0.0, sigma_phi)),
        np.array(joint.angle + rng.normal(0.0, sigma_theta)),
    )
    return AxisAngleSpherical(polar=float(polar), azimuth=float(azimuth), angle=float(angle))


def augment_posture(shot: PoseVector, settings: AugmentSettings, rng: np.random.Generator) -> np.ndarray:
    """(count, 16) rows: the unmodified shot first, then independent augmentations."""
    reference = pose_to_features(shot)
    rows = np.tile(reference, (settings.count, 1))
    extra = settings.count - 1
    if extra == 0:
        return rows
    blocks = rows[1:].reshape(extra, 4, 4)
    axis, angle = _perturb(blocks[..., :3].reshape(-1, 3), blocks[..., 3].reshape(-1), settings, rng)
    blocks = np.concatenate([axis.reshape(extra, 4, 3), angle.reshape(extra, 4, 1)], axis=-1)
    rows[1:] = blocks.reshape(extra, 16)
    return rows


def build_training_dictionary(dictionary: PostureDictionary, settings: AugmentSettings) -> AugmentedDataset:
    """Augment every class with its own child seed of `settings.seed`."""
    children = np.random.SeedSequence(settings.seed).spawn(len(dictionary.labels))
    feats, labels = [], []
    for label, pose, child in zip(dictionary.labels, dictionary.poses, children):
        feats.append(augment_posture(pose, settings, np.random.default_rng(child)))
        labels.append(np.full(settings.count, label, dtype=int))
    logger.info(
        f"Augmented {len(dictionary.labels)} classes x {settings.count} rows "
        f"at ({settings.sigma_phi_sq:g}, {settings.sigma_theta_sq:g}) deg^2, seed {settings.seed}"
    )
    return AugmentedDataset(features=np.concatenate(feats), labels=np.concatenate(labels), settings=settings)


def shot_replicated_dataset(dictionary: PostureDictionary, count: int) -> AugmentedDataset:
    """Baseline without augmentation: each shot repeated `count` times."""
    feats = np.concatenate([np.tile(pose_to_features(p), (count, 1)) for p in dictionary.poses])
    labels = np.repeat(np.asarray(dictionary.labels, dtype=int), count)
    return AugmentedDataset(features=feats, labels=labels)


def naive_quaternion_noise(shot: PoseVector, sigma_deg: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise on raw quaternion components, then renormalization."""
    sigma_q = np.sin(np.radians(sigma_deg) / 2.0)
    quats = shot.as_array()[None] + rng.normal(0.0, sigma_q, size=(count, 4, 4))
    return poses_to_features(normalize(quats))


# --- Tabular form ---
def dataset_frame(dataset: AugmentedDataset) -> pd.DataFrame:
    frame = pd.DataFrame(dataset.features, columns=FEATURE_COLUMNS)
    frame.insert(0, "label", dataset.labels.astype(int))
    return frame


def dataset_from_frame(frame: pd.DataFrame, manifest: Optional[DatasetManifest] = None) -> AugmentedDataset:
    missing = [c for c in ["label", *FEATURE_COLUMNS] if c not in frame.columns]
    if missing:
        raise InvalidInputError(f"dataset table is missing columns {missing}")
    features = frame[FEATURE_COLUMNS].to_numpy(dtype=float)
    if not np.all(np.isfinite(features)):
        raise InvalidInputError("dataset contains non-finite features")
    return AugmentedDataset(
        features=features,
        labels=frame["label"].to_numpy(dtype=int),
        settings=manifest.settings if manifest else None,
    )

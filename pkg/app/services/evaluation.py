"""
Classification metrics and the hybrid axis/angle similarity score.
"""
import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from sklearn.metrics import accuracy_score, confusion_matrix, f1_score

from app import config
from app.errors import InvalidInputError
from app.models import CellReport, MetricsReport, RunMetrics, SimilarityScore
from app.services.augmentation import AugmentedDataset
from app.services.fusion import TestMatrix
from app.services.rotations import DEGENERATE_AXIS

logger = logging.getLogger(__name__)

AXIS_TOLERANCE = 1e-6


def _valid(preds, labels, mask) -> Tuple[np.ndarray, np.ndarray]:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise InvalidInputError(f"predictions {preds.shape} and labels {labels.shape} differ in shape")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        preds, labels = preds[mask], labels[mask]
    if preds.size == 0:
        raise InvalidInputError("no valid samples to evaluate")
    return preds.astype(int), labels.astype(int)


def accuracy(preds, labels, mask=None) -> float:
    preds, labels = _valid(preds, labels, mask)
    return float(accuracy_score(labels, preds))


def per_class_f1(preds, labels, classes: Sequence[int], mask=None) -> Tuple[np.ndarray, List[int]]:
    """F1 per class; classes with precision + recall = 0 score 0, and those absent everywhere are flagged."""
    preds, labels = _valid(preds, labels, mask)
    scores = f1_score(labels, preds, labels=[int(c) for c in classes], average=None, zero_division=0)
    seen = set(preds.tolist()) | set(labels.tolist())
    flagged = [int(c) for c in classes if int(c) not in seen]
    if flagged:
        logger.warning(f"Classes {flagged} absent from both truth and predictions; scored F1 = 0")
    return np.asarray(scores, dtype=float), flagged


def macro_f1(preds, labels, classes: Optional[Sequence[int]] = None, mask=None) -> float:
    if classes is None:
        classes = sorted(set(np.asarray(labels).tolist()) | set(np.asarray(preds).tolist()))
    scores, _ = per_class_f1(preds, labels, classes, mask)
    return float(np.mean(scores))


def confusion(preds, labels, classes: Sequence[int], mask=None) -> Tuple[np.ndarray, np.ndarray, List[int]]:
    """(counts, row-normalized view, classes with zero support). Rows are true classes."""
    preds, labels = _valid(preds, labels, mask)
    class_list = [int(c) for c in classes]
    unknown = sorted((set(preds.tolist()) | set(labels.tolist())) - set(class_list))
    if unknown:
        raise InvalidInputError(f"labels {unknown} are outside the class set")
    counts = confusion_matrix(labels, preds, labels=class_list)
    support = counts.sum(axis=1, keepdims=True)
    normalized = np.divide(counts, support, out=np.zeros(counts.shape), where=support > 0)
    zero_rows = [int(classes[k]) for k in np.flatnonzero(support[:, 0] == 0)]
    return counts, normalized, zero_rows


# --- Similarity ---
def _blocks(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    blocks = np.asarray(x, dtype=float).reshape(*np.shape(x)[:-1], 4, 4)
    return blocks[..., :3], blocks[..., 3]


def _check_features(x: np.ndarray) -> None:
    if np.shape(x)[-1] != 16:
        raise InvalidInputError(f"feature vectors must have 16 entries, got {np.shape(x)[-1]}")
    axes, angles = _blocks(x)
    if np.any(np.abs(np.linalg.norm(axes, axis=-1) - 1.0) > AXIS_TOLERANCE):
        raise InvalidInputError("feature axes must be unit vectors")
    if np.any((angles < 0) | (angles > np.pi + AXIS_TOLERANCE)):
        raise InvalidInputError("feature angles must lie in [0, pi]")


def lambda_components(x_a: np.ndarray, x_b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Broadcasting axis term Σ a_j·b_j and angle term (4π − Σ|Δθ_j|)/π."""
    axes_a, angles_a = _blocks(x_a)
    axes_b, angles_b = _blocks(x_b)
    phi = np.sum(axes_a * axes_b, axis=(-1, -2))
    theta = (4.0 * np.pi - np.sum(np.abs(angles_a - angles_b), axis=-1)) / np.pi
    return phi, theta


def lambda_similarity(x_a: np.ndarray, x_b: np.ndarray) -> SimilarityScore:
    _check_features(x_a)
    _check_features(x_b)
    phi, theta = lambda_components(x_a, x_b)
    return SimilarityScore(lambda_phi=float(phi), lambda_theta=float(theta))


class SimilarityMatrix(BaseModel):
    """Mean axis/angle similarity between test class a (rows) and training class b (columns)."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    classes: List[int]
    lambda_phi: np.ndarray
    lambda_theta: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.lambda_phi + self.lambda_theta


def _rows(data: Union[AugmentedDataset, TestMatrix]) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(data, TestMatrix):
        return data.valid_rows()
    return data.features, data.labels


def similarity_matrix(
    train: AugmentedDataset,
    test: Union[AugmentedDataset, TestMatrix],
    classes: Optional[Sequence[int]] = None,
    pair_cap: int = config.SIMILARITY_PAIR_CAP,
    seed: int = 0,
) -> SimilarityMatrix:
    """Cells whose cross product exceeds `pair_cap` are estimated from that many seeded random pairs."""
    test_x, test_y = _rows(test)
    classes = list(classes) if classes is not None else train.classes
    rng = np.random.default_rng(seed)
    phi = np.zeros((len(classes), len(classes)))
    theta = np.zeros_like(phi)
    for a, ca in enumerate(classes):
        rows_a = test_x[test_y == ca]
        for b, cb in enumerate(classes):
            rows_b = train.rows_of(cb)
            if len(rows_a) == 0 or len(rows_b) == 0:
                raise InvalidInputError(f"no rows for class pair ({ca}, {cb})")
            if len(rows_a) * len(rows_b) > pair_cap:
                i = rng.integers(0, len(rows_a), size=pair_cap)
                j = rng.integers(0, len(rows_b), size=pair_cap)
                p, t = lambda_components(rows_a[i], rows_b[j])
            else:
                p, t = lambda_components(rows_a[:, None, :], rows_b[None, :, :])
            phi[a, b], theta[a, b] = p.mean(), t.mean()
    return SimilarityMatrix(classes=classes, lambda_phi=phi, lambda_theta=theta)


def feature_mean(features: np.ndarray) -> np.ndarray:
    """Time-domain mean: per-joint mean axis re-normalized, arithmetic mean angle."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or len(features) == 0:
        raise InvalidInputError("need a non-empty (n, 16) feature matrix")
    axes, angles = _blocks(features)
    mean_axes = axes.mean(axis=0)
    norms = np.linalg.norm(mean_axes, axis=-1, keepdims=True)
    mean_axes = np.where(norms > 1e-12, mean_axes / np.where(norms > 0, norms, 1.0), DEGENERATE_AXIS)
    return np.concatenate([mean_axes, angles.mean(axis=0)[:, None]], axis=-1).reshape(16)


def one_vs_all_similarity(test_mean: np.ndarray, train: AugmentedDataset) -> List[SimilarityScore]:
    """Score of one test mean against each training class mean, in class order."""
    _check_features(test_mean)
    scores = []
    for label in train.classes:
        phi, theta = lambda_components(test_mean, feature_mean(train.rows_of(label)))
        scores.append(SimilarityScore(lambda_phi=float(phi), lambda_theta=float(theta)))
    return scores


# --- Reports ---
def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    values = np.asarray(values, dtype=float)
    return float(values.mean()), float(values.std(ddof=1)) if len(values) > 1 else 0.0


def summarize_runs(sigma_phi_sq: float, sigma_theta_sq: float, runs: List[RunMetrics]) -> CellReport:
    if not runs:
        raise InvalidInputError("no runs to summarize")
    acc_mean, acc_std = _mean_std([r.accuracy for r in runs])
    f1_mean, f1_std = _mean_std([r.macro_f1 for r in runs])
    return CellReport(
        sigma_phi_sq=sigma_phi_sq, sigma_theta_sq=sigma_theta_sq,
        accuracy_mean=acc_mean, accuracy_std=acc_std,
        macro_f1_mean=f1_mean, macro_f1_std=f1_std, runs=runs,
    )


def metrics_report(
    preds, labels, classes: Sequence[int], runs: Optional[List[RunMetrics]] = None, mask=None,
) -> MetricsReport:
    scores, flagged = per_class_f1(preds, labels, classes, mask)
    counts, normalized, zero_rows = confusion(preds, labels, classes, mask)
    return MetricsReport(
        accuracy=accuracy(preds, labels, mask),
        macro_f1=float(np.mean(scores)),
        per_class_f1=scores.tolist(),
        flagged_classes=flagged,
        confusion=counts.tolist(),
        confusion_row_norm=normalized.tolist(),
        zero_support_rows=zero_rows,
        runs=runs or [],
    )

"""
Gaussian-kernel soft-margin SVMs trained by sequential minimal optimization,
combined through a one-vs-one error-correcting output code.
"""
import logging
from abc import ABC, abstractmethod
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.stats import norm
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import ConstantKernel, Matern, WhiteKernel
from sklearn.metrics.pairwise import rbf_kernel
from sklearn.model_selection import train_test_split

from app import config
from app.errors import TrainingError
from app.models import EcocModelRecord, NormalizationRecord, SvmRecord
from app.services.augmentation import AugmentedDataset
from app.services.evaluation import macro_f1

logger = logging.getLogger(__name__)

KKT_TOLERANCE = 1e-3
MAX_ITERATIONS = 100_000
CURVATURE_FLOOR = 1e-12
SUPPORT_THRESHOLD = 1e-10


class SvmModel(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    support_vectors: np.ndarray
    coefficients: np.ndarray
    bias: float
    C: float
    gamma: float
    kkt_residual: float = 0.0
    iterations: int = 0

    def decision(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if len(self.coefficients) == 0:
            return np.full(len(X), self.bias)
        return rbf_kernel(X, self.support_vectors, gamma=self.gamma) @ self.coefficients + self.bias

    def to_record(self) -> SvmRecord:
        return SvmRecord(
            support_vectors=self.support_vectors.tolist(), coefficients=self.coefficients.tolist(),
            bias=self.bias, C=self.C, gamma=self.gamma,
        )

    @classmethod
    def from_record(cls, record: SvmRecord) -> "SvmModel":
        return cls(
            support_vectors=np.asarray(record.support_vectors, dtype=float).reshape(-1, 16),
            coefficients=np.asarray(record.coefficients, dtype=float),
            bias=record.bias, C=record.C, gamma=record.gamma,
        )


# --- Binary SVM ---
def _smo(K: np.ndarray, y: np.ndarray, C: float, tol: float, max_iter: int) -> Tuple[np.ndarray, float, float, int]:
    """
    Maximal-violating-pair SMO on the dual
        min ½ αᵀQα − eᵀα,  Q = yyᵀ∘K,  0 ≤ α ≤ C,  yᵀα = 0.
    Returns (alpha, bias, kkt residual, iterations).
    """
    n = len(y)
    alpha = np.zeros(n)
    grad = -np.ones(n)
    diag = np.diag(K)
    residual = np.inf
    for iteration in range(max_iter):
        yg = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        i = int(np.argmax(np.where(up, yg, -np.inf)))
        j = int(np.argmin(np.where(low, yg, np.inf)))
        residual = yg[i] - yg[j]
        if residual < tol:
            break
        curvature = max(diag[i] + diag[j] - 2.0 * K[i, j], CURVATURE_FLOOR)
        room_i = C - alpha[i] if y[i] > 0 else alpha[i]
        room_j = alpha[j] if y[j] > 0 else C - alpha[j]
        step = min(residual / curvature, room_i, room_j)
        alpha[i] += y[i] * step
        alpha[j] -= y[j] * step
        grad += step * y * (K[:, i] - K[:, j])
    else:
        logger.warning(f"SMO stopped after {max_iter} iterations with KKT residual {residual:.2e}")
        iteration = max_iter

    yg = -y * grad
    free = (alpha > SUPPORT_THRESHOLD) & (alpha < C - SUPPORT_THRESHOLD)
    if np.any(free):
        bias = float(np.mean(yg[free]))
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        bias = float((np.max(yg[up], initial=-np.inf) + np.min(yg[low], initial=np.inf)) / 2.0)
        if not np.isfinite(bias):
            bias = 0.0
    return alpha, bias, max(float(residual), 0.0), iteration


def train_svm_binary(
    X: np.ndarray, y: np.ndarray, C: float, gamma: float,
    tol: float = KKT_TOLERANCE, max_iter: int = MAX_ITERATIONS,
) -> SvmModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if C <= 0 or gamma <= 0:
        raise TrainingError(f"C and gamma must be positive, got C={C}, gamma={gamma}")
    if X.ndim != 2 or len(X) != len(y) or len(X) < 2:
        raise TrainingError("need at least two rows with one label each")
    if not np.all(np.isfinite(X)):
        raise TrainingError("training features must be finite")
    if not set(np.unique(y)) <= {-1.0, 1.0}:
        raise TrainingError("binary labels must be -1 or +1")
    if len(np.unique(y)) < 2:
        raise TrainingError("binary training needs both labels present")

    K = rbf_kernel(X, gamma=gamma)
    alpha, bias, residual, iterations = _smo(K, y, C, tol, max_iter)
    support = alpha > SUPPORT_THRESHOLD
    return SvmModel(
        support_vectors=X[support], coefficients=alpha[support] * y[support], bias=bias,
        C=C, gamma=gamma, kkt_residual=residual, iterations=iterations,
    )


def svm_decision(model: SvmModel, x: np.ndarray) -> float:
    return float(model.decision(np.asarray(x, dtype=float).reshape(1, -1))[0])


# --- ECOC ---
def build_ovo_encoding(k: int) -> np.ndarray:
    """K x K(K-1)/2 matrix; column (a, b) holds +1 at the lower class index and -1 at the higher."""
    if k < 2:
        raise TrainingError(f"one-vs-one encoding needs at least 2 classes, got {k}")
    pairs = list(combinations(range(k), 2))
    encoding = np.zeros((k, len(pairs)), dtype=int)
    for column, (a, b) in enumerate(pairs):
        encoding[a, column], encoding[b, column] = 1, -1
    return encoding


class EcocModel(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    labels: List[int]
    encoding: np.ndarray
    binaries: List[SvmModel]
    shift: np.ndarray
    scale: np.ndarray

    @property
    def C(self) -> float:
        return self.binaries[0].C

    @property
    def gamma(self) -> float:
        return self.binaries[0].gamma

    def normalize(self, X: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(np.asarray(X, dtype=float)) - self.shift) / self.scale

    def to_record(self) -> EcocModelRecord:
        return EcocModelRecord(
            labels=self.labels,
            normalization=NormalizationRecord(shift=self.shift.tolist(), scale=self.scale.tolist()),
            encoding=self.encoding.tolist(),
            binaries=[b.to_record() for b in self.binaries],
        )

    @classmethod
    def from_record(cls, record: EcocModelRecord) -> "EcocModel":
        if record.schema_version != config.MODEL_SCHEMA_VERSION:
            raise TrainingError(f"unsupported model schema version {record.schema_version}")
        encoding = np.asarray(record.encoding, dtype=int)
        if encoding.shape != (len(record.labels), len(record.binaries)):
            raise TrainingError("encoding shape does not match labels and binaries")
        return cls(
            labels=record.labels,
            encoding=encoding,
            binaries=[SvmModel.from_record(b) for b in record.binaries],
            shift=np.asarray(record.normalization.shift, dtype=float),
            scale=np.asarray(record.normalization.scale, dtype=float),
        )


def fit_normalization(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    shift = X.mean(axis=0)
    scale = X.std(axis=0)
    return shift, np.where(scale > 0, scale, 1.0)


def train_ecoc(
    dataset: AugmentedDataset, C: float, gamma: float, labels: Optional[Sequence[int]] = None,
) -> EcocModel:
    """One binary per class pair, each trained only on its two classes' normalized rows."""
    present = dataset.classes
    labels = sorted(labels) if labels is not None else present
    missing = sorted(set(labels) - set(present))
    if missing:
        raise TrainingError(f"training data is missing classes {missing}")
    if not np.all(np.isfinite(dataset.features)):
        raise TrainingError("training features must be finite")

    shift, scale = fit_normalization(dataset.features)
    X = (dataset.features - shift) / scale
    encoding = build_ovo_encoding(len(labels))
    binaries = []
    for column in range(encoding.shape[1]):
        a, b = np.flatnonzero(encoding[:, column] == 1)[0], np.flatnonzero(encoding[:, column] == -1)[0]
        rows = (dataset.labels == labels[a]) | (dataset.labels == labels[b])
        y = np.where(dataset.labels[rows] == labels[a], 1.0, -1.0)
        binaries.append(train_svm_binary(X[rows], y, C, gamma))
    worst = max(b.kkt_residual for b in binaries)
    logger.info(f"Trained {len(binaries)} binaries on {len(dataset)} rows (C={C:.4g}, gamma={gamma:.4g}, max KKT {worst:.1e})")
    return EcocModel(labels=list(labels), encoding=encoding, binaries=binaries, shift=shift, scale=scale)


def ecoc_decision_matrix(model: EcocModel, X: np.ndarray) -> np.ndarray:
    """(n, L) raw binary decision values."""
    Z = model.normalize(X)
    return np.column_stack([b.decision(Z) for b in model.binaries])


def decode(encoding: np.ndarray, decisions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Hamming-style decoding. Loss of class j is (1/2L) Σ_i (1 − m_ji·s_i) with
    s_i = sign(f_i) and exact zeros voting −1; zero code entries cost 1/2 each.
    Returns (class indices, (n, K) losses); ties go to the lowest index.
    """
    decisions = np.atleast_2d(decisions)
    signs = np.where(decisions > 0, 1.0, -1.0)
    L = encoding.shape[1]
    losses = (L - signs @ encoding.T) / (2.0 * L)
    return np.argmin(losses, axis=1), losses


def ecoc_predict_batch(model: EcocModel, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    index, losses = decode(model.encoding, ecoc_decision_matrix(model, X))
    return np.asarray(model.labels)[index], losses


def ecoc_predict(model: EcocModel, x: np.ndarray) -> Tuple[int, np.ndarray]:
    labels, losses = ecoc_predict_batch(model, np.asarray(x, dtype=float).reshape(1, -1))
    return int(labels[0]), losses[0]


# --- Hyperparameter search ---
class SearchStrategy(ABC):
    """Proposes points in log10 (C, gamma) space from the evaluation history."""

    def __init__(self, bounds: Tuple[float, float], rng: np.random.Generator):
        self.low, self.high = np.log10(bounds[0]), np.log10(bounds[1])
        self.rng = rng

    def _uniform(self, n: int) -> np.ndarray:
        return self.rng.uniform(self.low, self.high, size=(n, 2))

    @abstractmethod
    def propose(self, points: List[np.ndarray], scores: List[float]) -> np.ndarray:
        ...


class RandomSearch(SearchStrategy):
    def propose(self, points, scores):
        return self._uniform(1)[0]


class GaussianProcessSearch(SearchStrategy):
    """Expected improvement over a random candidate pool, scored by a GP surrogate."""

    def __init__(self, bounds, rng, initial: int = 8, pool: int = 512, xi: float = 0.01):
        super().__init__(bounds, rng)
        self.initial, self.pool, self.xi = initial, pool, xi

    def propose(self, points, scores):
        if len(points) < self.initial:
            return self._uniform(1)[0]
        kernel = ConstantKernel(1.0) * Matern(length_scale=np.ones(2), nu=2.5) + WhiteKernel(1e-4)
        gp = GaussianProcessRegressor(kernel=kernel, normalize_y=True, random_state=0)
        gp.fit(np.asarray(points), np.asarray(scores))
        candidates = self._uniform(self.pool)
        mean, std = gp.predict(candidates, return_std=True)
        improvement = mean - max(scores) - self.xi
        z = np.divide(improvement, std, out=np.zeros_like(std), where=std > 0)
        ei = np.where(std > 0, improvement * norm.cdf(z) + std * norm.pdf(z), 0.0)
        return candidates[int(np.argmax(ei))]


STRATEGIES = {"random": RandomSearch, "bayesian": GaussianProcessSearch}


class TuningResult(BaseModel):
    C: float
    gamma: float
    score: float
    history: List[Tuple[float, float, float]]


def _cap_rows(dataset: AugmentedDataset, per_class: int, rng: np.random.Generator) -> AugmentedDataset:
    keep = []
    for label in dataset.classes:
        rows = np.flatnonzero(dataset.labels == label)
        if len(rows) > per_class:
            rows = np.sort(rng.choice(rows, size=per_class, replace=False))
        keep.append(rows)
    return dataset.subset(np.concatenate(keep))


def holdout_split(
    dataset: AugmentedDataset, fraction: float, seed: int
) -> Tuple[AugmentedDataset, AugmentedDataset]:
    """
    Stratified split. Falls back to scoring on the training rows when a class
    has a single row or either side would hold fewer rows than there are classes.
    """
    counts = np.bincount(dataset.labels)
    n, k = len(dataset), len(dataset.classes)
    held_rows = int(np.ceil(fraction * n))
    if np.min(counts[counts > 0]) < 2 or held_rows < k or n - held_rows < k:
        logger.warning(f"{n} rows over {k} classes cannot be split {fraction:g}; scoring on the training rows")
        return dataset, dataset
    index = np.arange(len(dataset))
    fit, held = train_test_split(index, test_size=fraction, stratify=dataset.labels, random_state=seed % 2**32)
    return dataset.subset(np.sort(fit)), dataset.subset(np.sort(held))


def tune_hyperparameters(
    train: AugmentedDataset,
    budget: int = config.SEARCH_BUDGET,
    bounds: Tuple[float, float] = config.SEARCH_BOUNDS,
    strategy: str = "random",
    validation_fraction: float = config.SEARCH_VALIDATION_FRACTION,
    max_rows_per_class: int = config.SEARCH_MAX_ROWS_PER_CLASS,
    seed: int = 0,
) -> TuningResult:
    """Best (C, gamma) by holdout macro-F1; earlier points win ties."""
    if budget < 1:
        raise TrainingError(f"search budget must be at least 1, got {budget}")
    if strategy not in STRATEGIES:
        raise TrainingError(f"unknown search strategy '{strategy}'")
    rng = np.random.default_rng(seed)
    capped = _cap_rows(train, max_rows_per_class, rng)
    fit, held = holdout_split(capped, validation_fraction, seed)
    searcher = STRATEGIES[strategy](bounds, rng)

    points: List[np.ndarray] = []
    scores: List[float] = []
    best = (np.inf, np.inf, -np.inf)
    for _ in range(budget):
        log_c, log_gamma = np.clip(searcher.propose(points, scores), searcher.low, searcher.high)
        C, gamma = float(10.0 ** log_c), float(10.0 ** log_gamma)
        model = train_ecoc(fit, C, gamma, labels=train.classes)
        predicted, _ = ecoc_predict_batch(model, held.features)
        score = macro_f1(predicted, held.labels, classes=train.classes)
        points.append(np.array([log_c, log_gamma]))
        scores.append(score)
        if score > best[2]:
            best = (C, gamma, score)
    logger.info(f"Search ({strategy}, {budget} evaluations) picked C={best[0]:.4g}, gamma={best[1]:.4g}, F1={best[2]:.3f}")
    history = [(float(10.0 ** p[0]), float(10.0 ** p[1]), s) for p, s in zip(points, scores)]
    return TuningResult(C=best[0], gamma=best[1], score=best[2], history=history)

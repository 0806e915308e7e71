"""
Madgwick MARG attitude estimation, inter-sensor fusion into joint orientations,
stream synchronization and assembly of the NaN-padded test matrix.

Filter quaternions map sensor-frame vectors into the Earth frame (z up, x toward
magnetic north). Accelerometers report specific force, so a resting sensor
measures +z in Earth coordinates.
"""
import logging
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app import config
from app.errors import InvalidInputError, StreamError
from app.models import JOINT_ORDER, MODULE_IDS, FilterState, ImuSample, PoseVector, UnitQuaternion
from app.services.augmentation import poses_to_features
from app.services.rotations import (
    QuatLike,
    align_hemisphere,
    as_quat,
    canonicalize,
    matrix_to_quat,
    normalize,
    relative_quat,
)

logger = logging.getLogger(__name__)

IMU_COLUMNS = ["timestamp_us", "module_id", "imu_role", "gx", "gy", "gz", "ax", "ay", "az", "mx", "my", "mz"]
ORIENTATION_COLUMNS = ["t", "joint", "qw", "qx", "qy", "qz"]
GRADIENT_FLOOR = 1e-9


class ImuStream(BaseModel):
    """One IMU's samples as arrays; gyro in rad/s."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    timestamps_us: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    mag: np.ndarray

    @model_validator(mode="after")
    def shapes(self) -> "ImuStream":
        n = len(self.timestamps_us)
        if n == 0:
            raise ValueError("stream must contain at least one sample")
        for name in ("gyro", "accel", "mag"):
            arr = getattr(self, name)
            if arr.shape != (n, 3):
                raise ValueError(f"{name} must have shape ({n}, 3), got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        return self

    def __len__(self) -> int:
        return len(self.timestamps_us)

    def samples(self) -> Iterator[ImuSample]:
        for i in range(len(self)):
            yield ImuSample(
                timestamp_us=int(self.timestamps_us[i]),
                gyro=tuple(self.gyro[i]), accel=tuple(self.accel[i]), mag=tuple(self.mag[i]),
            )


class SensorModuleStream(BaseModel):
    model_config = ConfigDict(frozen=True)

    module_id: Literal["RW", "LW", "RA", "LA"]
    parent: ImuStream
    child: ImuStream


class FusionDiagnostics(BaseModel):
    gyro_only_steps: int = 0
    unpaired_samples: int = 0


class OrientationSeries(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    timestamps: np.ndarray = Field(..., description="seconds")
    quats: np.ndarray
    diagnostics: FusionDiagnostics = FusionDiagnostics()

    @model_validator(mode="after")
    def shapes(self) -> "OrientationSeries":
        if len(self.timestamps) == 0 or self.quats.shape != (len(self.timestamps), 4):
            raise ValueError("orientation series needs matching non-empty timestamps and (n, 4) quaternions")
        return self


class PoseTimeseries(BaseModel):
    """Joint orientations on one time vector: quats has shape (T, 4 joints, 4)."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    timestamps: np.ndarray
    quats: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamps)

    def pose(self, index: int) -> PoseVector:
        return PoseVector.from_array(self.quats[index])

    def features(self) -> np.ndarray:
        return poses_to_features(self.quats)

    def after(self, warmup_s: float) -> "PoseTimeseries":
        keep = self.timestamps >= self.timestamps[0] + warmup_s
        return PoseTimeseries(timestamps=self.timestamps[keep], quats=self.quats[keep])


# --- Intra-sensor fusion ---
def _hamilton(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def _rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    conj = q * np.array([1.0, -1.0, -1.0, -1.0])
    return _hamilton(_hamilton(q, np.array([0.0, *v])), conj)[1:]


def _madgwick_step(q, gyro, accel, mag, dt: float, beta: float) -> Tuple[np.ndarray, bool]:
    q0, q1, q2, q3 = q
    q_dot = 0.5 * _hamilton(q, np.array([0.0, *gyro]))

    a_norm, m_norm = np.linalg.norm(accel), np.linalg.norm(mag)
    gyro_only = a_norm == 0.0 or m_norm == 0.0
    if not gyro_only:
        ax, ay, az = accel / a_norm
        mx, my, mz = mag / m_norm
        # Earth field reconstruction: rotate into Earth frame, keep horizontal magnitude and vertical part
        h = _rotate(q, np.array([mx, my, mz]))
        bx, bz = np.hypot(h[0], h[1]), h[2]
        f = np.array([
            2 * (q1 * q3 - q0 * q2) - ax,
            2 * (q0 * q1 + q2 * q3) - ay,
            2 * (0.5 - q1 * q1 - q2 * q2) - az,
            2 * bx * (0.5 - q2 * q2 - q3 * q3) + 2 * bz * (q1 * q3 - q0 * q2) - mx,
            2 * bx * (q1 * q2 - q0 * q3) + 2 * bz * (q0 * q1 + q2 * q3) - my,
            2 * bx * (q0 * q2 + q1 * q3) + 2 * bz * (0.5 - q1 * q1 - q2 * q2) - mz,
        ])
        J = np.array([
            [-2 * q2, 2 * q3, -2 * q0, 2 * q1],
            [2 * q1, 2 * q0, 2 * q3, 2 * q2],
            [0.0, -4 * q1, -4 * q2, 0.0],
            [-2 * bz * q2, 2 * bz * q3, -4 * bx * q2 - 2 * bz * q0, -4 * bx * q3 + 2 * bz * q1],
            [-2 * bx * q3 + 2 * bz * q1, 2 * bx * q2 + 2 * bz * q0, 2 * bx * q1 + 2 * bz * q3, -2 * bx * q0 + 2 * bz * q2],
            [2 * bx * q2, 2 * bx * q3 - 4 * bz * q1, 2 * bx * q0 - 4 * bz * q2, 2 * bx * q1],
        ])
        step = J.T @ f
        step_norm = np.linalg.norm(step)
        # a vanishing gradient means the estimate already explains the measurements
        if step_norm > GRADIENT_FLOOR:
            q_dot = q_dot - beta * step / step_norm

    q_next = q + q_dot * dt
    return q_next / np.linalg.norm(q_next), gyro_only


def madgwick_update(state: FilterState, sample: ImuSample, dt: float) -> FilterState:
    """One gradient-descent MARG update; zero-norm accel or mag falls back to gyro integration."""
    if dt <= 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    q, gyro_only = _madgwick_step(
        state.q.as_array(), np.asarray(sample.gyro), np.asarray(sample.accel),
        np.asarray(sample.mag), dt, state.beta,
    )
    if gyro_only:
        logger.warning(f"Gyro-only propagation at t={sample.timestamp_us}us (zero-norm accel or mag)")
    return FilterState(
        q=UnitQuaternion.from_array(q), beta=state.beta,
        gyro_only_steps=state.gyro_only_steps + int(gyro_only),
    )


def initial_orientation(accel: np.ndarray, mag: np.ndarray) -> np.ndarray:
    """Orientation that exactly explains one gravity and field observation."""
    up = np.asarray(accel, dtype=float)
    up = up / np.linalg.norm(up)
    west = np.cross(up, np.asarray(mag, dtype=float))
    west = west / np.linalg.norm(west)
    north = np.cross(west, up)
    return matrix_to_quat(np.stack([north, west, up]))


def estimate_stream_orientation(
    stream: ImuStream,
    beta: float = config.DEFAULT_BETA,
    q0: Optional[QuatLike] = None,
    nominal_rate_hz: float = config.DEFAULT_RATE_HZ,
) -> OrientationSeries:
    """Fold the filter over a stream; the first step uses the nominal sample period."""
    ts = np.asarray(stream.timestamps_us, dtype=np.int64)
    dts = np.diff(ts) * 1e-6
    if np.any(dts <= 0):
        bad = int(np.argmax(dts <= 0)) + 1
        raise StreamError(f"timestamps must be strictly increasing (sample {bad})")
    dts = np.concatenate([[1.0 / nominal_rate_hz], dts])

    q = normalize(as_quat(q0)) if q0 is not None else np.array([1.0, 0.0, 0.0, 0.0])
    out = np.empty((len(ts), 4))
    gyro_only_steps = 0
    for i in range(len(ts)):
        q, gyro_only = _madgwick_step(q, stream.gyro[i], stream.accel[i], stream.mag[i], dts[i], beta)
        gyro_only_steps += int(gyro_only)
        out[i] = q
    if gyro_only_steps:
        logger.warning(f"{gyro_only_steps} gyro-only steps while filtering {len(ts)} samples")
    return OrientationSeries(
        timestamps=ts * 1e-6, quats=out, diagnostics=FusionDiagnostics(gyro_only_steps=gyro_only_steps),
    )


# --- Inter-sensor fusion ---
def fuse_module(
    parent: OrientationSeries, child: OrientationSeries, tolerance_s: Optional[float] = None
) -> OrientationSeries:
    """Relative orientation at parent timestamps, pairing each with the nearest child sample."""
    if tolerance_s is None:
        period = np.median(np.diff(parent.timestamps)) if len(parent.timestamps) > 1 else 1.0 / config.DEFAULT_RATE_HZ
        tolerance_s = 0.5 * period
    right = np.clip(np.searchsorted(child.timestamps, parent.timestamps), 0, len(child.timestamps) - 1)
    left = np.clip(right - 1, 0, len(child.timestamps) - 1)
    nearest = np.where(
        np.abs(child.timestamps[left] - parent.timestamps) <= np.abs(child.timestamps[right] - parent.timestamps),
        left, right,
    )
    paired = np.abs(child.timestamps[nearest] - parent.timestamps) <= tolerance_s + 1e-12
    unpaired = int(np.count_nonzero(~paired))
    if unpaired:
        logger.warning(f"Dropped {unpaired} unpaired samples while fusing module streams")
    if not np.any(paired):
        raise StreamError("no parent sample has a child sample within the pairing tolerance")

    rel = relative_quat(parent.quats[paired], child.quats[nearest[paired]])
    diagnostics = FusionDiagnostics(
        gyro_only_steps=parent.diagnostics.gyro_only_steps + child.diagnostics.gyro_only_steps,
        unpaired_samples=unpaired,
    )
    return OrientationSeries(timestamps=parent.timestamps[paired], quats=rel, diagnostics=diagnostics)


def synchronize_streams(channels: Sequence[OrientationSeries], rate_hz: float = config.DEFAULT_RATE_HZ) -> PoseTimeseries:
    """
    Resample joint channels onto one time vector over their common window
    using component-wise linear interpolation plus renormalization.
    """
    if len(channels) != len(JOINT_ORDER):
        raise InvalidInputError(f"expected {len(JOINT_ORDER)} joint channels, got {len(channels)}")
    first = channels[0].timestamps
    if all(len(c.timestamps) == len(first) and np.array_equal(c.timestamps, first) for c in channels):
        quats = np.stack([canonicalize(c.quats) for c in channels], axis=1)
        return PoseTimeseries(timestamps=first.copy(), quats=quats)

    start = max(c.timestamps[0] for c in channels)
    end = min(c.timestamps[-1] for c in channels)
    if start > end:
        raise StreamError(f"channels do not overlap (window [{start:.3f}, {end:.3f}] s)")
    count = int(np.floor((end - start) * rate_hz + 1e-9)) + 1
    t = start + np.arange(count) / rate_hz
    t = t[t <= end + 1e-12]

    resampled = []
    for channel in channels:
        aligned = align_hemisphere(channel.quats)
        comps = np.stack([np.interp(t, channel.timestamps, aligned[:, k]) for k in range(4)], axis=-1)
        resampled.append(canonicalize(normalize(comps)))
    return PoseTimeseries(timestamps=t, quats=np.stack(resampled, axis=1))


def characterize_pose_wearable(quats: Sequence[QuatLike]) -> PoseVector:
    """Assemble fused joint quaternions given in right wrist, left wrist, right ankle, left ankle order."""
    if len(quats) != len(JOINT_ORDER):
        raise InvalidInputError(f"expected {len(JOINT_ORDER)} joint quaternions, got {len(quats)}")
    return PoseVector.from_array(canonicalize(np.stack([as_quat(q) for q in quats])))


def fuse_session(
    streams: Dict[str, SensorModuleStream],
    beta: float = config.DEFAULT_BETA,
    rate_hz: float = config.DEFAULT_RATE_HZ,
    initial_alignment: str = "identity",
    warmup_s: float = 0.0,
) -> PoseTimeseries:
    """Filter, fuse and synchronize the four extremity modules of one session."""
    missing = [m for m in MODULE_IDS if m not in streams]
    if missing:
        raise InvalidInputError(f"session is missing modules {missing}")

    def orient(stream: ImuStream) -> OrientationSeries:
        q0 = initial_orientation(stream.accel[0], stream.mag[0]) if initial_alignment == "accel_mag" else None
        return estimate_stream_orientation(stream, beta=beta, q0=q0, nominal_rate_hz=rate_hz)

    relative = [fuse_module(orient(streams[m].parent), orient(streams[m].child)) for m in MODULE_IDS]
    return synchronize_streams(relative, rate_hz).after(warmup_s)


# --- Test matrix ---
class TestMatrix(BaseModel):
    """
    Recordings side by side in 16-column blocks, padded with NaN up to the
    longest recording. `mask[i, j]` marks row i of block j as a real sample.
    """
    __test__ = False
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    values: np.ndarray
    mask: np.ndarray
    lengths: List[int]
    labels: List[int]

    @property
    def padded_count(self) -> int:
        return int(np.count_nonzero(~self.mask))

    def valid_rows(self) -> Tuple[np.ndarray, np.ndarray]:
        feats, labels = [], []
        for j, (length, label) in enumerate(zip(self.lengths, self.labels)):
            block = self.values[:length, 16 * j:16 * (j + 1)]
            feats.append(block)
            labels.append(np.full(length, label, dtype=int))
        return np.concatenate(feats), np.concatenate(labels)


def build_test_matrix(recordings: Sequence[Tuple[int, PoseTimeseries]]) -> TestMatrix:
    if not recordings:
        raise InvalidInputError("at least one recording is required")
    blocks = []
    for label, recording in recordings:
        if len(recording) == 0:
            raise InvalidInputError(f"recording for class {label} is empty")
        blocks.append(recording.features())
    rows = max(len(b) for b in blocks)
    values = np.full((rows, 16 * len(blocks)), np.nan)
    mask = np.zeros((rows, len(blocks)), dtype=bool)
    for j, block in enumerate(blocks):
        values[:len(block), 16 * j:16 * (j + 1)] = block
        mask[:len(block), j] = True
    return TestMatrix(
        values=values, mask=mask, lengths=[len(b) for b in blocks], labels=[label for label, _ in recordings],
    )


# --- CSV formats ---
def streams_from_frame(frame: pd.DataFrame) -> Dict[str, SensorModuleStream]:
    """Build module streams from the IMU log table; gyro columns are deg/s."""
    missing = [c for c in IMU_COLUMNS if c not in frame.columns]
    if missing:
        raise InvalidInputError(f"IMU log is missing columns {missing}")
    unknown = set(frame["module_id"]) - set(MODULE_IDS)
    if unknown:
        raise InvalidInputError(f"unknown module ids {sorted(unknown)}")
    roles = set(frame["imu_role"]) - {"p", "c"}
    if roles:
        raise InvalidInputError(f"unknown imu roles {sorted(roles)}")

    def stream(rows: pd.DataFrame) -> ImuStream:
        return ImuStream(
            timestamps_us=rows["timestamp_us"].to_numpy(dtype=np.int64),
            gyro=np.radians(rows[["gx", "gy", "gz"]].to_numpy(dtype=float)),
            accel=rows[["ax", "ay", "az"]].to_numpy(dtype=float),
            mag=rows[["mx", "my", "mz"]].to_numpy(dtype=float),
        )

    streams = {}
    for module_id, rows in frame.groupby("module_id", sort=False):
        parent, child = rows[rows["imu_role"] == "p"], rows[rows["imu_role"] == "c"]
        if parent.empty or child.empty:
            raise StreamError(f"module {module_id} needs both parent and child samples")
        streams[module_id] = SensorModuleStream(module_id=module_id, parent=stream(parent), child=stream(child))
    return streams


def frame_from_streams(streams: Sequence[SensorModuleStream]) -> pd.DataFrame:
    parts = []
    for module in streams:
        for role, imu in (("p", module.parent), ("c", module.child)):
            part = pd.DataFrame(np.column_stack([np.degrees(imu.gyro), imu.accel, imu.mag]),
                                columns=IMU_COLUMNS[3:])
            part.insert(0, "imu_role", role)
            part.insert(0, "module_id", module.module_id)
            part.insert(0, "timestamp_us", np.asarray(imu.timestamps_us, dtype=np.int64))
            parts.append(part)
    return pd.concat(parts, ignore_index=True).sort_values(
        ["timestamp_us", "module_id", "imu_role"], kind="stable", ignore_index=True
    )


def orientation_frame(poses: PoseTimeseries) -> pd.DataFrame:
    t = np.repeat(poses.timestamps, len(JOINT_ORDER))
    joints = np.tile(np.array(JOINT_ORDER), len(poses))
    q = poses.quats.reshape(-1, 4)
    return pd.DataFrame({"t": t, "joint": joints, "qw": q[:, 0], "qx": q[:, 1], "qy": q[:, 2], "qz": q[:, 3]})


def read_imu_csv(paths: Sequence) -> Dict[str, SensorModuleStream]:
    """Read one session from one or more IMU log files (rows may be split across files)."""
    if not paths:
        raise InvalidInputError("no IMU log files given")
    frame = pd.concat([pd.read_csv(p) for p in paths], ignore_index=True)
    frame = frame.sort_values("timestamp_us", kind="stable", ignore_index=True) if "timestamp_us" in frame else frame
    return streams_from_frame(frame)


def write_orientation_csv(poses: PoseTimeseries, path) -> None:
    orientation_frame(poses).to_csv(path, index=False, float_format="%.9g")

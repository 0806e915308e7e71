"""
In-silico generator: canonical postures, keyframed sleep sequences and raw
IMU streams synthesized from known orientation trajectories.

Earth frame is z up with x toward magnetic north. Gravity is (0, 0, -9.81) m/s²,
so a resting accelerometer reads (0, 0, +9.81) in Earth coordinates; the
magnetic field has unit magnitude and a 60° dip.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.spatial.transform import Rotation

from app import config
from app.errors import InvalidInputError, StreamError
from app.models import (
    JOINT_ORDER,
    MODULE_IDS,
    AugmentSettings,
    ImuNoiseModel,
    JointSet,
    LabeledPosture,
    PoseVector,
    PostureSetManifest,
)
from app.services.augmentation import augment_posture, features_to_pose, pose_to_features
from app.services.evaluation import lambda_components
from app.services.fusion import ImuStream, SensorModuleStream
from app.services.kinematics import BvhJoint, SkeletonAnimation, forward_kinematics
from app.services.rotations import (
    align_hemisphere,
    axis_angle_to_quat,
    canonicalize,
    euler_to_rotation,
    matrix_to_quat,
    nlerp,
    quat_conjugate,
    quat_exp,
    quat_log,
    quat_multiply,
    quat_rotate,
    quat_to_axis_angle,
)

logger = logging.getLogger(__name__)

GRAVITY = 9.81
MAG_DIP_DEG = 60.0
EARTH_SPECIFIC_FORCE = np.array([0.0, 0.0, GRAVITY])
EARTH_FIELD = np.array([np.cos(np.radians(MAG_DIP_DEG)), 0.0, -np.sin(np.radians(MAG_DIP_DEG))])

POSTURE_NAMES = (
    "supine", "prone", "right_lateral", "left_lateral", "right_fetal", "left_fetal",
    "starfish", "freefall", "yearner", "soldier", "right_log", "left_log",
)
# Flexion about z, deviation (wrist) or inversion (ankle) about x, in degrees.
WRIST_RANGES = ((-70.0, 70.0), (-20.0, 30.0))
ANKLE_RANGES = ((-45.0, 20.0), (-25.0, 15.0))
SEPARATION = 7.0
NEAR_COPY_DEG = 30.0
MAX_ATTEMPTS = 10_000
SEGMENT_CHANNELS = ("Zrotation", "Xrotation", "Yrotation")
ROOT_CHANNELS = ("Xposition", "Yposition", "Zposition") + SEGMENT_CHANNELS


# --- Canonical postures ---
def _joint_quat(flexion: float, deviation: float) -> np.ndarray:
    return canonicalize(matrix_to_quat(euler_to_rotation([flexion, deviation, 0.0], "ZXY")))


def _random_pose(rng: np.random.Generator) -> np.ndarray:
    quats = []
    for joint in JOINT_ORDER:
        ranges = WRIST_RANGES if joint.endswith("wrist") else ANKLE_RANGES
        quats.append(_joint_quat(*(rng.uniform(lo, hi) for lo, hi in ranges)))
    return np.stack(quats)


def _near_copy(quats: np.ndarray) -> np.ndarray:
    """Same posture with the right wrist turned a further 30° about its own axis."""
    axis, angle = quat_to_axis_angle(quats[0])
    shift = np.radians(NEAR_COPY_DEG)
    angle = angle + shift if angle + shift <= np.pi else angle - shift
    out = quats.copy()
    out[0] = canonicalize(axis_angle_to_quat(axis, angle))
    return out


def canonical_postures(seed: int = 0) -> PostureSetManifest:
    """
    Twelve postures drawn within anatomical wrist and ankle ranges. The first
    eleven are pairwise separated (similarity at most 7); the twelfth is a
    deliberate near-copy of the eleventh.
    """
    rng = np.random.default_rng(seed)
    accepted: List[np.ndarray] = []
    for _ in range(MAX_ATTEMPTS):
        candidate = _random_pose(rng)
        x = pose_to_features(PoseVector.from_array(candidate))
        if all(sum(lambda_components(x, pose_to_features(PoseVector.from_array(a)))) <= SEPARATION for a in accepted):
            accepted.append(candidate)
        if len(accepted) == len(POSTURE_NAMES) - 1:
            break
    else:
        raise InvalidInputError(f"could not draw {len(POSTURE_NAMES) - 1} separated postures with seed {seed}")
    accepted.append(_near_copy(accepted[-1]))
    postures = [
        LabeledPosture(label=k + 1, name=name, pose=PoseVector.from_array(q))
        for k, (name, q) in enumerate(zip(POSTURE_NAMES, accepted))
    ]
    return PostureSetManifest(seed=seed, postures=postures)


# --- Motion sequence ---
def build_skeleton() -> Tuple[BvhJoint, ...]:
    """Minimal rig: pelvis, spine, two arms and two legs, offsets in centimetres."""
    rot = SEGMENT_CHANNELS
    joints = [
        BvhJoint(name="Hips", parent=-1, offset=(0.0, 0.0, 0.0), channels=ROOT_CHANNELS),
        BvhJoint(name="Spine", parent=0, offset=(0.0, 45.0, 0.0), channels=rot),
    ]

    def chain(side: str, sign: float, names: Sequence[str], offsets: Sequence[Tuple[float, float, float]],
              parent: int, end: Tuple[float, float, float]) -> None:
        for name, offset in zip(names, offsets):
            joints.append(BvhJoint(
                name=f"{side}{name}", parent=parent, offset=(sign * offset[0], offset[1], offset[2]), channels=rot,
            ))
            parent = len(joints) - 1
        joints.append(BvhJoint(
            name=f"{joints[parent].name}_End", parent=parent, offset=(sign * end[0], end[1], end[2]), end_site=True,
        ))

    arm = (("Arm", "ForeArm", "Hand"), ((18.0, 5.0, 0.0), (28.0, 0.0, 0.0), (25.0, 0.0, 0.0)), (10.0, 0.0, 0.0))
    leg = (("UpLeg", "Leg", "Foot"), ((9.0, -5.0, 0.0), (0.0, -42.0, 0.0), (0.0, -40.0, 0.0)), (0.0, -5.0, 12.0))
    chain("Right", -1.0, *arm[:2], parent=1, end=arm[2])
    chain("Left", 1.0, *arm[:2], parent=1, end=arm[2])
    chain("Right", -1.0, *leg[:2], parent=0, end=leg[2])
    chain("Left", 1.0, *leg[:2], parent=0, end=leg[2])
    return tuple(joints)


def _keyframe_schedule(keys: np.ndarray, hold: int, transition: int) -> np.ndarray:
    """(P, ..., 4) keys -> (F, ..., 4) frames of holds joined by nlerp transitions."""
    frames = []
    for k in range(len(keys)):
        frames.extend([keys[k]] * hold)
        if k + 1 < len(keys):
            for step in range(1, transition + 1):
                frames.append(nlerp(keys[k], keys[k + 1], step / (transition + 1)))
    return canonicalize(np.stack(frames))


def generate_motion_sequence(
    postures: Sequence[PoseVector],
    hold: int = 10,
    transition: int = 10,
    frame_time: float = 1.0 / config.DEFAULT_RATE_HZ,
    joints: JointSet = JointSet(),
) -> SkeletonAnimation:
    """Lying rig whose extremity joints hold each posture, then interpolate to the next."""
    if hold < 1 or transition < 1:
        raise InvalidInputError("hold and transition must be at least one frame")
    if not postures:
        raise InvalidInputError("at least one posture is required")
    skeleton = build_skeleton()
    anim_joints = {j.name: i for i, j in enumerate(skeleton)}
    keys = np.stack([p.as_array() for p in postures])
    per_frame = _keyframe_schedule(keys, hold, transition)

    slices, start = {}, 0
    for joint in skeleton:
        slices[joint.name] = slice(start, start + len(joint.channels))
        start += len(joint.channels)
    frames = np.zeros((len(per_frame), start))
    frames[:, slices["Hips"]] = [0.0, 12.0, 0.0, 0.0, -90.0, 0.0]
    for j, pair in enumerate(joints.pairs()):
        if pair.child not in anim_joints:
            raise InvalidInputError(f"joint '{pair.child}' is not part of the rig")
        xyzw = per_frame[:, j][:, [1, 2, 3, 0]]
        frames[:, slices[pair.child]] = Rotation.from_quat(xyzw).as_euler("ZXY", degrees=True)
    logger.info(f"Generated {len(frames)}-frame sequence for {len(postures)} postures")
    return SkeletonAnimation(joints=skeleton, frames=frames, frame_time=frame_time)


def segment_trajectories(anim: SkeletonAnimation, joints: JointSet = JointSet()) -> Tuple[np.ndarray, np.ndarray]:
    """Global parent and child segment orientations per frame, each (4, F, 4)."""
    parent = np.empty((len(JOINT_ORDER), anim.num_frames, 4))
    child = np.empty_like(parent)
    for f in range(anim.num_frames):
        transforms = forward_kinematics(anim, f)
        for j, pair in enumerate(joints.pairs()):
            parent[j, f] = matrix_to_quat(transforms[pair.parent].rotation)
            child[j, f] = matrix_to_quat(transforms[pair.child].rotation)
    return parent, child


# --- IMU synthesis ---
def _check_uniform(timestamps_s: np.ndarray) -> float:
    if len(timestamps_s) < 2:
        raise StreamError("a trajectory needs at least two samples")
    dts = np.diff(timestamps_s)
    if np.any(dts <= 0) or not np.allclose(dts, dts[0], rtol=1e-6, atol=1e-9):
        raise StreamError("trajectory timestamps must be uniformly spaced")
    return float(dts[0])


def body_rates(quats: np.ndarray, dt: float) -> np.ndarray:
    """Sensor-frame angular velocity by central differences of quaternion logs, one-sided at the ends."""
    q = align_hemisphere(quats)
    rates = np.empty((len(q), 3))
    rates[1:-1] = quat_log(quat_multiply(quat_conjugate(q[:-2]), q[2:])) / (2.0 * dt)
    rates[0] = quat_log(quat_multiply(quat_conjugate(q[0]), q[1])) / dt
    rates[-1] = quat_log(quat_multiply(quat_conjugate(q[-2]), q[-1])) / dt
    return rates


def _imu_stream(quats: np.ndarray, timestamps_s: np.ndarray, dt: float, noise: ImuNoiseModel,
                rng: np.random.Generator) -> ImuStream:
    n = len(quats)
    to_sensor = quat_conjugate(quats)
    gyro = body_rates(quats, dt) + np.asarray(noise.gyro_bias) + rng.normal(0.0, noise.gyro_std, (n, 3))
    accel = quat_rotate(to_sensor, EARTH_SPECIFIC_FORCE) + rng.normal(0.0, noise.accel_std, (n, 3))
    mag = quat_rotate(to_sensor, EARTH_FIELD) + rng.normal(0.0, noise.mag_std, (n, 3))
    return ImuStream(
        timestamps_us=np.round(np.asarray(timestamps_s) * 1e6).astype(np.int64), gyro=gyro, accel=accel, mag=mag,
    )


def synthesize_imu_streams(
    parent: np.ndarray,
    child: np.ndarray,
    timestamps_s: np.ndarray,
    module_id: str,
    noise: ImuNoiseModel = ImuNoiseModel(),
    seed: int = 0,
) -> SensorModuleStream:
    """Inverse sensor model for one module: (T, 4) sensor-to-Earth trajectories to raw readings."""
    timestamps_s = np.asarray(timestamps_s, dtype=float)
    dt = _check_uniform(timestamps_s)
    if parent.shape != (len(timestamps_s), 4) or child.shape != parent.shape:
        raise InvalidInputError("parent and child trajectories must be (T, 4) on the given timestamps")
    parent_rng, child_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    return SensorModuleStream(
        module_id=module_id,
        parent=_imu_stream(parent, timestamps_s, dt, noise, parent_rng),
        child=_imu_stream(child, timestamps_s, dt, noise, child_rng),
    )


def limb_trajectories(
    pose: PoseVector,
    duration_s: float,
    rate_hz: float = config.DEFAULT_RATE_HZ,
    sway_deg: float = 0.0,
    seed: int = 0,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Parent and child sensor orientations (4, T, 4) of a held posture, with an
    optional slow limb sway. Sensors are aligned with their segments, as in
    `segment_trajectories`: child = parent ⊗ joint, so fusing the pair gives
    the conjugate of the joint quaternion.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(int(round(duration_s * rate_hz))) / rate_hz
    base = quat_exp(rng.normal(0.0, 0.6, size=(len(JOINT_ORDER), 3)))
    sway_axis = rng.normal(size=(len(JOINT_ORDER), 3))
    sway_axis /= np.linalg.norm(sway_axis, axis=-1, keepdims=True)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=len(JOINT_ORDER))
    sway = np.radians(sway_deg) * np.sin(2.0 * np.pi * t[None, :] / 8.0 + phase[:, None])
    parent = quat_multiply(base[:, None, :], quat_exp(sway[..., None] * sway_axis[:, None, :]))
    child = quat_multiply(parent, pose.as_array()[:, None, :])
    return t, parent, child


def perturb_pose(pose: PoseVector, sigma_phi_sq: float, sigma_theta_sq: float, rng: np.random.Generator) -> PoseVector:
    """One spherical-noise draw applied to every joint of a posture."""
    settings = AugmentSettings(sigma_phi_sq=sigma_phi_sq, sigma_theta_sq=sigma_theta_sq, count=2)
    return features_to_pose(augment_posture(pose, settings, rng)[1])


class SimulatedSession(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: int
    trial: int
    split: Optional[str] = None
    truth: PoseVector
    streams: Dict[str, SensorModuleStream]


def simulate_session(
    pose: PoseVector,
    label: int,
    trial: int = 1,
    duration_s: float = 15.0,
    rate_hz: float = config.DEFAULT_RATE_HZ,
    noise: ImuNoiseModel = ImuNoiseModel(),
    sway_deg: float = 2.0,
    seed: int = 0,
    split: Optional[str] = None,
) -> SimulatedSession:
    trajectory_seq, *module_seqs = np.random.SeedSequence(seed).spawn(1 + len(MODULE_IDS))
    t, parent, child = limb_trajectories(pose, duration_s, rate_hz, sway_deg, int(trajectory_seq.generate_state(1)[0]))
    streams = {
        module_id: synthesize_imu_streams(
            parent[j], child[j], t, module_id, noise, int(module_seqs[j].generate_state(1)[0])
        )
        for j, module_id in enumerate(MODULE_IDS)
    }
    return SimulatedSession(label=label, trial=trial, split=split, truth=pose, streams=streams)


def simulate_sessions(
    postures: PostureSetManifest,
    trials: int = 2,
    duration_s: float = 15.0,
    rate_hz: float = config.DEFAULT_RATE_HZ,
    noise: ImuNoiseModel = ImuNoiseModel(),
    test_axis_sigma_sq: float = 800.0,
    test_angle_sigma_sq: float = 0.0,
    seed: int = 0,
) -> List[SimulatedSession]:
    """
    Every posture recorded `trials` times. One seeded trial per posture is the
    test recording and carries a systematic spherical perturbation of the pose;
    the others are training recordings of the canonical pose.
    """
    if trials < 2:
        raise InvalidInputError("at least two trials per posture are needed to split train and test")
    rng = np.random.default_rng(seed)
    sessions = []
    children = np.random.SeedSequence(seed).spawn(len(postures.postures) * trials)
    for p, posture in enumerate(postures.postures):
        test_trial = int(rng.integers(1, trials + 1))
        for trial in range(1, trials + 1):
            split = "test" if trial == test_trial else "train"
            pose = posture.pose
            if split == "test":
                pose = perturb_pose(pose, test_axis_sigma_sq, test_angle_sigma_sq, rng)
            child = children[p * trials + trial - 1]
            sessions.append(simulate_session(
                pose, posture.label, trial, duration_s, rate_hz, noise,
                seed=int(child.generate_state(1)[0]), split=split,
            ))
    logger.info(f"Simulated {len(sessions)} sessions for {len(postures.postures)} postures")
    return sessions

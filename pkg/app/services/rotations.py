"""
Rotation algebra shared by the kinematics, fusion and augmentation services.

Quaternions are scalar-first arrays of shape (..., 4); every function broadcasts
over leading dimensions. Angles are radians unless a name says otherwise.
"""
import itertools
from typing import Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from app.errors import InvalidInputError
from app.models import UnitQuaternion

QuatLike = Union[UnitQuaternion, np.ndarray]

DEGENERATE_ANGLE = 1e-8
DEGENERATE_AXIS = np.array([0.0, 0.0, 1.0])
EULER_ORDERS = frozenset("".join(p) for p in itertools.permutations("XYZ"))


def as_quat(q: QuatLike) -> np.ndarray:
    if isinstance(q, UnitQuaternion):
        return q.as_array()
    arr = np.asarray(q, dtype=float)
    if arr.shape[-1] != 4:
        raise InvalidInputError(f"expected quaternion array with last dimension 4, got {arr.shape}")
    return arr


def normalize(q: QuatLike) -> np.ndarray:
    q = as_quat(q)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonicalize(q: QuatLike) -> np.ndarray:
    """Flip sign so that w >= 0 (q and -q are the same rotation)."""
    q = as_quat(q)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_multiply(a: QuatLike, b: QuatLike) -> np.ndarray:
    """Hamilton product a ⊗ b, renormalized."""
    a, b = as_quat(a), as_quat(b)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    out = np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)
    return normalize(out)


def quat_conjugate(q: QuatLike) -> np.ndarray:
    return as_quat(q) * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: QuatLike) -> np.ndarray:
    w, x, y, z = np.moveaxis(normalize(q), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def quat_rotate(q: QuatLike, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by q."""
    return np.einsum("...ij,...j->...i", quat_to_matrix(q), np.asarray(v, dtype=float))


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns canonical quaternions."""
    R = np.asarray(R, dtype=float)
    r00, r11, r22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    trace = r00 + r11 + r22
    with np.errstate(divide="ignore", invalid="ignore"):
        s0 = 2.0 * np.sqrt(np.maximum(1.0 + trace, 0.0))
        s1 = 2.0 * np.sqrt(np.maximum(1.0 + r00 - r11 - r22, 0.0))
        s2 = 2.0 * np.sqrt(np.maximum(1.0 - r00 + r11 - r22, 0.0))
        s3 = 2.0 * np.sqrt(np.maximum(1.0 - r00 - r11 + r22, 0.0))
        candidates = np.stack([
            np.stack([0.25 * s0, (R[..., 2, 1] - R[..., 1, 2]) / s0,
                      (R[..., 0, 2] - R[..., 2, 0]) / s0, (R[..., 1, 0] - R[..., 0, 1]) / s0], axis=-1),
            np.stack([(R[..., 2, 1] - R[..., 1, 2]) / s1, 0.25 * s1,
                      (R[..., 0, 1] + R[..., 1, 0]) / s1, (R[..., 0, 2] + R[..., 2, 0]) / s1], axis=-1),
            np.stack([(R[..., 0, 2] - R[..., 2, 0]) / s2, (R[..., 0, 1] + R[..., 1, 0]) / s2,
                      0.25 * s2, (R[..., 1, 2] + R[..., 2, 1]) / s2], axis=-1),
            np.stack([(R[..., 1, 0] - R[..., 0, 1]) / s3, (R[..., 0, 2] + R[..., 2, 0]) / s3,
                      (R[..., 1, 2] + R[..., 2, 1]) / s3, 0.25 * s3], axis=-1),
        ], axis=-2)
    choice = np.argmax(np.stack([trace, r00, r11, r22], axis=-1), axis=-1)
    index = np.repeat(choice[..., None, None], 4, axis=-1)
    q = np.take_along_axis(candidates, index, axis=-2)[..., 0, :]
    return canonicalize(normalize(q))


def quat_to_axis_angle(q: QuatLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    Canonical axis-angle form: angle in [0, pi], unit axis.
    Angles below 1e-8 map to the axis (0, 0, 1) with angle 0.
    """
    q = canonicalize(normalize(q))
    vec = q[..., 1:]
    vnorm = np.linalg.norm(vec, axis=-1)
    angle = 2.0 * np.arctan2(vnorm, q[..., 0])
    degenerate = angle < DEGENERATE_ANGLE
    with np.errstate(divide="ignore", invalid="ignore"):
        axis = vec / vnorm[..., None]
    axis = np.where(degenerate[..., None], DEGENERATE_AXIS, axis)
    angle = np.where(degenerate, 0.0, angle)
    return axis, angle


def axis_angle_to_quat(axis: np.ndarray, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)
    q = np.concatenate([np.cos(half)[..., None], axis * np.sin(half)[..., None]], axis=-1)
    return canonicalize(normalize(q))


def cartesian_to_spherical_axis(axis: np.ndarray, angle) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit axis + angle (rad) -> polar, azimuth, angle, all in degrees."""
    axis = np.asarray(axis, dtype=float)
    z = np.clip(axis[..., 2], -1.0, 1.0)
    polar = np.degrees(np.arccos(z))
    azimuth = np.mod(np.degrees(np.arctan2(axis[..., 1], axis[..., 0])), 360.0)
    azimuth = np.where(azimuth >= 360.0, azimuth - 360.0, azimuth)
    at_pole = np.abs(z) >= 1.0 - 1e-12
    azimuth = np.where(at_pole, 0.0, azimuth)
    return polar, azimuth, np.degrees(np.asarray(angle, dtype=float))


def spherical_to_cartesian_axis(polar_deg, azimuth_deg, angle_deg) -> Tuple[np.ndarray, np.ndarray]:
    p = np.radians(np.asarray(polar_deg, dtype=float))
    a = np.radians(np.asarray(azimuth_deg, dtype=float))
    axis = np.stack([np.sin(p) * np.cos(a), np.sin(p) * np.sin(a), np.cos(p)], axis=-1)
    return axis, np.radians(np.asarray(angle_deg, dtype=float))


def elementary_rotation(axis: str, angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    if axis == "X":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == "Y":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == "Z":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise InvalidInputError(f"unknown rotation axis '{axis}'")


def euler_to_rotation(angles_deg, order: str) -> np.ndarray:
    """
    Intrinsic composition in channel order: for order "ZYX" the result is
    Rz(a0) @ Ry(a1) @ Rx(a2), as BVH channel semantics prescribe.
    """
    if order not in EULER_ORDERS:
        raise InvalidInputError(f"unknown rotation order '{order}'")
    R = np.eye(3)
    for letter, angle in zip(order, np.radians(np.asarray(angles_deg, dtype=float))):
        R = R @ elementary_rotation(letter, angle)
    return R


def relative_quat(q_parent_to_E: QuatLike, q_child_to_E: QuatLike) -> np.ndarray:
    """conj(child) ⊗ parent; child ⊗ result recovers parent."""
    return canonicalize(quat_multiply(quat_conjugate(q_child_to_E), q_parent_to_E))


def angular_offset(q_a: QuatLike, q_b: QuatLike) -> np.ndarray:
    """Rotation distance in [0, pi]; antipodal representations give 0."""
    err = quat_multiply(quat_conjugate(q_a), q_b)
    w = np.clip(np.abs(err[..., 0]), 0.0, 1.0)
    return 2.0 * np.arctan2(np.linalg.norm(err[..., 1:], axis=-1), w)


def align_hemisphere(seq: np.ndarray) -> np.ndarray:
    """Flip signs along the first axis so consecutive quaternions share a hemisphere."""
    seq = np.array(as_quat(seq), dtype=float, copy=True)
    if seq.ndim < 2 or len(seq) < 2:
        return seq
    dots = np.sum(seq[:-1] * seq[1:], axis=-1)
    flips = np.cumprod(np.where(dots < 0.0, -1.0, 1.0), axis=0)
    seq[1:] *= flips[..., None]
    return seq


def nlerp(a: QuatLike, b: QuatLike, t) -> np.ndarray:
    a, b = as_quat(a), as_quat(b)
    b = np.where(np.sum(a * b, axis=-1, keepdims=True) < 0.0, -b, b)
    t = np.asarray(t, dtype=float)[..., None]
    return normalize((1.0 - t) * a + t * b)


def quat_log(q: QuatLike) -> np.ndarray:
    """Rotation vector (axis * angle)."""
    axis, angle = quat_to_axis_angle(q)
    return axis * angle[..., None]


def quat_exp(rotvec: np.ndarray) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1)
    half = 0.5 * angle
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(angle > DEGENERATE_ANGLE, np.sin(half) / angle, 0.5)
    return normalize(np.concatenate([np.cos(half)[..., None], rotvec * scale[..., None]], axis=-1))


class RigidTransform(BaseModel):
    """Rotation (3x3) plus translation; composes as self ∘ other."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    rotation: np.ndarray
    translation: np.ndarray

    @field_validator("rotation")
    @classmethod
    def orthonormal(cls, R: np.ndarray) -> np.ndarray:
        R = np.asarray(R, dtype=float)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        return R

    @field_validator("translation")
    @classmethod
    def vector3(cls, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float).reshape(-1)
        if t.shape != (3,):
            raise ValueError(f"translation must have 3 components, got {t.shape}")
        return t

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            rotation=self.rotation @ other.rotation,
            translation=self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(rotation=self.rotation.T, translation=-self.rotation.T @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

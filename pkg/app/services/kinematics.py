"""
BVH parsing/emission, forward kinematics and virtual pose characterization.
"""
import logging
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app.errors import BvhParseError, InvalidInputError
from app.models import JointSet, PoseVector, UnitQuaternion
from app.services.rotations import RigidTransform, euler_to_rotation, matrix_to_quat

logger = logging.getLogger(__name__)

POSITION_TAGS = ("Xposition", "Yposition", "Zposition")
ROTATION_TAGS = ("Xrotation", "Yrotation", "Zrotation")
CHANNEL_TAGS = frozenset(POSITION_TAGS + ROTATION_TAGS)


class BvhJoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    parent: int
    offset: Tuple[float, float, float]
    channels: Tuple[str, ...] = ()
    end_site: bool = False

    @property
    def rotation_order(self) -> str:
        return "".join(tag[0] for tag in self.channels if tag in ROTATION_TAGS)


class SkeletonAnimation(BaseModel):
    """Joint hierarchy in declaration order plus an (F, C) matrix of channel values."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    joints: Tuple[BvhJoint, ...]
    frames: np.ndarray
    frame_time: float

    @model_validator(mode="after")
    def consistent(self) -> "SkeletonAnimation":
        if not self.joints or self.joints[0].parent != -1:
            raise ValueError("the first joint must be the root")
        for index, joint in enumerate(self.joints[1:], start=1):
            if not 0 <= joint.parent < index:
                raise ValueError(f"joint '{joint.name}' must follow its parent")
        channel_count = sum(len(j.channels) for j in self.joints)
        if self.frames.ndim != 2 or self.frames.shape[1] != channel_count:
            raise ValueError(f"frames must be (F, {channel_count}), got {self.frames.shape}")
        return self

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def channel_slices(self) -> List[slice]:
        slices, start = [], 0
        for joint in self.joints:
            slices.append(slice(start, start + len(joint.channels)))
            start += len(joint.channels)
        return slices

    def joint_index(self, name: str) -> int:
        for index, joint in enumerate(self.joints):
            if joint.name == name:
                return index
        raise InvalidInputError(f"joint '{name}' not found in skeleton")

    def children(self, index: int) -> List[int]:
        return [i for i, j in enumerate(self.joints) if j.parent == index]


# --- Parsing ---
def _float(token: str, line: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise BvhParseError(f"expected a number, got '{token}'", line) from None


class _HierarchyParser:
    def __init__(self, tokens: List[Tuple[str, int]]):
        self.tokens = tokens
        self.pos = 0
        self.joints: List[BvhJoint] = []

    def _next(self, expected: Optional[str] = None) -> Tuple[str, int]:
        if self.pos >= len(self.tokens):
            last = self.tokens[-1][1] if self.tokens else 1
            raise BvhParseError(f"unexpected end of hierarchy, expected '{expected}'", last)
        token, line = self.tokens[self.pos]
        if expected is not None and token != expected:
            raise BvhParseError(f"expected '{expected}', got '{token}'", line)
        self.pos += 1
        return token, line

    def _peek(self) -> Optional[str]:
        return self.tokens[self.pos][0] if self.pos < len(self.tokens) else None

    def parse(self) -> List[BvhJoint]:
        self._next("HIERARCHY")
        self._next("ROOT")
        self._joint(parent=-1)
        if self.pos != len(self.tokens):
            token, line = self.tokens[self.pos]
            raise BvhParseError(f"unexpected token '{token}' after root joint", line)
        return self.joints

    def _offset(self) -> Tuple[float, float, float]:
        self._next("OFFSET")
        return tuple(_float(*self._next()) for _ in range(3))

    def _joint(self, parent: int) -> None:
        name, _ = self._next()
        self._next("{")
        offset = self._offset()
        channels: Tuple[str, ...] = ()
        if self._peek() == "CHANNELS":
            self._next("CHANNELS")
            count_token, line = self._next()
            if not count_token.isdigit():
                raise BvhParseError(f"invalid channel count '{count_token}'", line)
            tags = []
            for _ in range(int(count_token)):
                tag, tag_line = self._next()
                if tag not in CHANNEL_TAGS:
                    raise BvhParseError(f"unknown channel tag '{tag}'", tag_line)
                tags.append(tag)
            channels = tuple(tags)
        index = len(self.joints)
        self.joints.append(BvhJoint(name=name, parent=parent, offset=offset, channels=channels))
        while self._peek() != "}":
            keyword, line = self._next()
            if keyword == "JOINT":
                self._joint(parent=index)
            elif keyword == "End":
                self._next("Site")
                self._next("{")
                end_offset = self._offset()
                self._next("}")
                self.joints.append(BvhJoint(
                    name=f"{name}_End", parent=index, offset=end_offset, end_site=True,
                ))
            else:
                raise BvhParseError(f"expected 'JOINT', 'End Site' or '}}', got '{keyword}'", line)
        self._next("}")


def _header_value(line: str, key: str, lineno: int) -> str:
    if not line.startswith(key):
        raise BvhParseError(f"expected '{key}'", lineno)
    return line[len(key):].strip()


def parse_bvh(text: str) -> SkeletonAnimation:
    """Parse a BVH document. Joint and channel order are kept as declared."""
    lines = text.splitlines()
    motion_at = next((i for i, l in enumerate(lines) if l.strip() == "MOTION"), None)
    if motion_at is None:
        raise BvhParseError("missing MOTION section", len(lines) or 1)

    tokens = [(tok, i + 1) for i, l in enumerate(lines[:motion_at]) for tok in l.split()]
    joints = _HierarchyParser(tokens).parse()
    channel_count = sum(len(j.channels) for j in joints)

    body = [(i + 1, l.strip()) for i, l in enumerate(lines[motion_at + 1:], start=motion_at + 1) if l.strip()]
    if len(body) < 2:
        raise BvhParseError("missing 'Frames:' or 'Frame Time:' header", motion_at + 1)
    frames_line, frames_text = body[0]
    count_text = _header_value(frames_text, "Frames:", frames_line)
    if not count_text.isdigit():
        raise BvhParseError(f"invalid frame count '{count_text}'", frames_line)
    time_line, time_text = body[1]
    frame_time = _float(_header_value(time_text, "Frame Time:", time_line), time_line)

    rows = []
    for lineno, row_text in body[2:]:
        values = row_text.split()
        if len(values) != channel_count:
            raise BvhParseError(
                f"frame row {len(rows) + 1} has {len(values)} values, expected {channel_count}", lineno
            )
        rows.append([_float(v, lineno) for v in values])
    if len(rows) != int(count_text):
        raise BvhParseError(f"declared {count_text} frames, found {len(rows)}", frames_line)

    frames = np.array(rows, dtype=float).reshape(len(rows), channel_count)
    logger.info(f"Parsed BVH with {len(joints)} joints and {len(rows)} frames")
    return SkeletonAnimation(joints=tuple(joints), frames=frames, frame_time=frame_time)


def write_bvh(anim: SkeletonAnimation) -> str:
    out: List[str] = ["HIERARCHY"]

    def emit(index: int, depth: int) -> None:
        joint = anim.joints[index]
        pad = "  " * depth
        offset = " ".join(f"{v:.6f}" for v in joint.offset)
        if joint.end_site:
            out.extend([f"{pad}End Site", f"{pad}{{", f"{pad}  OFFSET {offset}", f"{pad}}}"])
            return
        out.append(f"{pad}{'ROOT' if joint.parent == -1 else 'JOINT'} {joint.name}")
        out.append(f"{pad}{{")
        out.append(f"{pad}  OFFSET {offset}")
        if joint.channels:
            out.append(f"{pad}  CHANNELS {len(joint.channels)} {' '.join(joint.channels)}")
        for child in anim.children(index):
            emit(child, depth + 1)
        out.append(f"{pad}}}")

    emit(0, 0)
    out.extend(["MOTION", f"Frames: {anim.num_frames}", f"Frame Time: {anim.frame_time:.6f}"])
    out.extend(" ".join(f"{v:.6f}" for v in row) for row in anim.frames)
    return "\n".join(out) + "\n"


# --- Forward kinematics ---
def local_transform(joint: BvhJoint, values: np.ndarray) -> RigidTransform:
    translation = np.array(joint.offset, dtype=float)
    angles = []
    for tag, value in zip(joint.channels, values):
        if tag in POSITION_TAGS:
            translation[POSITION_TAGS.index(tag)] += value
        else:
            angles.append(value)
    order = joint.rotation_order
    rotation = euler_to_rotation(angles, order) if order else np.eye(3)
    return RigidTransform(rotation=rotation, translation=translation)


def forward_kinematics(anim: SkeletonAnimation, frame: int) -> Dict[str, RigidTransform]:
    """Global transform of every joint: parent_global ∘ local(offset, channels)."""
    if not 0 <= frame < anim.num_frames:
        raise InvalidInputError(f"frame {frame} outside [0, {anim.num_frames})")
    row = anim.frames[frame]
    globals_: List[RigidTransform] = []
    for joint, channels in zip(anim.joints, anim.channel_slices()):
        local = local_transform(joint, row[channels])
        globals_.append(local if joint.parent == -1 else globals_[joint.parent] @ local)
    return {joint.name: transform for joint, transform in zip(anim.joints, globals_)}


def relative_transform(parent_global: RigidTransform, child_global: RigidTransform) -> RigidTransform:
    return parent_global.inverse() @ child_global


def extract_rotation(t: RigidTransform) -> UnitQuaternion:
    return UnitQuaternion.from_array(matrix_to_quat(t.rotation))


def _is_ancestor(anim: SkeletonAnimation, ancestor: int, index: int) -> bool:
    while index != -1:
        index = anim.joints[index].parent
        if index == ancestor:
            return True
    return False


def characterize_pose_virtual(
    anim: SkeletonAnimation, frame: int, joints: JointSet = JointSet()
) -> PoseVector:
    """Relative parent->child rotation of each extremity joint, right wrist first."""
    for pair in joints.pairs():
        parent, child = anim.joint_index(pair.parent), anim.joint_index(pair.child)
        if not _is_ancestor(anim, parent, child):
            raise InvalidInputError(f"'{pair.parent}' is not an ancestor of '{pair.child}'")
    transforms = forward_kinematics(anim, frame)
    return PoseVector(joints=tuple(
        extract_rotation(relative_transform(transforms[pair.parent], transforms[pair.child]))
        for pair in joints.pairs()
    ))


def hold_midpoints(postures: int, hold: int, transition: int) -> List[int]:
    return [k * (hold + transition) + hold // 2 for k in range(postures)]


def characterize_sequence(
    anim: SkeletonAnimation, frames: Iterable[int], joints: JointSet = JointSet()
) -> List[PoseVector]:
    return [characterize_pose_virtual(anim, frame, joints) for frame in frames]


"""Codecs between raw pose streams and per-frame motion feature formats.

Five formats are supported:

========== ===== ==========================================================
name       width per-frame layout (column ranges)
========== ===== ==========================================================
smpl-d135  135   root 9 (6D rot, XZ vel, height) | 21x6D joint rotations
smpl-d130  130   21x6D rotations | root 4 (yaw ang. vel, XZ vel, height)
smpl-d263  263   d130 layout | 63 rel. positions | 66 velocities | 4 contacts
smpl-d268  268   d135 layout | 63 rel. positions | 66 velocities | 4 contacts
h3d-d263   263   root 4 | 63 rel. positions | 21x6D rotations | 66 velocities
                 | 4 contacts
========== ===== ==========================================================

Velocities are world-frame forward differences in meters/frame; the final
frame repeats the penultimate difference so T differences fill T slots.
Relative positions are root-centered (root position subtracted, world
orientation kept).  The h3d-d263 encoder copies rotations from the stream
and fills the positional blocks from forward kinematics; no inverse
kinematics is ever run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import FormatMismatch, ShapeMismatch, UnsupportedFormat, WrongJointCount
from .skeleton import (
    Skeleton,
    default_skeleton,
    fk_frames,
    matrix_to_sixd,
    sixd_to_matrix,
)

FORMAT_WIDTHS = {
    "h3d-d263": 263,
    "smpl-d130": 130,
    "smpl-d135": 135,
    "smpl-d263": 263,
    "smpl-d268": 268,
}

# stable u32 tags for the MOTB file header
FORMAT_TAGS = {name: i for i, name in enumerate(
    ["h3d-d263", "smpl-d130", "smpl-d135", "smpl-d263", "smpl-d268"])}
TAG_FORMATS = {v: k for k, v in FORMAT_TAGS.items()}

# column ranges of the named blocks within each format
FORMAT_LAYOUTS = {
    "smpl-d135": {"root": slice(0, 9), "rot": slice(9, 135)},
    "smpl-d130": {"rot": slice(0, 126), "root": slice(126, 130)},
    "smpl-d263": {"rot": slice(0, 126), "root": slice(126, 130),
                  "pos": slice(130, 193), "vel": slice(193, 259),
                  "contact": slice(259, 263)},
    "smpl-d268": {"root": slice(0, 9), "rot": slice(9, 135),
                  "pos": slice(135, 198), "vel": slice(198, 264),
                  "contact": slice(264, 268)},
    "h3d-d263": {"root": slice(0, 4), "pos": slice(4, 67),
                 "rot": slice(67, 193), "vel": slice(193, 259),
                 "contact": slice(259, 263)},
}

DEFAULT_VEL_THRESHOLD = 0.002   # m/frame
DEFAULT_HEIGHT_THRESHOLD = 0.05  # m


def normalize_format(name: str) -> str:
    key = str(name).strip().lower()
    if key not in FORMAT_WIDTHS:
        raise UnsupportedFormat(f"unknown motion format {name!r}")
    return key


@dataclass
class PoseStream:
    """Raw motion: per-frame root transform plus local joint rotations."""

    fps: int
    root_rotation: np.ndarray   # (T, 3, 3)
    root_position: np.ndarray   # (T, 3)
    joint_rotation: np.ndarray  # (T, J-1, 3, 3)

    def __post_init__(self):
        self.root_rotation = np.asarray(self.root_rotation, dtype=np.float64)
        self.root_position = np.asarray(self.root_position, dtype=np.float64)
        self.joint_rotation = np.asarray(self.joint_rotation, dtype=np.float64)
        t = self.root_rotation.shape[0]
        if t < 1:
            raise ShapeMismatch("pose stream needs at least one frame")
        if (self.root_rotation.shape != (t, 3, 3)
                or self.root_position.shape != (t, 3)
                or self.joint_rotation.ndim != 4
                or self.joint_rotation.shape[0] != t
                or self.joint_rotation.shape[2:] != (3, 3)):
            raise ShapeMismatch("inconsistent pose stream arrays")

    @property
    def frame_count(self) -> int:
        return self.root_rotation.shape[0]

    @property
    def joint_count(self) -> int:
        return self.joint_rotation.shape[1] + 1


@dataclass
class MotionSequence:
    """A T x D frame-major feature matrix with a format tag and frame rate."""

    format: str
    fps: int
    data: np.ndarray

    def __post_init__(self):
        self.format = normalize_format(self.format)
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ShapeMismatch("motion data must be a (T, D) matrix with T >= 1")
        width = FORMAT_WIDTHS[self.format]
        if self.data.shape[1] != width:
            raise FormatMismatch(
                f"{self.format} needs width {width}, got {self.data.shape[1]}")
        if not np.isfinite(self.data).all():
            raise ShapeMismatch("motion data contains non-finite values")

    @property
    def frame_count(self) -> int:
        return self.data.shape[0]


def _require_22(p: PoseStream):
    if p.joint_count != 22:
        raise WrongJointCount(f"codec expects 22 joints, got {p.joint_count}")


def _forward_diff(x: np.ndarray) -> np.ndarray:
    """Per-frame forward difference; final frame repeats the previous one."""
    if x.shape[0] == 1:
        return np.zeros_like(x)
    d = np.empty_like(x)
    d[:-1] = x[1:] - x[:-1]
    d[-1] = d[-2]
    return d


def _root_yaw(root_rotation: np.ndarray) -> np.ndarray:
    """Heading angle from the root's forward (+Z) axis projected onto XZ."""
    fwd = root_rotation[:, :, 2]
    return np.arctan2(fwd[:, 0], fwd[:, 2])


def derive_foot_contact(positions, vel_threshold: float = DEFAULT_VEL_THRESHOLD,
                        height_threshold: float = DEFAULT_HEIGHT_THRESHOLD,
                        foot_joints=(7, 8, 10, 11)) -> np.ndarray:
    """Binary contact flags (T, 4) for the given foot joints.

    A foot is in contact when it moves slower than ``vel_threshold``
    (m/frame, forward difference) and sits below ``height_threshold`` (m).
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3 or positions.shape[2] != 3:
        raise ShapeMismatch("positions must be (T, J, 3)")
    feet = positions[:, list(foot_joints)]
    speed = np.linalg.norm(_forward_diff(feet), axis=-1)
    low = feet[:, :, 1] < height_threshold
    slow = speed < vel_threshold
    return (low & slow).astype(np.float64)


def _blocks(p: PoseStream, skel: Skeleton):
    """Shared per-frame blocks used by the redundant formats."""
    positions = fk_frames(skel, p.root_rotation, p.root_position, p.joint_rotation)
    rel = positions[:, 1:] - positions[:, :1]
    vel = _forward_diff(positions)
    contact = derive_foot_contact(positions, foot_joints=skel.foot_joints or (7, 8, 10, 11))
    t = p.frame_count
    return (rel.reshape(t, 63), vel.reshape(t, 66), contact, positions)


def _root9(p: PoseStream) -> np.ndarray:
    rot6 = matrix_to_sixd(p.root_rotation)
    vel_xz = _forward_diff(p.root_position)[:, [0, 2]]
    height = p.root_position[:, 1:2]
    return np.concatenate([rot6, vel_xz, height], axis=1)


def _root4(p: PoseStream) -> np.ndarray:
    yaw = _root_yaw(p.root_rotation)
    ang = _forward_diff(_unwrap_for_diff(yaw)[:, None])[:, 0:1]
    vel_xz = _forward_diff(p.root_position)[:, [0, 2]]
    height = p.root_position[:, 1:2]
    return np.concatenate([ang, vel_xz, height], axis=1)


def _unwrap_for_diff(yaw: np.ndarray) -> np.ndarray:
    # unwrap so consecutive differences stay in (-pi, pi]
    return np.unwrap(yaw)


def _rot126(p: PoseStream) -> np.ndarray:
    return matrix_to_sixd(p.joint_rotation).reshape(p.frame_count, 126)


def encode_smpl_d135(p: PoseStream) -> MotionSequence:
    """The compact lossless format: 9 root dims + 21x6D joint rotations."""
    _require_22(p)
    data = np.concatenate([_root9(p), _rot126(p)], axis=1)
    return MotionSequence(format="smpl-d135", fps=p.fps, data=data)


def encode_format(p: PoseStream, fmt: str, skel: Skeleton | None = None) -> MotionSequence:
    """Encode a 22-joint stream into any supported format."""
    fmt = normalize_format(fmt)
    _require_22(p)
    if fmt == "smpl-d135":
        return encode_smpl_d135(p)
    if fmt == "smpl-d130":
        data = np.concatenate([_rot126(p), _root4(p)], axis=1)
        return MotionSequence(format=fmt, fps=p.fps, data=data)
    skel = skel or default_skeleton()
    rel, vel, contact, _ = _blocks(p, skel)
    if fmt == "smpl-d263":
        data = np.concatenate([_rot126(p), _root4(p), rel, vel, contact], axis=1)
    elif fmt == "smpl-d268":
        data = np.concatenate([_root9(p), _rot126(p), rel, vel, contact], axis=1)
    elif fmt == "h3d-d263":
        data = np.concatenate([_root4(p), rel, _rot126(p), vel, contact], axis=1)
    else:  # pragma: no cover - normalize_format already vetted the name
        raise UnsupportedFormat(fmt)
    return MotionSequence(format=fmt, fps=p.fps, data=data)


def _integrate_xz(vel_xz: np.ndarray, initial_xz) -> np.ndarray:
    init = np.asarray(initial_xz, dtype=np.float64)
    if init.shape != (2,):
        raise ShapeMismatch("initial_xz must be a 2-vector")
    t = vel_xz.shape[0]
    pos = np.zeros((t, 2))
    if t > 1:
        pos[1:] = np.cumsum(vel_xz[:-1], axis=0)
    return pos + init


def decode_smpl_d135(m: MotionSequence, initial_xz=(0.0, 0.0)) -> PoseStream:
    """Invert :func:`encode_smpl_d135`.

    The root XZ path is the cumulative sum of the stored velocities
    starting at ``initial_xz``; the stored final-frame velocity is never
    consumed (it duplicates the penultimate difference by convention).
    """
    if m.format != "smpl-d135":
        raise FormatMismatch(f"expected smpl-d135, got {m.format}")
    return _decode_rotfull(m, initial_xz, FORMAT_LAYOUTS["smpl-d135"])


def decode_format(m: MotionSequence, initial_xz=(0.0, 0.0), initial_yaw: float = 0.0) -> PoseStream:
    """Decode any format back to a pose stream.

    Formats that store only yaw angular velocity (smpl-d130, smpl-d263,
    h3d-d263) lose root roll/pitch and the absolute heading; their root
    rotation is reconstructed as a pure yaw starting at ``initial_yaw``.
    """
    layout = FORMAT_LAYOUTS[m.format]
    if m.format in ("smpl-d135", "smpl-d268"):
        return _decode_rotfull(m, initial_xz, layout)
    root4 = m.data[:, layout["root"]]
    yaw = initial_yaw + np.concatenate([[0.0], np.cumsum(root4[:-1, 0])])
    cos, sin = np.cos(yaw), np.sin(yaw)
    zero, one = np.zeros_like(yaw), np.ones_like(yaw)
    root_rot = np.stack([
        np.stack([cos, zero, sin], axis=-1),
        np.stack([zero, one, zero], axis=-1),
        np.stack([-sin, zero, cos], axis=-1),
    ], axis=-2)
    xz = _integrate_xz(root4[:, 1:3], initial_xz)
    root_pos = np.stack([xz[:, 0], root4[:, 3], xz[:, 1]], axis=1)
    joint_rot = sixd_to_matrix(m.data[:, layout["rot"]].reshape(-1, 21, 6))
    return PoseStream(fps=m.fps, root_rotation=root_rot, root_position=root_pos,
                      joint_rotation=joint_rot)


def _decode_rotfull(m: MotionSequence, initial_xz, layout) -> PoseStream:
    root9 = m.data[:, layout["root"]]
    root_rot = sixd_to_matrix(root9[:, :6])
    xz = _integrate_xz(root9[:, 6:8], initial_xz)
    root_pos = np.stack([xz[:, 0], root9[:, 8], xz[:, 1]], axis=1)
    joint_rot = sixd_to_matrix(m.data[:, layout["rot"]].reshape(-1, 21, 6))
    return PoseStream(fps=m.fps, root_rotation=root_rot, root_position=root_pos,
                      joint_rotation=joint_rot)


def to_joint_positions(m: MotionSequence, skel: Skeleton | None = None,
                       initial_xz=(0.0, 0.0)) -> np.ndarray:
    """Global joint positions (T, 22, 3).

    SMPL-family formats are decoded and run through forward kinematics;
    h3d-d263 reads its stored positional block directly (adding the
    integrated root path back), since decoding it through FK would discard
    the information the format chose to make explicit.
    """
    skel = skel or default_skeleton()
    if m.format == "h3d-d263":
        layout = FORMAT_LAYOUTS["h3d-d263"]
        root4 = m.data[:, layout["root"]]
        xz = _integrate_xz(root4[:, 1:3], initial_xz)
        root_pos = np.stack([xz[:, 0], root4[:, 3], xz[:, 1]], axis=1)
        rel = m.data[:, layout["pos"]].reshape(-1, 21, 3)
        return np.concatenate([root_pos[:, None], rel + root_pos[:, None]], axis=1)
    p = decode_format(m, initial_xz)
    return fk_frames(skel, p.root_rotation, p.root_position, p.joint_rotation)


def rest_pose_stream(frames: int, fps: int = 20, root_height: float | None = None,
                     skel: Skeleton | None = None) -> PoseStream:
    """A static standing pose repeated ``frames`` times (identity rotations)."""
    from .skeleton import REST_ROOT_HEIGHT

    skel = skel or default_skeleton()
    height = REST_ROOT_HEIGHT if root_height is None else root_height
    eye = np.broadcast_to(np.eye(3), (frames, 3, 3)).copy()
    joints = np.broadcast_to(np.eye(3), (frames, skel.joint_count - 1, 3, 3)).copy()
    pos = np.tile(np.array([0.0, height, 0.0]), (frames, 1))
    return PoseStream(fps=fps, root_rotation=eye, root_position=pos, joint_rotation=joints)

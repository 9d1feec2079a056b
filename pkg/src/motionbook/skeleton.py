"""Rotation representations and forward kinematics.

Rotations travel as 3x3 matrices internally; the 6D encoding (first two
columns of the matrix, column-major) is used by the motion feature
formats because it is continuous and exactly invertible.  All functions
are pure and accept batched leading dimensions where noted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DegenerateRotation, NotARotation, ShapeMismatch

_EPS_DEGENERATE = 1e-9
_TOL_ORTHO = 1e-4


def sixd_to_matrix(r) -> np.ndarray:
    """Decode a 6D rotation (..., 6) into rotation matrices (..., 3, 3).

    Gram-Schmidt: normalize the first stored column, orthogonalize and
    normalize the second, complete with their cross product.  Raises
    DegenerateRotation when either normalization would divide by a norm
    below 1e-9.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise ShapeMismatch(f"6D rotation needs last axis 6, got {r.shape}")
    a, b = r[..., :3], r[..., 3:]
    na = np.linalg.norm(a, axis=-1)
    if np.any(na < _EPS_DEGENERATE):
        raise DegenerateRotation("first 6D column has near-zero norm")
    x = a / na[..., None]
    residual = b - np.sum(x * b, axis=-1, keepdims=True) * x
    nr = np.linalg.norm(residual, axis=-1)
    if np.any(nr < _EPS_DEGENERATE):
        raise DegenerateRotation("second 6D column is parallel to the first")
    y = residual / nr[..., None]
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)


def matrix_to_sixd(m) -> np.ndarray:
    """Encode rotation matrices (..., 3, 3) as 6D vectors (..., 6)."""
    m = np.asarray(m, dtype=np.float64)
    _check_rotation(m, tol=_TOL_ORTHO)
    return np.swapaxes(m[..., :, :2], -1, -2).reshape(*m.shape[:-2], 6)


def _check_rotation(m: np.ndarray, tol: float, what: str = "matrix"):
    if m.shape[-2:] != (3, 3):
        raise ShapeMismatch(f"{what} must be (..., 3, 3), got {m.shape}")
    gram = np.swapaxes(m, -1, -2) @ m
    if np.max(np.abs(gram - np.eye(3))) > tol:
        raise NotARotation(f"{what} is not orthonormal within {tol}")
    if np.any(np.linalg.det(m) < 0):
        raise NotARotation(f"{what} has negative determinant")


def axis_angle_to_matrix(axis, angle) -> np.ndarray:
    """Rodrigues formula; ``axis`` (..., 3) need not be normalized."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    n = np.linalg.norm(axis, axis=-1, keepdims=True)
    u = np.where(n > 0, axis / np.where(n > 0, n, 1.0), 0.0)
    ux, uy, uz = u[..., 0], u[..., 1], u[..., 2]
    zero = np.zeros_like(ux)
    k = np.stack([
        np.stack([zero, -uz, uy], axis=-1),
        np.stack([uz, zero, -ux], axis=-1),
        np.stack([-uy, ux, zero], axis=-1),
    ], axis=-2)
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


@dataclass
class RootTransform:
    """Global orientation and position of the root joint."""

    rotation: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64)
        if self.position.shape != (3,):
            raise ShapeMismatch("root position must be a 3-vector")
        _check_rotation(self.rotation, tol=1e-5, what="root rotation")


@dataclass
class Skeleton:
    """Joint tree with rest-pose bone offsets in the parent frame (meters)."""

    name: str
    parents: np.ndarray
    offsets: np.ndarray
    foot_joints: list = field(default_factory=list)  # L heel, R heel, L toe, R toe

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        j = self.parents.shape[0]
        if j < 1 or self.parents[0] != -1:
            raise ShapeMismatch("parents[0] must be -1 (root)")
        for i in range(1, j):
            if not 0 <= self.parents[i] < i:
                raise ShapeMismatch(f"parent of joint {i} must precede it in the tree")
        if self.offsets.shape != (j, 3) or not np.isfinite(self.offsets).all():
            raise ShapeMismatch("offsets must be a finite (J, 3) array")

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    def save_json(self, path):
        doc = {"name": self.name, "parents": self.parents.tolist(),
               "offsets": self.offsets.tolist()}
        if self.foot_joints:
            doc["foot_joints"] = list(self.foot_joints)
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load_json(cls, path) -> "Skeleton":
        doc = json.loads(Path(path).read_text())
        return cls(name=doc["name"], parents=doc["parents"], offsets=doc["offsets"],
                   foot_joints=doc.get("foot_joints", []))


# 22-joint body skeleton (root + 21): SMPL body topology without the hands.
# Offsets are desk-crafted humanoid proportions placing the rest-pose toes
# on the ground plane (root height 0.915 m); +X is the person's left,
# +Y up, +Z forward.
_SMPL22_NAMES = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist",
]
_SMPL22_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19]
_SMPL22_OFFSETS = [
    [0.000, 0.000, 0.000],   # pelvis
    [0.090, -0.090, 0.000],  # l_hip
    [-0.090, -0.090, 0.000], # r_hip
    [0.000, 0.120, 0.000],   # spine1
    [0.000, -0.380, 0.000],  # l_knee
    [0.000, -0.380, 0.000],  # r_knee
    [0.000, 0.140, 0.000],   # spine2
    [0.000, -0.425, 0.000],  # l_ankle
    [0.000, -0.425, 0.000],  # r_ankle
    [0.000, 0.060, 0.000],   # spine3
    [0.000, 0.000, 0.130],   # l_foot
    [0.000, 0.000, 0.130],   # r_foot
    [0.000, 0.220, 0.000],   # neck
    [0.070, 0.150, 0.000],   # l_collar
    [-0.070, 0.150, 0.000],  # r_collar
    [0.000, 0.210, 0.000],   # head
    [0.100, 0.020, 0.000],   # l_shoulder
    [-0.100, 0.020, 0.000],  # r_shoulder
    [0.260, 0.000, 0.000],   # l_elbow
    [-0.260, 0.000, 0.000],  # r_elbow
    [0.250, 0.000, 0.000],   # l_wrist
    [-0.250, 0.000, 0.000],  # r_wrist
]

REST_ROOT_HEIGHT = 0.895  # puts both foot joints exactly on the ground plane

JOINT_NAMES = tuple(_SMPL22_NAMES)


def default_skeleton() -> Skeleton:
    """The built-in 22-joint body skeleton."""
    return Skeleton(name="smpl22", parents=_SMPL22_PARENTS, offsets=_SMPL22_OFFSETS,
                    foot_joints=[7, 8, 10, 11])


def forward_kinematics(skel: Skeleton, root: RootTransform, joint_rotations) -> np.ndarray:
    """Global joint positions (J, 3) for one frame.

    ``joint_rotations`` holds one local rotation matrix per non-root joint,
    ordered by joint index.
    """
    rots = np.asarray(joint_rotations, dtype=np.float64)
    if rots.shape != (skel.joint_count - 1, 3, 3):
        raise ShapeMismatch(
            f"expected {skel.joint_count - 1} joint rotations, got {rots.shape}")
    _check_rotation(rots, tol=_TOL_ORTHO, what="joint rotation")
    pos, _ = _fk(skel, root.rotation[None], root.position[None], rots[None])
    return pos[0]


def fk_frames(skel: Skeleton, root_rot, root_pos, joint_rot) -> np.ndarray:
    """Vectorized FK over T frames: returns positions (T, J, 3)."""
    root_rot = np.asarray(root_rot, dtype=np.float64)
    root_pos = np.asarray(root_pos, dtype=np.float64)
    joint_rot = np.asarray(joint_rot, dtype=np.float64)
    t = root_rot.shape[0]
    if root_pos.shape != (t, 3) or joint_rot.shape != (t, skel.joint_count - 1, 3, 3):
        raise ShapeMismatch("fk_frames: inconsistent frame counts or joint counts")
    pos, _ = _fk(skel, root_rot, root_pos, joint_rot)
    return pos


def _fk(skel, root_rot, root_pos, joint_rot):
    t, j = root_rot.shape[0], skel.joint_count
    pos = np.empty((t, j, 3))
    grot = np.empty((t, j, 3, 3))
    pos[:, 0] = root_pos
    grot[:, 0] = root_rot
    for k in range(1, j):
        p = skel.parents[k]
        pos[:, k] = pos[:, p] + np.einsum("tij,j->ti", grot[:, p], skel.offsets[k])
        grot[:, k] = grot[:, p] @ joint_rot[:, k - 1]
    return pos, grot

"""Grasp configurations and their flat 24-d vector encoding.

A grasp is a palm pose plus 15 finger joints. The rotation travels through
the flows as the first two columns of R (a 6-d continuous representation)
and is re-orthonormalized on decode, so the flows act on an unconstrained
R^24 = [translation(3), rotation6d(6), joints(15)].
"""

import dataclasses
from typing import Tuple

import numpy as np

from .errors import ContractError

GRASP_DIM = 24
N_JOINTS = 15
JOINT_MIN = 0.0
JOINT_MAX = 1.6  # radians


def rotation_to_6d(R: np.ndarray) -> np.ndarray:
    return np.concatenate([R[:, 0], R[:, 1]])


def rotation_from_6d(r6: np.ndarray) -> np.ndarray:
    """Gram-Schmidt decode; always returns a proper rotation."""
    a1, a2 = r6[:3].astype(np.float64), r6[3:6].astype(np.float64)
    n1 = np.linalg.norm(a1)
    b1 = a1 / n1 if n1 > 1e-9 else np.array([1.0, 0.0, 0.0])
    a2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(a2)
    if n2 > 1e-9:
        b2 = a2 / n2
    else:
        # a2 parallel to b1: pick any perpendicular direction
        helper = np.array([0.0, 1.0, 0.0]) if abs(b1[0]) > 0.9 else np.array([1.0, 0.0, 0.0])
        b2 = np.cross(b1, helper)
        b2 /= np.linalg.norm(b2)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


@dataclasses.dataclass
class GraspConfig:
    rotation: np.ndarray      # (3, 3) proper rotation, palm frame -> object frame
    translation: np.ndarray   # (3,) palm origin, canonical object frame (m)
    joints: np.ndarray        # (15,) radians

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ContractError("rotation must be (3,3) and translation (3,)")
        if self.joints.shape != (N_JOINTS,):
            raise ContractError(f"joints must have length {N_JOINTS}")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6 or np.linalg.det(self.rotation) < 0:
            raise ContractError("rotation is not orthonormal with det +1")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, rotation_to_6d(self.rotation), self.joints])


def grasp_from_vector(v: np.ndarray, clamp_joints: bool = True
                      ) -> Tuple[GraspConfig, int]:
    """Decode a flat vector; returns (grasp, number of joints clamped to limits)."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (GRASP_DIM,):
        raise ContractError(f"grasp vector must have length {GRASP_DIM}")
    R = rotation_from_6d(v[3:9])
    joints = v[9:]
    clamped = 0
    if clamp_joints:
        inside = (joints >= JOINT_MIN) & (joints <= JOINT_MAX)
        clamped = int((~inside).sum())
        joints = np.clip(joints, JOINT_MIN, JOINT_MAX)
    return GraspConfig(rotation=R, translation=v[:3].copy(), joints=joints), clamped

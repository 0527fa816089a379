"""Rigid transforms in SE(3)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ParameterError("transform has non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ParameterError("rotation is not in SO(3)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M, orthonormalize: bool = False) -> RigidTransform:
        M = np.asarray(M, dtype=np.float64)
        R = M[:3, :3]
        if orthonormalize:
            R = _orthonormalize(R)
        return cls(R, M[:3, 3])

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        R = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K
        return cls(_orthonormalize(R), translation)

    @classmethod
    def from_euler(cls, roll: float, pitch: float, yaw: float, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        """Z-Y-X (yaw, pitch, roll) rotation, angles in radians."""
        cr, sr, cp, sp, cy, sy = np.cos(roll), np.sin(roll), np.cos(pitch), np.sin(pitch), np.cos(yaw), np.sin(yaw)
        Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
        Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
        Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
        return cls(_orthonormalize(Rz @ Ry @ Rx), translation)

    @classmethod
    def random(cls, rng: np.random.Generator, max_angle: float = np.pi, max_translation: float = 1.0) -> RigidTransform:
        axis = rng.normal(size=3)
        angle = rng.uniform(0, max_angle)
        t = rng.normal(size=3)
        t = t / np.linalg.norm(t) * rng.uniform(0, max_translation)
        return cls.from_axis_angle(axis, angle, t)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        """``(a @ b).apply(x) == a.apply(b.apply(x))``."""
        return RigidTransform(
            _orthonormalize(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )


def rotation_error_deg(R_est: np.ndarray, R_gt: np.ndarray) -> float:
    """Geodesic angle between two rotations in degrees.

    Same value as arccos((trace(R_gt^T R_est) - 1) / 2), evaluated through
    atan2 of the skew and trace parts so that tiny angles are not swamped by
    rounding near cos = 1.
    """
    D = R_gt.T @ R_est
    cos = np.clip((np.trace(D) - 1.0) / 2.0, -1.0, 1.0)
    skew = np.array([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    sin = np.linalg.norm(skew) / 2.0
    return float(np.degrees(np.arctan2(sin, cos)))


def translation_error(t_est: np.ndarray, t_gt: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(t_est) - np.asarray(t_gt)))

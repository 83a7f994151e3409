"""Planar two-link arm geometry: forward kinematics, seeded analytic inverse
kinematics with branch selection, and the position-extraction map used by the
spatial constraints.

Arm actions are 7-vectors: 3D position (m), 3D axis-angle orientation, and a
gripper scalar. Planar tasks keep the third position coordinate at 0 and use
only the first orientation coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ACTION_DIM = 7
POS = slice(0, 3)

_REACH_TOL = 1e-9


class UnreachableTargetError(ValueError):
    """Target outside the arm's annulus; carries how far it must be clamped."""

    def __init__(self, target, clamp_distance: float):
        self.target = tuple(float(v) for v in target)
        self.clamp_distance = float(clamp_distance)
        super().__init__(
            f"target {self.target} unreachable; {self.clamp_distance:.3e} m "
            "outside the workspace annulus"
        )


@dataclass(frozen=True)
class ArmGeometry:
    base: tuple  # (x, y) in m
    link_lengths: tuple = (0.5, 0.5)

    def __post_init__(self):
        l1, l2 = self.link_lengths
        if l1 <= 0 or l2 <= 0:
            raise ValueError("link lengths must be positive")

    @property
    def reach_max(self) -> float:
        return self.link_lengths[0] + self.link_lengths[1]

    @property
    def reach_min(self) -> float:
        return abs(self.link_lengths[0] - self.link_lengths[1])


@dataclass(frozen=True)
class JointConfig:
    angles: tuple  # (theta1, theta2) in rad, normalized to (-pi, pi]

    def as_array(self) -> np.ndarray:
        return np.array(self.angles)


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def joint_distance(a: JointConfig, b: JointConfig) -> float:
    """Euclidean norm of the componentwise wrapped angle differences."""
    d = [wrap_angle(x - y) for x, y in zip(a.angles, b.angles)]
    return math.hypot(*d)


def pos_extract(action: np.ndarray) -> np.ndarray:
    """pos(.): the 3D position sub-vector of a 7-dim arm action."""
    return np.asarray(action)[POS]


def planar_position(action: np.ndarray) -> np.ndarray:
    return np.asarray(action)[0:2]


def forward_kin(geom: ArmGeometry, joints: JointConfig) -> np.ndarray:
    t1, t2 = joints.angles
    l1, l2 = geom.link_lengths
    x = geom.base[0] + l1 * math.cos(t1) + l2 * math.cos(t1 + t2)
    y = geom.base[1] + l1 * math.sin(t1) + l2 * math.sin(t1 + t2)
    return np.array([x, y])


def clamp_to_workspace(geom: ArmGeometry, target) -> tuple:
    """Radially project a point onto the reachable annulus.

    Returns (projected_point, clamp_distance); clamp_distance is 0 for
    targets already inside.
    """
    rx = float(target[0]) - geom.base[0]
    ry = float(target[1]) - geom.base[1]
    d = math.hypot(rx, ry)
    if d > geom.reach_max:
        scale = geom.reach_max / d
        proj = (geom.base[0] + rx * scale, geom.base[1] + ry * scale)
        return np.array(proj), d - geom.reach_max
    if d < geom.reach_min:
        if d == 0.0:
            proj = (geom.base[0] + geom.reach_min, geom.base[1])
        else:
            scale = geom.reach_min / d
            proj = (geom.base[0] + rx * scale, geom.base[1] + ry * scale)
        return np.array(proj), geom.reach_min - d
    return np.asarray(target, dtype=float), 0.0


def _branch_config(geom: ArmGeometry, rx: float, ry: float, elbow_sign: float) -> JointConfig:
    l1, l2 = geom.link_lengths
    d_sq = rx * rx + ry * ry
    cos_t2 = (d_sq - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    cos_t2 = min(1.0, max(-1.0, cos_t2))
    t2 = elbow_sign * math.acos(cos_t2)
    k1 = l1 + l2 * math.cos(t2)
    k2 = l2 * math.sin(t2)
    t1 = math.atan2(ry, rx) - math.atan2(k2, k1)
    return JointConfig((wrap_angle(t1), wrap_angle(t2)))


def inverse_kin(geom: ArmGeometry, target, seed: JointConfig) -> JointConfig:
    """Analytic two-link IK; of the two elbow branches, returns the one
    closest to `seed` in wrapped angle space.

    Raises UnreachableTargetError for targets outside the annulus (beyond a
    1e-9 tolerance); callers substitute the clamped target and flag the step.
    """
    rx = float(target[0]) - geom.base[0]
    ry = float(target[1]) - geom.base[1]
    d = math.hypot(rx, ry)
    if d > geom.reach_max + _REACH_TOL or d < geom.reach_min - _REACH_TOL:
        _, clamp = clamp_to_workspace(geom, target)
        raise UnreachableTargetError(target, clamp)

    up = _branch_config(geom, rx, ry, +1.0)
    down = _branch_config(geom, rx, ry, -1.0)
    if joint_distance(down, seed) < joint_distance(up, seed):
        return down
    return up


def fk_jacobian(geom: ArmGeometry, joints: JointConfig) -> np.ndarray:
    """2x2 Jacobian of forward_kin wrt the joint angles."""
    t1, t2 = joints.angles
    l1, l2 = geom.link_lengths
    s1, c1 = math.sin(t1), math.cos(t1)
    s12, c12 = math.sin(t1 + t2), math.cos(t1 + t2)
    return np.array(
        [
            [-l1 * s1 - l2 * s12, -l2 * s12],
            [l1 * c1 + l2 * c12, l2 * c12],
        ]
    )


def ik_position_jacobian(geom: ArmGeometry, joints: JointConfig, singular_tol: float = 1e-6):
    """d(joints)/d(position) by implicit differentiation of the analytic IK.

    Near the workspace boundary (|sin theta2| below tolerance) the FK
    Jacobian is singular; returns None there so callers can zero the
    dependent gradient and flag the step.
    """
    if abs(math.sin(joints.angles[1])) < singular_tol:
        return None
    return np.linalg.inv(fk_jacobian(geom, joints))


def default_geometries() -> tuple:
    """Symmetric desk rig: bases at (-0.6, 0) and (+0.6, 0), half-meter links."""
    return (
        ArmGeometry(base=(-0.6, 0.0), link_lengths=(0.5, 0.5)),
        ArmGeometry(base=(+0.6, 0.0), link_lengths=(0.5, 0.5)),
    )

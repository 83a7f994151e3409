"""Fusing two unimanual checkpoints into a bimanual velocity field and a
compositional energy.

The unconditional bimanual field is realized as the concatenation of the two
per-arm unconditional fields (the factorized prior over arms); per-arm
guidance then steers each half:

    v_i = v_null_i + w_i * (v_cond_i - v_null_i)

The compositional energy is the sum of the per-arm proxies evaluated on the
respective sub-actions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import ACTION_DIM
from .policy import (
    Conditioning,
    PolicyCheckpoint,
    energy_proxy,
    guided_velocity,
    null_conditioning,
)


@dataclass
class BimanualAction:
    """Paired physical arm actions, 7 coordinates each."""

    left: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=float)
        self.right = np.asarray(self.right, dtype=float)
        if self.left.shape != (ACTION_DIM,) or self.right.shape != (ACTION_DIM,):
            raise ValueError("arm actions must be 7-vectors")
        if not (np.all(np.isfinite(self.left)) and np.all(np.isfinite(self.right))):
            raise ValueError("arm actions must be finite")

    def concat(self) -> np.ndarray:
        return np.concatenate([self.left, self.right])

    @staticmethod
    def from_concat(vec: np.ndarray) -> "BimanualAction":
        vec = np.asarray(vec, dtype=float)
        return BimanualAction(vec[:ACTION_DIM], vec[ACTION_DIM:])

    def copy(self) -> "BimanualAction":
        return BimanualAction(self.left.copy(), self.right.copy())


@dataclass(frozen=True)
class GuidanceWeights:
    left: float = 1.0
    right: float = 1.0


def comp_velocity(
    left_ckpt: PolicyCheckpoint,
    right_ckpt: PolicyCheckpoint,
    z_left: np.ndarray,
    z_right: np.ndarray,
    t: float,
    cond_left: Conditioning,
    cond_right: Conditioning,
    weights: GuidanceWeights = GuidanceWeights(),
):
    """Per-arm guided velocities of the composed field.

    Inputs are normalized per-arm action coordinates. Null conditionings are
    rejected: the unconditional halves are supplied internally.
    """
    if cond_left.is_null or cond_right.is_null:
        raise ValueError("comp_velocity requires non-null conditionings")
    v_left = guided_velocity(left_ckpt, z_left, t, cond_left, weights.left)
    v_right = guided_velocity(right_ckpt, z_right, t, cond_right, weights.right)
    return v_left, v_right


def comp_energy_proxy(
    left_ckpt: PolicyCheckpoint,
    right_ckpt: PolicyCheckpoint,
    z_left: np.ndarray,
    z_right: np.ndarray,
    t: float,
    cond_left: Conditioning,
    cond_right: Conditioning,
) -> float:
    """Sum of the per-arm conditional energy proxies."""
    if cond_left.is_null or cond_right.is_null:
        raise ValueError("comp_energy_proxy requires non-null conditionings")
    return energy_proxy(left_ckpt, z_left, t, cond_left) + energy_proxy(
        right_ckpt, z_right, t, cond_right
    )


class ComposedField:
    """Bimanual generative field built from two unimanual checkpoints.

    Operates on the concatenated 14-dim normalized state; exposes the per-arm
    normalizers so coordination terms can map in and out of physical units.
    """

    def __init__(
        self,
        left_ckpt: PolicyCheckpoint,
        right_ckpt: PolicyCheckpoint,
        cond_left: Conditioning,
        cond_right: Conditioning,
        weights: GuidanceWeights = GuidanceWeights(),
    ):
        if left_ckpt.action_dim != ACTION_DIM or right_ckpt.action_dim != ACTION_DIM:
            raise ValueError("composed checkpoints must have 7-dim actions")
        self.left_ckpt = left_ckpt
        self.right_ckpt = right_ckpt
        self.cond_left = cond_left
        self.cond_right = cond_right
        self.weights = weights

    @property
    def state_dim(self) -> int:
        return 2 * ACTION_DIM

    def velocity(self, z: np.ndarray, t: float) -> np.ndarray:
        v_l, v_r = comp_velocity(
            self.left_ckpt,
            self.right_ckpt,
            z[:ACTION_DIM],
            z[ACTION_DIM:],
            t,
            self.cond_left,
            self.cond_right,
            self.weights,
        )
        return np.concatenate([v_l, v_r])

    def energy(self, z: np.ndarray, t: float) -> float:
        return comp_energy_proxy(
            self.left_ckpt,
            self.right_ckpt,
            z[:ACTION_DIM],
            z[ACTION_DIM:],
            t,
            self.cond_left,
            self.cond_right,
        )

    def arm_normalizers(self):
        return self.left_ckpt.normalizer, self.right_ckpt.normalizer

    def denormalize(self, z: np.ndarray) -> BimanualAction:
        return BimanualAction(
            self.left_ckpt.normalizer.denormalize(z[:ACTION_DIM]),
            self.right_ckpt.normalizer.denormalize(z[ACTION_DIM:]),
        )

    def normalize(self, action: BimanualAction) -> np.ndarray:
        return np.concatenate(
            [
                self.left_ckpt.normalizer.normalize(action.left),
                self.right_ckpt.normalizer.normalize(action.right),
            ]
        )


class SinglePolicyField:
    """Generative field from one bimanual checkpoint (14-dim actions); the
    no-composition baseline trained directly on bimanual demos."""

    def __init__(self, ckpt: PolicyCheckpoint, cond: Conditioning, guidance: float = 1.0):
        if ckpt.action_dim != 2 * ACTION_DIM:
            raise ValueError("bimanual checkpoint must have 14-dim actions")
        self.ckpt = ckpt
        self.cond = cond
        self.guidance = guidance

    @property
    def state_dim(self) -> int:
        return 2 * ACTION_DIM

    def velocity(self, z: np.ndarray, t: float) -> np.ndarray:
        from .policy import guided_velocity as gv

        return gv(self.ckpt, z, t, self.cond, self.guidance)

    def energy(self, z: np.ndarray, t: float) -> float:
        return energy_proxy(self.ckpt, z, t, self.cond)

    def arm_normalizers(self):
        from .policy import ActionNormalizer

        norm = self.ckpt.normalizer
        left = ActionNormalizer(mean=norm.mean[:ACTION_DIM], std=norm.std[:ACTION_DIM])
        right = ActionNormalizer(mean=norm.mean[ACTION_DIM:], std=norm.std[ACTION_DIM:])
        return left, right

    def denormalize(self, z: np.ndarray) -> BimanualAction:
        return BimanualAction.from_concat(self.ckpt.normalizer.denormalize(z))

    def normalize(self, action: BimanualAction) -> np.ndarray:
        return self.ckpt.normalizer.normalize(action.concat())

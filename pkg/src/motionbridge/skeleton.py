"""The 8-joint synthetic skeleton and forward kinematics."""
from __future__ import annotations

import numpy as np

from .rotations import quat_to_matrix, sixd_to_matrix

JOINT_NAMES = ("l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle", "l_shoulder", "r_shoulder")
PARENTS = (-1, 0, 1, -1, 3, 4, -1, -1)
OFFSETS = np.array([
    [0.0, 0.10, 0.0],
    [0.0, 0.0, -0.45],
    [0.0, 0.0, -0.45],
    [0.0, -0.10, 0.0],
    [0.0, 0.0, -0.45],
    [0.0, 0.0, -0.45],
    [0.0, 0.20, 0.50],
    [0.0, -0.20, 0.50],
])
# end sites: toes below ankles, hands below shoulders
END_SITES = ((2, np.array([0.15, 0.0, 0.0])), (5, np.array([0.15, 0.0, 0.0])),
             (6, np.array([0.0, 0.0, -0.55])), (7, np.array([0.0, 0.0, -0.55])))
POINT_NAMES = JOINT_NAMES + ("l_toe", "r_toe", "l_hand", "r_hand")
ANKLES = (2, 5)
N_JOINTS = len(JOINT_NAMES)
THIGH = SHIN = 0.45
HIP_HEIGHT = 0.78


def forward_kinematics(root_translation: np.ndarray, root_orientation: np.ndarray,
                       joint_rotations: np.ndarray) -> np.ndarray:
    """World positions of the joints and end sites.

    ``joint_rotations`` are local 6-vectors ``(..., J, 6)``; returns
    ``(..., J + 4, 3)`` in ``POINT_NAMES`` order.
    """
    root_t = np.asarray(root_translation, dtype=np.float64)
    root_r = quat_to_matrix(root_orientation)
    local = sixd_to_matrix(joint_rotations)
    shape = local.shape[:-3]
    glob_r = np.empty(shape + (N_JOINTS, 3, 3))
    glob_p = np.empty(shape + (N_JOINTS, 3))
    for j, par in enumerate(PARENTS):
        par_r = root_r if par < 0 else glob_r[..., par, :, :]
        par_p = root_t if par < 0 else glob_p[..., par, :]
        glob_p[..., j, :] = par_p + np.einsum("...ij,j->...i", par_r, OFFSETS[j])
        glob_r[..., j, :, :] = par_r @ local[..., j, :, :]
    ends = [glob_p[..., j, :] + np.einsum("...ij,j->...i", glob_r[..., j, :, :], off) for j, off in END_SITES]
    return np.concatenate([glob_p, np.stack(ends, axis=-2)], axis=-2)


def rest_points(root_translation=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Point positions for identity rotations, computed directly from offsets."""
    root = np.asarray(root_translation, dtype=np.float64)
    pos = np.zeros((N_JOINTS, 3))
    for j, par in enumerate(PARENTS):
        pos[j] = (root if par < 0 else pos[par]) + OFFSETS[j]
    ends = [pos[j] + off for j, off in END_SITES]
    return np.concatenate([pos, np.stack(ends)], axis=0)

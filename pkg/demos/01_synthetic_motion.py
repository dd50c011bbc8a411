"""Tour of the synthetic motion corpus.

Generates a few clips per action, checks that they are well formed, and
measures how still the planted feet are. Real gait sets the floor that any
generated gait is judged against.
"""
import numpy as np

from motionbridge.data import ACTIONS, GAIT_ACTIONS, N_FEATURES, compute_norm_stats, make_split, synth_generate
from motionbridge.metrics import foot_skate, motion_magnitude
from motionbridge.skeleton import ANKLES, forward_kinematics

split = make_split(per_action=4, test_per_action=2, n_frames=60, seed=0)
print(f"{len(split.train)} train / {len(split.test)} test clips, {N_FEATURES} features per frame")

for name in ACTIONS:
    seqs = [s for s in split.train if s.action.name == name]
    travel = np.mean([np.linalg.norm(s.trans[-1, :2] - s.trans[0, :2]) for s in seqs])
    skate = np.mean([foot_skate(s) for s in seqs])
    kind = "gait" if name in GAIT_ACTIONS else "upper body"
    print(f"  {name:9s} ({kind:10s}) root travel {travel:5.2f} m   foot skate {skate:.2e} m/s")

# the root quaternion stays unit length and the 6D columns stay orthonormal
s = split.train[0]
print("max |‖q‖ - 1|:", np.abs(np.linalg.norm(s.quat, axis=1) - 1).max())
a, b = s.joints[..., :3], s.joints[..., 3:]
print("max |a·b| over joint 6D pairs:", np.abs(np.sum(a * b, axis=-1)).max())

# forward kinematics: ankle heights over one walking clip
walk = synth_generate("Walk", 60, turn_angle=0.5, seed=3)
pts = np.stack([forward_kinematics(f.root_translation, f.root_orientation, f.joint_rotations) for f in walk.frames])
heights = pts[:, ANKLES, 2]
print("ankle height range (m):", heights.min().round(3), "to", heights.max().round(3))

norm = compute_norm_stats(split.train)
print("normalization std range:", norm.std.min().round(4), "to", norm.std.max().round(3))
print("mean pose-vector magnitude:", round(motion_magnitude(split.train), 3))

#!/usr/bin/env python3
"""Convert an AMASS (SMPL-H) motion .npz to the engine's motion JSON.

The mannequin has 12 joints, so the SMPL chain is folded onto it:

  pelvis      root_orient (Z-up world turned Y-up) -> global_rotation
  neck        spine1 * spine2 * spine3 * neck
  l/r_shoulder  collar * shoulder, re-based from T-pose to the mannequin A-pose
  l/r_elbow, l/r_wrist  conjugated by the same A-pose offset
  l/r_hip, l/r_knee  copied

Ankles, feet, head and fingers are dropped. Pivot offsets between the folded
joints are ignored, so spine-heavy clips bend at the neck only.
"""

import argparse
import json
import sys

import numpy as np
from scipy.spatial.transform import Rotation as R

SMPL = {
    "pelvis": 0, "l_hip": 1, "r_hip": 2, "spine1": 3, "l_knee": 4, "r_knee": 5, "spine2": 6,
    "spine3": 9, "neck": 12, "l_collar": 13, "r_collar": 14, "l_shoulder": 16, "r_shoulder": 17,
    "l_elbow": 18, "r_elbow": 19, "l_wrist": 20, "r_wrist": 21,
}

Z_UP_TO_Y_UP = R.from_euler("x", -90, degrees=True)
# rotates the mannequin's 45-degree A-pose arms up to the SMPL T-pose
A_TO_T = {"l": R.from_euler("z", 45, degrees=True), "r": R.from_euler("z", -45, degrees=True)}


def joint(poses, frame, name):
    i = SMPL[name]
    return R.from_rotvec(poses[frame, 3 * i:3 * i + 3])


def convert_frame(poses, trans, frame, origin):
    j = lambda n: joint(poses, frame, n)
    out = {
        "neck": j("spine1") * j("spine2") * j("spine3") * j("neck"),
        "l_hip": j("l_hip"), "r_hip": j("r_hip"), "l_knee": j("l_knee"), "r_knee": j("r_knee"),
    }
    for s in ("l", "r"):
        off = A_TO_T[s]
        out[f"{s}_shoulder"] = j(f"{s}_collar") * j(f"{s}_shoulder") * off
        out[f"{s}_elbow"] = off.inv() * j(f"{s}_elbow") * off
        out[f"{s}_wrist"] = off.inv() * j(f"{s}_wrist") * off
    root = Z_UP_TO_Y_UP * j("pelvis")
    shift = Z_UP_TO_Y_UP.apply(trans[frame] - origin)
    return {
        "global_rotation": root.as_rotvec().tolist(),
        "global_translation": shift.tolist(),
        "joints": {k: v.as_rotvec().tolist() for k, v in sorted(out.items())},
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("npz", help="AMASS clip with 'poses', 'trans' and a frame-rate entry")
    ap.add_argument("out", help="output motion JSON")
    ap.add_argument("--fps", type=float, default=30.0, help="output frame rate")
    ap.add_argument("--max-frames", type=int, default=0, help="truncate after this many output frames")
    args = ap.parse_args(argv)

    clip = np.load(args.npz)
    poses, trans = clip["poses"], clip["trans"]
    src_fps = float(clip["mocap_framerate"] if "mocap_framerate" in clip else clip["mocap_frame_rate"])
    if poses.ndim != 2 or poses.shape[1] < 66:
        sys.exit(f"{args.npz}: expected poses of shape (N, >=66), got {poses.shape}")

    step = max(1, round(src_fps / args.fps))
    frames = range(0, poses.shape[0], step)
    if args.max_frames > 0:
        frames = list(frames)[:args.max_frames]
    motion = [{"time": k * step / src_fps, "pose": convert_frame(poses, trans, f, trans[0])}
              for k, f in enumerate(frames)]
    with open(args.out, "w") as fh:
        json.dump(motion, fh)
        fh.write("\n")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Tour of the toy scene: skeleton, cameras, renders, and the motion metrics.

Compares the ground-truth motion with the simplest possible in-betweening
(hold the last keyframe until the next one) and writes a contact sheet of
the four views.
"""

import argparse
from pathlib import Path

import numpy as np

from inbetween.metrics import MetricRegistry, evaluate_all
from inbetween.render import render_frames, save_png
from inbetween.scenes import load_toy_scene


def hold_keyframes(motion):
    roots, rots = motion.roots.copy(), motion.rotations.copy()
    last = motion.context_length - 1
    for i in range(motion.context_length, len(motion)):
        if i in motion.keyframe_indices:
            last = i
        roots[i], rots[i] = motion.roots[last], motion.rotations[last]
    return motion.replace(roots=roots, rotations=rots)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(exist_ok=True)

    scene = load_toy_scene()
    m = scene.motion
    print(f"{m.skeleton.num_joints} joints, {len(m)} frames at {m.fps} fps")
    print(f"context: frames 0-{m.context_length - 1}, keyframes: {m.keyframe_indices}")

    cams = scene.cameras()
    sheet = []
    for view, cam in cams.items():
        frames = render_frames(m, cam, scene.style)
        sheet.append(np.concatenate([frames[i] for i in range(0, len(m), 25)], axis=1))
    save_png(np.concatenate(sheet, axis=0), out / "views.png")
    print(f"wrote {out / 'views.png'} (rows: {', '.join(cams)})")

    baseline = hold_keyframes(m)
    report = evaluate_all(baseline, m, [cams["front"]], scene.style,
                          frames=range(m.context_length, len(m)), registry=MetricRegistry())
    print("hold-last-keyframe baseline vs ground truth:")
    for name, value in report.values.items():
        print(f"  {name:5s} {value:.5f}")


if __name__ == "__main__":
    main()

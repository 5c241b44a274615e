"""Generate a synthetic subject, render it with the analytic ray caster from
a ring of cameras, and write the frames as PPM files."""

import sys
from pathlib import Path

from posefield.body import humanoid12
from posefield.io import write_ppm
from posefield.synthetic import generate_subject, oracle_render, ring_cameras, sample_motion

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_frames")
out.mkdir(parents=True, exist_ok=True)

body = generate_subject(seed=4)
print("capsule radii (m)", body.radii.round(3))
poses = sample_motion(humanoid12(), 8, seed=4)
cams = ring_cameras(4, 96, 96)

for f in (0, 4):
    for c, cam in enumerate(cams):
        img, mask = oracle_render(body, poses[f], cam)
        write_ppm(out / f"f{f}_c{c}.ppm", img)
        print(f"frame {f} camera {c}: {mask.mean():.1%} foreground")
print("wrote", out)

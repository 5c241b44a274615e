"""Fit the full model to one subject for a few hundred steps and compare a
held-out viewpoint before and after. Takes a few minutes on one core."""

import sys

import numpy as np

from posefield import ModelConfig, Observation, PoseFieldModel, TrainConfig, Trainer
from posefield.autodiff import no_grad
from posefield.body import humanoid12
from posefield.io import write_ppm
from posefield.synthetic import generate_subject, oracle_render, ring_cameras, sample_motion
from posefield.training import Batch, psnr, train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 300
sk = humanoid12()
body = generate_subject(0)
poses = sample_motion(sk, 32, 0)
cams = ring_cameras(8, 64, 64)
held = ring_cameras(1, 64, 64, start=np.pi / 8)[0]

# two observed views from the front camera
obs = [Observation(oracle_render(body, poses[i], cams[0])[0], cams[0], poses[i]) for i in (0, 8)]
views = [(i, c) for i in (0, 8) for c in range(8)]
targets = {v: oracle_render(body, poses[v[0]], cams[v[1]]) for v in views}

model = PoseFieldModel(sk, ModelConfig.desk())
trainer = Trainer(model, TrainConfig(iters=iters, lr_main=1e-3, lr_decay=0.1, patches=1, patch_size=16,
                                     noise_schedule=False, motion_delay_iters=0))


def sampler(rng, it):
    i, c = views[rng.integers(len(views))]
    img, mask = targets[(i, c)]
    return Batch(img, cams[c], poses[i], obs, mask)


gt, _ = oracle_render(body, poses[0], held)
with no_grad():
    before = model.render_image(model.encode(obs), poses[0], held)
train(trainer, sampler, iters, lambda it, r: it % 50 == 0 and print(f"step {it}: mse {r.l_mse:.4f}"))
with no_grad():
    after = model.render_image(model.encode(obs), poses[0], held)
print(f"held-out view PSNR: {psnr(before, gt):.2f} dB -> {psnr(after, gt):.2f} dB")
write_ppm("held_out_render.ppm", after)
write_ppm("held_out_truth.ppm", gt)

"""Train a small refiner on synthetic scenes and compare it with its inputs.

Run: python demos/03_train_desk.py [epochs]
A 30-epoch run takes a few minutes on one core.
"""
import dataclasses
import os
import sys

import numpy as np

from dispfuse import synthbench as sb
from dispfuse import tensor as T
from dispfuse import trainer as tr
from dispfuse.config import load_preset
from dispfuse.render import save_disparity_png, save_error_png

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
out = "demo_out"
os.makedirs(out, exist_ok=True)

rc = load_preset("desk")
cfg = dataclasses.replace(rc.train, epochs=epochs)
T.set_precision(rc.precision)

train = sb.noisy_samples(sb.make_scenes(20, 1000, 64, 96, 3), [0.008, 0.008], seed=7)
val = sb.noisy_samples(sb.make_scenes(5, 11000, 64, 96, 3), [0.008, 0.008], seed=8)


def report(rec):
    print(f"epoch {rec['epoch']:3d}  lr {rec['lr']:.4f}  photometric {rec['l_l1']:.4f}  "
          f"constraint {rec['l_c']:.3f}  val MAE {rec['val_mae']:.3f}")


# ground truth is only used for the val MAE column, never for gradients
state, log = tr.fit(train, cfg, val=val, on_epoch=report)

s = val[0]
gt = s.gt[: s.height, : s.width]
fused = tr.fuse(state.refiner, s)
inputs = [s.disp_inputs[k, : s.height, : s.width] for k in range(2)]
print("input MAE:", [round(sb.mae(d, gt), 3) for d in inputs], " fused MAE:", round(sb.mae(fused, gt), 3))

save_disparity_png(f"{out}/gt.png", gt, vmax=16)
save_disparity_png(f"{out}/input1.png", inputs[0], vmax=16)
save_disparity_png(f"{out}/fused.png", fused, vmax=16)
save_error_png(f"{out}/fused_error.png", fused - gt)
print("renders in", out)

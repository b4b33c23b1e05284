"""Warp a synthetic scene into the right view and score disparity maps.

Run: python demos/01_warp_and_losses.py
"""
import numpy as np

from dispfuse import synthbench as sb
from dispfuse.energy import constraint_loss, photometric_loss, smoothness_loss
from dispfuse.imaging import normalize, sobel
from dispfuse.warp import photometric_region_mask, reconstruct_right

scene = sb.generate_scene(seed=4, h=64, w=96, layers=3)
print("disparity layers:", np.unique(scene.gt_disp))

# intensities to [-1, 1], same as the network sees them
left = normalize(scene.left)
right = normalize(scene.right)
right_grad = sobel(right).magnitude
frame = np.ones_like(left)

# the true disparity reproduces the right view wherever it is visible
rec = reconstruct_right(left, scene.gt_disp)
region = photometric_region_mask(rec, frame)
print("visible fraction:", region.mean().round(3))
print("max error on visible pixels:", np.abs(rec.image.data[0, 0] - right)[region[0, 0] > 0].max())

# two noisy inputs, sigma in units of image height
noisy = sb.perturb_gt(scene.gt_disp, 0.008, 2, seed=1)
w = [np.full(left.shape, 0.5)] * 2
print("input MAE (px):", [round(sb.mae(d, scene.gt_disp), 3) for d in noisy])

for name, disp in [("truth", scene.gt_disp), ("input 1", noisy[0]), ("mean of inputs", (noisy[0] + noisy[1]) / 2)]:
    r = reconstruct_right(left, disp)
    m = photometric_region_mask(r, frame)
    l1 = photometric_loss(r, right, right_grad, 0.5, m).item()
    sm = smoothness_loss(disp, left, 10.0, 0.0, frame).item()
    lc = constraint_loss(disp, noisy, w, frame).item()
    print(f"{name:>15}: photometric {l1:.4f}  smoothness {sm:.4f}  constraint {lc:.4f}")
# the truth wins on the photometric and smoothness terms, which is what lets
# training move the estimate away from the noisy inputs it is tied to

"""Synthetic layered stereo scenes, noisy disparity inputs and the noise ablation.

Scenes are fronto-parallel textured rectangles over a textured background,
all at integer disparities.  The right view is rendered with the painter's
algorithm, so ground truth and right image are exact by construction.
Textures are generated wider than the frame so pixels that only the right
camera sees still get real texture.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import load_image, load_pfm, save_image, save_pfm
from .trainer import FusionSample, TrainConfig, fit, fuse, make_sample

REFERENCE_HEIGHT = 480  # image height the sigma ladder is quoted against


@dataclass
class Layer:
    disparity: int
    y0: int
    y1: int
    x0: int
    x1: int


@dataclass
class SyntheticScene:
    left: np.ndarray  # (h, w) in [0, 255], integer valued
    right: np.ndarray
    gt_disp: np.ndarray  # (h, w) left-view disparity, pixels
    seed: int
    background_disparity: int = 0
    layers: list = field(default_factory=list)

    def meta(self) -> dict:
        return {
            "seed": self.seed,
            "height": int(self.left.shape[0]),
            "width": int(self.left.shape[1]),
            "background_disparity": self.background_disparity,
            "layers": [dataclasses.asdict(l) for l in self.layers],
        }


def _texture(rng: np.random.Generator, h: int, w: int, smooth: float) -> np.ndarray:
    """Band-limited noise stretched to roughly [20, 235] and quantised."""
    t = ndimage.gaussian_filter(rng.normal(size=(h, w)), smooth, mode="reflect")
    t = (t - t.mean()) / (t.std() + 1e-12)
    return np.rint(np.clip(128.0 + 45.0 * t, 0, 255))


def generate_scene(
    seed: int,
    h: int = 64,
    w: int = 96,
    layers: int = 3,
    max_disparity: int = 14,
    background_disparity: int | None = None,
    smooth: float = 1.0,
) -> SyntheticScene:
    """Render a layered scene.

    Layer disparities are distinct integers at least 2 px apart and at
    least 2 px above the background; every layer stays partly visible.
    """
    rng = np.random.default_rng(seed)
    d_bg = int(rng.integers(0, 3)) if background_disparity is None else int(background_disparity)
    levels = np.arange(d_bg + 2, max_disparity + 1, 2)
    if layers > len(levels):
        raise ValueError(f"cannot fit {layers} layers 2 px apart between {d_bg + 2} and {max_disparity}")
    bg = _texture(rng, h, w + d_bg, smooth)
    left = bg[:, :w].copy()
    right = bg[:, d_bg : d_bg + w].copy()
    gt = np.full((h, w), float(d_bg))
    placed: list[Layer] = []
    disps = np.sort(rng.choice(levels, size=layers, replace=False)) if layers else []
    for d in disps:
        d = int(d)
        for _ in range(100):
            lh = int(rng.integers(h // 5, h // 2 + 1))
            lw = int(rng.integers(w // 6, w // 3 + 1))
            y0 = int(rng.integers(0, h - lh + 1))
            x0 = int(rng.integers(d, w - lw + 1))
            cand = Layer(d, y0, y0 + lh, x0, x0 + lw)
            trial = gt.copy()
            trial[cand.y0 : cand.y1, cand.x0 : cand.x1] = d
            # the background and earlier (farther) layers must stay visible
            if all((trial == v).sum() >= 16 for v in [d_bg] + [l.disparity for l in placed]):
                break
        tex = _texture(rng, lh, lw, smooth)
        left[cand.y0 : cand.y1, cand.x0 : cand.x1] = tex
        gt[cand.y0 : cand.y1, cand.x0 : cand.x1] = d
        # right view: pixel x' shows layer texture column x' + d - x0
        rx0, rx1 = cand.x0 - d, cand.x1 - d
        cols = np.arange(max(rx0, 0), min(rx1, w))
        right[cand.y0 : cand.y1, cols] = tex[:, cols - rx0]
        placed.append(cand)
    return SyntheticScene(left, right, gt, seed, d_bg, placed)


def perturb_gt(gt: np.ndarray, sigma: float, z: int, seed: int, height: int | None = None) -> list[np.ndarray]:
    """``z`` noisy copies of ``gt``: ``gt + H * N(0, sigma^2)``, independent per copy.

    ``H`` defaults to the map's height.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    gt = np.asarray(gt, dtype=np.float64)
    H = gt.shape[0] if height is None else height
    rng = np.random.default_rng(seed)
    return [gt + H * rng.normal(0.0, sigma, gt.shape) if sigma > 0 else gt.copy() for _ in range(z)]


def mae(est: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise ValueError(f"shape mismatch: estimate {est.shape} vs reference {gt.shape}")
    m = np.ones(est.shape, dtype=bool) if mask is None else np.asarray(mask) > 0
    if m.shape != est.shape:
        raise ValueError(f"mask shape {m.shape} does not match {est.shape}")
    if not m.any():
        raise ValueError("mae: empty mask")
    return float(np.abs(est - gt)[m].mean())


def noise_confidences(sigmas, shape) -> list[np.ndarray]:
    """Per-input confidence proportional to 1/sigma, normalised to sum to one."""
    s = np.asarray(sigmas, dtype=np.float64)
    inv = np.where(s == 0, np.inf, 1.0 / np.where(s == 0, 1.0, s))
    if np.isinf(inv).any():
        w = np.isinf(inv).astype(np.float64)
    else:
        w = inv
    w = w / w.sum()
    return [np.full(shape, v) for v in w]


# -- scene bundles on disk -----------------------------------------------------------

def save_scene(scene: SyntheticScene, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    save_image(os.path.join(directory, "left.pgm"), scene.left)
    save_image(os.path.join(directory, "right.pgm"), scene.right)
    save_pfm(os.path.join(directory, "gt.pfm"), scene.gt_disp)
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(scene.meta(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scene(directory) -> SyntheticScene:
    with open(os.path.join(directory, "meta.json")) as fh:
        meta = json.load(fh)
    return SyntheticScene(
        left=load_image(os.path.join(directory, "left.pgm")),
        right=load_image(os.path.join(directory, "right.pgm")),
        gt_disp=load_pfm(os.path.join(directory, "gt.pfm")).astype(np.float64),
        seed=meta["seed"],
        background_disparity=meta["background_disparity"],
        layers=[Layer(**l) for l in meta["layers"]],
    )


def scene_dirs(root) -> list[str]:
    """Scene sub-directories of ``root`` (those holding a meta.json), sorted."""
    out = [os.path.join(root, d) for d in sorted(os.listdir(root))]
    return [d for d in out if os.path.isfile(os.path.join(d, "meta.json"))]


# -- ablation ---------------------------------------------------------------------------

def noisy_samples(scenes, sigmas, seed: int) -> list[FusionSample]:
    """One sample per scene with one noisy input per entry of ``sigmas``."""
    out = []
    for i, sc in enumerate(scenes):
        h = sc.gt_disp.shape[0]
        rng_seed = np.random.SeedSequence([seed, i]).generate_state(1)[0]
        rng = np.random.default_rng(rng_seed)
        disps = [sc.gt_disp + h * rng.normal(0.0, s, sc.gt_disp.shape) if s > 0 else sc.gt_disp.copy() for s in sigmas]
        out.append(make_sample(sc.left, sc.right, disps, noise_confidences(sigmas, sc.gt_disp.shape), sc.gt_disp))
    return out


@dataclass
class AblationRow:
    sigma: float
    num_inputs: int
    input_mae: list
    fused_mae: float
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AblationConfig:
    sigmas: list = field(default_factory=lambda: [0.004, 0.008, 0.016])
    inputs: list = field(default_factory=lambda: [2, 1])
    train_scenes: int = 20
    test_scenes: int = 5
    layers: int = 3
    scene_seed: int = 1000
    noise_seed: int = 7

    def __post_init__(self):
        if not self.sigmas:
            raise ValueError("ablation needs at least one sigma")
        if not self.inputs or any(z < 1 for z in self.inputs):
            raise ValueError("ablation input counts must be >= 1")


def make_scenes(count: int, seed: int, h: int, w: int, layers: int) -> list[SyntheticScene]:
    return [generate_scene(seed + i, h, w, layers) for i in range(count)]


def run_cell(train_scenes, test_scenes, sigma: float, z: int, cfg: TrainConfig, noise_seed: int,
             on_epoch=None) -> AblationRow:
    """Train on noisy training scenes, then fuse the held-out scenes."""
    net = dataclasses.replace(cfg.net, c1=z)
    energy = dataclasses.replace(cfg.energy, num_inputs=z)
    cell_cfg = dataclasses.replace(cfg, net=net, energy=energy)
    sig = [sigma] * z
    train = noisy_samples(train_scenes, sig, noise_seed)
    test = noisy_samples(test_scenes, sig, noise_seed + 1)
    t0 = time.perf_counter()
    state, _ = fit(train, cell_cfg, on_epoch=on_epoch)
    fused, inputs = [], [[] for _ in range(z)]
    for s in test:
        gt = s.gt[: s.height, : s.width]
        fused.append(mae(fuse(state.refiner, s), gt))
        for k in range(z):
            inputs[k].append(mae(s.disp_inputs[k, : s.height, : s.width], gt))
    return AblationRow(sigma, z, [float(np.mean(v)) for v in inputs], float(np.mean(fused)),
                       time.perf_counter() - t0)


def noise_ablation(acfg: AblationConfig, cfg: TrainConfig, h: int | None = None, w: int | None = None,
                   on_row=None) -> list[AblationRow]:
    h = cfg.net.height if h is None else h
    w = cfg.net.width if w is None else w
    train = make_scenes(acfg.train_scenes, acfg.scene_seed, h, w, acfg.layers)
    test = make_scenes(acfg.test_scenes, acfg.scene_seed + 10_000, h, w, acfg.layers)
    rows = []
    for z in acfg.inputs:
        for sigma in acfg.sigmas:
            row = run_cell(train, test, sigma, z, cfg, acfg.noise_seed)
            rows.append(row)
            if on_row is not None:
                on_row(row)
    return rows


def rows_to_csv(rows: list[AblationRow]) -> str:
    zmax = max(r.num_inputs for r in rows)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["sigma", "num_inputs"] + [f"input{k + 1}_mae" for k in range(zmax)] + ["fused_mae"])
    for r in rows:
        ins = [f"{v:.6f}" for v in r.input_mae] + [""] * (zmax - r.num_inputs)
        wr.writerow([f"{r.sigma:g}", r.num_inputs] + ins + [f"{r.fused_mae:.6f}"])
    return buf.getvalue()


def rows_to_json(rows: list[AblationRow]) -> str:
    return json.dumps([{k: v for k, v in r.to_dict().items() if k != "seconds"} for r in rows],
                      indent=1, sort_keys=True) + "\n"

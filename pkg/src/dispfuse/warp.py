"""Differentiable reconstruction of the right view from the left view.

The default path forward-splats every left pixel to ``(x - d, y)`` with
bilinear weights and resolves collisions with a soft z-buffer: each
contribution is scaled by ``exp(kappa * d)`` so larger disparities (nearer
surfaces) win.  The exponent is shifted by the largest contributing
disparity of each target pixel, which cancels in the normalised output and
keeps the weights finite.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .tensor import Tensor, custom_op

VALID_EPS = 1e-3


class Reconstruction(NamedTuple):
    image: Tensor  # (b, c, h, w) estimated right image
    validity: np.ndarray  # (b, 1, h, w) splat coverage clipped to [0, 1]
    occlusion_mask: np.ndarray  # (b, 1, h, w) 1 where surfaces of different depth collide


def _as4d(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 2:
        t = t.reshape(1, 1, *t.shape)
    elif t.ndim == 3:
        t = t.reshape(t.shape[0], 1, *t.shape[1:])
    return t


def _contributions(d: np.ndarray):
    """Source index, target index, bilinear weight and d(weight)/d(disp) per splat."""
    b, _, h, w = d.shape
    disp = d[:, 0].astype(np.float64)
    tx = np.arange(w, dtype=np.float64)[None, None, :] - disp
    x0 = np.floor(tx)
    frac = tx - x0
    x0 = x0.astype(np.int64)
    row = (np.arange(b)[:, None, None] * h + np.arange(h)[None, :, None]) * w
    src = (row + np.arange(w)[None, None, :]).reshape(-1)
    srcs, tgts, wts, dws = [], [], [], []
    for k, (bw, dbw) in enumerate(((1.0 - frac, 1.0), (frac, -1.0))):
        tk = x0 + k
        ok = ((tk >= 0) & (tk < w) & (bw > 0)).reshape(-1)
        srcs.append(src[ok])
        tgts.append((row + tk).reshape(-1)[ok])
        wts.append(bw.reshape(-1)[ok])
        dws.append(np.full(ok.sum(), dbw))
    return (np.concatenate(srcs), np.concatenate(tgts), np.concatenate(wts), np.concatenate(dws))


def reconstruct_right(left, disp, kappa: float = 10.0) -> Reconstruction:
    """Forward-splat ``left`` (b,c,h,w) through left-view disparity ``disp`` (b,1,h,w).

    ``kappa`` is in inverse pixels of disparity.  Out-of-frame targets are
    dropped; target pixels nobody splats to get value 0 and validity 0.
    """
    left, disp = _as4d(left), _as4d(disp)
    b, c, h, w = left.shape
    if disp.shape != (b, 1, h, w):
        raise ValueError(f"disparity shape {disp.shape} does not match image {left.shape}")
    n = b * h * w
    src, tgt, bw, dbw = _contributions(disp.data)
    ds = disp.data.reshape(-1).astype(np.float64)[src]
    top = np.full(n, -np.inf)
    np.maximum.at(top, tgt, ds)
    bottom = np.full(n, np.inf)
    np.minimum.at(bottom, tgt, ds)
    z = np.exp(kappa * (ds - top[tgt]))
    a = bw * z
    den = np.bincount(tgt, a, minlength=n)
    cov = np.bincount(tgt, bw, minlength=n)
    img = left.data.reshape(b, c, h * w).transpose(1, 0, 2).reshape(c, n).astype(np.float64)
    hit = den > 0
    safe = np.where(hit, den, 1.0)
    out = np.empty((c, n))
    for ch in range(c):
        num = np.bincount(tgt, a * img[ch, src], minlength=n)
        out[ch] = np.where(hit, num / safe, 0.0)

    def backward(g, needs):
        gt = g.reshape(b, c, h * w).transpose(1, 0, 2).reshape(c, n).astype(np.float64)
        coef = a / safe[tgt]
        g_left = g_disp = None
        if needs[0]:
            gl = np.stack([np.bincount(src, gt[ch, tgt] * coef, minlength=n) for ch in range(c)])
            g_left = gl.reshape(c, b, h * w).transpose(1, 0, 2).reshape(b, c, h, w).astype(g.dtype)
        if needs[1]:
            resid = sum(gt[ch, tgt] * (img[ch, src] - out[ch, tgt]) for ch in range(c))
            contrib = resid / safe[tgt] * z * (dbw + kappa * bw)
            g_disp = np.bincount(src, contrib, minlength=n).reshape(b, 1, h, w).astype(g.dtype)
        return g_left, g_disp

    dtype = left.dtype
    image = custom_op(
        out.reshape(c, b, h * w).transpose(1, 0, 2).reshape(b, c, h, w).astype(dtype),
        (left, disp), backward, "splat",
    )
    validity = np.minimum(1.0, cov).reshape(b, 1, h, w)
    occluded = hit & (top - bottom > 1.0)
    return Reconstruction(image, validity, occluded.reshape(b, 1, h, w).astype(np.float64))


def sample_right(left, disp) -> Reconstruction:
    """Backward-sampling variant: right(x) = left(x + d(x)), linear along x.

    Treats the left-view disparity as if it were registered on the right
    view, the common approximation in self-supervised stereo.  Occlusion is
    not modelled.
    """
    left, disp = _as4d(left), _as4d(disp)
    b, c, h, w = left.shape
    d = disp.data[:, 0].astype(np.float64)
    sx = np.arange(w, dtype=np.float64)[None, None, :] + d
    inside = (sx >= 0) & (sx <= w - 1)
    sxc = np.clip(sx, 0, w - 1)
    x0 = np.minimum(np.floor(sxc).astype(np.int64), w - 2) if w > 1 else np.zeros_like(sxc, dtype=np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    frac = sxc - x0
    img = left.data.astype(np.float64)
    v0 = np.take_along_axis(img, np.broadcast_to(x0[:, None], img.shape), axis=3)
    v1 = np.take_along_axis(img, np.broadcast_to(x1[:, None], img.shape), axis=3)
    m = inside[:, None].astype(np.float64)
    out = ((1 - frac[:, None]) * v0 + frac[:, None] * v1) * m

    def backward(g, needs):
        gd = g.astype(np.float64) * m
        g_left = g_disp = None
        if needs[0]:
            gl = np.zeros_like(img)
            bi, ci, yi, xi = np.indices(img.shape)
            np.add.at(gl, (bi, ci, yi, np.broadcast_to(x0[:, None], img.shape)), gd * (1 - frac[:, None]))
            np.add.at(gl, (bi, ci, yi, np.broadcast_to(x1[:, None], img.shape)), gd * frac[:, None])
            g_left = gl.astype(g.dtype)
        if needs[1]:
            g_disp = (gd * (v1 - v0)).sum(axis=1, keepdims=True).astype(g.dtype)
        return g_left, g_disp

    image = custom_op(out.astype(left.dtype), (left, disp), backward, "sample")
    return Reconstruction(image, m, np.zeros_like(m))


def photometric_region_mask(recon: Reconstruction, frame_mask, eps: float = VALID_EPS) -> np.ndarray:
    """1 where the reconstruction is covered (validity > eps) and inside the frame."""
    fm = np.asarray(frame_mask, dtype=np.float64)
    return ((recon.validity > eps) & (np.broadcast_to(fm, recon.validity.shape) > 0)).astype(np.float64)

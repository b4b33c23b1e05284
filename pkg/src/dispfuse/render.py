"""PNG renders of disparity and error maps."""
from __future__ import annotations

import numpy as np
from PIL import Image

BLUE = np.array([0.0, 0.0, 255.0])
WHITE = np.array([255.0, 255.0, 255.0])


def disparity_gray(disp: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Linear map of [0, vmax] to 8-bit grey; non-finite values render black."""
    d = np.asarray(disp, dtype=np.float64)
    finite = np.isfinite(d)
    if vmax is None:
        vmax = float(d[finite].max()) if finite.any() else 1.0
    vmax = vmax if vmax > 0 else 1.0
    g = np.clip(np.where(finite, d, 0.0) / vmax, 0.0, 1.0) * 255.0
    return np.rint(g).astype(np.uint8)


def error_ramp(err: np.ndarray, vmax: float = 3.0) -> np.ndarray:
    """|error| from 0 (blue) to ``vmax`` pixels and beyond (white), as RGB."""
    e = np.clip(np.abs(np.nan_to_num(np.asarray(err, dtype=np.float64), nan=vmax)) / vmax, 0.0, 1.0)
    rgb = BLUE + e[..., None] * (WHITE - BLUE)
    return np.rint(rgb).astype(np.uint8)


def save_disparity_png(path, disp: np.ndarray, vmax: float | None = None) -> None:
    Image.fromarray(disparity_gray(disp, vmax), mode="L").save(path, optimize=False)


def save_error_png(path, err: np.ndarray, vmax: float = 3.0) -> None:
    Image.fromarray(error_ramp(err, vmax), mode="RGB").save(path, optimize=False)

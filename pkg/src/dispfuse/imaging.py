"""Image / disparity file I/O, Sobel gradients, normalisation and padding."""
from __future__ import annotations

import os
import re
from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage


class FormatError(ValueError):
    """Malformed or unsupported image file."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        self.offset = offset
        self.path = path
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{os.fspath(path)}: " if path is not None else ""
        super().__init__(f"{src}{message}{where}")


class GradientImage(NamedTuple):
    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray


class PaddedFrame(NamedTuple):
    content: np.ndarray
    mask: np.ndarray
    height: int
    width: int


# -- PGM / PNG -----------------------------------------------------------------

def _pgm_tokens(buf: bytes, count: int, path):
    """Read ``count`` whitespace separated header tokens after the magic."""
    pos = 2
    tokens = []
    while len(tokens) < count:
        if pos >= len(buf):
            raise FormatError("truncated PGM header", pos, path)
        c = buf[pos : pos + 1]
        if c == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated comment in PGM header", pos, path)
            pos = end + 1
        elif c.isspace():
            pos += 1
        else:
            m = re.compile(rb"\d+").match(buf, pos)
            if m is None:
                raise FormatError(f"expected an integer in PGM header, found {c!r}", pos, path)
            tokens.append(int(m.group()))
            pos = m.end()
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header", pos, path)
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise FormatError(f"not a binary PGM (magic {buf[:2]!r})", 0, path)
    (width, height, maxval), start = _pgm_tokens(buf, 3, path)
    if width < 1 or height < 1:
        raise FormatError(f"bad PGM extents {width}x{height}", 2, path)
    if not 0 < maxval < 256:
        raise FormatError(f"only 8-bit PGM supported (maxval {maxval})", start - 1, path)
    need = width * height
    if len(buf) - start < need:
        raise FormatError(f"truncated PGM data: need {need} bytes, have {len(buf) - start}",
                          len(buf), path)
    pix = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start)
    return pix.reshape(height, width).astype(np.float64)


def write_pgm(path, image: np.ndarray) -> None:
    img = _quantize(image)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _quantize(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Load an 8-bit grayscale PGM (P5) or PNG as float pixels in [0, 255]."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head[:2] == b"P5":
        return read_pgm(path)
    if head.startswith(b"\x89PNG"):
        try:
            with Image.open(path) as im:
                im.load()
                if im.mode != "L":
                    raise FormatError(f"PNG must be 8-bit grayscale, got mode {im.mode}", None, path)
                return np.asarray(im, dtype=np.float64)
        except FormatError:
            raise
        except Exception as exc:  # Pillow raises a zoo of types for broken files
            raise FormatError(f"unreadable PNG ({exc})", None, path) from exc
    raise FormatError(f"unrecognised image signature {head[:4]!r}", 0, path)


def save_image(path, image: np.ndarray) -> None:
    """Save a [0, 255] float image; format from the suffix (.pgm or .png)."""
    suffix = os.fspath(path).lower().rsplit(".", 1)[-1]
    if suffix == "pgm":
        write_pgm(path, image)
    elif suffix == "png":
        Image.fromarray(_quantize(image), mode="L").save(path, optimize=False)
    else:
        raise ValueError(f"unsupported image suffix for {path}")


# -- PFM --------------------------------------------------------------------------

def load_pfm(path) -> np.ndarray:
    """Read a single-channel PFM ("Pf").  Rows are stored bottom-to-top."""
    with open(path, "rb") as fh:
        buf = fh.read()
    lines = []
    pos = 0
    for _ in range(3):
        end = buf.find(b"\n", pos)
        if end < 0:
            raise FormatError("truncated PFM header", pos, path)
        lines.append(buf[pos:end].strip())
        pos = end + 1
    if lines[0] == b"PF":
        raise FormatError("colour PFM ('PF') is not supported", 0, path)
    if lines[0] != b"Pf":
        raise FormatError(f"not a PFM file (magic {lines[0][:4]!r})", 0, path)
    try:
        width, height = (int(v) for v in lines[1].split())
        scale = float(lines[2])
    except ValueError as exc:
        raise FormatError(f"bad PFM header ({exc})", len(lines[0]) + 1, path) from exc
    if scale == 0:
        raise FormatError("PFM scale must be non-zero", pos - len(lines[2]) - 1, path)
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    need = width * height * 4
    if len(buf) - pos < need:
        raise FormatError(f"truncated PFM data: need {need} bytes, have {len(buf) - pos}", len(buf), path)
    data = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos)
    return np.flipud(data.reshape(height, width)).astype(np.float32)


def save_pfm(path, disp: np.ndarray, little_endian: bool = True) -> None:
    arr = np.asarray(disp)
    if arr.ndim != 2:
        raise ValueError(f"PFM writer expects a 2-D map, got shape {arr.shape}")
    h, w = arr.shape
    dtype = "<f4" if little_endian else ">f4"
    scale = -1.0 if little_endian else 1.0
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n{scale:.6f}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(np.flipud(arr), dtype=dtype).tobytes())


# -- processing ------------------------------------------------------------------------

def sobel(image: np.ndarray) -> GradientImage:
    """3x3 Sobel responses with replicated borders; gx is right minus left."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[-1] < 3 or img.shape[-2] < 3:
        raise ValueError(f"sobel needs at least 3x3 pixels, got {img.shape}")
    gx = ndimage.sobel(img, axis=-1, mode="nearest")
    gy = ndimage.sobel(img, axis=-2, mode="nearest")
    return GradientImage(gx, gy, np.hypot(gx, gy))


def normalize(image: np.ndarray) -> np.ndarray:
    """Map raw [0, 255] intensities to [-1, 1]."""
    return np.asarray(image, dtype=np.float64) / 127.5 - 1.0


def denormalize(image: np.ndarray) -> np.ndarray:
    return (np.asarray(image, dtype=np.float64) + 1.0) * 127.5


def padded_extent(n: int, multiple: int = 32) -> int:
    return -(-n // multiple) * multiple


def pad_to_32(array: np.ndarray, height: int | None = None, width: int | None = None) -> PaddedFrame:
    """Zero-pad the last two axes up to multiples of 32, content at top-left."""
    arr = np.asarray(array)
    h, w = arr.shape[-2:]
    height = h if height is None else height
    width = w if width is None else width
    if (height, width) != (h, w):
        raise ValueError(f"array extents {h}x{w} disagree with declared {height}x{width}")
    H, W = padded_extent(h), padded_extent(w)
    out = np.zeros(arr.shape[:-2] + (H, W), dtype=arr.dtype)
    out[..., :h, :w] = arr
    mask = np.zeros((H, W), dtype=np.float64)
    mask[:h, :w] = 1.0
    return PaddedFrame(out, mask, h, w)


def crop(array: np.ndarray, height: int, width: int) -> np.ndarray:
    return np.asarray(array)[..., :height, :width]

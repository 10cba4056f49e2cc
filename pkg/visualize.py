"""
Attention Overlays

Turns an attention mask on the feature grid into an image a person can read:

1. upsample_nearest: replicate each mask weight over its pixel block, using
   the same rounding as ``spatial_audit.naive_upsample_map``
2. overlay: normalise the mask (max or sum), darken the frame by
   d + (1 - d) * m, quantise to 8 bits (round half up)
3. write_ppm / read_ppm: binary P6 files, bit-exact round trip
4. write_png: optional PNG output through pypng

Frames are independent, so ``write_images`` renders them on a thread pool.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np
import png

from models import AttentionMask, Colormap, GeometryError, ImageIOError, NormMode, OverlayConfig, ShapeError
from spatial_audit import naive_upsample_map

logger = logging.getLogger(__name__)

PPM = "ppm"
PNG = "png"
FORMATS = (PPM, PNG)

# ============================================================================
# Image record
# ============================================================================


@dataclass
class ImageRGB:
    """8-bit RGB image; ``pixels`` is (height, width, 3) uint8, row-major."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.size != 3 * self.width * self.height:
            raise ShapeError("ImageRGB", "pixels", 3 * self.width * self.height, self.pixels.size)
        self.pixels = self.pixels.reshape(self.height, self.width, 3)

    def to_bytes(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageRGB):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.pixels, other.pixels)
        )


# ============================================================================
# Upsampling and overlay
# ============================================================================


def upsample_nearest(mask: Union[AttentionMask, np.ndarray], out_h: int, out_w: int) -> np.ndarray:
    """
    Nearest-neighbour upsampling of an (H_f, W_f) mask to (out_h, out_w).

    Raises:
        GeometryError: output smaller than the mask
    """
    weights = mask.weights if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=np.float64)
    if weights.ndim != 2:
        raise ShapeError("upsample_nearest", "mask rank", 2, weights.ndim)
    mask_h, mask_w = weights.shape
    if out_h < mask_h or out_w < mask_w:
        raise GeometryError(f"cannot upsample a {mask_h}x{mask_w} mask to {out_h}x{out_w}")

    rows = np.empty(out_h, dtype=np.int64)
    for n in range(mask_h):
        start, end = naive_upsample_map(mask_h, out_h, n)
        rows[start:end] = n
    cols = np.empty(out_w, dtype=np.int64)
    for m in range(mask_w):
        start, end = naive_upsample_map(mask_w, out_w, m)
        cols[start:end] = m
    return weights[np.ix_(rows, cols)]


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def normalize_mask(up_mask: np.ndarray, mode: str) -> np.ndarray:
    total = up_mask.max() if mode == NormMode.MAX else up_mask.sum()
    if not total > 0.0:
        logger.warning("attention mask is all zero; overlay falls back to a fully darkened frame")
        return np.zeros_like(up_mask)
    return up_mask / total


def overlay(frame: np.ndarray, up_mask: np.ndarray, cfg: OverlayConfig = OverlayConfig()) -> ImageRGB:
    """
    out = frame * (d + (1 - d) * m), m the normalised mask.

    Grayscale replicates ``out`` into RGB; the heat colormap tints it by
    (1, 0.5 + 0.5 m, m) so attended pixels go white and ignored ones red.
    """
    cfg.validate()
    frame = np.asarray(frame, dtype=np.float64)
    up_mask = np.asarray(up_mask, dtype=np.float64)
    if frame.shape != up_mask.shape:
        raise ShapeError("overlay", "H x W", frame.shape, up_mask.shape)

    m = normalize_mask(up_mask, cfg.normalization)
    d = cfg.darken_factor
    out = frame * (d + (1.0 - d) * m)
    if cfg.colormap == Colormap.HEAT:
        rgb = np.stack([out, out * (0.5 + 0.5 * m), out * m], axis=-1)
    else:
        rgb = np.repeat(out[..., None], 3, axis=-1)
    height, width = frame.shape
    return ImageRGB(width, height, _quantize(rgb))


def render_attention(frame: np.ndarray, mask: AttentionMask, cfg: OverlayConfig = OverlayConfig()) -> ImageRGB:
    """Upsample ``mask`` onto ``frame`` and overlay it."""
    height, width = frame.shape
    return overlay(frame, upsample_nearest(mask, height, width), cfg)


def hstack(images: Sequence[ImageRGB], gap: int = 2) -> ImageRGB:
    """Place images side by side with ``gap`` black columns between them."""
    heights = {img.height for img in images}
    if len(heights) != 1:
        raise ShapeError("hstack", "height", images[0].height, sorted(heights))
    height = heights.pop()
    spacer = np.zeros((height, gap, 3), dtype=np.uint8)
    parts: List[np.ndarray] = []
    for i, img in enumerate(images):
        if i:
            parts.append(spacer)
        parts.append(img.pixels)
    pixels = np.concatenate(parts, axis=1)
    return ImageRGB(pixels.shape[1], height, pixels)


# ============================================================================
# Files
# ============================================================================


def ppm_bytes(img: ImageRGB) -> bytes:
    return f"P6\n{img.width} {img.height}\n255\n".encode("ascii") + img.to_bytes()


def write_ppm(img: ImageRGB, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(ppm_bytes(img))
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write PPM ({exc})") from exc
    return path


def parse_ppm(raw: bytes, source: str = "<bytes>") -> ImageRGB:
    """Parse a binary P6 image with maxval 255 (comments allowed in the header)."""
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageIOError(f"{source}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster

    magic, width, height, maxval = tokens
    if magic != b"P6":
        raise ImageIOError(f"{source}: not a binary PPM (magic {magic!r})")
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise ImageIOError(f"{source}: malformed PPM header") from exc
    if maxval != 255:
        raise ImageIOError(f"{source}: only 8-bit PPM is supported (maxval {maxval})")
    data = raw[pos : pos + 3 * width * height]
    if len(data) != 3 * width * height:
        raise ImageIOError(f"{source}: raster has {len(data)} bytes, expected {3 * width * height}")
    return ImageRGB(width, height, np.frombuffer(data, dtype=np.uint8).copy())


def read_ppm(path: Union[str, Path]) -> ImageRGB:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot read PPM ({exc})") from exc
    return parse_ppm(raw, str(path))


def write_png(img: ImageRGB, path: Union[str, Path]) -> Path:
    path = Path(path)
    writer = png.Writer(img.width, img.height, greyscale=False, bitdepth=8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as handle:
            writer.write(handle, img.pixels.reshape(img.height, img.width * 3).tolist())
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write PNG ({exc})") from exc
    return path


def write_image(img: ImageRGB, path: Union[str, Path], fmt: str = PPM) -> Path:
    if fmt == PNG:
        return write_png(img, Path(path).with_suffix(".png"))
    return write_ppm(img, Path(path).with_suffix(".ppm"))


def write_images(jobs: Iterable[Tuple[ImageRGB, Path]], fmt: str = PPM, workers: int = 4) -> List[Path]:
    """Write (image, path) pairs in parallel; returns paths in input order."""
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        return [write_image(img, path, fmt) for img, path in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: write_image(job[0], job[1], fmt), jobs))


def frame_name(episode: int, step: int) -> str:
    return f"ep{episode:03d}_step{step:03d}"

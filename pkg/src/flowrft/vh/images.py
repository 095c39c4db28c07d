"""
Grayscale images: binary PGM I/O and a density rasterizer for 2-D samples.
"""

import logging
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MIN_RASTER_RESOLUTION = 16

_PGM_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


class PgmFormatError(ValueError):
    """Raised when a file is not a readable 8-bit binary PGM."""
    pass


@dataclass
class GrayImage:
    """Row-major float64 intensities in [0, 255]; row 0 is the top."""
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("image has non-finite pixels")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 255.0):
            raise ValueError("pixels must lie in [0, 255]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def min_dim(self) -> int:
        return min(self.pixels.shape)

    @classmethod
    def constant(cls, height: int, width: int, value: float = 0.0) -> "GrayImage":
        return cls(np.full((height, width), float(value)))


def decode_pgm(data: bytes) -> GrayImage:
    match = _PGM_HEADER.match(data)
    if match is None:
        raise PgmFormatError("not a binary PGM (P5) file")
    width, height, maxval = (int(g) for g in match.groups())
    if maxval < 1 or maxval > 255:
        raise PgmFormatError(f"unsupported maxval {maxval}; only 8-bit PGM is read")
    body = data[match.end():]
    if len(body) < width * height:
        raise PgmFormatError(f"truncated PGM: expected {width * height} bytes, got {len(body)}")
    raw = np.frombuffer(body[: width * height], dtype=np.uint8).reshape(height, width)
    pixels = raw.astype(np.float64)
    if maxval != 255:
        pixels = pixels * (255.0 / maxval)
    return GrayImage(pixels)


def encode_pgm(img: GrayImage) -> bytes:
    """Pixels are rounded to the nearest integer level."""
    raw = np.clip(np.rint(img.pixels), 0, 255).astype(np.uint8)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + raw.tobytes()


def read_pgm(path: Path) -> GrayImage:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise PgmFormatError(f"cannot read {path}: {e}") from e
    return decode_pgm(data)


def write_pgm(path: Path, img: GrayImage) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(encode_pgm(img))
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise RuntimeError(f"Failed to write image {path}: {e}") from e
    logger.debug(f"Wrote {img.width}x{img.height} image to {path}")
    return path


def pixel_centers(bounds: Tuple[float, float, float, float], resolution: int) -> Tuple[np.ndarray, np.ndarray]:
    """Column x-coordinates and row y-coordinates (row 0 at y_max)."""
    x_min, x_max, y_min, y_max = bounds
    step_x = (x_max - x_min) / resolution
    step_y = (y_max - y_min) / resolution
    xs = x_min + (np.arange(resolution) + 0.5) * step_x
    ys = y_max - (np.arange(resolution) + 0.5) * step_y
    return xs, ys


def rasterize_samples(
    samples: Sequence[np.ndarray],
    bounds: Tuple[float, float, float, float] = (-6.0, 6.0, -6.0, 6.0),
    resolution: int = 64,
    bandwidth: float = 0.25,
) -> GrayImage:
    """
    Gaussian kernel-density splat of 2-D samples onto a square image.

    The density is scaled so its maximum maps to 255.

    Args:
        samples: 2-vectors
        bounds: (x_min, x_max, y_min, y_max)
        resolution: Pixels per side
        bandwidth: Kernel standard deviation in sample units
    """
    pts = np.asarray(samples, dtype=np.float64).reshape(-1, 2) if len(samples) else np.empty((0, 2))
    if len(pts) == 0:
        raise ValueError("cannot rasterize an empty sample list")
    if resolution < MIN_RASTER_RESOLUTION:
        raise ValueError(f"resolution must be at least {MIN_RASTER_RESOLUTION}, got {resolution}")
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    x_min, x_max, y_min, y_max = bounds
    if not (x_max > x_min and y_max > y_min):
        raise ValueError(f"empty bounds {bounds}")

    xs, ys = pixel_centers(bounds, resolution)
    # separable kernel: density[i, j] = Σ_s ky[s, i] · kx[s, j]
    kx = np.exp(-((xs[None, :] - pts[:, :1]) ** 2) / (2.0 * bandwidth ** 2))
    ky = np.exp(-((ys[None, :] - pts[:, 1:]) ** 2) / (2.0 * bandwidth ** 2))
    density = ky.T @ kx
    peak = density.max()
    if peak <= 0.0:
        logger.warning("All samples fall outside the raster bounds; image is blank")
        return GrayImage(np.zeros_like(density))
    return GrayImage(np.clip(255.0 * density / peak, 0.0, 255.0))

"""
Low-level visual-quality metrics and the latent consistency metric.

Kernel metrics are evaluated over the valid interior only (no padding).
Variances and standard deviations are population statistics. Every metric
is invariant under adding a constant to all pixels, so inputs are shifted
by their first pixel before filtering; constant images then give exact
zeros.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.signal import correlate2d

from ..constants import (
    BLUR_KERNEL_SIZE,
    DEFAULT_BLUR_SIGMA,
    DEFAULT_CANNY_HIGH,
    DEFAULT_CANNY_LOW,
    DEFAULT_NOISE_PERCENTILE,
    DEFAULT_NOISE_WINDOW,
    DILATION_ITERATIONS,
)
from ..records import dumps
from ..trajectory import Trajectory
from .images import GrayImage

logger = logging.getLogger(__name__)

LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
HIGH_PASS_KERNEL = np.array([[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]])
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
MIN_KERNEL_DIM = 3
MIN_EDGE_DIM = 7


class ImageTooSmallError(ValueError):
    pass


class NoSmoothRegionError(ValueError):
    """Raised when the smooth-pixel mask of the noise estimate is empty."""

    def __init__(self):
        super().__init__("no smooth region")


class IncompleteTrajectoryError(ValueError):
    pass


def _require(img: GrayImage, min_dim: int, what: str) -> None:
    if img.min_dim < min_dim:
        raise ImageTooSmallError(
            f"{what} needs an image of at least {min_dim}x{min_dim}, got {img.height}x{img.width}"
        )


def _centered(img: GrayImage) -> np.ndarray:
    return img.pixels - img.pixels.flat[0]


def laplacian_variance(img: GrayImage) -> float:
    """Variance of the 4-neighbour Laplacian response over the valid interior."""
    _require(img, MIN_KERNEL_DIM, "laplacian_variance")
    response = correlate2d(_centered(img), LAPLACIAN_KERNEL, mode="valid")
    return float(np.var(response))


def high_freq_energy(img: GrayImage) -> float:
    """Mean absolute response of the 3x3 high-pass kernel over the valid interior."""
    _require(img, MIN_KERNEL_DIM, "high_freq_energy")
    response = correlate2d(_centered(img), HIGH_PASS_KERNEL, mode="valid")
    return float(np.mean(np.abs(response)))


def _non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """
    Keep pixels whose magnitude is >= both neighbours along the gradient,
    with the direction quantized to 0/45/90/135 degrees. Neighbours outside
    the map count as 0.
    """
    angle = (np.degrees(np.arctan2(gy, gx)) + 180.0) % 180.0
    padded = np.pad(mag, 1)
    h, w = mag.shape

    def shifted(di: int, dj: int) -> np.ndarray:
        return padded[1 + di: 1 + di + h, 1 + dj: 1 + dj + w]

    # rows grow downward, so a +y gradient points to row i+1
    horizontal = (angle < 22.5) | (angle >= 157.5)
    diagonal = (angle >= 22.5) & (angle < 67.5)
    vertical = (angle >= 67.5) & (angle < 112.5)
    anti = (angle >= 112.5) & (angle < 157.5)

    keep = np.zeros_like(mag, dtype=bool)
    for region, (a, b) in (
        (horizontal, ((0, -1), (0, 1))),
        (diagonal, ((1, 1), (-1, -1))),
        (vertical, ((-1, 0), (1, 0))),
        (anti, ((1, -1), (-1, 1))),
    ):
        keep |= region & (mag >= shifted(*a)) & (mag >= shifted(*b))
    return keep & (mag > 0.0)


def _hysteresis(mag: np.ndarray, candidates: np.ndarray, low: float, high: float) -> np.ndarray:
    weak = candidates & (mag >= low)
    strong = candidates & (mag >= high)
    labels, count = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return np.zeros_like(weak)
    keep = np.zeros(count + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def canny_edges(img: GrayImage, low_thresh: float = DEFAULT_CANNY_LOW, high_thresh: float = DEFAULT_CANNY_HIGH) -> np.ndarray:
    """
    Boolean edge map the size of ``img``.

    Sobel gradients over the valid interior, non-maximum suppression, then
    hysteresis with 8-connected flood fill from the strong pixels. The
    outermost ring is never an edge.
    """
    if low_thresh > high_thresh:
        raise ValueError(f"thresholds out of order: low={low_thresh} > high={high_thresh}")
    pixels = _centered(img)
    gx = correlate2d(pixels, SOBEL_X, mode="valid")
    gy = correlate2d(pixels, SOBEL_Y, mode="valid")
    mag = np.hypot(gx, gy)
    inner = _hysteresis(mag, _non_max_suppression(mag, gx, gy), low_thresh, high_thresh)
    edges = np.zeros(pixels.shape, dtype=bool)
    edges[1:-1, 1:-1] = inner
    return edges


def edge_artifact(
    img: GrayImage,
    low_thresh: float = DEFAULT_CANNY_LOW,
    high_thresh: float = DEFAULT_CANNY_HIGH,
    iterations: int = DILATION_ITERATIONS,
) -> float:
    """Population std of intensities inside the dilated edge band; 0 without edges."""
    if low_thresh > high_thresh:
        raise ValueError(f"thresholds out of order: low={low_thresh} > high={high_thresh}")
    _require(img, MIN_EDGE_DIM, "edge_artifact")
    edges = canny_edges(img, low_thresh, high_thresh)
    if not edges.any():
        return 0.0
    band = ndimage.binary_dilation(edges, structure=np.ones((3, 3), dtype=bool), iterations=iterations)
    return float(np.std(_centered(img)[band]))


def gaussian_kernel(size: int = BLUR_KERNEL_SIZE, sigma: float = DEFAULT_BLUR_SIGMA) -> np.ndarray:
    """Normalized size x size Gaussian."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    r = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def local_std(pixels: np.ndarray, window: int) -> np.ndarray:
    """Population std of every full window x window patch."""
    return sliding_window_view(pixels, (window, window)).std(axis=(-2, -1))


def noise_estimate(
    img: GrayImage,
    window: int = DEFAULT_NOISE_WINDOW,
    percentile: float = DEFAULT_NOISE_PERCENTILE,
    blur_sigma: float = DEFAULT_BLUR_SIGMA,
) -> float:
    """
    Mean |I − G_σ * I| over the smooth pixels.

    Smooth pixels are those whose local std is at or below the given
    percentile of all local stds. Only pixels where both the window and the
    blur kernel fit are considered.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    if not 0.0 <= percentile <= 100.0:
        raise ValueError(f"percentile must lie in [0, 100], got {percentile}")
    _require(img, max(window, BLUR_KERNEL_SIZE), "noise_estimate")
    pixels = _centered(img)

    h, w = pixels.shape
    std_map = np.full((h, w), np.nan)
    r = window // 2
    std_map[r:h - r, r:w - r] = local_std(pixels, window)
    noise_map = np.full((h, w), np.nan)
    b = BLUR_KERNEL_SIZE // 2
    blurred = correlate2d(pixels, gaussian_kernel(BLUR_KERNEL_SIZE, blur_sigma), mode="valid")
    noise_map[b:h - b, b:w - b] = np.abs(pixels[b:h - b, b:w - b] - blurred)

    common = np.isfinite(std_map) & np.isfinite(noise_map)
    stds = std_map[common]
    if stds.size == 0:
        raise NoSmoothRegionError()
    smooth = stds <= np.percentile(stds, percentile)
    if not smooth.any():
        raise NoSmoothRegionError()
    return float(np.mean(noise_map[common][smooth]))


def latent_consistency(traj: Trajectory) -> float:
    """
    (1/d)·mean over interior knots of ‖x_t − ((1−t)x_0 + t·x_1)‖².

    Zero when the path is the straight line between its endpoints.
    """
    if not traj.is_complete or np.isnan(traj.states).any():
        raise IncompleteTrajectoryError("latent consistency needs a complete trajectory")
    T = traj.grid.T
    if T < 2:
        return 0.0
    x0 = traj.states[0]
    x1 = traj.states[T]
    t = traj.grid.knots[1:T, None]
    ideal = (1.0 - t) * x0 + t * x1
    gaps = ((traj.states[1:T] - ideal) ** 2).sum(axis=1)
    return float(gaps.mean() / traj.dim)


@dataclass
class VhParams:
    canny_low: float = DEFAULT_CANNY_LOW
    canny_high: float = DEFAULT_CANNY_HIGH
    dilation_iterations: int = DILATION_ITERATIONS
    noise_window: int = DEFAULT_NOISE_WINDOW
    noise_percentile: float = DEFAULT_NOISE_PERCENTILE
    blur_sigma: float = DEFAULT_BLUR_SIGMA


@dataclass
class VhReport:
    """
    Metric record for one input.

    The high-level fields are filled by an external evaluator when one is
    merged in; they stay None here.
    """
    source: str
    laplacian_variance: Optional[float] = None
    high_freq_energy: Optional[float] = None
    edge_artifact: Optional[float] = None
    noise_level: Optional[float] = None
    latent_consistency: Optional[float] = None
    params: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None
    detail_sharpness: Optional[float] = None
    irrelevant_details: Optional[float] = None
    grid_pattern: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return dumps(self.to_dict())


def evaluate_image(img: GrayImage, source: str = "", params: Optional[VhParams] = None) -> VhReport:
    """All four image metrics with the parameters echoed."""
    params = params or VhParams()
    return VhReport(
        source=source,
        laplacian_variance=laplacian_variance(img),
        high_freq_energy=high_freq_energy(img),
        edge_artifact=edge_artifact(img, params.canny_low, params.canny_high, params.dilation_iterations),
        noise_level=noise_estimate(img, params.noise_window, params.noise_percentile, params.blur_sigma),
        params=asdict(params),
    )

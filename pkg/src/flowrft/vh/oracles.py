"""
Direct-formula re-evaluations of the image metrics.

Plain loops over pixels, written independently of the vectorized
implementations; the verify command compares the two.
"""

from collections import deque
from typing import List

import numpy as np
from scipy.signal import correlate2d

from ..constants import BLUR_KERNEL_SIZE, DEFAULT_BLUR_SIGMA, DILATION_ITERATIONS
from ..records import ReportLine, VerificationReport
from ..seeding import Stream, keyed_rng
from .images import GrayImage
from .metrics import (
    edge_artifact,
    gaussian_kernel,
    high_freq_energy,
    laplacian_variance,
    noise_estimate,
)

NEIGHBOURS_8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _pop_var(values: List[float]) -> float:
    n = len(values)
    mean = sum(values) / n
    return sum((v - mean) ** 2 for v in values) / n


def brute_laplacian_variance(img: GrayImage) -> float:
    p = img.pixels
    h, w = p.shape
    out = []
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            out.append(p[i - 1, j] + p[i + 1, j] + p[i, j - 1] + p[i, j + 1] - 4.0 * p[i, j])
    return _pop_var(out)


def brute_high_freq_energy(img: GrayImage) -> float:
    p = img.pixels
    h, w = p.shape
    total, count = 0.0, 0
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            s = 8.0 * p[i, j]
            for di, dj in NEIGHBOURS_8:
                s -= p[i + di, j + dj]
            total += abs(s)
            count += 1
    return total / count


def brute_noise_estimate(img: GrayImage, window: int, percentile: float, blur_sigma: float = DEFAULT_BLUR_SIGMA) -> float:
    p = img.pixels
    h, w = p.shape
    r = window // 2
    b = BLUR_KERNEL_SIZE // 2
    kernel = gaussian_kernel(BLUR_KERNEL_SIZE, blur_sigma)
    m = max(r, b)
    stds, noise = [], []
    for i in range(m, h - m):
        for j in range(m, w - m):
            patch = [p[a, c] for a in range(i - r, i + r + 1) for c in range(j - r, j + r + 1)]
            stds.append(_pop_var(patch) ** 0.5)
            blurred = 0.0
            for a in range(-b, b + 1):
                for c in range(-b, b + 1):
                    blurred += kernel[a + b, c + b] * p[i + a, j + c]
            noise.append(abs(p[i, j] - blurred))
    threshold = np.percentile(stds, percentile)
    picked = [n for s, n in zip(stds, noise) if s <= threshold]
    return sum(picked) / len(picked)


def brute_canny(img: GrayImage, low: float, high: float) -> np.ndarray:
    p = img.pixels
    h, w = p.shape
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            gx[i, j] = (p[i - 1, j + 1] + 2 * p[i, j + 1] + p[i + 1, j + 1]
                        - p[i - 1, j - 1] - 2 * p[i, j - 1] - p[i + 1, j - 1])
            gy[i, j] = (p[i + 1, j - 1] + 2 * p[i + 1, j] + p[i + 1, j + 1]
                        - p[i - 1, j - 1] - 2 * p[i - 1, j] - p[i - 1, j + 1])
    mag = np.hypot(gx, gy)

    def at(i, j):
        # outside the interior the magnitude map does not exist
        return mag[i, j] if 1 <= i < h - 1 and 1 <= j < w - 1 else 0.0

    thin = np.zeros((h, w), dtype=bool)
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            m = mag[i, j]
            if m <= 0.0:
                continue
            ang = (np.degrees(np.arctan2(gy[i, j], gx[i, j])) + 180.0) % 180.0
            if ang < 22.5 or ang >= 157.5:
                n1, n2 = at(i, j - 1), at(i, j + 1)
            elif ang < 67.5:
                n1, n2 = at(i + 1, j + 1), at(i - 1, j - 1)
            elif ang < 112.5:
                n1, n2 = at(i - 1, j), at(i + 1, j)
            else:
                n1, n2 = at(i + 1, j - 1), at(i - 1, j + 1)
            thin[i, j] = m >= n1 and m >= n2

    edges = np.zeros((h, w), dtype=bool)
    queue = deque((i, j) for i in range(h) for j in range(w) if thin[i, j] and mag[i, j] >= high)
    for i, j in queue:
        edges[i, j] = True
    while queue:
        i, j = queue.popleft()
        for di, dj in NEIGHBOURS_8:
            a, c = i + di, j + dj
            if 0 <= a < h and 0 <= c < w and not edges[a, c] and thin[a, c] and mag[a, c] >= low:
                edges[a, c] = True
                queue.append((a, c))
    return edges


def brute_edge_artifact(img: GrayImage, low: float, high: float, iterations: int = DILATION_ITERATIONS) -> float:
    mask = brute_canny(img, low, high)
    if not mask.any():
        return 0.0
    h, w = mask.shape
    for _ in range(iterations):
        grown = mask.copy()
        for i in range(h):
            for j in range(w):
                if mask[i, j]:
                    for di, dj in NEIGHBOURS_8:
                        if 0 <= i + di < h and 0 <= j + dj < w:
                            grown[i + di, j + dj] = True
        mask = grown
    return _pop_var([img.pixels[i, j] for i in range(h) for j in range(w) if mask[i, j]]) ** 0.5


def random_test_image(seed: int, index: int, size: int = 16) -> GrayImage:
    """Smooth structure plus noise, so every metric has something to measure."""
    rng = keyed_rng(seed, Stream.PROBE, 1, index)
    yy, xx = np.mgrid[0:size, 0:size]
    base = 127.5 + 40.0 * np.sin(xx / rng.uniform(1.5, 4.0)) * np.cos(yy / rng.uniform(1.5, 4.0))
    base[:, size // 2:] += rng.uniform(-40.0, 40.0)
    return GrayImage(np.clip(base + rng.normal(0.0, 8.0, base.shape), 0.0, 255.0))


def verify_image_metrics(seed: int = 0, n_images: int = 50, tol: float = 1e-10) -> VerificationReport:
    """
    Vectorized metrics against the loop formulas, plus the sanity properties:
    zeros on constant images, noise estimate increasing in added noise and
    blur lowering the Laplacian variance.
    """
    report = VerificationReport()
    pairs = {
        "laplacian_variance": (laplacian_variance, brute_laplacian_variance),
        "high_freq_energy": (high_freq_energy, brute_high_freq_energy),
        "edge_artifact": (lambda im: edge_artifact(im, 50.0, 150.0), lambda im: brute_edge_artifact(im, 50.0, 150.0)),
        "noise_estimate": (lambda im: noise_estimate(im, 7, 30.0), lambda im: brute_noise_estimate(im, 7, 30.0)),
    }
    images = [random_test_image(seed, i) for i in range(n_images)]
    for name, (fast, slow) in pairs.items():
        worst = 0.0
        for img in images:
            a, b = fast(img), slow(img)
            worst = max(worst, abs(a - b) / max(1.0, abs(b)))
        report.add(ReportLine(f"vh_oracle_{name}", worst, tol, worst <= tol))

    flat = GrayImage.constant(16, 16, 93.0)
    zeros = [laplacian_variance(flat), high_freq_energy(flat), edge_artifact(flat), noise_estimate(flat)]
    report.add(ReportLine("vh_constant_zero", max(zeros), 0.0, max(zeros) == 0.0))

    rng = keyed_rng(seed, Stream.PROBE, 2)
    yy, xx = np.mgrid[0:32, 0:32]
    base = 100.0 + 40.0 * np.sin(xx / 6.0) + 30.0 * np.cos(yy / 5.0)
    white = rng.standard_normal(base.shape)
    levels = [noise_estimate(GrayImage(np.clip(base + s * white, 0, 255))) for s in (1.0, 2.0, 4.0)]
    increasing = levels[0] < levels[1] < levels[2]
    report.add(ReportLine("vh_noise_monotone", 0.0 if increasing else 1.0, 0.0, increasing,
                          note=", ".join(f"{v:.4f}" for v in levels)))

    sharp = images[0]
    blurred = GrayImage(correlate2d(sharp.pixels, gaussian_kernel(), mode="same", boundary="symm"))
    before, after = laplacian_variance(sharp), laplacian_variance(blurred)
    report.add(ReportLine("vh_blur_lowers_laplacian", after / before, 1.0, after < before))
    return report

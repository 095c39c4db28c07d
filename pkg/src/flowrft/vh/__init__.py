"""
Low-level visual hallucination metrics for grayscale images.

Exports the image container and codec, the metric functions and the
per-input report.
"""

from .images import GrayImage, PgmFormatError, decode_pgm, encode_pgm, rasterize_samples, read_pgm, write_pgm
from .metrics import (
    ImageTooSmallError,
    IncompleteTrajectoryError,
    NoSmoothRegionError,
    VhParams,
    VhReport,
    canny_edges,
    edge_artifact,
    evaluate_image,
    high_freq_energy,
    laplacian_variance,
    latent_consistency,
    noise_estimate,
)

__all__ = [
    'GrayImage',
    'PgmFormatError',
    'decode_pgm',
    'encode_pgm',
    'rasterize_samples',
    'read_pgm',
    'write_pgm',
    'ImageTooSmallError',
    'IncompleteTrajectoryError',
    'NoSmoothRegionError',
    'VhParams',
    'VhReport',
    'canny_edges',
    'edge_artifact',
    'evaluate_image',
    'high_freq_energy',
    'laplacian_variance',
    'latent_consistency',
    'noise_estimate',
]

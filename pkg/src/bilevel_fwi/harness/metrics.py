"""Reconstruction quality metrics: relative error, SSIM and improvement factor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.metrics import structural_similarity

from ..grid_fem import Grid


def relative_error_map(recon, gt) -> np.ndarray:
    """Per-node ``|recon - gt| / |gt| * 100``."""
    recon = np.asarray(recon, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if recon.shape != gt.shape:
        raise ValueError("reconstruction and ground truth differ in shape")
    if np.any(gt == 0):
        raise ValueError("ground truth has zero entries")
    return np.abs(recon - gt) / np.abs(gt) * 100.0


def mre(recon, gt) -> tuple[float, np.ndarray]:
    """Mean relative percentage error and the per-node map it averages."""
    re = relative_error_map(recon, gt)
    return float(np.mean(re)), re


def ssim(recon, gt, grid: Grid = None) -> float:
    """Gaussian-window SSIM (sigma 1.5, K1 0.01, K2 0.03), range from the ground truth.

    Nodal vectors are reshaped to images with ``grid``; 2D arrays are used as given.
    """
    if grid is not None:
        recon, gt = grid.as_image(recon), grid.as_image(gt)
    recon = np.asarray(recon, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if recon.shape != gt.shape:
        raise ValueError("images differ in shape")
    if not np.any(gt):
        raise ValueError("ground truth is identically zero")
    rng = float(gt.max() - gt.min())
    if rng == 0.0:
        rng = float(abs(gt.max()))
    return float(
        structural_similarity(
            gt, recon, data_range=rng, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, K1=0.01, K2=0.03,
        )
    )


def improvement_factor(psi0: float, psi_opt: float) -> float:
    if not (psi0 > 0 and psi_opt > 0):
        raise ValueError("improvement factor needs positive objective values")
    return float(psi0) / float(psi_opt)


@dataclass
class MetricsRow:
    slice_id: int
    role: str
    strategy: str
    mre_start: float
    mre_opt: float
    ssim_start: float
    ssim_opt: float
    IF: float = float("nan")
    psi0: float = float("nan")
    psi_opt: float = float("nan")

    def __post_init__(self):
        if self.role not in ("train", "test"):
            raise ValueError(f"role must be 'train' or 'test', got {self.role!r}")

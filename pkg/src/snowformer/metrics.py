"""Reference-quality PSNR and SSIM in RGB, plus dataset evaluation."""

from __future__ import annotations

import math

import numpy as np

from .errors import ImageTooSmall, ShapeMismatch
from .hashing import config_sha256
from .synth import dataset_read
from .tiling import plan_tiles, tiled_inference

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr_metric(x: np.ndarray, y: np.ndarray, max_val: float = 1.0) -> float:
    """10*log10(max_val^2 / MSE) over all pixels; capped at 100 dB."""
    if x.shape != y.shape:
        raise ShapeMismatch(f"psnr_metric: {x.shape} vs {y.shape}")
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - y) ** 2))
    if mse <= max_val ** 2 * 10.0 ** (-PSNR_CAP_DB / 10.0):
        return PSNR_CAP_DB
    return min(10.0 * math.log10(max_val ** 2 / mse), PSNR_CAP_DB)


def _gaussian_window() -> np.ndarray:
    r = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * SSIM_SIGMA ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    v = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.tensordot(v, kernel, axes=([2, 3], [0, 1]))


def ssim_metric(x: np.ndarray, y: np.ndarray) -> float:
    """Gaussian-weighted SSIM over valid window positions, averaged over RGB."""
    if x.shape != y.shape:
        raise ShapeMismatch(f"ssim_metric: {x.shape} vs {y.shape}")
    c, h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ImageTooSmall(f"ssim_metric: {h}x{w} smaller than {SSIM_WINDOW}")
    kernel = _gaussian_window()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    vals = []
    for ch in range(c):
        a = np.asarray(x[ch], dtype=np.float64)
        b = np.asarray(y[ch], dtype=np.float64)
        mu_a = _windowed_mean(a, kernel)
        mu_b = _windowed_mean(b, kernel)
        var_a = _windowed_mean(a * a, kernel) - mu_a ** 2
        var_b = _windowed_mean(b * b, kernel) - mu_b ** 2
        cov = _windowed_mean(a * b, kernel) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def evaluate_dataset(model, dataset_dir, tile: int = 256, overlap: int = 32) -> dict:
    """Tiled inference over every pair in a dataset directory.

    Returns {images: [{name, psnr_db, ssim}], mean_psnr_db, mean_ssim,
    param_count, mac_estimate, config_sha256}.
    """
    ds = dataset_read(dataset_dir)
    images = []
    plan = None
    for idx in range(len(ds)):
        snow, gt = ds.pair(idx)
        _, h, w = snow.shape
        if plan is None or (plan.h, plan.w) != (h, w):
            plan = plan_tiles(h, w, tile, overlap)
        restored = tiled_inference(model, snow, plan)
        images.append({
            "name": f"{idx:06d}",
            "psnr_db": psnr_metric(restored, gt),
            "ssim": ssim_metric(restored, gt),
        })
    mac = model.flops_estimate(plan.tile_h, plan.tile_w) if images else 0
    return {
        "images": images,
        "mean_psnr_db": float(np.mean([i["psnr_db"] for i in images])) if images else 0.0,
        "mean_ssim": float(np.mean([i["ssim"] for i in images])) if images else 0.0,
        "param_count": int(model.param_count()),
        "mac_estimate": int(mac),
        "config_sha256": config_sha256(model.cfg.to_dict()),
    }

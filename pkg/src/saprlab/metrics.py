"""Multi-scale structural similarity on 0-255 images."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5


def gaussian_window(size=WINDOW_SIZE, sigma=WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = len(win)
    h, w = img.shape
    rows = sum(win[i] * img[i : h - k + 1 + i, :] for i in range(k))
    return sum(win[j] * rows[:, j : w - k + 1 + j] for j in range(k))


def _ssim_terms(a, b, win, data_range, k1=0.01, k2=0.03):
    """Mean SSIM and mean contrast-structure term over the valid region."""
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    mu_ab = mu_a * mu_b
    mu_sq = mu_a * mu_a + mu_b * mu_b
    var_sum = _filter_valid(a * a, win) + _filter_valid(b * b, win) - mu_sq
    cov = _filter_valid(a * b, win) - mu_ab
    cs_map = (2 * cov + c2) / (var_sum + c2)
    lum_map = (2 * mu_ab + c1) / (mu_sq + c1)
    return float((lum_map * cs_map).mean()), float(cs_map.mean())


def _downsample(img):
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def num_levels(size: int, max_levels: int = 5, window: int = WINDOW_SIZE) -> int:
    """Largest level count whose coarsest scale is still at least ``window`` pixels."""
    levels = 0
    while levels < max_levels and size // (2**levels) >= window:
        levels += 1
    return levels


def ssim(a, b, data_range=255.0) -> float:
    """Single-scale SSIM of two 2D images with the same Gaussian window."""
    return _ssim_terms(np.asarray(a, float), np.asarray(b, float), gaussian_window(), data_range)[0]


def _ms_ssim_2d(a, b, data_range, levels, weights):
    win = gaussian_window()
    score = 1.0
    for level in range(levels):
        full, cs = _ssim_terms(a, b, win, data_range)
        value = full if level == levels - 1 else cs
        # negative structure correlation would make fractional powers undefined
        score *= max(value, 0.0) ** weights[level]
        a, b = _downsample(a), _downsample(b)
    return score


def ms_ssim(a, b, data_range=255.0, max_levels=5) -> float:
    """Multi-scale SSIM of two images shaped ``[C, H, W]`` or ``[H, W]``.

    The level count shrinks for small images (coarsest scale >= 11 px) and the
    standard per-level exponents are renormalised over the levels used.
    Channels are scored independently and averaged. Result lies in [0, 1].
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ms_ssim: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise DimensionError(f"ms_ssim expects [C, H, W] or [H, W], got {a.shape}")
    levels = num_levels(min(a.shape[-2:]), max_levels)
    if levels == 0:
        raise DimensionError(f"ms_ssim: images of {a.shape[-2:]} are smaller than the {WINDOW_SIZE}px window")
    weights = MS_SSIM_WEIGHTS[:levels] / MS_SSIM_WEIGHTS[:levels].sum()
    scores = [_ms_ssim_2d(a[c], b[c], data_range, levels, weights) for c in range(a.shape[0])]
    return float(min(max(np.mean(scores), 0.0), 1.0))

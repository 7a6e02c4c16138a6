"""PSNR/SSIM for images and videos, plus temporal-attention heatmaps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import ShapeMismatchError

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _frames(x) -> np.ndarray:
    """Accept an image, a video object or a frame stack; return (F, H, W, C)."""
    frames = getattr(x, "frames", x)
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeMismatchError(f"expected image or frame stack, got shape {arr.shape}")
    return arr


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    a, b = _frames(a), _frames(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr inputs differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def mean_view_psnr(a, b, cap: float = PSNR_CAP) -> float:
    """Average of per-frame PSNRs (each view counts once)."""
    a, b = _frames(a), _frames(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr inputs differ in shape: {a.shape} vs {b.shape}")
    return float(np.mean([psnr(x, y, cap) for x, y in zip(a, b)]))


def _box(x: np.ndarray, win: int) -> np.ndarray:
    """Mean over every valid ``win x win`` window of each (H, W) plane in ``x``."""
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 0), (1, 0)]
    c = np.pad(x, pad).cumsum(-2).cumsum(-1)
    s = c[..., win:, win:] - c[..., :-win, win:] - c[..., win:, :-win] + c[..., :-win, :-win]
    return s / win**2


def _box_adjoint(g: np.ndarray, win: int) -> np.ndarray:
    """Transpose of :func:`_box` for a single (H', W') plane."""
    return convolve2d(g, np.full((win, win), 1.0 / win**2), mode="full")


def _ssim_terms(a, b, win, data_range):
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _box(a, win), _box(b, win)
    var_a = _box(a * a, win) - mu_a**2
    var_b = _box(b * b, win) - mu_b**2
    cov = _box(a * b, win) - mu_a * mu_b
    num_l = 2 * mu_a * mu_b + c1
    den_l = mu_a**2 + mu_b**2 + c1
    num_c = 2 * cov + c2
    den_c = var_a + var_b + c2
    return mu_a, mu_b, num_l, den_l, num_c, den_c


def ssim(a, b, window: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid uniform windows, averaged over channels and frames."""
    a, b = _frames(a), _frames(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if min(a.shape[1:3]) < window:
        raise ShapeMismatchError(f"image {a.shape[1:3]} is smaller than the {window}x{window} window")
    # channels first so the window slides over the last two axes
    a = np.moveaxis(a, -1, 1)
    b = np.moveaxis(b, -1, 1)
    _, _, num_l, den_l, num_c, den_c = _ssim_terms(a, b, window, data_range)
    return float(np.mean(num_l * num_c / (den_l * den_c)))


def ssim_and_grad(x: np.ndarray, y: np.ndarray, window: int = SSIM_WINDOW,
                  data_range: float = 1.0) -> tuple[float, np.ndarray]:
    """SSIM of one (H, W, C) image pair and its gradient w.r.t. ``x``."""
    xs = np.moveaxis(np.asarray(x, dtype=np.float64), -1, 0)
    ys = np.moveaxis(np.asarray(y, dtype=np.float64), -1, 0)
    mu_x, mu_y, num_l, den_l, num_c, den_c = _ssim_terms(xs, ys, window, data_range)
    smap = num_l * num_c / (den_l * den_c)
    n = smap.size
    # partials of s = (A1 A2) / (B1 B2) wrt mu_x, var_x (=sigma_x^2) and cov_xy
    d_mu = (2 * mu_y * num_c / (den_l * den_c) - smap * 2 * mu_x / den_l) / n
    d_var = (-smap / den_c) / n
    d_cov = (2 * num_l / (den_l * den_c)) / n
    # var_x = box(x^2) - mu_x^2, cov = box(xy) - mu_x mu_y
    g_box_x = d_mu - 2 * mu_x * d_var - mu_y * d_cov
    grad = np.empty_like(xs)
    for c in range(xs.shape[0]):
        grad[c] = (
            _box_adjoint(g_box_x[c], window)
            + 2 * xs[c] * _box_adjoint(d_var[c], window)
            + ys[c] * _box_adjoint(d_cov[c], window)
        )
    return float(smap.mean()), np.moveaxis(grad, 0, -1)


@dataclass
class AttnHeatmap:
    """Mean temporal attention over heads, layers, spatial tokens and probes."""

    matrix: np.ndarray
    layers: tuple[int, ...] | None = None
    heads: tuple[int, ...] | None = None
    sigma: float = 1.0

    @property
    def n(self) -> int:
        """Index of the closing frame (matrix is (n+1) x (n+1))."""
        return self.matrix.shape[0] - 1

    def corner_mass(self) -> float:
        n = self.n
        m = self.matrix
        return float(np.mean([m[0, 0], m[0, n], m[n, 0], m[n, n]]))

    def boundary_pair_mean(self) -> float:
        n = self.n
        return float(0.5 * (self.matrix[0, n] + self.matrix[n, 0]))

    def intermediate_mean(self) -> float:
        """Mean over off-diagonal entries among frames 1..n-1."""
        inner = self.matrix[1:-1, 1:-1]
        off = ~np.eye(len(inner), dtype=bool)
        return float(inner[off].mean()) if off.any() else float("nan")

    def to_csv(self, path) -> None:
        np.savetxt(path, self.matrix, delimiter=",", fmt="%.10g")


def attention_stats(model, probes, layers=None, heads=None, sigma: float = 1.0, seed: int = 0) -> AttnHeatmap:
    """Average the temporal softmax matrices a fixer produces at noise level ``sigma``."""
    from .restorer.stats import capture_temporal_attention

    probes = list(probes)
    if not probes:
        raise ValueError("attention_stats needs at least one probe sample")
    w = capture_temporal_attention(model, probes, sigma=sigma, seed=seed)  # (P, L, H, F, F)
    if layers is not None:
        w = w[:, list(layers)]
    if heads is not None:
        w = w[:, :, list(heads)]
    matrix = w.mean(axis=(0, 1, 2))
    return AttnHeatmap(
        matrix=matrix,
        layers=None if layers is None else tuple(layers),
        heads=None if heads is None else tuple(heads),
        sigma=sigma,
    )

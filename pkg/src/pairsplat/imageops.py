"""Image-space operators with adjoints: Gaussian blur, L1, SSIM, MSE and PSNR.

Images are ``(H, W, 3)`` float64 arrays.  The separable blur is expressed as a
pair of dense 1-D operators (one per axis) with reflect padding folded in,
so its adjoint is the exact transpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidKernelError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 99.0


@dataclass(frozen=True)
class BlurKernel:
    size: int
    sigma: float
    weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise InvalidKernelError(f"kernel size must be odd and positive, got {self.size}")
        if not self.sigma > 0:
            raise InvalidKernelError(f"kernel sigma must be positive, got {self.sigma}")
        r = self.size // 2
        x = np.arange(-r, r + 1, dtype=np.float64)
        w = np.exp(-0.5 * (x / self.sigma) ** 2)
        w = 0.5 * (w + w[::-1])
        object.__setattr__(self, "weights", w / w.sum())


@lru_cache(maxsize=64)
def _axis_operator(n: int, size: int, sigma: float) -> np.ndarray:
    """Dense ``n x n`` matrix of a 1-D correlation with reflect padding."""
    k = BlurKernel(size, sigma)
    r = size // 2
    if n <= r:
        raise ShapeError(f"axis length {n} too short for reflect padding of radius {r}")
    src = np.pad(np.arange(n), r, mode="reflect")
    op = np.zeros((n, n))
    rows = np.repeat(np.arange(n), size)
    cols = src[np.arange(n)[:, None] + np.arange(size)[None, :]].reshape(-1)
    np.add.at(op, (rows, cols), np.tile(k.weights, n))
    op.setflags(write=False)
    return op


def _as_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise ShapeError(f"expected an H x W x C image, got shape {img.shape}")
    return img


def _apply(img: np.ndarray, k: BlurKernel, transpose: bool) -> np.ndarray:
    h, w, _ = img.shape
    ah = _axis_operator(h, k.size, k.sigma)
    aw = _axis_operator(w, k.size, k.sigma)
    if transpose:
        ah, aw = ah.T, aw.T
    # out[:, :, c] = ah @ img[:, :, c] @ aw.T, batched over channels
    chw = np.ascontiguousarray(img.transpose(2, 0, 1))
    return np.ascontiguousarray((ah @ chw @ aw.T).transpose(1, 2, 0))


def gaussian_blur(img, k: BlurKernel) -> np.ndarray:
    """Separable per-channel Gaussian blur with reflect padding; same shape as the input."""
    return _apply(_as_image(img), k, transpose=False)


def blur_adjoint(upstream, k: BlurKernel) -> np.ndarray:
    return _apply(_as_image(upstream), k, transpose=True)


def _same_shape(a, b):
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def l1(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_grad(a, b) -> tuple[float, np.ndarray]:
    """Mean absolute error and its gradient w.r.t. ``a`` (sign(0) = 0)."""
    a, b = _same_shape(a, b)
    d = a - b
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


_SSIM_KERNEL = BlurKernel(SSIM_WINDOW, SSIM_SIGMA)


def _ssim_stats(a, b):
    k = _SSIM_KERNEL
    mu_a = gaussian_blur(a, k)
    mu_b = gaussian_blur(b, k)
    var_a = gaussian_blur(a * a, k) - mu_a * mu_a
    var_b = gaussian_blur(b * b, k) - mu_b * mu_b
    cov = gaussian_blur(a * b, k) - mu_a * mu_b
    n1 = 2.0 * mu_a * mu_b + SSIM_C1
    n2 = 2.0 * cov + SSIM_C2
    d1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    d2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, n1, n2, d1, d2


def ssim(a, b) -> float:
    """Mean local SSIM: 11x11 Gaussian window (sigma 1.5), per channel, L = 1."""
    a, b = _same_shape(a, b)
    _, _, n1, n2, d1, d2 = _ssim_stats(a, b)
    return float(np.mean((n1 * n2) / (d1 * d2)))


def ssim_grad(a, b) -> tuple[float, np.ndarray]:
    """SSIM and its gradient w.r.t. ``a``."""
    a, b = _same_shape(a, b)
    mu_a, mu_b, n1, n2, d1, d2 = _ssim_stats(a, b)
    s = (n1 * n2) / (d1 * d2)
    m = s.size
    # d(mean s) w.r.t. the local statistics
    g_mu_a = (2.0 * mu_b * n2 / (d1 * d2) - s * 2.0 * mu_a / d1) / m
    g_var_a = -s / d2 / m
    g_cov = 2.0 * n1 / (d1 * d2) / m
    # var_a = B(a^2) - mu_a^2, cov = B(ab) - mu_a mu_b
    g_mu_a = g_mu_a - 2.0 * mu_a * g_var_a - mu_b * g_cov
    k = _SSIM_KERNEL
    grad = (blur_adjoint(g_mu_a, k) + 2.0 * a * blur_adjoint(g_var_a, k)
            + b * blur_adjoint(g_cov, k))
    return float(np.mean(s)), grad


def mse(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(m: float) -> float:
    if m <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / m))


def psnr(a, b) -> float:
    """PSNR in dB with peak 1.0; identical images report the 99 dB cap."""
    return psnr_from_mse(mse(a, b))

"""Reconstruction, paired and low-frequency consistency losses, and the consistency weight schedule."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ConfigError
from .imageops import BlurKernel, blur_adjoint, gaussian_blur, l1_grad, ssim_grad, _same_shape

SCHEDULES = ("progressive", "constant")


@dataclass(frozen=True)
class LossWeights:
    lambda_dssim: float = 0.2
    beta: float = 0.25
    lambda_max: float = 0.05
    t_warm: int = 7000
    # "constant" applies lambda_max from the first iteration (ablation variant)
    schedule: str = "progressive"

    def __post_init__(self):
        for name in ("lambda_dssim", "beta", "lambda_max"):
            if getattr(self, name) < 0:
                raise ConfigError("must be non-negative", name)
        if self.t_warm < 1:
            raise ConfigError("must be >= 1", "t_warm")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"must be one of {SCHEDULES}", "schedule")


@dataclass(frozen=True)
class LossBreakdown:
    iteration: int
    rgb_a: float
    rgb_b: float
    lfc: float
    lambda_t: float
    total: float
    n_pairs: int = 0

    def reassembles(self, beta: float, tol: float = 1e-10) -> bool:
        return abs(self.rgb_a + beta * self.rgb_b + self.lambda_t * self.lfc - self.total) <= tol


def rgb_loss(render, gt, lambda_dssim: float) -> float:
    return rgb_loss_grad(render, gt, lambda_dssim)[0]


def rgb_loss_grad(render, gt, lambda_dssim: float) -> tuple[float, np.ndarray]:
    """``L1 + lambda_dssim * (1 - SSIM)`` and its gradient w.r.t. ``render``."""
    value, grad = l1_grad(render, gt)
    if lambda_dssim == 0.0:
        return value, grad
    s, g_s = ssim_grad(render, gt)
    return value + lambda_dssim * (1.0 - s), grad - lambda_dssim * g_s


def paired_rec_loss(loss_a: float, loss_b: float, beta: float) -> float:
    return loss_a + beta * loss_b


def lfc_loss(img_a, img_b_detached, kernel: BlurKernel) -> float:
    return lfc_loss_grad(img_a, img_b_detached, kernel)[0]


def lfc_loss_grad(img_a, img_b_detached, kernel: BlurKernel) -> tuple[float, np.ndarray]:
    """Mean L1 between blurred renders; gradient flows to ``img_a`` only.

    ``img_b_detached`` is a constant target, so no gradient is ever produced for it.
    """
    img_a, img_b_detached = _same_shape(img_a, img_b_detached)
    value, g = l1_grad(gaussian_blur(img_a, kernel), gaussian_blur(img_b_detached, kernel))
    return value, blur_adjoint(g, kernel)


def lambda_schedule(t: int, lambda_max: float, t_warm: int) -> float:
    """Linear warm-up ``lambda_max * min(1, t / t_warm)``."""
    if t_warm <= 0:
        raise ConfigError("must be >= 1", "t_warm")
    if t < 0:
        raise ValueError("t must be >= 0")
    return lambda_max * min(1.0, t / t_warm)


def consistency_weight(t: int, weights: LossWeights) -> float:
    if weights.schedule == "constant":
        return weights.lambda_max
    return lambda_schedule(t, weights.lambda_max, weights.t_warm)


def total_loss(rgb_a: float, rgb_b: float, lfc: float, weights: LossWeights, t: int,
               n_pairs: int = 1) -> LossBreakdown:
    lam = consistency_weight(t, weights)
    total = paired_rec_loss(rgb_a, rgb_b, weights.beta) + lam * lfc
    return LossBreakdown(t, rgb_a, rgb_b, lfc, lam, total, n_pairs)


def multibranch_pairs(b: int, symmetric: bool = False) -> list[tuple[int, int]]:
    """Ordered ``(target, learner)`` pairs for ``b`` branches.

    Each unordered pair ``i < j`` contributes one term where branch ``j`` is the
    detached target and ``i`` the learner; ``symmetric`` adds the reverse terms.
    """
    if b < 2:
        raise ConfigError("consistency needs at least two branches", "branches")
    pairs = [(j, i) for i, j in combinations(range(b), 2)]
    if symmetric:
        pairs += [(i, j) for j, i in pairs]
    return pairs


def consistency_grads(renders: list[np.ndarray], kernel: BlurKernel,
                      pairs: list[tuple[int, int]]) -> tuple[float, list[np.ndarray | None]]:
    """Mean pairwise consistency loss and per-branch render gradients (None when absent).

    In symmetric mode the two directions of a pair count as one term, so each
    direction carries half its weight.
    """
    n_terms = len({frozenset(p) for p in pairs})
    scale = n_terms / len(pairs)
    grads: list[np.ndarray | None] = [None] * len(renders)
    total = 0.0
    for target, learner in pairs:
        value, g = lfc_loss_grad(renders[learner], renders[target], kernel)
        total += scale * value
        g = (scale / n_terms) * g
        grads[learner] = g if grads[learner] is None else grads[learner] + g
    return total / n_terms, grads

"""Independent finite-difference oracle for the combined training objective.

The objective is re-assembled here from the scalar loss functions, with every
consistency target frozen at the base parameters, which is what stop-gradient
means for a derivative taken at that point.
"""

import numpy as np

from pairsplat.dropout import DropoutMask, compensation_factor
from pairsplat.imageops import gaussian_blur
from pairsplat.regularize import LossWeights, lambda_schedule, lfc_loss, multibranch_pairs, rgb_loss
from pairsplat.render import render
from pairsplat.scene import GaussianField, make_orbit_cameras
from pairsplat.trainer import TrainConfig

from conftest import small_field

KINK_MARGIN = 1e-7


def fd_setup_config(t_warm=100, branches=2):
    return TrainConfig(iterations=1000, weights=LossWeights(t_warm=t_warm), branches=branches,
                       dropout_rate=0.1, compensation=True)


def objective(params, cam, gt, masks, cfg, t, frozen):
    fld = GaussianField(params)
    w = cfg.weights
    renders = [render(fld, m, cam, cfg.background, opacity_scale=compensation_factor(m.rate, cfg.compensation))
               for m in masks]
    value = rgb_loss(renders[0], gt, w.lambda_dssim)
    value += w.beta * sum(rgb_loss(r, gt, w.lambda_dssim) for r in renders[1:])
    if len(masks) >= 2:
        pairs = multibranch_pairs(len(masks))
        lfc = np.mean([lfc_loss(renders[learner], frozen[target], cfg.kernel) for target, learner in pairs])
        value += lambda_schedule(t, w.lambda_max, w.t_warm) * lfc
    return value, renders


def kink_arguments(renders, frozen, gt, cfg):
    """Every argument of an absolute value inside the objective, flattened."""
    args = [(r - gt).ravel() for r in renders]
    if len(renders) >= 2:
        k = cfg.kernel
        for target, learner in multibranch_pairs(len(renders)):
            args.append((gaussian_blur(renders[learner], k) - gaussian_blur(frozen[target], k)).ravel())
    return np.concatenate(args)


def fd_gradient(params, cam, gt, masks, cfg, t, h=1e-5):
    """Central differences plus a flag telling whether every step stayed on one smooth piece.

    L1 terms are only piecewise smooth; a difference quotient that straddles a
    sign change of some |.| argument is not a derivative estimate at all.
    """
    frozen = [render(GaussianField(params), m, cam, cfg.background,
                     opacity_scale=compensation_factor(m.rate, cfg.compensation)) for m in masks]
    base = np.sign(kink_arguments(frozen, frozen, gt, cfg))
    grad = np.zeros_like(params)
    smooth = True
    for idx in np.ndindex(*params.shape):
        vals = []
        for step in (h, -h):
            p = params.copy()
            p[idx] += step
            v, renders = objective(p, cam, gt, masks, cfg, t, frozen)
            signs = np.sign(kink_arguments(renders, frozen, gt, cfg))
            smooth &= bool(np.all((signs == base) | (base == 0)))
            vals.append(v)
        grad[idx] = (vals[0] - vals[1]) / (2 * h)
    return grad, smooth


def min_kink_distance(renders, gt, cfg):
    """Smallest nonzero |argument| over all absolute values in the objective."""
    a = np.abs(kink_arguments(renders, renders, gt, cfg))
    return float(np.min(a[a > 0])) if np.any(a > 0) else np.inf


def make_case(seed, cfg, size=16, n=5):
    """Random 5-Gaussian configuration whose objective is smooth around the base point.

    Branch 0 keeps everything and branch b drops b Gaussians in nested order, so
    blurred branch differences stay away from zero; the ground truth is offset from every
    render by a random signed amount.
    """
    rng = np.random.default_rng(seed)
    cam = make_orbit_cameras(1, 3.0, width=size, height=size, fov_deg=40.0)[0]
    for _ in range(1000):
        fld = small_field(rng, n)
        fld.params[:, 3:6] += np.log(rng.uniform(1.0, 2.0))
        keeps = [np.ones(n, dtype=bool)]
        order = rng.permutation(n)
        for b in range(1, cfg.branches):
            k = np.ones(n, dtype=bool)
            k[order[:b]] = False
            keeps.append(k)
        masks = [DropoutMask(k, cfg.dropout_rate) for k in keeps]
        renders = [render(fld, m, cam, cfg.background, opacity_scale=compensation_factor(m.rate))
                   for m in masks]
        gt = renders[0] + rng.choice([-1.0, 1.0], size=renders[0].shape) * rng.uniform(0.05, 0.2, renders[0].shape)
        if min_kink_distance(renders, gt, cfg) >= KINK_MARGIN:
            return fld, cam, gt, masks
    raise RuntimeError(f"no smooth configuration found for seed {seed}")


def relative_check(analytic, fd, rel=1e-4, floor=1e-7):
    err = np.abs(analytic - fd)
    return bool(np.all((err <= rel * np.abs(fd)) | (err <= floor))), float(np.max(err / np.maximum(np.abs(fd), floor)))


def checked_case(seed, cfg, t, attempts=20):
    """Draw configurations from ``seed`` until the finite differences are kink-free.

    Returns (analytic grads, fd grads, rejected count).
    """
    from pairsplat.trainer import loss_and_grad

    for attempt in range(attempts):
        fld, cam, gt, masks = make_case(seed * 1000 + attempt, cfg)
        fd, smooth = fd_gradient(fld.params, cam, gt, masks, cfg, t)
        if smooth:
            fld.zero_grad()
            loss_and_grad(fld, cam, gt, masks, cfg, t)
            return fld.grads.copy(), fd, attempt
    raise RuntimeError(f"every configuration for seed {seed} straddled a kink")

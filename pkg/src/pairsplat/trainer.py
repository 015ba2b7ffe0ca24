"""Adam optimization of a shared field with multi-branch dropout rendering."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .dropout import DropoutMask, compensation_factor, mask_rng, rate_at, sample_mask
from .errors import CheckpointError, ConfigError, NonFiniteError, ShapeError
from .imageops import BlurKernel, psnr, ssim
from .regularize import (LossBreakdown, LossWeights, consistency_grads, consistency_weight, multibranch_pairs,
                         rgb_loss_grad, total_loss)
from .render import render, render_backward
from .scene import GROUPS, Camera, GaussianField, ViewSet, make_rng


@dataclass
class TrainConfig:
    iterations: int = 10000
    weights: LossWeights = dc_field(default_factory=LossWeights)
    dropout_rate: float = 0.1
    dropout_decay: bool = False
    branches: int = 2
    compensation: bool = True
    seed: int = 0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    eval_every: int = 500
    lr: dict = dc_field(default_factory=lambda: {
        "position": 1.6e-4, "position_final": 1.6e-6, "scale": 5e-3, "rotation": 2.5e-3,
        "opacity": 5e-2, "color": 2.5e-3})
    blur_size: int = 11
    blur_sigma: float = 3.0
    symmetric: bool = False
    parallel: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("must be >= 1", "train.iterations")
        if self.branches < 1:
            raise ConfigError("must be >= 1", "train.branches")
        if self.eval_every < 1:
            raise ConfigError("must be >= 1", "train.eval_every")

    @property
    def kernel(self) -> BlurKernel:
        return BlurKernel(self.blur_size, self.blur_sigma)

    @classmethod
    def from_dict(cls, cfg: dict) -> "TrainConfig":
        loss = cfg["loss"]
        return cls(
            iterations=int(cfg["train"]["iterations"]),
            weights=LossWeights(loss["lambda_dssim"], loss["beta"], loss["lambda_max"],
                                int(loss["t_warm"]), loss["schedule"]),
            dropout_rate=float(cfg["dropout"]["rate"]),
            dropout_decay=bool(cfg["dropout"]["decay"]),
            branches=int(cfg["train"]["branches"]),
            compensation=bool(cfg["dropout"]["compensation"]),
            seed=int(cfg["rng"]["seed"]),
            background=tuple(float(v) for v in cfg["image"]["background"]),
            eval_every=int(cfg["train"]["eval_every"]),
            lr=dict(cfg["train"]["lr"]),
            blur_size=int(cfg["blur"]["size"]),
            blur_sigma=float(cfg["blur"]["sigma"]),
            symmetric=bool(loss["symmetric"]),
            parallel=bool(cfg["train"]["parallel"]),
        )


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr_table: dict = dc_field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def fresh(cls, fld: GaussianField, lr_table: dict, **kw) -> "AdamState":
        return cls(np.zeros_like(fld.params), np.zeros_like(fld.params), 0, dict(lr_table), **kw)


def adam_step(fld: GaussianField, state: AdamState) -> None:
    """One bias-corrected Adam update per parameter group; zeroes ``fld.grads`` afterwards."""
    if state.m.shape != fld.params.shape:
        raise ShapeError("optimizer state does not match the field")
    for name, cols in GROUPS:
        if not np.all(np.isfinite(fld.grads[:, cols])):
            raise NonFiniteError(f"non-finite gradient in parameter group {name!r}")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    g = fld.grads
    state.m = b1 * state.m + (1.0 - b1) * g
    state.v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = state.m / (1.0 - b1**state.step_count)
    v_hat = state.v / (1.0 - b2**state.step_count)
    step = m_hat / (np.sqrt(v_hat) + state.eps)
    for name, cols in GROUPS:
        fld.params[:, cols] -= state.lr_table[name] * step[:, cols]
    fld.zero_grad()


def position_lr(t: int, cfg: TrainConfig) -> float:
    """Exponential decay from the initial to the final position learning rate."""
    lr0, lr1 = cfg.lr["position"], cfg.lr["position_final"]
    if lr0 <= 0 or lr1 <= 0:
        return lr0
    frac = min(1.0, t / max(cfg.iterations, 1))
    return math.exp((1.0 - frac) * math.log(lr0) + frac * math.log(lr1))


def lr_table_at(t: int, cfg: TrainConfig) -> dict:
    table = {name: cfg.lr[name] for name, _ in GROUPS}
    table["position"] = position_lr(t, cfg)
    return table


def view_for_iteration(train_idx: list[int], seed: int, t: int) -> int:
    """Seeded shuffle of the training views, reshuffled every epoch."""
    n = len(train_idx)
    perm = make_rng(seed, 11, t // n).permutation(n)
    return train_idx[int(perm[t % n])]


def branch_masks(n: int, cfg: TrainConfig, t: int, rng: np.random.Generator | None = None) -> list[DropoutMask]:
    rng = mask_rng(cfg.seed, t) if rng is None else rng
    rate = rate_at(t, cfg.dropout_rate, cfg.iterations, cfg.dropout_decay)
    return [sample_mask(n, rate, rng, cfg.seed) for _ in range(cfg.branches)]


def loss_and_grad(fld: GaussianField, cam: Camera, gt: np.ndarray, masks: list[DropoutMask],
                  cfg: TrainConfig, t: int, *, reconstruction: bool = True,
                  ) -> tuple[LossBreakdown, list[np.ndarray]]:
    """Render every branch, evaluate the combined objective, accumulate its gradient.

    Branch 0 is the primary branch (weight 1), the rest are auxiliary (weight beta).
    Consistency terms treat each pair's target branch as a constant.
    ``reconstruction=False`` drops the rgb terms (logged as 0) and keeps only consistency.
    """
    w = cfg.weights
    bg = cfg.background
    scales = [compensation_factor(m.rate, cfg.compensation) for m in masks]
    renders = [render(fld, m, cam, bg, opacity_scale=s, parallel=cfg.parallel)
               for m, s in zip(masks, scales)]
    upstream = []
    rgb = []
    for k, img in enumerate(renders):
        if not reconstruction:
            rgb.append(0.0)
            upstream.append(np.zeros_like(img))
            continue
        value, g = rgb_loss_grad(img, gt, w.lambda_dssim)
        rgb.append(value)
        upstream.append(g * (1.0 if k == 0 else w.beta))
    lfc = 0.0
    n_pairs = 0
    if len(renders) >= 2:
        pairs = multibranch_pairs(len(renders), cfg.symmetric)
        n_pairs = len({frozenset(p) for p in pairs})
        lam = consistency_weight(t, w)
        lfc, cons = consistency_grads(renders, cfg.kernel, pairs)
        if lam > 0.0:
            for k, g in enumerate(cons):
                if g is not None:
                    upstream[k] = upstream[k] + lam * g
    breakdown = total_loss(rgb[0], sum(rgb[1:]), lfc, w, t, n_pairs)
    if not math.isfinite(breakdown.total):
        raise NonFiniteError(f"non-finite loss at iteration {t}")
    for m, s, g in zip(masks, scales, upstream):
        render_backward(fld, m, cam, bg, g, opacity_scale=s, parallel=cfg.parallel)
    return breakdown, renders


def train_iteration(fld: GaussianField, views: ViewSet, cfg: TrainConfig, t: int, state: AdamState,
                    rng: np.random.Generator | None = None) -> LossBreakdown:
    if not 0 <= t < cfg.iterations:
        raise ConfigError(f"iteration {t} outside [0, {cfg.iterations})", "train.iterations")
    k = view_for_iteration(views.train, cfg.seed, t)
    masks = branch_masks(len(fld), cfg, t, rng)
    breakdown, _ = loss_and_grad(fld, views.cameras[k], views.images[k], masks, cfg, t)
    state.lr_table = lr_table_at(t, cfg)
    adam_step(fld, state)
    return breakdown


def evaluate_views(fld: GaussianField, views: ViewSet, indices: list[int], background,
                   parallel: bool = False) -> list[tuple[int, float, float, np.ndarray]]:
    """Render ``indices`` without dropout; (view, psnr, ssim, image) per view."""
    out = []
    for k in indices:
        img = render(fld, None, views.cameras[k], background, parallel=parallel)
        out.append((k, psnr(img, views.images[k]), ssim(img, views.images[k]), img))
    return out


@dataclass
class EvalSnapshot:
    iteration: int
    per_view: list[tuple[int, float, float]]

    @property
    def psnr(self) -> float:
        return float(np.mean([p for _, p, _ in self.per_view]))

    @property
    def ssim(self) -> float:
        return float(np.mean([s for _, _, s in self.per_view]))


@dataclass
class TrainHistory:
    records: list[LossBreakdown] = dc_field(default_factory=list)
    evals: list[EvalSnapshot] = dc_field(default_factory=list)

    def append(self, rec: LossBreakdown) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("records must be strictly ascending in iteration")
        self.records.append(rec)


def train(cfg: TrainConfig, scene: GaussianField, views: ViewSet, *, start: int = 0,
          state: AdamState | None = None, stop: int | None = None,
          checkpoint_path=None, checkpoint_every: int = 0, config_hash: str = "",
          ) -> tuple[GaussianField, TrainHistory, AdamState]:
    """Optimize a copy of ``scene`` from iteration ``start`` up to ``stop`` (default: all).

    Held-out views are evaluated at ``start``, every ``eval_every`` iterations and
    at the end.  A non-finite loss aborts; the last written checkpoint is kept.
    """
    if not views.train:
        raise ConfigError("need at least one training view", "views.train")
    stop = cfg.iterations if stop is None else stop
    fld = scene.copy()
    fld.zero_grad()
    state = AdamState.fresh(fld, lr_table_at(start, cfg)) if state is None else state
    history = TrainHistory()

    def snapshot(t):
        if views.heldout:
            rows = evaluate_views(fld, views, views.heldout, cfg.background, cfg.parallel)
            history.evals.append(EvalSnapshot(t, [(k, p, s) for k, p, s, _ in rows]))

    snapshot(start)
    for t in range(start, stop):
        history.append(train_iteration(fld, views, cfg, t, state))
        done = t + 1
        if checkpoint_path and checkpoint_every and done % checkpoint_every == 0:
            save_checkpoint(fld, state, done, checkpoint_path, config_hash)
        if done % cfg.eval_every == 0 or done == stop:
            snapshot(done)
    return fld, history, state


def save_checkpoint(fld: GaussianField, state: AdamState, t: int, path, config_hash: str = "") -> None:
    obj = {
        "iteration": int(t),
        "field": fld.to_json(),
        "adam": {"m": state.m.tolist(), "v": state.v.tolist(), "step": int(state.step_count)},
        "config_hash": config_hash,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[GaussianField, AdamState, int, str]:
    """Inverse of :func:`save_checkpoint`; returns (field, adam state, iteration, config hash)."""
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc.msg}", exc.pos) from None
    try:
        fld = GaussianField.from_json(obj["field"])
        shape = fld.params.shape
        m = np.array(obj["adam"]["m"], dtype=np.float64).reshape(shape)
        v = np.array(obj["adam"]["v"], dtype=np.float64).reshape(shape)
        state = AdamState(m, v, int(obj["adam"]["step"]))
        return fld, state, int(obj["iteration"]), str(obj.get("config_hash", ""))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} is missing or has invalid fields: {exc}") from None

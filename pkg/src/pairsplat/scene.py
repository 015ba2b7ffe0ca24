"""Gaussian and camera types, synthetic scenes, view splits and field initialization.

A field is stored as one ``(N, 14)`` float64 array.  Column layout matches the
scene JSON format::

    0:3   position          world units
    3:6   log_scale         log of per-axis standard deviation
    6:10  rotation          quaternion (w, x, y, z), unnormalized
    10    opacity_logit
    11:14 color_logit
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, InvalidSplitError, ShapeError

PARAM_DIM = 14
POS = slice(0, 3)
LOG_SCALE = slice(3, 6)
ROT = slice(6, 10)
OPACITY = 10
COLOR = slice(11, 14)

# (name, column slice) for every optimizer parameter group
GROUPS = (
    ("position", slice(0, 3)),
    ("scale", slice(3, 6)),
    ("rotation", slice(6, 10)),
    ("opacity", slice(10, 11)),
    ("color", slice(11, 14)),
)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` and an optional stream key.

    Every distinct ``stream`` tuple yields an independent, platform-stable sequence.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class GaussianPrimitive:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color_logit: np.ndarray

    @classmethod
    def from_row(cls, row: np.ndarray) -> "GaussianPrimitive":
        row = np.asarray(row, dtype=np.float64)
        return cls(row[POS].copy(), row[LOG_SCALE].copy(), row[ROT].copy(),
                   float(row[OPACITY]), row[COLOR].copy())

    def to_row(self) -> np.ndarray:
        return np.concatenate([self.position, self.log_scale, self.rotation,
                               [self.opacity_logit], self.color_logit]).astype(np.float64)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def color(self) -> np.ndarray:
        return sigmoid(self.color_logit)


@dataclass
class GaussianField:
    """The shared learnable primitive set with a parallel gradient buffer."""

    params: np.ndarray
    grads: np.ndarray = dc_field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64).reshape(-1, PARAM_DIM)
        if self.grads is None:
            self.grads = np.zeros_like(self.params)
        elif self.grads.shape != self.params.shape:
            raise ShapeError(f"grads shape {self.grads.shape} != params shape {self.params.shape}")

    def __len__(self) -> int:
        return self.params.shape[0]

    @classmethod
    def from_primitives(cls, prims) -> "GaussianField":
        rows = [p.to_row() for p in prims]
        return cls(np.array(rows, dtype=np.float64).reshape(-1, PARAM_DIM))

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive.from_row(self.params[i])

    def copy(self) -> "GaussianField":
        return GaussianField(self.params.copy(), self.grads.copy())

    def zero_grad(self) -> None:
        self.grads[...] = 0.0

    def to_json(self) -> dict:
        return {"primitives": self.params.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "GaussianField":
        prims = obj["primitives"]
        arr = np.array(prims, dtype=np.float64).reshape(-1, PARAM_DIM) if prims else np.zeros((0, PARAM_DIM))
        return cls(arr)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera (OpenCV axes)."""

    focal: tuple[float, float]
    principal: tuple[float, float]
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    near: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_json(self) -> dict:
        return {
            "focal": [float(self.focal[0]), float(self.focal[1])],
            "principal": [float(self.principal[0]), float(self.principal[1])],
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "width": int(self.width),
            "height": int(self.height),
            "near": float(self.near),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Camera":
        return cls(tuple(obj["focal"]), tuple(obj["principal"]), np.array(obj["rotation"]),
                   np.array(obj["translation"]), int(obj["width"]), int(obj["height"]),
                   float(obj["near"]))


@dataclass
class ViewSet:
    cameras: list[Camera]
    images: list[np.ndarray]
    train: list[int]
    heldout: list[int]

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ShapeError("cameras and images differ in length")
        if set(self.train) & set(self.heldout):
            raise InvalidSplitError("train and held-out views overlap")
        if sorted(self.train + self.heldout) != list(range(len(self.cameras))):
            raise InvalidSplitError("split does not cover every view")


def random_unit_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    # canonical hemisphere, w >= 0
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    return q


def generate_synthetic_scene(seed: int, count: int, extent: float = 1.0) -> GaussianField:
    """Random ground-truth field inside the cube ``[-extent, extent]^3``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = make_rng(seed, 0)
    pos = rng.uniform(-extent, extent, size=(count, 3))
    scale = rng.uniform(extent / 50.0, extent / 10.0, size=(count, 3))
    rot = random_unit_quaternions(rng, count)
    opacity = rng.uniform(0.5, 0.95, size=count)
    color = rng.uniform(0.1, 0.9, size=(count, 3))
    params = np.concatenate([pos, np.log(scale), rot, logit(opacity)[:, None], logit(color)], axis=1)
    return GaussianField(params)


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``center`` looking at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return rot, -rot @ center


def make_orbit_cameras(n: int, radius: float, look_at_point=(0.0, 0.0, 0.0), width: int = 64,
                       height: int = 64, fov_deg: float = 50.0, elevation: float = 0.0,
                       near: float = 0.05) -> list[Camera]:
    """``n`` cameras evenly spaced on a horizontal circle around ``look_at_point``.

    ``elevation`` raises the orbit plane (world z) without changing the look-at target.
    """
    if n < 1 or radius <= 0 or not 0 < fov_deg < 180:
        raise ValueError("need n >= 1, radius > 0 and 0 < fov_deg < 180")
    target = np.asarray(look_at_point, dtype=np.float64)
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    cams = []
    for k in range(n):
        theta = 2.0 * math.pi * k / n
        center = target + np.array([radius * math.cos(theta), radius * math.sin(theta), elevation])
        rot, trans = look_at(center, target)
        cams.append(Camera((f, f), (width / 2.0, height / 2.0), rot, trans, width, height, near))
    return cams


def split_views(n_views: int, n_train: int, seed: int) -> tuple[list[int], list[int]]:
    if not 1 <= n_train < n_views:
        raise InvalidSplitError(f"need 1 <= n_train < n_views, got n_train={n_train}, n_views={n_views}")
    perm = make_rng(seed, 1).permutation(n_views)
    return sorted(int(i) for i in perm[:n_train]), sorted(int(i) for i in perm[n_train:])


def init_field(truth: GaussianField, mode: str = "noisy-truth", noise_scale: float = 0.0,
               seed: int = 0, extent: float = 1.0) -> GaussianField:
    """Starting field for optimization (stand-in for a structure-from-motion point cloud).

    ``noisy-truth`` adds N(0, noise_scale^2) to every raw parameter of ``truth``;
    ``random`` draws a fresh scene of the same size and ignores truth values.
    """
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    if mode == "noisy-truth":
        rng = make_rng(seed, 2)
        return GaussianField(truth.params + noise_scale * rng.normal(size=truth.params.shape))
    if mode == "random":
        n = len(truth)
        if n == 0:
            return GaussianField(np.zeros((0, PARAM_DIM)))
        rng = make_rng(seed, 3)
        pos = rng.uniform(-extent, extent, size=(n, 3))
        log_scale = np.full((n, 3), math.log(extent / 20.0))
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        opacity = np.full((n, 1), logit(0.5))
        color = logit(rng.uniform(0.3, 0.7, size=(n, 3)))
        return GaussianField(np.concatenate([pos, log_scale, rot, opacity, color], axis=1))
    raise ValueError(f"unknown init mode {mode!r}")


def save_scene(fld: GaussianField, path) -> None:
    Path(path).write_text(json.dumps(fld.to_json()))


def load_scene(path) -> GaussianField:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed scene file {path}: {exc.msg}", exc.pos) from None
    return GaussianField.from_json(obj)

"""JSON experiment configs: defaults, validation and hashing.

A config is a nested JSON object.  Unknown keys are rejected, missing keys
are filled from ``DEFAULTS``.  The defaults carry the full training schedule
(10000 iterations, warm-up 7000); ``configs/desk.json`` holds the desk-scale
protocol used by the harness and acceptance tests.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError

DEFAULTS: dict = {
    "scene": {"seed": 0, "count": 200, "extent": 1.0},
    "views": {"n": 12, "train": 3, "radius": 4.0, "fov_deg": 50.0, "elevation": 0.0, "near": 0.05},
    "image": {"size": 64, "background": [0.0, 0.0, 0.0]},
    "init": {"mode": "noisy-truth", "noise": 0.3, "seed": 0},
    "dropout": {"rate": 0.1, "compensation": True, "decay": False},
    "loss": {"lambda_dssim": 0.2, "beta": 0.25, "lambda_max": 0.05, "t_warm": 7000,
             "schedule": "progressive", "symmetric": False},
    "train": {
        "iterations": 10000,
        "branches": 2,
        "eval_every": 500,
        "lr": {"position": 1.6e-4, "position_final": 1.6e-6, "scale": 5e-3, "rotation": 2.5e-3,
               "opacity": 5e-2, "color": 2.5e-3},
        "parallel": False,
    },
    "blur": {"size": 11, "sigma": 3.0},
    "rng": {"seed": 0, "generator": "philox-v1"},
    "protocol": {"seeds": [0, 1, 2], "stability_seeds": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
                 "branch_counts": [1, 2, 3], "jobs": 1},
}

PRESETS = {
    "full": {"train": {"iterations": 10000}, "loss": {"t_warm": 7000}},
    "short": {"train": {"iterations": 5000}, "loss": {"t_warm": 4000}},
}

GENERATORS = ("philox-v1",)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError("unknown key", where)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError("expected an object", where)
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(override: dict | None = None, base: dict | None = None) -> dict:
    """Fill ``override`` from defaults and validate; returns a new dict."""
    cfg = _merge(DEFAULTS if base is None else base, override or {})
    validate(cfg)
    return cfg


def _require(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise ConfigError(msg, key)


def _num(cfg: dict, key: str):
    node = cfg
    *parents, name = key.split(".")
    for part in parents:
        node = node[part]
    value = node[name]
    _require(isinstance(value, (int, float)) and not isinstance(value, bool), key, "must be a number")
    return value


def _int(cfg: dict, key: str) -> int:
    value = _num(cfg, key)
    _require(float(value).is_integer(), key, "must be an integer")
    return int(value)


def validate(cfg: dict) -> None:
    _require(_int(cfg, "scene.count") >= 1, "scene.count", "must be >= 1")
    _require(_num(cfg, "scene.extent") > 0, "scene.extent", "must be > 0")
    n_views, n_train = _int(cfg, "views.n"), _int(cfg, "views.train")
    _require(1 <= n_train < n_views, "views.train", "must satisfy 1 <= views.train < views.n")
    _require(_num(cfg, "views.radius") > 0, "views.radius", "must be > 0")
    _require(0 < _num(cfg, "views.fov_deg") < 180, "views.fov_deg", "must lie in (0, 180)")
    _require(_num(cfg, "views.near") > 0, "views.near", "must be > 0")
    _require(_int(cfg, "image.size") >= 12, "image.size", "must be >= 12")
    bg = cfg["image"]["background"]
    _require(isinstance(bg, list) and len(bg) == 3 and all(isinstance(v, (int, float)) for v in bg),
             "image.background", "must be three numbers")
    _require(cfg["init"]["mode"] in ("noisy-truth", "random"), "init.mode", "must be noisy-truth or random")
    _require(_num(cfg, "init.noise") >= 0, "init.noise", "must be >= 0")
    _int(cfg, "init.seed")
    rate = _num(cfg, "dropout.rate")
    _require(0 <= rate <= 1, "dropout.rate", "must lie in [0, 1]")
    _require(isinstance(cfg["dropout"]["compensation"], bool), "dropout.compensation", "must be a boolean")
    _require(not (cfg["dropout"]["compensation"] and rate >= 1), "dropout.rate",
             "compensation requires rate < 1")
    _require(isinstance(cfg["dropout"]["decay"], bool), "dropout.decay", "must be a boolean")
    for name in ("lambda_dssim", "beta", "lambda_max"):
        _require(_num(cfg, f"loss.{name}") >= 0, f"loss.{name}", "must be >= 0")
    _require(_int(cfg, "loss.t_warm") >= 1, "loss.t_warm", "must be >= 1")
    _require(cfg["loss"]["schedule"] in ("progressive", "constant"), "loss.schedule",
             "must be progressive or constant")
    _require(isinstance(cfg["loss"]["symmetric"], bool), "loss.symmetric", "must be a boolean")
    _require(_int(cfg, "train.iterations") >= 1, "train.iterations", "must be >= 1")
    _require(_int(cfg, "train.branches") >= 1, "train.branches", "must be >= 1")
    _require(_int(cfg, "train.eval_every") >= 1, "train.eval_every", "must be >= 1")
    for name in DEFAULTS["train"]["lr"]:
        _require(_num(cfg, f"train.lr.{name}") >= 0, f"train.lr.{name}", "must be >= 0")
    _require(isinstance(cfg["train"]["parallel"], bool), "train.parallel", "must be a boolean")
    size = _int(cfg, "blur.size")
    _require(size >= 1 and size % 2 == 1, "blur.size", "must be odd and positive")
    _require(size // 2 < _int(cfg, "image.size"), "blur.size", "must be smaller than the image")
    _require(_num(cfg, "blur.sigma") > 0, "blur.sigma", "must be > 0")
    _int(cfg, "rng.seed")
    _require(cfg["rng"]["generator"] in GENERATORS, "rng.generator", f"must be one of {GENERATORS}")
    for key in ("seeds", "stability_seeds"):
        seeds = cfg["protocol"][key]
        _require(isinstance(seeds, list) and len(seeds) >= 1
                 and all(isinstance(s, int) and not isinstance(s, bool) for s in seeds),
                 f"protocol.{key}", "must be a non-empty list of integers")
        _require(len(set(seeds)) == len(seeds), f"protocol.{key}", "seeds must be distinct")
    counts = cfg["protocol"]["branch_counts"]
    _require(isinstance(counts, list) and len(counts) >= 1 and set(counts) <= {1, 2, 3, 4},
             "protocol.branch_counts", "must be a non-empty subset of {1, 2, 3, 4}")
    _require(_int(cfg, "protocol.jobs") >= 1, "protocol.jobs", "must be >= 1")


def load(path) -> dict:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at byte offset {exc.pos}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object")
    return resolve(raw)


def with_overrides(cfg: dict, override: dict) -> dict:
    return resolve(override, base=cfg)


def config_hash(cfg: dict, exclude: tuple[str, ...] = ()) -> str:
    """SHA-256 of the canonical JSON form, optionally without dotted ``exclude`` keys."""
    c = copy.deepcopy(cfg)
    for key in exclude:
        node = c
        *parents, leaf = key.split(".")
        for part in parents:
            node = node[part]
        node.pop(leaf, None)
    blob = json.dumps(c, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()

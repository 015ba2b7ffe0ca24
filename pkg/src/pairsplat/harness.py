"""Experiment drivers: held-out evaluation, multi-seed stability, ablations and branch sweeps."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import ProtocolError
from .imageio import write_ppm
from .render import render
from .scene import GaussianField, ViewSet, generate_synthetic_scene, init_field, make_orbit_cameras, split_views
from .trainer import TrainConfig, TrainHistory, evaluate_views, train

log = logging.getLogger(__name__)

# overrides defining each ablation variant; every other key is shared
VARIANTS: dict[str, dict] = {
    "baseline": {"train": {"branches": 1}},
    "two_branch": {"train": {"branches": 2}, "loss": {"lambda_max": 0.0}},
    "low_freq": {"train": {"branches": 2}, "loss": {"schedule": "constant"}},
    "full": {"train": {"branches": 2}, "loss": {"schedule": "progressive"}},
}
VARIANT_KEYS = ("train.branches", "loss.lambda_max", "loss.schedule")
CSV_HEADER = ["scene_id", "variant", "seed", "psnr", "ssim", "wall_time_s"]


@dataclass
class MetricsRecord:
    scene_id: str
    variant: str
    seed: int
    psnr_mean: float
    ssim_mean: float
    per_view: list = field(default_factory=list)  # [view index, psnr, ssim]
    wall_time_s: float = 0.0
    config: dict | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsRecord":
        return cls(**obj)


@dataclass
class StabilityReport:
    variant: str
    n_seeds: int
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    seeds: list = field(default_factory=list)


@dataclass
class RunResult:
    record: MetricsRecord
    history: TrainHistory


@dataclass
class Protocol:
    truth: GaussianField
    views: ViewSet
    init: GaussianField
    scene_id: str


def build_protocol(cfg: dict) -> Protocol:
    """Ground-truth scene, rendered views, train/held-out split and the initial field."""
    sc, vw, im, ini = cfg["scene"], cfg["views"], cfg["image"], cfg["init"]
    truth = generate_synthetic_scene(sc["seed"], sc["count"], sc["extent"])
    size = im["size"]
    cams = make_orbit_cameras(vw["n"], vw["radius"], (0.0, 0.0, 0.0), size, size, vw["fov_deg"],
                              vw["elevation"], vw["near"])
    images = [render(truth, None, c, im["background"]) for c in cams]
    tr, ho = split_views(vw["n"], vw["train"], sc["seed"])
    start = init_field(truth, ini["mode"], ini["noise"], ini["seed"], sc["extent"])
    return Protocol(truth, ViewSet(cams, images, tr, ho), start, f"synthetic-{sc['seed']}")


def evaluate(fld: GaussianField, views: ViewSet, indices: list[int] | None = None, background=(0.0, 0.0, 0.0),
             *, scene_id: str = "", variant: str = "", seed: int = 0, out_dir=None,
             parallel: bool = False) -> MetricsRecord:
    """Render held-out views without dropout and score them.  Writes ``view_<k>.ppm`` under ``out_dir``."""
    indices = views.heldout if indices is None else indices
    if not indices:
        raise ProtocolError("evaluation needs at least one held-out view")
    rows = evaluate_views(fld, views, indices, background, parallel)
    if out_dir is not None:
        for k, _, _, img in rows:
            write_ppm(Path(out_dir) / f"view_{k}.ppm", img)
    per_view = [[k, p, s] for k, p, s, _ in rows]
    return MetricsRecord(scene_id, variant, seed, float(np.mean([r[1] for r in per_view])),
                         float(np.mean([r[2] for r in per_view])), per_view)


def variant_config(cfg: dict, variant: str, seed: int | None = None) -> dict:
    if variant not in VARIANTS:
        raise ProtocolError(f"unknown variant {variant!r}")
    out = config_mod.with_overrides(cfg, VARIANTS[variant])
    if seed is not None:
        out = config_mod.with_overrides(out, {"rng": {"seed": seed}})
    return out


def run_config(run_cfg: dict, label: str, out_root=None) -> RunResult:
    """Train with a fully resolved config and evaluate its held-out views."""
    seed = int(run_cfg["rng"]["seed"])
    proto = build_protocol(run_cfg)
    tcfg = TrainConfig.from_dict(run_cfg)
    t0 = time.perf_counter()
    fld, history, _ = train(tcfg, proto.init, proto.views)
    wall = time.perf_counter() - t0
    out_dir = None if out_root is None else Path(out_root) / label / str(seed)
    rec = evaluate(fld, proto.views, None, tcfg.background, scene_id=proto.scene_id, variant=label,
                   seed=seed, out_dir=out_dir, parallel=tcfg.parallel)
    rec.wall_time_s = wall
    rec.config = run_cfg
    log.info("%s seed=%d psnr=%.3f ssim=%.4f (%.1fs)", label, seed, rec.psnr_mean, rec.ssim_mean, wall)
    return RunResult(rec, history)


def run_single(cfg: dict, variant: str, seed: int, out_root=None) -> RunResult:
    return run_config(variant_config(cfg, variant, seed), variant, out_root)


def _run_job(args) -> RunResult:
    return run_config(*args)


def run_jobs(jobs_list: list[tuple[dict, str]], out_root=None, jobs: int = 1) -> list[RunResult]:
    """Run (resolved config, label) jobs, optionally in worker processes; results keep input order."""
    args = [(c, label, out_root) for c, label in jobs_list]
    if jobs <= 1 or len(args) <= 1:
        return [_run_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, args))


def _check_seeds(seeds) -> list[int]:
    seeds = list(seeds)
    if not seeds:
        raise ProtocolError("need at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ProtocolError(f"duplicate seeds in {seeds}")
    return seeds


def summarize(variant: str, records: list[MetricsRecord]) -> StabilityReport:
    """Mean and sample (n-1) standard deviation over per-seed records."""
    ps = [r.psnr_mean for r in records]
    ss = [r.ssim_mean for r in records]
    n = len(records)
    return StabilityReport(
        variant, n, statistics.fmean(ps), statistics.stdev(ps) if n > 1 else 0.0,
        statistics.fmean(ss), statistics.stdev(ss) if n > 1 else 0.0, [r.seed for r in records])


def run_stability(cfg: dict, seeds, variants=("baseline", "full"), out_root=None,
                  jobs: int = 1) -> tuple[dict[str, StabilityReport], list[RunResult]]:
    seeds = _check_seeds(seeds)
    results = run_jobs([(variant_config(cfg, v, s), v) for v in variants for s in seeds], out_root, jobs)
    reports = {v: summarize(v, [r.record for r in results if r.record.variant == v]) for v in variants}
    return reports, results


def run_ablation(cfg: dict, seeds, out_root=None, jobs: int = 1) -> list[RunResult]:
    seeds = _check_seeds(seeds)
    return run_jobs([(variant_config(cfg, v, s), v) for v in VARIANTS for s in seeds], out_root, jobs)


@dataclass
class SweepRow:
    branches: int
    records: list[MetricsRecord]
    histories: list[TrainHistory]

    @property
    def psnr_mean(self) -> float:
        return statistics.fmean(r.psnr_mean for r in self.records)

    @property
    def wall_time_s(self) -> float:
        return statistics.fmean(r.wall_time_s for r in self.records)


def sweep_label(branches: int) -> str:
    return {1: "baseline", 2: "full"}.get(branches, f"full_b{branches}")


def run_branch_sweep(cfg: dict, branch_counts, seeds, out_root=None, jobs: int = 1) -> list[SweepRow]:
    """Full-variant training with only the branch count changed (1 branch is the baseline)."""
    counts = list(branch_counts)
    if not counts or not set(counts) <= {1, 2, 3, 4}:
        raise ProtocolError("branch counts must be a non-empty subset of {1, 2, 3, 4}")
    seeds = _check_seeds(seeds)
    job_list = []
    for b in counts:
        base = variant_config(cfg, "baseline" if b == 1 else "full")
        for s in seeds:
            job_list.append((config_mod.with_overrides(base, {"train": {"branches": b}, "rng": {"seed": s}}),
                             sweep_label(b)))
    results = run_jobs(job_list, out_root, jobs)
    rows = []
    for i, b in enumerate(counts):
        chunk = results[i * len(seeds):(i + 1) * len(seeds)]
        rows.append(SweepRow(b, [r.record for r in chunk], [r.history for r in chunk]))
    return rows


def emit_report(records: list[MetricsRecord], fmt: str, path) -> Path:
    """Write records as a JSON array or as CSV with header ``CSV_HEADER``."""
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps([asdict(r) for r in records], indent=1))
    elif fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in records:
                w.writerow([r.scene_id, r.variant, r.seed, repr(r.psnr_mean), repr(r.ssim_mean),
                            repr(r.wall_time_s)])
        # CSV has no room for provenance, so the resolved configs go next to it
        configs = [r.config for r in records if r.config is not None]
        if configs:
            sidecar_path(path).write_text(json.dumps(configs, indent=1))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".config.json")


def load_report(path) -> list[MetricsRecord]:
    return [MetricsRecord.from_dict(o) for o in json.loads(Path(path).read_text())]


CURVE_HEADER = ["iteration", "total", "rgb_a", "rgb_b", "lfc", "lambda_t", "heldout_psnr"]


def emit_curve(history: TrainHistory, path) -> Path:
    """One CSV row per logged iteration; ``heldout_psnr`` is filled where an evaluation ran."""
    evals = {e.iteration: e.psnr for e in history.evals}
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for r in history.records:
            p = evals.get(r.iteration)
            w.writerow([r.iteration, repr(r.total), repr(r.rgb_a), repr(r.rgb_b), repr(r.lfc),
                        repr(r.lambda_t), "" if p is None else repr(p)])
    return path

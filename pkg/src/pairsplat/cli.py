"""Command-line entry point.

Exit codes: 0 on success, 1 for usage or config errors, 2 for runtime failures.
Every subcommand resolves and validates its config before touching ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import config as config_mod
from . import harness
from .errors import CheckpointError, ConfigError, PairSplatError
from .imageio import write_png, write_ppm
from .render import render
from .scene import GaussianField, generate_synthetic_scene, load_scene, save_scene
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("pairsplat")

# keys that do not change what a run computes, so a checkpoint may resume across them
HASH_EXCLUDE = ("train.parallel", "protocol")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config; missing keys take their defaults")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, help="override rng.seed")
    p.add_argument("--serial", action="store_true", help="force single-threaded kernels")
    p.add_argument("--jobs", type=int, help="worker processes for multi-run commands")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pairsplat", description="Paired-dropout Gaussian splatting experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-scene", help="write a synthetic ground-truth scene as JSON")
    _common(p)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="train one model and evaluate its held-out views")
    _common(p)
    p.add_argument("--preset", choices=sorted(config_mod.PRESETS))
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a field on the held-out views")
    _common(p)
    p.add_argument("--field", type=Path, required=True, help="field JSON or training checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render one view of a field")
    _common(p)
    p.add_argument("--field", type=Path, help="field JSON or checkpoint (default: the ground truth)")
    p.add_argument("--view", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("stability", help="multi-seed mean and std for baseline and full")
    _common(p)
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default protocol.stability_seeds)")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("ablate", help="the four ablation variants over several seeds")
    _common(p)
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default protocol.seeds)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="branch-count sweep")
    _common(p)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--branches", type=_int_list, help="comma-separated counts (default protocol.branch_counts)")
    p.set_defaults(func=cmd_sweep)
    return parser


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def resolve_config(args) -> dict:
    cfg = config_mod.load(args.config) if args.config else config_mod.resolve()
    if getattr(args, "preset", None):
        cfg = config_mod.with_overrides(cfg, config_mod.PRESETS[args.preset])
    if args.seed is not None:
        cfg = config_mod.with_overrides(cfg, {"rng": {"seed": args.seed}})
    if args.serial:
        cfg = config_mod.with_overrides(cfg, {"train": {"parallel": False}})
    if args.jobs is not None:
        cfg = config_mod.with_overrides(cfg, {"protocol": {"jobs": args.jobs}})
    return cfg


def _load_field(path: Path) -> GaussianField:
    try:
        head = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed JSON in {path}: {exc.msg}", exc.pos) from None
    if isinstance(head, dict) and "adam" in head:
        return load_checkpoint(path)[0]
    return load_scene(path)


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1))


def cmd_gen_scene(args, cfg) -> None:
    sc = cfg["scene"]
    # for this command --seed picks the scene itself
    seed = sc["seed"] if args.seed is None else args.seed
    fld = generate_synthetic_scene(seed, sc["count"], sc["extent"])
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_scene(fld, args.out)


def cmd_train(args, cfg) -> None:
    proto = harness.build_protocol(cfg)
    tcfg = TrainConfig.from_dict(cfg)
    digest = config_mod.config_hash(cfg, HASH_EXCLUDE)
    start, state, init = 0, None, proto.init
    if args.resume:
        init, state, start, saved = load_checkpoint(args.resume)
        if saved and saved != digest:
            raise ConfigError("checkpoint was written under a different config", "resume")
        if start > tcfg.iterations:
            raise ConfigError(f"checkpoint iteration {start} exceeds the schedule", "train.iterations")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.json"
    t0 = time.perf_counter()
    fld, history, state = train(tcfg, init, proto.views, start=start, state=state, checkpoint_path=ckpt,
                                checkpoint_every=args.checkpoint_every, config_hash=digest)
    wall = time.perf_counter() - t0
    save_checkpoint(fld, state, tcfg.iterations, ckpt, digest)
    save_scene(fld, out / "field.json")
    harness.emit_curve(history, out / "history.csv")
    rec = harness.evaluate(fld, proto.views, None, tcfg.background, scene_id=proto.scene_id, variant="train",
                           seed=tcfg.seed, out_dir=out, parallel=tcfg.parallel)
    rec.wall_time_s = wall
    rec.config = cfg
    _dump(out / "metrics.json", asdict(rec))
    log.info("held-out psnr %.3f dB, ssim %.4f", rec.psnr_mean, rec.ssim_mean)


def cmd_eval(args, cfg) -> None:
    proto = harness.build_protocol(cfg)
    fld = _load_field(args.field)
    rec = harness.evaluate(fld, proto.views, None, cfg["image"]["background"], scene_id=proto.scene_id,
                           variant="eval", seed=cfg["rng"]["seed"], out_dir=args.out,
                           parallel=cfg["train"]["parallel"])
    rec.config = cfg
    _dump(args.out / "metrics.json", asdict(rec))
    log.info("held-out psnr %.3f dB, ssim %.4f", rec.psnr_mean, rec.ssim_mean)


def cmd_render(args, cfg) -> None:
    proto = harness.build_protocol(cfg)
    cams = proto.views.cameras
    if not 0 <= args.view < len(cams):
        raise ConfigError(f"view must lie in [0, {len(cams)})", "view")
    fld = proto.truth if args.field is None else _load_field(args.field)
    img = render(fld, None, cams[args.view], cfg["image"]["background"], parallel=cfg["train"]["parallel"])
    if args.out.suffix.lower() == ".png":
        write_png(args.out, img)
    else:
        write_ppm(args.out, img)


def _write_records(out: Path, name: str, records, extra: dict) -> None:
    _dump(out / f"{name}.json", {**extra, "records": [asdict(r) for r in records]})
    harness.emit_report(records, "csv", out / f"{name}.csv")


def cmd_stability(args, cfg) -> None:
    seeds = args.seeds or cfg["protocol"]["stability_seeds"]
    reports, results = harness.run_stability(cfg, seeds, ("baseline", "full"), args.out, cfg["protocol"]["jobs"])
    records = [r.record for r in results]
    _write_records(args.out, "stability", records,
                   {"config": cfg, "reports": {k: asdict(v) for k, v in reports.items()}})
    for rep in reports.values():
        log.info("%s: psnr %.3f +- %.4f over %d seeds", rep.variant, rep.psnr_mean, rep.psnr_std, rep.n_seeds)


def cmd_ablate(args, cfg) -> None:
    seeds = args.seeds or cfg["protocol"]["seeds"]
    results = harness.run_ablation(cfg, seeds, args.out, cfg["protocol"]["jobs"])
    records = [r.record for r in results]
    means = {v: harness.summarize(v, [r for r in records if r.variant == v]).psnr_mean for v in harness.VARIANTS}
    _write_records(args.out, "ablation", records, {"config": cfg, "psnr_mean": means})
    for v, m in means.items():
        log.info("%s: psnr %.3f", v, m)


def cmd_sweep(args, cfg) -> None:
    seeds = args.seeds or cfg["protocol"]["seeds"]
    counts = args.branches or cfg["protocol"]["branch_counts"]
    rows = harness.run_branch_sweep(cfg, counts, seeds, args.out, cfg["protocol"]["jobs"])
    records = [r for row in rows for r in row.records]
    table = [{"branches": row.branches, "psnr_mean": row.psnr_mean, "wall_time_s": row.wall_time_s,
              "n_pairs": row.histories[0].records[-1].n_pairs} for row in rows]
    _write_records(args.out, "sweep", records, {"config": cfg, "table": table})
    for row in table:
        log.info("branches=%d: psnr %.3f, %.1fs", row["branches"], row["psnr_mean"], row["wall_time_s"])


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"pairsplat: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"pairsplat: config error: {exc}", file=sys.stderr)
        return 1
    except (PairSplatError, OSError, RuntimeError) as exc:
        print(f"pairsplat: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()

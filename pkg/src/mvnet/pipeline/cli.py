"""Command-line entry point: ``mvnet <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from ..errors import MVNetError
from .checkpoint import load_checkpoint, restore, save_checkpoint
from .dataset import load_dataset, load_scene, save_scene
from .evaluation import correspondence_error, export_scene_features, held_out_pairs
from .probe import linear_probe
from .scenes import generate_scene, scene_spec_for
from .training import Pretrainer, TrainConfig, build_models

log = logging.getLogger("mvnet")


def _resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 32x32, got {text!r}")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return h, w


def _read_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise MVNetError(f"{path}: config must be a JSON object")
    return TrainConfig.from_dict(data)


def cmd_gen_scenes(args) -> int:
    out = Path(args.out)
    for i in range(args.scenes):
        spec = scene_spec_for(args.seed + i, frames=args.frames_per_scene, resolution=args.res)
        frames = generate_scene(spec)
        if len(frames) < 2:
            raise MVNetError(f"scene seed {spec.seed} kept fewer than two frames")
        save_scene(out / f"scene_{i:04d}", frames)
    print(f"wrote {args.scenes} scenes to {out}")
    return 0


def cmd_pretrain(args) -> int:
    config = _read_config(args.config)
    scenes = load_dataset(args.data)
    trainer = Pretrainer(scenes, config, deterministic=True if args.deterministic else None)
    history = trainer.run(log_every=args.log_every)
    save_checkpoint(args.out, trainer.models, config, trainer.optimizer, trainer.rng, trainer.step_count)
    first, last = history[:10], history[-10:]
    print(json.dumps({
        "steps": trainer.step_count,
        "first10_total": float(np.mean([r.total for r in first])),
        "last10_total": float(np.mean([r.total for r in last])),
        "checkpoint": str(args.out),
    }))
    return 0


def cmd_eval_corr(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    config = ckpt.config
    trained = restore(ckpt)
    untrained = build_models(config)
    scenes = load_dataset(args.data)
    rows = []
    for i, scene in enumerate(scenes):
        samples = held_out_pairs(scene, config, seed=config.seed + i, count=args.pairs)
        a = correspondence_error(trained, samples, config)
        b = correspondence_error(untrained, samples, config)
        rows.append({"scene": i, "trained": a.to_dict(), "untrained_mean_pixel_error": b.mean_error,
                     "ratio": a.mean_error / b.mean_error})
    report = {
        "scenes": rows,
        "mean_pixel_error": float(np.mean([r["trained"]["mean_pixel_error"] for r in rows])),
        "untrained_mean_pixel_error": float(np.mean([r["untrained_mean_pixel_error"] for r in rows])),
    }
    Path(args.report).write_text(json.dumps(report, indent=1))
    print(f"mean pixel error {report['mean_pixel_error']:.3f} "
          f"(untrained {report['untrained_mean_pixel_error']:.3f}) over {len(rows)} scenes")
    return 0


def cmd_export_features(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    models = restore(ckpt)
    export_scene_features(args.out, models.encoder, load_scene(args.scene), ckpt.config)
    print(f"wrote {args.out}")
    return 0


def cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    config = ckpt.config
    trained = restore(ckpt).encoder
    baseline = build_models(config).encoder
    scenes = load_dataset(args.data)
    wins, rows = 0, []
    for seed in range(args.seeds):
        scene = [scenes[seed % len(scenes)]]
        a = linear_probe(trained, scene, config, seed=seed)
        b = linear_probe(baseline, scene, config, seed=seed)
        wins += a.test_accuracy > b.test_accuracy
        rows.append({"seed": seed, "pretrained": a.test_accuracy, "random_init": b.test_accuracy})
        print(f"seed {seed}: pretrained {a.test_accuracy:.4f}  random-init {b.test_accuracy:.4f}")
    print(f"pretrained wins {wins}/{args.seeds}")
    if args.report:
        Path(args.report).write_text(json.dumps({"seeds": rows, "wins": int(wins)}, indent=1))
    return 0


def cmd_grad_check(args) -> int:
    from ..gradsuite import run_checks

    reports = run_checks(args.module)
    failed = 0
    for name, rep in reports.items():
        status = "ok" if rep.passed else "FAIL"
        failed += not rep.passed
        print(f"{name:24s} max rel error {rep.max_error:.3e}  {status}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvnet", description="Multi-view 3D pre-training toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scenes", help="render synthetic RGB-D scenes")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=8)
    g.add_argument("--frames-per-scene", type=int, default=8)
    g.add_argument("--res", type=_resolution, default=(32, 32))
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_scenes)

    t = sub.add_parser("pretrain", help="pre-train the 3D encoder")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="JSON file of training options")
    t.add_argument("--out", required=True)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--log-every", type=int, default=20)
    t.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("eval-corr", help="correspondence error on held-out scenes")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--pairs", type=int, default=4)
    e.set_defaults(func=cmd_eval_corr)

    x = sub.add_parser("export-features", help="per-point encoder features of one scene")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--scene", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_features)

    b = sub.add_parser("probe", help="linear probe: pre-trained vs random-init encoder")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--seeds", type=int, default=10)
    b.add_argument("--report", default=None)
    b.set_defaults(func=cmd_probe)

    c = sub.add_parser("grad-check", help="finite-difference gradient checks")
    c.add_argument("--module", action="append", default=None,
                   help="check name; repeatable (default: all)")
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", UserWarning)
    try:
        return args.func(args)
    except (MVNetError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"mvnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

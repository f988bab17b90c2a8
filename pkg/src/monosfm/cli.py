"""Command-line entry points: reconstruct, eval, synth."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from .config import load_config
from .errors import MonoSfMError
from .io import atomic_write_text, load_scene, read_poses, save_reconstruction, write_poses, write_raster, write_scene

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2


def _cmd_reconstruct(args) -> int:
    from .pipeline import reconstruct

    overrides = list(args.set or [])
    for flag in ("no_lifting", "no_depth_reg", "no_depth_refinement", "no_consistency_check"):
        if getattr(args, flag):
            overrides.append(f"{flag}=true")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_config(args.config, overrides)
    scene = load_scene(Path(args.scene))
    state = reconstruct(scene, cfg)
    out = Path(args.out)
    save_reconstruction(state, out)
    atomic_write_text(out / "config.txt", cfg.dumps())
    print(f"status={state.status} registered={len(state.registered)}/{len(state.frames)} points={len(state.points)}")
    return {"OK": EXIT_OK, "PARTIAL": EXIT_PARTIAL}.get(state.status, EXIT_ERROR)


def _cmd_eval(args) -> int:
    from .evaluate import evaluate_poses, pairwise_errors

    gt, _ = read_poses(Path(args.gt))
    est, _ = read_poses(Path(args.est))
    try:
        thresholds = [float(t) for t in args.thresholds.split(",") if t.strip()]
    except ValueError:
        raise MonoSfMError(f"bad --thresholds {args.thresholds!r}") from None
    if not thresholds or min(thresholds) <= 0:
        raise MonoSfMError("thresholds must be positive")
    errors = pairwise_errors(gt, est)
    aucs = evaluate_poses(gt, est, thresholds)
    lines = []
    for t in thresholds:
        print(f"AUC@{t:g} = {aucs[t]:.6f}")
        lines.append(f"auc@{t:g} = {aucs[t]!r}\n")
    lines.append(f"registered = {sum(1 for k in gt if k in est)}\n")
    lines.append(f"images = {len(gt)}\n")
    lines.append(f"pairs = {len(errors)}\n")
    out = Path(args.out) if args.out else Path(args.est).parent / "metrics.txt"
    atomic_write_text(out, "".join(lines))
    return EXIT_OK


def _cmd_synth(args) -> int:
    from .synth import generate

    res = generate(args.preset, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scene(res.scene, out)
    write_poses(out / "poses_gt.txt", res.poses_gt)
    for img, d in sorted(res.depth_gt.items()):
        write_raster(out / f"depth_gt_{img}.mpr", d)
    print(f"wrote {len(res.poses_gt)} images to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="monosfm", description="Incremental SfM with monocular depth and normal priors")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("reconstruct", help="reconstruct a scene directory")
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    r.add_argument("--no-lifting", action="store_true")
    r.add_argument("--no-depth-reg", action="store_true")
    r.add_argument("--no-depth-refinement", action="store_true")
    r.add_argument("--no-consistency-check", action="store_true")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=_cmd_reconstruct)

    e = sub.add_parser("eval", help="pose accuracy AUC against ground truth")
    e.add_argument("--gt", required=True)
    e.add_argument("--est", required=True)
    e.add_argument("--thresholds", default="1,5,20")
    e.add_argument("--out", help="metrics file (default: metrics.txt next to --est)")
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic scene with ground truth")
    s.add_argument("--preset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MonoSfMError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

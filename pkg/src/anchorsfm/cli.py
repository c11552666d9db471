"""Command-line interface: make-scene, train, reconstruct, eval.

Every invocation writes exactly one ``manifest.json`` capturing the command,
config snapshot, seeds, input hashes, output paths, and wall-clock time, so
any number in a run directory traces back to a reproducible call.

Exit codes: 0 success, 2 input error, 3 numerical failure. The only
environment variable consulted is ``ANCHORSFM_THREADS`` (torch thread count).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import figures, synthscene
from .backbone import load_checkpoint, save_representation
from .config import TrainConfig, parse_kv
from .evalkit import Trajectory, compute_metrics
from .geometry import save_trajectory_tum
from .training import (
    TrainingDivergedError,
    localize_heldout,
    render_scene_frames,
    train,
)

logger = logging.getLogger("anchorsfm")

RECOMMENDED_ANCHORS = (50, 100)


class InputError(ValueError):
    pass


def _hash_file(path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, args: dict, inputs: list,
                    outputs: list, started: float, extra: dict | None = None) -> None:
    manifest = {
        "tool": f"anchorsfm {__version__}",
        "command": command,
        "config": {k: repr(v) if not isinstance(v, (int, float, str, bool, type(None))) else v
                   for k, v in args.items()},
        "inputs": {str(p): _hash_file(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_seconds": round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def _read_ppm(path) -> np.ndarray:
    """Minimal binary PPM (P6, maxval 255) decoder."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(data):
            raise InputError(f"{path}: truncated PPM header")
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        if data[pos : pos + 1].isspace():
            pos += 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise InputError(f"{path}: only binary P6 PPM images are supported")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise InputError(f"{path}: PPM maxval must be 255, got {maxval}")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(data[pos : pos + width * height * 3], dtype=np.uint8)
    if pixels.size != width * height * 3:
        raise InputError(f"{path}: truncated PPM payload")
    return pixels.reshape(height, width, 3).astype(np.float64) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    data = (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def _load_inputs(input_path: Path, resolution):
    """Scene file or PPM image directory -> (images, frame_ids, gt_poses or None)."""
    if input_path.is_dir():
        files = sorted(p for p in input_path.iterdir() if p.suffix == ".ppm")
        if not files:
            raise InputError(f"{input_path}: no .ppm images found")
        images = [_read_ppm(p) for p in files]
        for p, img in zip(files, images):
            if img.shape[:2] != (resolution[1], resolution[0]):
                raise InputError(
                    f"{p}: image is {img.shape[1]}x{img.shape[0]}, checkpoint expects "
                    f"{resolution[0]}x{resolution[1]}"
                )
        return images, list(range(len(images))), None
    scene = synthscene.load_scene(input_path)
    frames = render_scene_frames(scene, resolution)
    return [f.image for f in frames], list(range(len(frames))), [f.pose for f in frames]


def cmd_make_scene(args) -> int:
    started = time.time()
    cfg = synthscene.SceneConfig(
        point_count=args.points,
        extent=args.extent,
        trajectory=args.trajectory,
        frame_count=args.frames,
        fov=(args.fov, args.fov),
        seed=args.seed,
    )
    scene = synthscene.generate_scene(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    synthscene.save_scene(out, scene)
    logger.info("wrote %s (%d points, %d frames)", out, len(scene.points),
                len(scene.trajectory))
    _write_manifest(out.parent, "make-scene", vars(args), [], [out], started,
                    extra={"seed": args.seed})
    return 0


def cmd_train(args) -> int:
    started = time.time()
    inputs = []
    if args.config:
        cfg = TrainConfig.from_file(args.config)
        inputs.append(args.config)
    else:
        cfg = TrainConfig()
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    if args.steps is not None:
        overrides["steps"] = str(args.steps)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if overrides:
        merged = cfg.to_dict()
        merged.update(overrides)
        cfg = TrainConfig.from_dict(merged)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.txt")
    result = train(cfg, out_dir=str(out_dir), log_every=args.log_every)

    history_path = out_dir / "loss_history.csv"
    with open(history_path, "w") as fh:
        fh.write("step,lr,scene,camera,depth,scm,total\n")
        for h in result.loss_history:
            fh.write(
                f"{h['step']},{h['lr']:.8g},{h['scene']},{h['camera']:.8g},"
                f"{h['depth']:.8g},{h['scm']:.8g},{h['total']:.8g}\n"
            )
    outputs = [out_dir / "config.txt", history_path, *result.checkpoints]
    if result.loss_history:
        figure_path = out_dir / "loss_curve.png"
        figures.save_loss_curve(figure_path, result.loss_history)
        outputs.append(figure_path)
    _write_manifest(out_dir, "train", cfg.to_dict(), inputs, outputs, started,
                    extra={"seed": cfg.seed})
    return 0


def cmd_reconstruct(args) -> int:
    if args.refine:
        raise InputError(
            "post-refinement is not implemented in this build; rerun without --refine"
        )
    started = time.time()
    model = load_checkpoint(args.checkpoint)
    model.eval()
    input_path = Path(args.input)
    images, frame_ids, gt_poses = _load_inputs(input_path, model.config.resolution)
    m = len(images)

    n = args.anchors if args.anchors is not None else model.config.anchor_count
    if n > m or n < 1:
        logger.warning("anchor count %d clamped to [1, %d]", n, m)
        n = min(max(n, 1), m)
    if m < RECOMMENDED_ANCHORS[0]:
        logger.warning(
            "input has %d frames; the recommended %d-%d anchor window does not fit "
            "and %d anchors will be used",
            m, RECOMMENDED_ANCHORS[0], RECOMMENDED_ANCHORS[1], n,
        )
    anchors, queries = synthscene.split_anchor_query(frame_ids, n)
    if args.first_anchor is not None:
        if args.first_anchor not in frame_ids:
            raise InputError(f"--first-anchor {args.first_anchor} is not an input frame")
        anchors = [args.first_anchor] + [a for a in anchors if a != args.first_anchor]

    ratio = args.ratio if args.ratio is not None else model.config.downsample_ratio
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rep, _ = model.regress_scene(
        np.stack([images[i] for i in anchors]), r=ratio, seed=args.theta_seed,
        frame_ids=anchors,
    )
    results = model.localize_batch(
        [images[i] for i in queries], rep, batch_size=args.batch_size,
        frame_ids=queries,
    )

    traj_path = out_dir / "trajectory.tum"
    save_trajectory_tum(traj_path, [r.frame_id for r in results],
                        [r.pose for r in results])
    rep_path = out_dir / "representation.repr"
    save_representation(rep_path, rep)
    dense_dir = out_dir / "dense"
    dense_dir.mkdir(exist_ok=True)
    outputs = [traj_path, rep_path]
    for res in results:
        grid_path = dense_dir / f"frame-{res.frame_id:06d}.grid"
        synthscene.save_grid(
            grid_path,
            {
                "depth": res.dense.depth,
                "depth_conf": res.dense.depth_conf,
                "scm": res.dense.scm,
                "scm_conf": res.dense.scm_conf,
            },
        )
        outputs.append(grid_path)

    est = Trajectory([r.frame_id for r in results], [r.pose for r in results])
    gt = Trajectory(frame_ids, gt_poses) if gt_poses is not None else None
    figure_path = out_dir / "trajectory.png"
    figures.save_trajectory_figure(figure_path, est, gt, title="reconstructed trajectory")
    outputs.append(figure_path)
    if gt is not None:
        gt_path = out_dir / "gt_trajectory.tum"
        gt.save_tum(gt_path)
        outputs.append(gt_path)

    inputs = [args.checkpoint] + ([input_path] if input_path.is_file() else [])
    _write_manifest(out_dir, "reconstruct", vars(args), inputs, outputs, started,
                    extra={"anchors": anchors, "ratio": ratio, "frames": m})
    logger.info("localized %d frames (%d anchors, r=%.2f) -> %s", m, len(anchors),
                ratio, traj_path)
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    est = Trajectory.from_tum(args.est)
    gt = Trajectory.from_tum(args.gt)
    missing = sorted(set(gt.frame_ids) - set(est.frame_ids))
    if missing:
        logger.warning("estimate is missing %d ground-truth frames: %s",
                       len(missing), missing[:20])
    thresholds = [float(t) for t in args.thresholds.split(",")]
    report = compute_metrics(est, gt, thresholds=thresholds, alignment=args.alignment)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text_path = out_dir / "metrics.txt"
    text_path.write_text(report.format_text())
    json_path = out_dir / "metrics.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    traj_fig = out_dir / "trajectory.png"
    figures.save_trajectory_figure(traj_fig, est, gt, title="aligned trajectories")
    err_fig = out_dir / "center_errors.png"
    figures.save_center_error_figure(err_fig, est, gt)

    print(report.format_text(), end="")
    _write_manifest(out_dir, "eval", vars(args), [args.est, args.gt],
                    [text_path, json_path, traj_fig, err_fig], started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchorsfm",
        description="Feed-forward structure-from-motion with anchor-based "
                    "scene representations",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-scene", help="generate a synthetic scene file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=400)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--extent", type=float, default=2.0)
    p.add_argument("--fov", type=float, default=1.3)
    p.add_argument("--trajectory", choices=synthscene.TRAJECTORY_TYPES, default="orbit")
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("train", help="train on the synthetic curriculum")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field (repeatable)")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="pose all frames of a scene or image dir")
    p.add_argument("--input", required=True, help="scene file or directory of .ppm images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--anchors", type=int, help="anchor count N")
    p.add_argument("--ratio", type=float, help="token downsample ratio r")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--theta-seed", type=int, default=0)
    p.add_argument("--first-anchor", type=int,
                   help="force this frame to be the first anchor")
    p.add_argument("--refine", action="store_true",
                   help="post-refinement (not implemented; errors out)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="compare trajectories in TUM format")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--thresholds", default="5,15,30")
    p.add_argument("--alignment", choices=("sim3", "se3"), default="sim3")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("ANCHORSFM_THREADS")
    if threads:
        import torch

        torch.set_num_threads(int(threads))
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        logger.error("numerical failure: %s", exc)
        return 3
    except (InputError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        logger.error("input error: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Toy training loop: overfit the network to a fixed pool of synthetic scenes.

Every step samples a scene, a frame subset, an anchor designation, and a
downsampling ratio, renders exact supervision, normalizes the ground truth
against a randomly chosen reference anchor, runs one masked joint pass, and
takes an Adam step under a warmup + cosine learning-rate schedule. The whole
loop is a deterministic function of the config seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import geometry as geo
from . import losses as ls
from . import synthscene as synth
from .backbone import NetworkConfig, SceneRegressor, save_checkpoint
from .config import TrainConfig
from .evalkit import Trajectory

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, batch_seed: int, message: str):
        super().__init__(f"step {step} (batch seed {batch_seed}): {message}")
        self.step = step
        self.batch_seed = batch_seed


@dataclass
class RenderedFrame:
    image: np.ndarray
    dense: geo.DenseOutput
    pose: geo.CameraPose


@dataclass
class TrainResult:
    model: SceneRegressor
    loss_history: list[dict]
    checkpoints: list[str]


def build_scene_pool(cfg: TrainConfig) -> list[synth.SyntheticScene]:
    return [
        synth.generate_scene(
            synth.SceneConfig(
                point_count=cfg.scene_points,
                extent=cfg.scene_extent,
                trajectory=cfg.trajectory,
                frame_count=cfg.scene_frames,
                fov=(cfg.fov, cfg.fov),
                seed=cfg.scene_seed + i,
            )
        )
        for i in range(cfg.scene_count)
    ]


def render_scene_frames(scene: synth.SyntheticScene, resolution) -> list[RenderedFrame]:
    frames = []
    for pose in scene.trajectory:
        image, dense = synth.render_frame(scene, pose, resolution)
        frames.append(RenderedFrame(image=image, dense=dense, pose=pose))
    return frames


def normalized_ground_truth(frames: list[RenderedFrame], anchor_count: int,
                            ref_index: int, dtype=torch.float32):
    """Scale the batch so the reference anchor sees the anchor points at mean
    distance 1, then build per-frame loss targets."""
    anchor_points = [f.dense.scm[f.dense.valid] for f in frames[:anchor_count]]
    scale, _, _ = geo.normalize_scene(
        [f.pose for f in frames[:anchor_count]], anchor_points, ref_index
    )
    gts = []
    for f in frames:
        pose = geo.CameraPose(f.pose.rotation, f.pose.translation / scale, f.pose.fov)
        gts.append(
            ls.FrameGroundTruth(
                pose_enc=torch.as_tensor(geo.encode_pose(pose), dtype=dtype),
                depth=torch.as_tensor(f.dense.depth / scale, dtype=dtype),
                scm=torch.as_tensor(f.dense.scm / scale, dtype=dtype),
                valid=torch.as_tensor(f.dense.valid),
            )
        )
    return scale, gts


def learning_rate(step: int, cfg: TrainConfig) -> float:
    if cfg.steps == 0:
        return 0.0
    if step < cfg.warmup_steps:
        return cfg.peak_lr * (step + 1) / max(cfg.warmup_steps, 1)
    span = max(cfg.steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / span
    floor = cfg.peak_lr * cfg.final_lr_fraction
    return floor + 0.5 * (cfg.peak_lr - floor) * (1.0 + math.cos(math.pi * progress))


def predictions_from_joint(out) -> list[ls.FramePrediction]:
    return [
        ls.FramePrediction(
            pose_enc=out.pose_enc[i],
            depth=out.depth[i],
            depth_conf=out.depth_conf[i],
            scm=out.scm[i],
            scm_conf=out.scm_conf[i],
        )
        for i in range(out.pose_enc.shape[0])
    ]


def train(cfg: TrainConfig, out_dir=None, log_every: int = 100) -> TrainResult:
    torch.manual_seed(cfg.seed)
    model = SceneRegressor(cfg.network)
    rng = np.random.default_rng(cfg.seed)
    loss_cfg = ls.LossConfig(alpha=cfg.alpha, gradient_term=cfg.gradient_term)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.peak_lr)

    scenes = build_scene_pool(cfg)
    rendered = [render_scene_frames(s, cfg.network.resolution) for s in scenes]
    train_frames = [
        [i for i in range(len(r)) if i not in set(cfg.holdout)] for r in rendered
    ]
    if any(len(t) < cfg.frames_min for t in train_frames):
        raise ValueError("holdout leaves a scene with fewer frames than frames_min")

    checkpoints: list[str] = []
    history: list[dict] = []

    def save(tag):
        if out_dir is None:
            return
        path = f"{out_dir}/model-{tag}.ckpt"
        save_checkpoint(path, model)
        checkpoints.append(path)

    for step in range(cfg.steps):
        batch_seed = int(rng.integers(1 << 31))
        batch_rng = np.random.default_rng(batch_seed)
        scene_idx = int(batch_rng.integers(len(scenes)))
        avail = train_frames[scene_idx]
        m = int(batch_rng.integers(cfg.frames_min, min(cfg.frames_max, len(avail)) + 1))
        picked = batch_rng.choice(avail, size=m, replace=False)
        n_anchors = int(batch_rng.integers(cfg.anchors_min, min(cfg.anchors_max, m) + 1))
        ratio = float(batch_rng.uniform(cfg.ratio_min, cfg.ratio_max))
        ref_index = int(batch_rng.integers(n_anchors))
        theta_seed = int(batch_rng.integers(1 << 31))

        frames = [rendered[scene_idx][i] for i in picked]
        _, gts = normalized_ground_truth(frames, n_anchors, ref_index)
        images = torch.as_tensor(
            np.stack([f.image for f in frames]), dtype=torch.float32
        )

        lr = learning_rate(step, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad()
        out = model.forward_joint(
            images, n_anchors, r=ratio, seed=theta_seed, masked=cfg.masked
        )
        loss, report = ls.total_loss(predictions_from_joint(out), gts, loss_cfg)
        if not math.isfinite(report.total):
            raise TrainingDivergedError(
                step, batch_seed,
                f"non-finite loss (camera {report.camera}, depth {report.depth}, "
                f"scm {report.scm})",
            )
        loss.backward()
        optimizer.step()

        history.append(
            {"step": step, "lr": lr, "scene": scene_idx, **{
                k: report.__dict__[k] for k in ("camera", "depth", "scm", "total")
            }}
        )
        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            logger.info(
                "step %d/%d lr %.2e loss %.4f (camera %.4f depth %.4f scm %.4f)",
                step, cfg.steps, lr, report.total, report.camera, report.depth,
                report.scm,
            )
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save(f"{step + 1:06d}")

    save("final")
    return TrainResult(model=model, loss_history=history, checkpoints=checkpoints)


# ---------------------------------------------------------------------------
# held-out evaluation helpers
# ---------------------------------------------------------------------------


def localize_heldout(model: SceneRegressor, rendered: list[RenderedFrame],
                     anchor_indices, query_indices, r: float, theta_seed: int = 0,
                     batch_size: int = 8):
    """Build the representation from anchors, localize queries, and return
    (estimated, ground-truth) trajectories over the query set."""
    anchor_images = np.stack([rendered[i].image for i in anchor_indices])
    rep, _ = model.regress_scene(
        anchor_images, r=r, seed=theta_seed, frame_ids=list(anchor_indices)
    )
    results = model.localize_batch(
        [rendered[i].image for i in query_indices], rep,
        batch_size=batch_size, frame_ids=list(query_indices),
    )
    est = Trajectory(list(query_indices), [res.pose for res in results])
    gt = Trajectory(list(query_indices), [rendered[i].pose for i in query_indices])
    return est, gt


def joint_regression_poses(model: SceneRegressor, rendered: list[RenderedFrame],
                           frame_indices) -> Trajectory:
    """Unmasked joint regression over the given frames (baseline inference)."""
    images = torch.as_tensor(
        np.stack([rendered[i].image for i in frame_indices]), dtype=torch.float32
    )
    with torch.no_grad():
        out = model.forward_joint(images, anchor_count=len(frame_indices), masked=False)
    poses = [geo.decode_pose(out.pose_enc[i].double().numpy()) for i in range(len(frame_indices))]
    return Trajectory(list(frame_indices), poses)

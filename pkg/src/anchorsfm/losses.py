"""Multitask training objective: camera pose, depth, and scene-coordinate losses.

Per frame the loss is

    camera:  |g_hat - g|_1 over the 9-value pose encoding
    depth:   mean over valid pixels of  C * |D_hat - D| - alpha * log C,
             plus the confidence-unweighted L1 difference of forward-difference
             image gradients (a pair counts only when both its pixels are valid)
    scm:     the same with a 3-channel L1 residual and per-channel gradients

and the total is the plain sum of the three terms over all frames. Pixel terms
are averaged per frame so the magnitude does not scale with resolution; the
confidence maps must already satisfy C >= 1 (the heads guarantee this by
parameterization).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


class EmptySupervisionError(ValueError):
    pass


@dataclass
class LossConfig:
    alpha: float = 0.2
    gradient_term: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass
class FramePrediction:
    pose_enc: torch.Tensor   # (9,)
    depth: torch.Tensor      # (H, W)
    depth_conf: torch.Tensor
    scm: torch.Tensor        # (H, W, 3)
    scm_conf: torch.Tensor


@dataclass
class FrameGroundTruth:
    pose_enc: torch.Tensor   # (9,) canonical encoding of the normalized pose
    depth: torch.Tensor
    scm: torch.Tensor
    valid: torch.Tensor      # (H, W) bool


@dataclass
class LossReport:
    camera: float
    depth: float
    scm: float
    total: float
    per_frame: list[dict] = field(default_factory=list)


def _as_like(x, ref: torch.Tensor) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(ref.dtype)
    return torch.as_tensor(np.asarray(x), dtype=ref.dtype)


def camera_loss(pred_enc: torch.Tensor, gt_enc) -> torch.Tensor:
    """L1 distance between predicted and ground-truth pose encodings."""
    gt = _as_like(gt_enc, pred_enc)
    if not torch.isfinite(pred_enc).all() or not torch.isfinite(gt).all():
        raise ValueError("pose encodings must be finite")
    return (pred_enc - gt).abs().sum(dim=-1)


def _gradient_penalty(pred, gt, valid):
    """L1 difference of forward-difference gradients over both-valid pairs.

    Works for (H, W) and (H, W, 3) maps; channel residuals are summed.
    """
    diff = pred - gt
    dx = (diff[:, 1:] - diff[:, :-1]).abs()
    dy = (diff[1:, :] - diff[:-1, :]).abs()
    if diff.ndim == 3:
        dx, dy = dx.sum(-1), dy.sum(-1)
    vx = valid[:, 1:] & valid[:, :-1]
    vy = valid[1:, :] & valid[:-1, :]
    total = pred.new_zeros(())
    if vx.any():
        total = total + dx[vx].sum()
    if vy.any():
        total = total + dy[vy].sum()
    return total


def _confidence_weighted(pred, conf, gt, valid, cfg: LossConfig):
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptySupervisionError("no valid pixels to supervise")
    residual = (pred - gt).abs()
    if residual.ndim == 3:
        residual = residual.sum(-1)
    pixel_terms = conf[valid] * residual[valid] - cfg.alpha * torch.log(conf[valid])
    total = pixel_terms.sum()
    if cfg.gradient_term:
        total = total + _gradient_penalty(pred, gt, valid)
    return total / n_valid


def depth_loss(pred_depth, pred_conf, gt_depth, valid_mask, cfg: LossConfig) -> torch.Tensor:
    gt = _as_like(gt_depth, pred_depth)
    valid = torch.as_tensor(np.asarray(valid_mask)) if not isinstance(valid_mask, torch.Tensor) else valid_mask
    return _confidence_weighted(pred_depth, pred_conf, gt, valid.bool(), cfg)


def scm_loss(pred_scm, pred_conf, gt_scm, valid_mask, cfg: LossConfig) -> torch.Tensor:
    gt = _as_like(gt_scm, pred_scm)
    valid = torch.as_tensor(np.asarray(valid_mask)) if not isinstance(valid_mask, torch.Tensor) else valid_mask
    return _confidence_weighted(pred_scm, pred_conf, gt, valid.bool(), cfg)


def total_loss(frame_predictions, frame_ground_truth, cfg: LossConfig):
    """Summed multitask loss over all frames.

    Ground truth is expected in the normalized scene frame (the training loop
    applies the reference-anchor normalization before building it). Returns
    (differentiable scalar, LossReport with float breakdowns).
    """
    if len(frame_predictions) != len(frame_ground_truth):
        raise ValueError("prediction/ground-truth frame counts differ")
    if not frame_predictions:
        raise EmptySupervisionError("no frames to supervise")
    cam_total = depth_total = scm_total = None
    per_frame = []
    for i, (pred, gt) in enumerate(zip(frame_predictions, frame_ground_truth)):
        c = camera_loss(pred.pose_enc, gt.pose_enc)
        d = depth_loss(pred.depth, pred.depth_conf, gt.depth, gt.valid, cfg)
        s = scm_loss(pred.scm, pred.scm_conf, gt.scm, gt.valid, cfg)
        cam_total = c if cam_total is None else cam_total + c
        depth_total = d if depth_total is None else depth_total + d
        scm_total = s if scm_total is None else scm_total + s
        per_frame.append(
            {
                "frame": i,
                "camera": float(c.detach()),
                "depth": float(d.detach()),
                "scm": float(s.detach()),
            }
        )
    loss = cam_total + depth_total + scm_total
    cam_f, depth_f, scm_f = (
        float(cam_total.detach()),
        float(depth_total.detach()),
        float(scm_total.detach()),
    )
    report = LossReport(
        camera=cam_f,
        depth=depth_f,
        scm=scm_f,
        total=cam_f + depth_f + scm_f,
        per_frame=per_frame,
    )
    return loss, report


def grad_check(scalar_function, parameters, step: float = 1e-5, sample: int | None = None,
               seed: int = 0, floor: float = 1e-8) -> float:
    """Max relative error between analytic gradients and central differences.

    ``scalar_function`` is a zero-argument closure over ``parameters`` (float64
    leaf tensors with requires_grad). When ``sample`` is given, only that many
    randomly chosen components are probed.
    """
    params = list(parameters)
    loss = scalar_function()
    grads = torch.autograd.grad(loss, params)
    entries = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    if sample is not None and sample < len(entries):
        rng = np.random.default_rng(seed)
        chosen = rng.choice(len(entries), size=sample, replace=False)
        entries = [entries[int(k)] for k in chosen]
    max_rel = 0.0
    with torch.no_grad():
        for i, j in entries:
            flat = params[i].reshape(-1)
            orig = flat[j].item()
            flat[j] = orig + step
            f_plus = float(scalar_function())
            flat[j] = orig - step
            f_minus = float(scalar_function())
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            analytic = grads[i].reshape(-1)[j].item()
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), floor)
            max_rel = max(max_rel, rel)
    return max_rel

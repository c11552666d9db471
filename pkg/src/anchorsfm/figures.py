"""Matplotlib figure rendering for the CLI report paths.

Figures are written next to the delimited text/JSON outputs so a run
directory is self-describing: trajectory overlays for reconstruct/eval,
loss curves for training, and the accuracy/runtime trade-off for ratio
sweeps.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evalkit import Trajectory, umeyama_align


def save_trajectory_figure(path, est: Trajectory, gt: Trajectory | None = None,
                           title: str = "trajectory") -> None:
    """Top-down (x, y) view of camera centers; the estimate is similarity-
    aligned onto the ground truth when one is provided."""
    fig, ax = plt.subplots(figsize=(6, 6))
    est_centers = est.centers()
    if gt is not None:
        gt_centers = gt.centers()
        try:
            s, R, t = umeyama_align(est_centers, gt_centers)
            est_centers = (s * (R @ est_centers.T)).T + t
        except ValueError:
            pass
        ax.plot(gt_centers[:, 0], gt_centers[:, 1], "o-", color="tab:blue",
                label="ground truth", markersize=3)
    ax.plot(est_centers[:, 0], est_centers[:, 1], "s--", color="tab:orange",
            label="estimate", markersize=3)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(title)
    ax.axis("equal")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_center_error_figure(path, est: Trajectory, gt: Trajectory) -> None:
    """Per-frame camera-center error after similarity alignment."""
    est_centers, gt_centers = est.centers(), gt.centers()
    gt_norm = gt_centers - gt_centers.mean(axis=0)
    rms = np.sqrt((gt_norm**2).sum(axis=1).mean())
    gt_norm = gt_norm / rms
    s, R, t = umeyama_align(est_centers, gt_norm)
    aligned = (s * (R @ est_centers.T)).T + t
    errors = np.linalg.norm(aligned - gt_norm, axis=1)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(range(len(errors)), errors, color="tab:orange")
    ax.set_xlabel("frame")
    ax.set_ylabel("center error (gt rms units)")
    ax.set_title("per-frame trajectory error after sim3 alignment")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curve(path, history: list[dict]) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [h["step"] for h in history]
    for key, color in (("total", "k"), ("camera", "tab:blue"),
                       ("depth", "tab:green"), ("scm", "tab:red")):
        ax.plot(steps, [h[key] for h in history], color=color, label=key, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ratio_sweep_figure(path, ratios, errors, runtimes=None,
                            error_label: str = "held-out pose error") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ratios, errors, "o-", color="tab:blue", label=error_label)
    ax.set_xlabel("downsample ratio r")
    ax.set_ylabel(error_label, color="tab:blue")
    if runtimes is not None:
        ax2 = ax.twinx()
        ax2.plot(ratios, runtimes, "s--", color="tab:orange", label="runtime")
        ax2.set_ylabel("localization time (s)", color="tab:orange")
    ax.set_title("accuracy and runtime vs token ratio")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

"""Pose-accuracy metrics: pairwise relative errors, trajectory alignment, ATE, mAA.

All pairwise metrics are invariant to a global similarity transform of the
estimated trajectory, so they are meaningful for reconstructions produced in
an arbitrary normalized frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose, Quaternion, load_trajectory_tum, save_trajectory_tum

MIN_BASELINE = 1e-9


class InsufficientFramesError(ValueError):
    pass


class DegenerateAlignmentError(ValueError):
    pass


@dataclass
class Trajectory:
    frame_ids: list
    poses: list[CameraPose]

    def __post_init__(self):
        if len(self.frame_ids) != len(self.poses):
            raise ValueError("frame_ids and poses must have equal length")
        if len(set(self.frame_ids)) != len(self.frame_ids):
            raise ValueError("frame ids must be unique")

    @classmethod
    def from_tum(cls, path, fov=(math.pi / 2, math.pi / 2)) -> "Trajectory":
        ids, poses = load_trajectory_tum(path, fov=fov)
        return cls(ids, poses)

    def save_tum(self, path) -> None:
        save_trajectory_tum(path, self.frame_ids, self.poses)

    def centers(self) -> np.ndarray:
        return np.stack([p.camera_center for p in self.poses])


@dataclass
class MetricsReport:
    rra_at: dict[float, float]
    rta_at: dict[float, float]
    ate_rmse: float
    maa_at_30: float
    registered_fraction: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {}
        for t, v in sorted(self.rra_at.items()):
            out[f"rra@{t:g}"] = v
        for t, v in sorted(self.rta_at.items()):
            out[f"rta@{t:g}"] = v
        out["ate_rmse"] = self.ate_rmse
        out["maa@30"] = self.maa_at_30
        out["registered_fraction"] = self.registered_fraction
        out.update(self.extra)
        return out

    def format_text(self) -> str:
        return "\n".join(f"{k} {v:.6f}" for k, v in self.to_dict().items()) + "\n"


def umeyama_align(source, target, with_scale: bool = True):
    """Least-squares similarity (or rigid) transform: target ~ s * R @ source + t.

    Returns (scale, R, t) with R a proper rotation; reflections are folded
    away by the determinant-sign correction in the SVD step.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape[0] < 3 or src.shape != dst.shape:
        raise InsufficientFramesError("alignment needs >= 3 correspondences")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cs, cd = src - mu_s, dst - mu_d
    cov = cd.T @ cs / src.shape[0]
    U, S, Vt = np.linalg.svd(cov)
    if S[1] <= max(S[0] * 1e-12, 1e-300):
        raise DegenerateAlignmentError("cross-covariance rank < 2; alignment is ambiguous")
    d = np.sign(np.linalg.det(U) * np.linalg.det(Vt))
    D = np.diag([1.0, 1.0, d])
    R = U @ D @ Vt
    if with_scale:
        var_s = (cs**2).sum() / src.shape[0]
        scale = float(np.trace(np.diag(S) @ D) / var_s)
    else:
        scale = 1.0
    t = mu_d - scale * R @ mu_s
    return scale, R, t


def relative_rotation_angle(q1: Quaternion, q2: Quaternion) -> float:
    """Angle in degrees between two rotations, insensitive to the double cover."""
    dot = abs(float(np.dot(q1.as_array(), q2.as_array())))
    return math.degrees(2.0 * math.acos(min(1.0, dot)))


def _common_poses(est: Trajectory, gt: Trajectory):
    gt_by_id = dict(zip(gt.frame_ids, gt.poses))
    pairs = [(e, gt_by_id[i]) for i, e in zip(est.frame_ids, est.poses) if i in gt_by_id]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _angle_between(u, v) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < MIN_BASELINE:
        return 180.0  # estimated baseline collapsed; count as maximal error
    c = float(np.dot(u, v) / (nu * nv))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def pairwise_pose_errors(est: Trajectory, gt: Trajectory):
    """Relative rotation / translation-direction errors over all unordered
    frame pairs shared by both trajectories.

    Returns (rot_err_deg, trans_err_deg, trans_defined). Pairs whose ground
    truth baseline is below MIN_BASELINE have trans_defined=False.
    """
    e_poses, g_poses = _common_poses(est, gt)
    n = len(e_poses)
    if n < 2:
        raise InsufficientFramesError(f"need >= 2 common frames, got {n}")
    rot, trans, defined = [], [], []
    for i in range(n):
        for j in range(i + 1, n):
            q_e = e_poses[i].rotation * e_poses[j].rotation.conjugate()
            q_g = g_poses[i].rotation * g_poses[j].rotation.conjugate()
            rot.append(relative_rotation_angle(q_e, q_g))
            t_e = e_poses[i].translation - q_e.rotation_matrix() @ e_poses[j].translation
            t_g = g_poses[i].translation - q_g.rotation_matrix() @ g_poses[j].translation
            if np.linalg.norm(t_g) < MIN_BASELINE:
                trans.append(np.nan)
                defined.append(False)
            else:
                trans.append(_angle_between(t_e, t_g))
                defined.append(True)
    return np.array(rot), np.array(trans), np.array(defined)


def rra_rta(est: Trajectory, gt: Trajectory, thresholds):
    """Fractions of frame pairs with relative rotation / translation-direction
    error below each threshold (degrees)."""
    rot, trans, defined = pairwise_pose_errors(est, gt)
    rra = {float(t): float((rot < t).mean()) for t in thresholds}
    if defined.any():
        rta = {float(t): float((trans[defined] < t).mean()) for t in thresholds}
    else:
        rta = {float(t): 0.0 for t in thresholds}
    return rra, rta


def maa(est: Trajectory, gt: Trajectory, max_threshold: int = 30) -> float:
    """Mean accuracy over integer thresholds 1..max_threshold of the fraction
    of pairs whose max(rotation, translation-direction) error is below the
    threshold. Pairs without a defined ground-truth baseline are excluded."""
    rot, trans, defined = pairwise_pose_errors(est, gt)
    if not defined.any():
        return 0.0
    worst = np.maximum(rot[defined], trans[defined])
    taus = np.arange(1, max_threshold + 1, dtype=np.float64)
    return float((worst[None, :] < taus[:, None]).mean())


def ate_rmse(est: Trajectory, gt: Trajectory, alignment: str = "sim3") -> float:
    """RMSE of camera-center distances after trajectory alignment.

    Ground-truth centers are normalized to zero mean and unit RMS spread, then
    the estimated centers are aligned onto them with a similarity ("sim3") or
    rigid ("se3") Umeyama fit.
    """
    if alignment not in ("sim3", "se3"):
        raise ValueError(f"alignment must be sim3 or se3, got {alignment!r}")
    e_poses, g_poses = _common_poses(est, gt)
    if len(e_poses) < 3:
        raise InsufficientFramesError(f"need >= 3 common frames, got {len(e_poses)}")
    e = np.stack([p.camera_center for p in e_poses])
    g = np.stack([p.camera_center for p in g_poses])
    g = g - g.mean(axis=0)
    rms = math.sqrt(float((g**2).sum(axis=1).mean()))
    if rms < MIN_BASELINE:
        raise DegenerateAlignmentError("ground-truth centers are coincident")
    g = g / rms
    s, R, t = umeyama_align(e, g, with_scale=(alignment == "sim3"))
    aligned = (s * (R @ e.T)).T + t
    return float(np.sqrt(((aligned - g) ** 2).sum(axis=1).mean()))


def compute_metrics(
    est: Trajectory,
    gt: Trajectory,
    thresholds=(5.0, 15.0, 30.0),
    alignment: str = "sim3",
) -> MetricsReport:
    rra, rta = rra_rta(est, gt, thresholds)
    return MetricsReport(
        rra_at=rra,
        rta_at=rta,
        ate_rmse=ate_rmse(est, gt, alignment=alignment),
        maa_at_30=maa(est, gt),
        registered_fraction=len(_common_poses(est, gt)[0]) / max(len(gt.frame_ids), 1),
    )

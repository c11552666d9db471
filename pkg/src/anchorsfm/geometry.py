"""Camera pose math: quaternions, pinhole projection, scene coordinate maps.

Conventions used throughout the package:

* World-to-camera extrinsics: ``x_cam = R @ x_world + t``. The camera center
  in world coordinates is ``-R.T @ t``.
* Camera frame: x right, y down, z forward (looking direction).
* Intrinsics are a 2-vector field of view ``(fov_x, fov_y)`` in radians with
  the principal point at the image center ``(W/2, H/2)`` and zero skew.
  Focal length in pixels: ``f_x = (W/2) / tan(fov_x/2)``.
* Continuous image coordinates ``(u, v)`` have their origin at the top-left;
  the pixel grid samples integer coordinates, i.e. pixel ``(row i, col j)``
  is the sample at ``(u, v) = (j, i)``. The optical axis therefore hits the
  sample ``(W/2, H/2)`` exactly.
* Poses are value objects; all functions here are pure and thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FOV_CLAMP_EPS = 1e-3


class GeometryError(ValueError):
    """Base class for geometry-domain failures."""


class InvalidInputError(GeometryError):
    pass


class DegenerateRotationError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


class InvalidDepthError(GeometryError):
    pass


class InsufficientCorrespondencesError(GeometryError):
    pass


class DegenerateGeometryError(GeometryError):
    pass


class DegenerateSceneError(GeometryError):
    pass


def _as_vec(x, n, name) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.shape != (n,):
        raise InvalidInputError(f"{name} must have {n} components, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite components: {a}")
    return a


@dataclass(frozen=True)
class Quaternion:
    """Unit rotation quaternion (scalar-first). Normalized on construction."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if not math.isfinite(n):
            raise InvalidInputError("quaternion components must be finite")
        if n < 1e-12:
            raise DegenerateRotationError("zero-norm quaternion has no rotation direction")
        object.__setattr__(self, "w", self.w / n)
        object.__setattr__(self, "x", self.x / n)
        object.__setattr__(self, "y", self.y / n)
        object.__setattr__(self, "z", self.z / n)

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q) -> "Quaternion":
        q = _as_vec(q, 4, "quaternion")
        return cls(q[0], q[1], q[2], q[3])

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Quaternion":
        axis = _as_vec(axis, 3, "axis")
        n = np.linalg.norm(axis)
        if n < 1e-12:
            raise DegenerateRotationError("zero-norm rotation axis")
        axis = axis / n
        half = 0.5 * angle
        s = math.sin(half)
        return cls(math.cos(half), axis[0] * s, axis[1] * s, axis[2] * s)

    @classmethod
    def from_matrix(cls, R) -> "Quaternion":
        """Quaternion of a proper rotation matrix (Shepperd's branch selection)."""
        R = np.asarray(R, dtype=np.float64)
        if R.shape != (3, 3):
            raise InvalidInputError(f"rotation matrix must be 3x3, got {R.shape}")
        tr = np.trace(R)
        if tr > 0.0:
            s = math.sqrt(tr + 1.0) * 2.0
            w = 0.25 * s
            x = (R[2, 1] - R[1, 2]) / s
            y = (R[0, 2] - R[2, 0]) / s
            z = (R[1, 0] - R[0, 1]) / s
        elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
            s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            w = (R[2, 1] - R[1, 2]) / s
            x = 0.25 * s
            y = (R[0, 1] + R[1, 0]) / s
            z = (R[0, 2] + R[2, 0]) / s
        elif R[1, 1] >= R[2, 2]:
            s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
            w = (R[0, 2] - R[2, 0]) / s
            x = (R[0, 1] + R[1, 0]) / s
            y = 0.25 * s
            z = (R[1, 2] + R[2, 1]) / s
        else:
            s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
            w = (R[1, 0] - R[0, 1]) / s
            x = (R[0, 2] + R[2, 0]) / s
            y = (R[1, 2] + R[2, 1]) / s
            z = 0.25 * s
        return cls(w, x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def canonical(self) -> "Quaternion":
        """Sign-fixed representative of the double cover: w >= 0, ties broken
        by the first nonzero of (x, y, z)."""
        q = self.as_array()
        if q[0] < 0.0:
            q = -q
        elif q[0] == 0.0:
            for c in q[1:]:
                if c != 0.0:
                    if c < 0.0:
                        q = -q
                    break
        return Quaternion(q[0], q[1], q[2], q[3])

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ],
            dtype=np.float64,
        )

    def rotate(self, v) -> np.ndarray:
        return self.rotation_matrix() @ _as_vec(v, 3, "vector")


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera extrinsics plus field-of-view intrinsics."""

    rotation: Quaternion
    translation: np.ndarray
    fov: np.ndarray

    def __post_init__(self):
        t = _as_vec(self.translation, 3, "translation")
        f = _as_vec(self.fov, 2, "fov")
        if np.any(f <= 0.0) or np.any(f >= math.pi):
            raise InvalidInputError(f"fov components must lie in (0, pi), got {f}")
        t.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "fov", f)

    @classmethod
    def identity(cls, fov=(math.pi / 2, math.pi / 2)) -> "CameraPose":
        return cls(Quaternion.identity(), np.zeros(3), np.asarray(fov, dtype=np.float64))

    @property
    def matrix(self) -> np.ndarray:
        return self.rotation.rotation_matrix()

    @property
    def camera_center(self) -> np.ndarray:
        return -self.matrix.T @ self.translation

    def transform(self, points_world) -> np.ndarray:
        """World points (..., 3) into the camera frame."""
        p = np.asarray(points_world, dtype=np.float64)
        return p @ self.matrix.T + self.translation

    def inverse_transform(self, points_cam) -> np.ndarray:
        p = np.asarray(points_cam, dtype=np.float64)
        return (p - self.translation) @ self.matrix

    def compose_world_shift(self, delta) -> "CameraPose":
        """Pose of the same camera after moving its center by ``delta`` in world."""
        delta = _as_vec(delta, 3, "delta")
        return CameraPose(self.rotation, self.translation - self.matrix @ delta, self.fov)


def focal_px(fov: np.ndarray, resolution) -> np.ndarray:
    """Pixel focal lengths (f_x, f_y) for a (W, H) resolution."""
    w, h = resolution
    f = np.asarray(fov, dtype=np.float64)
    return np.array([(w / 2.0) / math.tan(f[0] / 2.0), (h / 2.0) / math.tan(f[1] / 2.0)])


def encode_pose(pose: CameraPose) -> np.ndarray:
    """Pose to its 9-vector network encoding [q(4), t(3), fov(2)].

    The quaternion slice is canonical (w >= 0), making the encoding bijective
    with decode_pose on valid poses.
    """
    q = pose.rotation.canonical().as_array()
    return np.concatenate([q, pose.translation, pose.fov])


def decode_pose(g) -> CameraPose:
    """9-vector (possibly raw head output) back to a CameraPose.

    The quaternion slice is renormalized and canonicalized; fov components are
    clamped into (FOV_CLAMP_EPS, pi - FOV_CLAMP_EPS).
    """
    g = _as_vec(g, 9, "pose encoding")
    qn = np.linalg.norm(g[:4])
    if qn < 1e-12:
        raise DegenerateRotationError("pose encoding has zero-norm quaternion slice")
    q = Quaternion.from_array(g[:4]).canonical()
    fov = np.clip(g[7:9], FOV_CLAMP_EPS, math.pi - FOV_CLAMP_EPS)
    return CameraPose(q, g[4:7], fov)


def project(point_world, pose: CameraPose, resolution) -> tuple[np.ndarray, float]:
    """Pinhole projection of one world point; returns ((u, v), depth).

    Raises BehindCameraError when the camera-frame z is not positive.
    """
    p_cam = pose.transform(_as_vec(point_world, 3, "point"))
    if p_cam[2] <= 0.0:
        raise BehindCameraError(f"point has camera-frame z = {p_cam[2]:.6g} <= 0")
    w, h = resolution
    f = focal_px(pose.fov, resolution)
    u = w / 2.0 + f[0] * p_cam[0] / p_cam[2]
    v = h / 2.0 + f[1] * p_cam[1] / p_cam[2]
    return np.array([u, v]), float(p_cam[2])


def project_points(points_world, pose: CameraPose, resolution):
    """Vectorized projection of (N, 3) points; returns (uv (N, 2), depth (N,),
    in_front (N,) bool). Points behind the camera get in_front=False instead
    of raising."""
    p = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    p_cam = pose.transform(p)
    z = p_cam[:, 2]
    in_front = z > 0.0
    w, h = resolution
    f = focal_px(pose.fov, resolution)
    safe_z = np.where(in_front, z, 1.0)
    uv = np.stack(
        [w / 2.0 + f[0] * p_cam[:, 0] / safe_z, h / 2.0 + f[1] * p_cam[:, 1] / safe_z],
        axis=1,
    )
    return uv, z, in_front


def unproject(pixel, depth: float, pose: CameraPose, resolution) -> np.ndarray:
    """Inverse of project: continuous pixel + camera-frame depth to world point."""
    if depth <= 0.0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    pixel = _as_vec(pixel, 2, "pixel")
    w, h = resolution
    f = focal_px(pose.fov, resolution)
    p_cam = np.array(
        [(pixel[0] - w / 2.0) * depth / f[0], (pixel[1] - h / 2.0) * depth / f[1], depth]
    )
    return pose.inverse_transform(p_cam)


def _pixel_rays_cam(resolution, fov) -> np.ndarray:
    """Camera-frame ray directions (H, W, 3) at unit depth for the pixel grid."""
    w, h = resolution
    f = focal_px(fov, resolution)
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - w / 2.0) / f[0], (vv - h / 2.0) / f[1], np.ones_like(uu)], axis=-1)


@dataclass
class DenseOutput:
    """Per-frame dense predictions/ground truth: depth D with confidence C^D,
    scene coordinate map S with confidence C^S, and a validity mask."""

    depth: np.ndarray        # (H, W)
    depth_conf: np.ndarray   # (H, W), >= 1
    scm: np.ndarray          # (H, W, 3) world coordinates
    scm_conf: np.ndarray     # (H, W), >= 1
    valid: np.ndarray        # (H, W) bool

    def __post_init__(self):
        h, w = self.depth.shape
        if self.depth_conf.shape != (h, w) or self.scm.shape != (h, w, 3):
            raise InvalidInputError("dense output shapes disagree")
        if self.scm_conf.shape != (h, w) or self.valid.shape != (h, w):
            raise InvalidInputError("dense output shapes disagree")
        if np.any(self.depth_conf < 1.0 - 1e-6) or np.any(self.scm_conf < 1.0 - 1e-6):
            raise InvalidInputError("confidence maps must be >= 1")
        if np.any(self.depth[self.valid] <= 0.0):
            raise InvalidInputError("depth must be positive on valid pixels")

    @property
    def resolution(self):
        h, w = self.depth.shape
        return (w, h)


def scm_from_depth(dense: DenseOutput, pose: CameraPose, resolution) -> np.ndarray:
    """Per-pixel world coordinates from the depth map, sampled at the pixel
    grid; invalid pixels are zeroed."""
    w, h = resolution
    if dense.depth.shape != (h, w):
        raise InvalidInputError("depth map does not match resolution")
    rays = _pixel_rays_cam(resolution, pose.fov)
    p_cam = rays * dense.depth[..., None]
    pts = pose.inverse_transform(p_cam.reshape(-1, 3)).reshape(h, w, 3)
    pts[~dense.valid] = 0.0
    return pts


def weighted_rigid_align(src, dst, weights):
    """Rigid (R, t) minimizing sum_i w_i ||dst_i - (R @ src_i + t)||^2.

    Closed-form SVD solution with determinant-sign correction so R is always
    a proper rotation. Raises DegenerateGeometryError when the weighted point
    set is collinear (rotation about the axis is unobservable).
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    wsum = w.sum()
    if wsum <= 0.0:
        raise InsufficientCorrespondencesError("weights sum to zero")
    mu_s = (w[:, None] * src).sum(axis=0) / wsum
    mu_d = (w[:, None] * dst).sum(axis=0) / wsum
    cross = (w[:, None] * (dst - mu_d)).T @ (src - mu_s)
    U, S, Vt = np.linalg.svd(cross)
    if S[1] <= max(S[0] * 1e-9, 1e-300):
        raise DegenerateGeometryError("correspondences are collinear; rotation is ambiguous")
    d = np.sign(np.linalg.det(U @ Vt))
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    t = mu_d - R @ mu_s
    return R, t


def pose_from_scm(dense: DenseOutput, fov, resolution, min_conf: float = 1.0) -> CameraPose:
    """Recover the camera pose from a depth map and scene coordinate map.

    Depth backprojects each usable pixel into the camera frame; the scene
    coordinate map provides the matching world point. Confidence-weighted
    rigid alignment (scale fixed to 1) between the two point sets yields the
    world-to-camera transform exactly on noiseless data.
    """
    fov = _as_vec(fov, 2, "fov")
    w, h = resolution
    use = dense.valid & (dense.scm_conf >= min_conf)
    if use.sum() < 3:
        raise InsufficientCorrespondencesError(
            f"need >= 3 usable pixels above min_conf, got {int(use.sum())}"
        )
    rays = _pixel_rays_cam(resolution, fov)
    cam_pts = (rays * dense.depth[..., None])[use]
    world_pts = dense.scm[use]
    weights = dense.scm_conf[use]
    R, t = weighted_rigid_align(world_pts, cam_pts, weights)
    return CameraPose(Quaternion.from_matrix(R), t, fov)


def normalize_scene(poses, scms, ref_index: int):
    """Scale the scene so the mean distance from the reference camera center
    to all valid points equals 1.

    ``scms`` is a list of (N_i, 3) world point arrays (one per frame; empty
    arrays allowed). Returns (scale, scaled poses, scaled point arrays).
    """
    if not poses:
        raise InvalidInputError("no poses given")
    pts = [np.asarray(s, dtype=np.float64).reshape(-1, 3) for s in scms]
    all_pts = np.concatenate(pts, axis=0) if pts else np.zeros((0, 3))
    if all_pts.shape[0] == 0:
        raise DegenerateSceneError("no valid points to normalize against")
    center = poses[ref_index].camera_center
    scale = float(np.mean(np.linalg.norm(all_pts - center, axis=1)))
    if not math.isfinite(scale) or scale <= 0.0:
        raise DegenerateSceneError(f"degenerate normalization scale {scale}")
    new_poses = [
        CameraPose(p.rotation, p.translation / scale, p.fov) for p in poses
    ]
    new_pts = [p / scale for p in pts]
    return scale, new_poses, new_pts


# ---------------------------------------------------------------------------
# TUM trajectory files
# ---------------------------------------------------------------------------

TUM_HEADER = (
    "# trajectory: camera-to-world, one line per frame:"
    " frame_id tx ty tz qx qy qz qw"
)


def save_trajectory_tum(path, frame_ids, poses) -> None:
    """Write a trajectory in TUM format (camera-to-world on disk)."""
    lines = [TUM_HEADER]
    for fid, pose in zip(frame_ids, poses):
        q_cw = pose.rotation.conjugate().canonical()
        c = pose.camera_center
        lines.append(
            f"{fid} {c[0]:.17g} {c[1]:.17g} {c[2]:.17g} "
            f"{q_cw.x:.17g} {q_cw.y:.17g} {q_cw.z:.17g} {q_cw.w:.17g}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_trajectory_tum(path, fov=(math.pi / 2, math.pi / 2)):
    """Read a TUM trajectory; returns (frame_ids, poses in world-to-camera).

    TUM files carry no intrinsics, so ``fov`` is attached to every pose.
    Comment lines starting with '#' and blank lines are skipped.
    """
    frame_ids, poses = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise InvalidInputError(f"malformed TUM line: {line!r}")
            fid = parts[0]
            tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts[1:])
            q_cw = Quaternion(qw, qx, qy, qz)
            q_wc = q_cw.conjugate()
            center = np.array([tx, ty, tz])
            t_wc = -q_wc.rotation_matrix() @ center
            frame_ids.append(int(fid) if fid.isdigit() else fid)
            poses.append(CameraPose(q_wc, t_wc, np.asarray(fov, dtype=np.float64)))
    return frame_ids, poses

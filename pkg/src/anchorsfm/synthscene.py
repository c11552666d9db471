"""Procedural 3D scenes with exact pose / depth / scene-coordinate ground truth.

Scenes are colored point sets sampled on a few textured planar patches, plus a
camera trajectory that keeps the scene centroid in view. Rendering is a
z-buffered point splat: each point covers the pixel its projection rounds to,
nearest depth wins. The stored scene coordinate for a covered pixel is the
winning point snapped onto that pixel's ray at the winning depth, so that the
(depth, scm) pair is exactly consistent with ``geometry.scm_from_depth`` and
pose recovery from noiseless renders is exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .geometry import CameraPose, DenseOutput, Quaternion

GRID_MAGIC = b"SAILGRID"
SCENE_MAGIC = "anchorsfm-scene v1"
VISIBILITY_RETRIES = 25

TRAJECTORY_TYPES = ("orbit", "corridor", "random-walk")


class GenerationError(RuntimeError):
    """Raised when no trajectory satisfying the visibility constraint is found."""


@dataclass
class SceneConfig:
    point_count: int = 400
    extent: float = 2.0
    trajectory: str = "orbit"
    frame_count: int = 12
    fov: tuple[float, float] = (1.3, 1.3)
    seed: int = 0

    def __post_init__(self):
        if self.frame_count < 2:
            raise ValueError("frame_count must be >= 2")
        if self.point_count < 10:
            raise ValueError("point_count must be >= 10")
        if self.trajectory not in TRAJECTORY_TYPES:
            raise ValueError(f"unknown trajectory type {self.trajectory!r}")


@dataclass
class SyntheticScene:
    points: np.ndarray        # (P, 3) world positions
    colors: np.ndarray        # (P, 3) in [0, 1]
    trajectory: list[CameraPose]
    scene_id: str
    seed: int

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @property
    def extent(self) -> float:
        """Diameter of the camera-center set (used for error budgets)."""
        centers = np.stack([p.camera_center for p in self.trajectory])
        d = centers[:, None, :] - centers[None, :, :]
        return float(np.sqrt((d**2).sum(-1)).max())


def _look_at(center, target, fov) -> CameraPose:
    """World-to-camera pose for a camera at ``center`` looking at ``target``.

    Camera axes: z toward the target, x horizontal, y completing the
    right-handed (x right, y down, z forward) frame.
    """
    forward = np.asarray(target, dtype=np.float64) - center
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return CameraPose(Quaternion.from_matrix(R), -R @ center, fov)


def _sample_surfaces(rng: np.random.Generator, cfg: SceneConfig):
    n_surf = int(rng.integers(2, 6))
    per = np.full(n_surf, cfg.point_count // n_surf)
    per[: cfg.point_count - per.sum()] += 1
    points, colors = [], []
    half = 0.5 * cfg.extent
    for n in per:
        center = rng.uniform(-0.5 * half, 0.5 * half, size=3)
        basis = np.linalg.qr(rng.normal(size=(3, 3)))[0]
        u_axis, v_axis = basis[:, 0], basis[:, 1]
        su, sv = rng.uniform(0.3 * half, 0.9 * half, size=2)
        ab = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = center + ab[:, :1] * su * u_axis + ab[:, 1:] * sv * v_axis
        # checker texture between two random colors, shaded by a gradient
        c1, c2 = rng.uniform(0.1, 1.0, size=(2, 3))
        freq = rng.integers(2, 6)
        checker = (np.floor(ab[:, 0] * freq) + np.floor(ab[:, 1] * freq)) % 2
        base = np.where(checker[:, None] > 0, c1, c2)
        shade = 0.6 + 0.4 * (ab[:, :1] + 1.0) / 2.0
        points.append(pts)
        colors.append(np.clip(base * shade, 0.0, 1.0))
    return np.concatenate(points), np.concatenate(colors)


def _trajectory_centers(rng, cfg: SceneConfig, centroid) -> np.ndarray:
    radius = 1.6 * cfg.extent
    m = cfg.frame_count
    if cfg.trajectory == "orbit":
        theta = 2.0 * np.pi * np.arange(m) / m + rng.uniform(0, 2 * np.pi)
        height = rng.uniform(0.2, 0.5) * radius
        return centroid + np.stack(
            [radius * np.cos(theta), radius * np.sin(theta), np.full(m, height)], axis=1
        )
    if cfg.trajectory == "corridor":
        direction = rng.normal(size=3)
        direction[2] *= 0.2
        direction /= np.linalg.norm(direction)
        side = np.cross(direction, [0.0, 0.0, 1.0])
        side /= np.linalg.norm(side)
        start = centroid + radius * side - 0.5 * cfg.extent * direction
        steps = np.linspace(0.0, cfg.extent, m)
        return start + steps[:, None] * direction
    # random-walk on a shell around the centroid
    pos = centroid + radius * _unit(rng.normal(size=3))
    centers = [pos]
    for _ in range(m - 1):
        pos = pos + rng.normal(scale=0.12 * radius, size=3)
        offset = pos - centroid
        dist = np.linalg.norm(offset)
        pos = centroid + offset * np.clip(dist, 0.8 * radius, 1.25 * radius) / dist
        centers.append(pos)
    return np.stack(centers)


def _unit(v):
    return v / np.linalg.norm(v)


def visible_fraction(scene: SyntheticScene, pose: CameraPose, resolution=(64, 64)) -> float:
    uv, _, in_front = geo.project_points(scene.points, pose, resolution)
    w, h = resolution
    inside = (
        in_front
        & (uv[:, 0] >= -0.5)
        & (uv[:, 0] < w - 0.5)
        & (uv[:, 1] >= -0.5)
        & (uv[:, 1] < h - 0.5)
    )
    return float(inside.mean())


def generate_scene(cfg: SceneConfig) -> SyntheticScene:
    """Deterministically build a scene from its config (seed included)."""
    rng = np.random.default_rng(cfg.seed)
    points, colors = _sample_surfaces(rng, cfg)
    centroid = points.mean(axis=0)
    fov = np.asarray(cfg.fov, dtype=np.float64)
    scene_id = f"{cfg.trajectory}-{cfg.seed}"
    for _ in range(VISIBILITY_RETRIES):
        centers = _trajectory_centers(rng, cfg, centroid)
        jitter = rng.normal(scale=0.02 * cfg.extent, size=centers.shape)
        trajectory = [_look_at(c, centroid + j, fov) for c, j in zip(centers, jitter)]
        scene = SyntheticScene(points, colors, trajectory, scene_id, cfg.seed)
        if all(visible_fraction(scene, p) > 0.0 for p in trajectory):
            return scene
    raise GenerationError(
        f"no trajectory with every frame seeing the scene after {VISIBILITY_RETRIES} tries"
    )


def render_frame(scene: SyntheticScene, pose: CameraPose, resolution) -> tuple[np.ndarray, DenseOutput]:
    """Point-splat render: (image, exact dense ground truth)."""
    w, h = resolution
    uv, z, in_front = geo.project_points(scene.points, pose, resolution)
    cols = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    rows = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    ok = in_front & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    idx = np.flatnonzero(ok)
    # write far-to-near so the nearest splat wins each pixel
    order = idx[np.argsort(-z[idx], kind="stable")]

    image = np.full((h, w, 3), 0.5, dtype=np.float64)
    depth = np.zeros((h, w), dtype=np.float64)
    valid = np.zeros((h, w), dtype=bool)
    r, c = rows[order], cols[order]
    image[r, c] = scene.colors[order]
    depth[r, c] = z[order]
    valid[r, c] = True

    scm = np.zeros((h, w, 3), dtype=np.float64)
    if valid.any():
        rays = geo._pixel_rays_cam(resolution, pose.fov)
        cam_pts = rays[valid] * depth[valid][:, None]
        scm[valid] = pose.inverse_transform(cam_pts)
    dense = DenseOutput(
        depth=depth,
        depth_conf=np.ones((h, w)),
        scm=scm,
        scm_conf=np.ones((h, w)),
        valid=valid,
    )
    return image, dense


def split_anchor_query(frame_indices, n_anchors: int):
    """Uniform-stride anchor selection; every frame (anchors included) is a query."""
    frames = list(frame_indices)
    m = len(frames)
    if n_anchors < 1 or n_anchors > m:
        raise ValueError(f"anchor count {n_anchors} outside [1, {m}]")
    if n_anchors == 1:
        anchors = [frames[0]]
    else:
        pos = [
            int(np.floor(i * (m - 1) / (n_anchors - 1) + 0.5)) for i in range(n_anchors)
        ]
        anchors = []
        for p in pos:
            if frames[p] not in anchors:
                anchors.append(frames[p])
    return anchors, frames


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_scene(path, scene: SyntheticScene) -> None:
    """Versioned text header + binary point block + TUM trajectory lines."""
    fov = scene.trajectory[0].fov
    with open(path, "wb") as fh:
        fh.write(f"{SCENE_MAGIC}\n".encode())
        fh.write(f"scene_id {scene.scene_id}\n".encode())
        fh.write(f"seed {scene.seed}\n".encode())
        fh.write(f"fov {fov[0]:.17g} {fov[1]:.17g}\n".encode())
        fh.write(f"points {len(scene.points)}\n".encode())
        payload = np.concatenate([scene.points, scene.colors], axis=1).astype("<f4")
        fh.write(payload.tobytes())
        fh.write(f"\ntrajectory {len(scene.trajectory)}\n".encode())
        for i, pose in enumerate(scene.trajectory):
            q = pose.rotation.conjugate().canonical()
            c = pose.camera_center
            fh.write(
                f"{i} {c[0]:.17g} {c[1]:.17g} {c[2]:.17g} "
                f"{q.x:.17g} {q.y:.17g} {q.z:.17g} {q.w:.17g}\n".encode()
            )


def load_scene(path) -> SyntheticScene:
    with open(path, "rb") as fh:
        data = fh.read()

    def read_line(offset):
        end = data.index(b"\n", offset)
        return data[offset:end].decode(), end + 1

    line, off = read_line(0)
    if line != SCENE_MAGIC:
        raise ValueError(f"not a scene file (header {line!r})")
    header = {}
    while True:
        line, off = read_line(off)
        key, _, rest = line.partition(" ")
        header[key] = rest
        if key == "points":
            break
    count = int(header["points"])
    fov = tuple(float(x) for x in header["fov"].split())
    payload = np.frombuffer(data[off : off + count * 24], dtype="<f4").reshape(count, 6)
    off += count * 24 + 1  # trailing newline
    line, off = read_line(off)
    key, _, tcount = line.partition(" ")
    if key != "trajectory":
        raise ValueError("scene file missing trajectory block")
    trajectory = []
    for _ in range(int(tcount)):
        line, off = read_line(off)
        parts = line.split()
        tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts[1:])
        q_wc = Quaternion(qw, qx, qy, qz).conjugate()
        center = np.array([tx, ty, tz])
        trajectory.append(CameraPose(q_wc, -q_wc.rotation_matrix() @ center, fov))
    return SyntheticScene(
        points=payload[:, :3].astype(np.float64),
        colors=payload[:, 3:].astype(np.float64),
        trajectory=trajectory,
        scene_id=header["scene_id"],
        seed=int(header["seed"]),
    )


def save_grid(path, arrays: dict[str, np.ndarray]) -> None:
    """Named 2D/3D float grids in one binary container (SAILGRID)."""
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype="<f4")
            if a.ndim == 2:
                a = a[..., None]
            if a.ndim != 3:
                raise ValueError(f"grid {name!r} must be HxW or HxWxC")
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<III", *a.shape))
            fh.write(a.tobytes())


def load_grid(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(8) != GRID_MAGIC:
            raise ValueError("not a grid file")
        (count,) = struct.unpack("<I", fh.read(4))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode()
            h, w, c = struct.unpack("<III", fh.read(12))
            arr = np.frombuffer(fh.read(h * w * c * 4), dtype="<f4").reshape(h, w, c)
            out[name] = arr[..., 0] if c == 1 else arr
        return out

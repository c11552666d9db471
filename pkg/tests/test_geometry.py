import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from anchorsfm import geometry as geo
from conftest import (
    quat_component_diff,
    random_pose,
    random_quaternion,
    rotation_angle_deg,
)


class TestQuaternion:
    def test_constructor_normalizes(self):
        q = geo.Quaternion(2.0, 0.0, 0.0, 0.0)
        assert abs(q.w**2 + q.x**2 + q.y**2 + q.z**2 - 1.0) < 1e-9
        assert q.w == 1.0

    def test_zero_norm_rejected(self):
        with pytest.raises(geo.DegenerateRotationError):
            geo.Quaternion(0.0, 0.0, 0.0, 0.0)

    def test_canonical_flips_sign(self):
        q = geo.Quaternion(0.0, 0.0, 0.0, -1.0).canonical()
        assert (q.w, q.x, q.y, q.z) == (0.0, 0.0, 0.0, 1.0)

    def test_matrix_round_trip_against_scipy(self, rng):
        # independent oracle: scipy Rotation composes the reference matrices
        for _ in range(200):
            q = random_quaternion(rng)
            R_ref = Rotation.from_quat([q.x, q.y, q.z, q.w]).as_matrix()
            np.testing.assert_allclose(q.rotation_matrix(), R_ref, atol=1e-12)
            back = geo.Quaternion.from_matrix(R_ref)
            assert quat_component_diff(back, q) < 1e-9

    def test_rotation_matrices_orthonormal(self, rng):
        for _ in range(100):
            R = random_quaternion(rng).rotation_matrix()
            np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(R) - 1.0) < 1e-9

    def test_composition_matches_matrix_product(self, rng):
        for _ in range(50):
            a, b = random_quaternion(rng), random_quaternion(rng)
            np.testing.assert_allclose(
                (a * b).rotation_matrix(),
                a.rotation_matrix() @ b.rotation_matrix(),
                atol=1e-12,
            )


class TestPoseEncoding:
    def test_identity_encoding(self):
        pose = geo.CameraPose.identity()
        g = geo.encode_pose(pose)
        np.testing.assert_allclose(
            g, [1, 0, 0, 0, 0, 0, 0, math.pi / 2, math.pi / 2], atol=0
        )

    def test_sign_canonicalization(self):
        pose = geo.CameraPose(
            geo.Quaternion(0.0, 0.0, 0.0, -1.0), np.zeros(3), (1.0, 1.0)
        )
        g = geo.encode_pose(pose)
        np.testing.assert_allclose(g[:4], [0, 0, 0, 1], atol=0)

    def test_encode_decode_round_trip(self, rng):
        for _ in range(200):
            pose = random_pose(rng)
            back = geo.decode_pose(geo.encode_pose(pose))
            assert quat_component_diff(back.rotation, pose.rotation) < 1e-9
            np.testing.assert_allclose(back.translation, pose.translation, atol=1e-9)
            np.testing.assert_allclose(back.fov, pose.fov, atol=1e-9)

    def test_decode_renormalizes_quaternion(self):
        g = np.array([2.0, 0, 0, 0, 1, 2, 3, 1.0, 1.0])
        pose = geo.decode_pose(g)
        assert rotation_angle_deg(pose.rotation, geo.Quaternion.identity()) < 1e-12

    def test_decode_clamps_fov(self):
        g = np.array([1.0, 0, 0, 0, 0, 0, 0, 4.0, -1.0])
        pose = geo.decode_pose(g)
        assert pose.fov[0] == pytest.approx(math.pi - 1e-3)
        assert pose.fov[1] == pytest.approx(1e-3)

    def test_encode_decode_idempotent_on_raw_vectors(self, rng):
        for _ in range(100):
            g = rng.normal(size=9)
            g[7:] = rng.uniform(0.2, 3.0, size=2)
            once = geo.encode_pose(geo.decode_pose(g))
            twice = geo.encode_pose(geo.decode_pose(once))
            np.testing.assert_allclose(twice, once, atol=1e-12)

    def test_decode_zero_quaternion_raises(self):
        with pytest.raises(geo.DegenerateRotationError):
            geo.decode_pose(np.array([0, 0, 0, 0, 1, 1, 1, 1.0, 1.0]))

    def test_encode_rejects_non_finite(self):
        with pytest.raises(geo.InvalidInputError):
            geo.CameraPose(geo.Quaternion.identity(), [np.nan, 0, 0], (1.0, 1.0))


class TestProjection:
    def test_optical_axis_hits_image_center(self):
        pose = geo.CameraPose.identity(fov=(1.2, 0.9))
        pixel, depth = geo.project([0, 0, 1], pose, (64, 64))
        np.testing.assert_allclose(pixel, [32, 32], atol=1e-12)
        assert depth == pytest.approx(1.0)

    def test_known_offset_pixel(self):
        # f_px = 32 at fov 90 deg: u = 32 + 32 * (1/1) = 64
        pose = geo.CameraPose.identity(fov=(math.pi / 2, math.pi / 2))
        pixel, depth = geo.project([1, 0, 1], pose, (64, 64))
        np.testing.assert_allclose(pixel, [64, 32], atol=1e-12)
        assert depth == pytest.approx(1.0)

    def test_behind_camera_raises(self):
        pose = geo.CameraPose.identity()
        with pytest.raises(geo.BehindCameraError):
            geo.project([0, 0, -1], pose, (64, 64))

    def test_unproject_rejects_nonpositive_depth(self):
        pose = geo.CameraPose.identity()
        with pytest.raises(geo.InvalidDepthError):
            geo.unproject([32, 32], 0.0, pose, (64, 64))

    def test_project_unproject_round_trip(self, rng):
        res = (64, 48)
        for _ in range(10):
            pose = random_pose(rng)
            # sample in-frustum points by unprojecting random pixels/depths
            for _ in range(100):
                pixel = rng.uniform([0, 0], [res[0], res[1]])
                depth = rng.uniform(0.1, 10.0)
                point = geo.unproject(pixel, depth, pose, res)
                pixel2, depth2 = geo.project(point, pose, res)
                np.testing.assert_allclose(pixel2, pixel, atol=1e-9)
                assert depth2 == pytest.approx(depth, abs=1e-9)

    def test_unproject_project_round_trip(self, rng):
        res = (32, 32)
        pose = random_pose(rng)
        count = 0
        while count < 100:
            point = rng.normal(scale=3.0, size=3)
            cam = pose.transform(point)
            if cam[2] < 0.1:
                continue
            pixel, depth = geo.project(point, pose, res)
            back = geo.unproject(pixel, depth, pose, res)
            np.testing.assert_allclose(back, point, atol=1e-9)
            count += 1

    def test_project_points_matches_scalar_path(self, rng):
        pose = random_pose(rng)
        pts = rng.normal(size=(50, 3)) + [0, 0, 5]
        uv, z, ok = geo.project_points(pts, pose, (64, 64))
        for i in range(len(pts)):
            cam_z = pose.transform(pts[i])[2]
            assert ok[i] == (cam_z > 0)
            if ok[i]:
                uv_i, z_i = geo.project(pts[i], pose, (64, 64))
                np.testing.assert_allclose(uv[i], uv_i, atol=1e-12)
                assert z[i] == pytest.approx(z_i)


def _uniform_dense(depth, fov, resolution, pose=None, conf=2.0):
    w, h = resolution
    d = np.full((h, w), depth, dtype=np.float64)
    dense = geo.DenseOutput(
        depth=d,
        depth_conf=np.full((h, w), conf),
        scm=np.zeros((h, w, 3)),
        scm_conf=np.full((h, w), conf),
        valid=np.ones((h, w), dtype=bool),
    )
    if pose is not None:
        dense.scm = geo.scm_from_depth(dense, pose, resolution)
    return dense


class TestScmFromDepth:
    def test_fronto_parallel_plane(self):
        pose = geo.CameraPose.identity(fov=(math.pi / 2, math.pi / 2))
        dense = _uniform_dense(1.0, pose.fov, (64, 64))
        scm = geo.scm_from_depth(dense, pose, (64, 64))
        np.testing.assert_allclose(scm[..., 2], 1.0, atol=1e-12)

    def test_invalid_pixels_zeroed(self):
        pose = geo.CameraPose.identity()
        dense = _uniform_dense(1.0, pose.fov, (8, 8))
        dense.valid[0, 0] = False
        scm = geo.scm_from_depth(dense, pose, (8, 8))
        np.testing.assert_array_equal(scm[0, 0], [0, 0, 0])

    def test_translated_pose_shifts_points(self, rng):
        res = (16, 16)
        pose = random_pose(rng)
        dense = _uniform_dense(2.0, pose.fov, res)
        delta = rng.normal(size=3)
        shifted = pose.compose_world_shift(delta)
        scm_a = geo.scm_from_depth(dense, pose, res)
        scm_b = geo.scm_from_depth(dense, shifted, res)
        np.testing.assert_allclose(scm_b - scm_a, np.broadcast_to(delta, scm_a.shape), atol=1e-9)


class TestPoseFromScm:
    def test_identity_plane_recovery(self):
        pose = geo.CameraPose.identity(fov=(math.pi / 2, math.pi / 2))
        dense = _uniform_dense(1.0, pose.fov, (16, 16), pose=pose)
        rec = geo.pose_from_scm(dense, pose.fov, (16, 16))
        assert quat_component_diff(rec.rotation, pose.rotation) < 1e-9
        np.testing.assert_allclose(rec.translation, pose.translation, atol=1e-9)

    def test_random_pose_exact_recovery(self, rng):
        res = (16, 12)
        for _ in range(20):
            pose = random_pose(rng, fov_range=(0.8, 2.0))
            h, w = res[1], res[0]
            dense = geo.DenseOutput(
                depth=rng.uniform(1.0, 4.0, size=(h, w)),
                depth_conf=np.full((h, w), 2.0),
                scm=np.zeros((h, w, 3)),
                scm_conf=np.full((h, w), 2.0),
                valid=np.ones((h, w), dtype=bool),
            )
            dense.scm = geo.scm_from_depth(dense, pose, res)
            rec = geo.pose_from_scm(dense, pose.fov, res)
            assert math.radians(rotation_angle_deg(rec.rotation, pose.rotation)) < 1e-6
            np.testing.assert_allclose(rec.translation, pose.translation, atol=1e-6)

    def test_low_confidence_outliers_excluded(self, rng):
        res = (16, 16)
        pose = random_pose(rng, fov_range=(0.8, 2.0))
        h, w = 16, 16
        dense = geo.DenseOutput(
            depth=rng.uniform(1.0, 4.0, size=(h, w)),
            depth_conf=np.full((h, w), 2.0),
            scm=np.zeros((h, w, 3)),
            scm_conf=np.full((h, w), 2.0),
            valid=np.ones((h, w), dtype=bool),
        )
        dense.scm = geo.scm_from_depth(dense, pose, res)
        corrupt = rng.random((h, w)) < 0.2
        dense.scm[corrupt] += rng.normal(scale=5.0, size=(int(corrupt.sum()), 3))
        dense.scm_conf[corrupt] = 1.0
        rec = geo.pose_from_scm(dense, pose.fov, res, min_conf=1.5)
        assert quat_component_diff(rec.rotation, pose.rotation) < 1e-8
        np.testing.assert_allclose(rec.translation, pose.translation, atol=1e-9)

    def test_residual_monotone_in_noise(self, rng):
        res = (16, 16)
        pose = random_pose(rng, fov_range=(0.8, 2.0))
        h, w = 16, 16
        base = geo.DenseOutput(
            depth=rng.uniform(1.0, 4.0, size=(h, w)),
            depth_conf=np.full((h, w), 2.0),
            scm=np.zeros((h, w, 3)),
            scm_conf=np.full((h, w), 2.0),
            valid=np.ones((h, w), dtype=bool),
        )
        base.scm = geo.scm_from_depth(base, pose, res)
        noise = np.random.default_rng(7).normal(size=base.scm.shape)
        errors = []
        for sigma in [0.0, 0.01, 0.1]:
            dense = geo.DenseOutput(
                depth=base.depth,
                depth_conf=base.depth_conf,
                scm=base.scm + sigma * noise,
                scm_conf=base.scm_conf,
                valid=base.valid,
            )
            rec = geo.pose_from_scm(dense, pose.fov, res)
            errors.append(
                rotation_angle_deg(rec.rotation, pose.rotation)
                + np.linalg.norm(rec.translation - pose.translation)
            )
        assert errors[0] <= errors[1] <= errors[2]

    def test_too_few_points_raises(self):
        pose = geo.CameraPose.identity()
        dense = _uniform_dense(1.0, pose.fov, (4, 4), pose=pose)
        dense.valid[:] = False
        dense.valid[0, :2] = True
        with pytest.raises(geo.InsufficientCorrespondencesError):
            geo.pose_from_scm(dense, pose.fov, (4, 4))

    def test_collinear_points_raise(self):
        pose = geo.CameraPose.identity(fov=(math.pi / 2, math.pi / 2))
        dense = _uniform_dense(1.0, pose.fov, (8, 8), pose=pose)
        dense.valid[:] = False
        dense.valid[4, :] = True  # one image row: collinear world points
        with pytest.raises(geo.DegenerateGeometryError):
            geo.pose_from_scm(dense, pose.fov, (8, 8))


class TestNormalizeScene:
    def test_unit_scene_is_fixed_point(self):
        pose = geo.CameraPose.identity()
        pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
        scale, poses, scms = geo.normalize_scene([pose], [pts], 0)
        assert scale == pytest.approx(1.0)
        np.testing.assert_allclose(scms[0], pts, atol=0)

    def test_single_point_mean(self):
        pose = geo.CameraPose.identity()
        scale, _, scms = geo.normalize_scene([pose], [np.array([[0.0, 0.0, 2.0]])], 0)
        assert scale == pytest.approx(2.0)
        np.testing.assert_allclose(scms[0], [[0, 0, 1]], atol=1e-12)

    def test_scale_equivariance(self, rng):
        poses = [random_pose(rng) for _ in range(3)]
        pts = [rng.normal(size=(20, 3)) for _ in range(3)]
        scale1, poses1, pts1 = geo.normalize_scene(poses, pts, 1)
        big_poses = [
            geo.CameraPose(p.rotation, p.translation * 5.0, p.fov) for p in poses
        ]
        scale5, poses5, pts5 = geo.normalize_scene(big_poses, [p * 5.0 for p in pts], 1)
        assert scale5 == pytest.approx(5.0 * scale1, rel=1e-12)
        for a, b in zip(poses1, poses5):
            np.testing.assert_allclose(a.translation, b.translation, atol=1e-12)
        for a, b in zip(pts1, pts5):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_post_condition_mean_distance_one(self, rng):
        poses = [random_pose(rng) for _ in range(4)]
        pts = [rng.normal(size=(rng.integers(5, 30), 3)) for _ in range(4)]
        scale, new_poses, new_pts = geo.normalize_scene(poses, pts, 2)
        center = new_poses[2].camera_center
        allp = np.concatenate(new_pts)
        assert np.mean(np.linalg.norm(allp - center, axis=1)) == pytest.approx(1.0, abs=1e-9)

    def test_no_points_raises(self):
        with pytest.raises(geo.DegenerateSceneError):
            geo.normalize_scene([geo.CameraPose.identity()], [np.zeros((0, 3))], 0)


class TestTumTrajectory:
    def test_round_trip(self, tmp_path, rng):
        poses = [random_pose(rng, fov_range=(1.0, 1.0001)) for _ in range(6)]
        ids = list(range(6))
        path = tmp_path / "traj.txt"
        geo.save_trajectory_tum(path, ids, poses)
        ids2, poses2 = geo.load_trajectory_tum(path, fov=poses[0].fov)
        assert ids2 == ids
        for a, b in zip(poses, poses2):
            assert quat_component_diff(a.rotation, b.rotation) < 1e-9
            np.testing.assert_allclose(a.translation, b.translation, atol=1e-9)

    def test_disk_convention_is_camera_to_world(self, tmp_path):
        # camera at center (1, 2, 3) looking along +z: disk line stores the center
        q = geo.Quaternion.identity()
        center = np.array([1.0, 2.0, 3.0])
        pose = geo.CameraPose(q, -q.rotation_matrix() @ center, (1.0, 1.0))
        path = tmp_path / "t.txt"
        geo.save_trajectory_tum(path, [0], [pose])
        body = [l for l in path.read_text().splitlines() if not l.startswith("#")]
        vals = [float(x) for x in body[0].split()[1:4]]
        np.testing.assert_allclose(vals, center, atol=1e-12)

    def test_header_comment_skipped(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("# a comment line\n\n0 0 0 0 0 0 0 1\n")
        ids, poses = geo.load_trajectory_tum(path)
        assert ids == [0]
        np.testing.assert_allclose(poses[0].camera_center, [0, 0, 0], atol=0)

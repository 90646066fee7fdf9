"""Covariance construction, projection, and SH decoding."""

import numpy as np
import pytest
import torch

from conftest import make_camera
from splat4d.cameras import Camera, look_at, quat_to_rotmat_np
from splat4d.core import (
    COV2D_FLOOR,
    SH_C0,
    SH_C1,
    build_covariance,
    eval_sh,
    project_gaussian,
    rgb_to_band0,
)
from splat4d.errors import InvalidParameterError


def _t(a, dtype=torch.float64):
    return torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=dtype)


class TestBuildCovariance:
    def test_identity_rotation_gives_squared_scales(self):
        cov = build_covariance(_t([1.0, 0, 0, 0]), _t(np.log([2.0, 3.0, 4.0])))
        assert torch.allclose(cov, torch.diag(_t([4.0, 9.0, 16.0])), atol=1e-12)

    def test_quarter_turn_about_z_swaps_xy_axes(self):
        s = np.sqrt(0.5)
        cov = build_covariance(_t([s, 0, 0, s]), _t([np.log(2.0), 0.0, 0.0]))
        assert torch.allclose(cov, torch.diag(_t([1.0, 4.0, 1.0])), atol=1e-12)

    def test_matches_explicit_matrix_products(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            q = rng.normal(size=4)
            s = rng.uniform(-2.0, 1.0, size=3)
            got = build_covariance(_t(q), _t(s)).numpy()
            R = quat_to_rotmat_np(q)
            S = np.diag(np.exp(s))
            want = R @ S @ S.T @ R.T
            assert np.max(np.abs(got - want)) < 1e-12

    def test_eigenvalues_bounded_below_by_min_scale(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            q = rng.normal(size=4)
            s = rng.uniform(-2.0, 1.0, size=3)
            cov = build_covariance(_t(q), _t(s)).numpy()
            eig = np.linalg.eigvalsh(cov)
            assert eig.min() >= np.exp(2 * s).min() - 1e-9

    def test_nonfinite_inputs_rejected(self):
        with pytest.raises(InvalidParameterError):
            build_covariance(_t([np.nan, 0, 0, 0]), _t([0.0, 0.0, 0.0]))
        with pytest.raises(InvalidParameterError):
            build_covariance(_t([1.0, 0, 0, 0]), _t([np.inf, 0.0, 0.0]))


class TestProjection:
    def _cam(self):
        return Camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, world_to_camera=np.eye(4), width=100, height=100)

    def test_on_axis_point(self):
        p = project_gaussian(np.array([0.0, 0.0, 1.0]), 0.01 * np.eye(3), self._cam())
        assert np.allclose(p.mean2d, [50.0, 50.0])
        assert p.depth == pytest.approx(1.0)

    def test_off_axis_point(self):
        p = project_gaussian(np.array([0.1, 0.0, 1.0]), 0.01 * np.eye(3), self._cam())
        assert np.allclose(p.mean2d, [60.0, 50.0])

    def test_behind_near_plane_is_culled(self):
        assert project_gaussian(np.array([0.0, 0.0, -1.0]), np.eye(3), self._cam()) is None
        assert project_gaussian(np.array([0.0, 0.0, 0.005]), np.eye(3), self._cam()) is None

    def test_cov2d_matches_finite_difference_jacobian(self):
        rng = np.random.default_rng(11)
        cam = make_camera(eye=(0.4, -0.3, -3.0), target=(0.1, 0.0, 0.2))
        for _ in range(20):
            mu = rng.uniform(-0.8, 0.8, size=3)
            A = rng.normal(scale=0.2, size=(3, 3))
            cov3 = A @ A.T + 0.01 * np.eye(3)
            p = project_gaussian(mu, cov3, cam)
            assert p is not None

            def proj(x):
                uv, _ = cam.project_points(x[None])
                return uv[0]

            h = 1e-6
            J = np.zeros((2, 3))
            for a in range(3):
                e = np.zeros(3)
                e[a] = h
                J[:, a] = (proj(mu + e) - proj(mu - e)) / (2 * h)
            want = J @ cov3 @ J.T + COV2D_FLOOR * np.eye(2)
            rel = np.abs(p.cov2d - want) / (np.abs(want) + 1e-9)
            assert rel.max() < 1e-3

    def test_rigid_equivariance(self):
        # Pre-rotating the world and folding the inverse into the pose
        # leaves all projected quantities unchanged.
        rng = np.random.default_rng(5)
        cam = make_camera(eye=(0.5, 0.6, -3.5))
        q = rng.normal(size=4)
        Q = np.eye(4)
        Q[:3, :3] = quat_to_rotmat_np(q)
        Q[:3, 3] = rng.normal(size=3)
        cam_q = Camera(
            fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
            world_to_camera=cam.world_to_camera @ np.linalg.inv(Q),
            width=cam.width, height=cam.height,
        )
        for _ in range(20):
            mu = rng.uniform(-0.8, 0.8, size=3)
            A = rng.normal(scale=0.2, size=(3, 3))
            cov3 = A @ A.T + 0.01 * np.eye(3)
            p0 = project_gaussian(mu, cov3, cam)
            mu_q = Q[:3, :3] @ mu + Q[:3, 3]
            cov_q = Q[:3, :3] @ cov3 @ Q[:3, :3].T
            p1 = project_gaussian(mu_q, cov_q, cam_q)
            assert np.max(np.abs(p0.mean2d - p1.mean2d)) < 1e-9
            assert np.max(np.abs(p0.cov2d - p1.cov2d)) < 1e-9
            assert abs(p0.depth - p1.depth) < 1e-9


class TestSphericalHarmonics:
    def test_zero_band0_gives_offset_gray(self):
        f = torch.zeros(1, 1, 3, dtype=torch.float64)
        d = _t([[0.0, 0.0, 1.0]])
        assert torch.allclose(eval_sh(f, d), torch.full((1, 3), 0.5, dtype=torch.float64))

    def test_clamp_floor_at_zero(self):
        f = torch.zeros(1, 1, 3, dtype=torch.float64)
        f[0, 0] = -0.5 / SH_C0
        assert torch.equal(eval_sh(f, _t([[1.0, 0.0, 0.0]])), torch.zeros(1, 3, dtype=torch.float64))

    def test_degree0_constant_over_directions(self):
        rng = np.random.default_rng(2)
        f = torch.full((1, 1, 3), 0.4, dtype=torch.float64)
        dirs = rng.normal(size=(1000, 3))
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        colors = eval_sh(f.expand(1000, 1, 3), _t(dirs))
        assert float(colors.std(dim=0).max()) == 0.0

    def test_opposite_directions_differ_by_twice_band1(self):
        rng = np.random.default_rng(4)
        f = np.zeros((1, 4, 3))
        f[0, 0] = 0.3
        f[0, 1:] = rng.normal(scale=0.1, size=(3, 3))
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        c_plus = eval_sh(_t(f), _t(d[None])).numpy()[0]
        c_minus = eval_sh(_t(f), _t(-d[None])).numpy()[0]
        x, y, z = d
        band1 = SH_C1 * (-y * f[0, 1] + z * f[0, 2] - x * f[0, 3])
        assert np.allclose(c_plus - c_minus, 2 * band1, atol=1e-12)

    def test_band0_inversion_roundtrip(self):
        rgb = np.array([0.15, 0.6, 0.92])
        f = torch.zeros(1, 1, 3, dtype=torch.float64)
        f[0, 0] = torch.as_tensor(rgb_to_band0(rgb))
        got = eval_sh(f, _t([[0.0, 0.0, 1.0]])).numpy()[0]
        assert np.max(np.abs(got - rgb)) < 1e-12


class TestCamera:
    def test_lookat_is_valid_pose(self):
        cam = make_camera(eye=(1.0, 2.0, -3.0), target=(0.0, 0.0, 1.0))
        R = cam.rotation
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)
        # The target sits on the +z camera axis.
        tgt_cam = cam.to_camera_space(np.array([[0.0, 0.0, 1.0]]))[0]
        assert abs(tgt_cam[0]) < 1e-12 and abs(tgt_cam[1]) < 1e-12 and tgt_cam[2] > 0

    def test_invalid_rotation_rejected(self):
        W = np.eye(4)
        W[0, 0] = 2.0
        with pytest.raises(InvalidParameterError):
            Camera(fx=1.0, fy=1.0, cx=0.0, cy=0.0, world_to_camera=W, width=8, height=8)

    def test_negative_focal_rejected(self):
        with pytest.raises(InvalidParameterError):
            Camera(fx=-1.0, fy=1.0, cx=0.0, cy=0.0, world_to_camera=np.eye(4), width=8, height=8)

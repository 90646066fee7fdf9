"""Dynamic-region densification and adaptive density control."""

import numpy as np
import pytest
import torch

from conftest import make_camera
from splat4d.cameras import Camera, look_at
from splat4d.core import eval_sh
from splat4d.densify import (
    DensityControlConfig,
    adaptive_density_control,
    backproject,
    densify_dynamic,
    dynamic_mask,
)
from splat4d.errors import InvalidParameterError
from splat4d.gaussians import GaussianCloud
from splat4d.synth import moving_quad_spec, single_ellipsoid_spec, synth_scene


class TestDynamicMask:
    def test_zero_flow_empty(self):
        assert not dynamic_mask(np.zeros((8, 8, 2))).any()

    def test_uniform_flow_full(self):
        flow = np.zeros((8, 8, 2))
        flow[..., 0] = 5.0
        assert dynamic_mask(flow, threshold=1.0).all()

    def test_half_moving_scene_iou(self):
        want = np.zeros((32, 32), dtype=bool)
        want[:, 16:] = True
        flow = np.zeros((32, 32, 2))
        flow[want] = [3.0, 1.5]
        got = dynamic_mask(flow, threshold=1.0)
        iou = (got & want).sum() / (got | want).sum()
        assert iou > 0.95

    def test_nonfinite_rejected(self):
        flow = np.zeros((4, 4, 2))
        flow[0, 0, 0] = np.nan
        with pytest.raises(InvalidParameterError):
            dynamic_mask(flow)


class TestBackproject:
    def _cam(self):
        return Camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0, world_to_camera=np.eye(4), width=100, height=100)

    def test_principal_ray(self):
        assert np.allclose(backproject((50.0, 50.0), 2.0, self._cam()), [0.0, 0.0, 2.0])

    def test_unit_tangent(self):
        assert np.allclose(backproject((150.0, 50.0), 1.0, self._cam()), [1.0, 0.0, 1.0])

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            eye = rng.uniform(-2, 2, size=3)
            eye[2] = rng.uniform(-5, -3)
            cam = make_camera(eye=eye, target=rng.uniform(-0.3, 0.3, size=3))
            uv = rng.uniform(0, 32, size=2)
            d = float(rng.uniform(0.5, 8.0))
            world = backproject(uv, d, cam)
            uv2, z2 = cam.project_points(world[None])
            assert np.max(np.abs(uv2[0] - uv)) < 1e-9
            assert abs(z2[0] - d) < 1e-9

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(InvalidParameterError):
            backproject((50.0, 50.0), 0.0, self._cam())


class TestDensifyDynamic:
    def test_static_scene_yields_empty_with_warning(self, tmp_path):
        spec = single_ellipsoid_spec(moving=False, n_frames=3, n_val=1, camera_span=0.0, seed=0)
        bundle = synth_scene(spec, tmp_path / "s")
        result = densify_dynamic(bundle.train_frames, budget=64, seed=1)
        assert len(result.cloud) == 0
        assert result.warning is not None

    def test_moving_quad_samples_lie_on_plane(self, tmp_path):
        spec = moving_quad_spec(n_frames=3, n_val=1, camera_span=0.0, seed=1)
        bundle = synth_scene(spec, tmp_path / "s")
        result = densify_dynamic(bundle.train_frames, budget=80, seed=2)
        assert len(result.cloud) == 80
        plane_z = spec.quads[0].center[2]
        z = result.cloud.positions.detach().numpy()[:, 2]
        assert np.max(np.abs(z - plane_z)) < 1e-6

    def test_samples_only_on_dynamic_mask(self, tmp_path):
        spec = moving_quad_spec(n_frames=3, n_val=1, seed=2)
        bundle = synth_scene(spec, tmp_path / "s")
        result = densify_dynamic(bundle.train_frames, budget=50, seed=3)
        usable = [f for f in bundle.train_frames if f.depth is not None]
        for fi, r, c in result.sampled_pixels:
            assert usable[fi].dynamic_mask[r, c]

    def test_budget_and_determinism(self, tmp_path):
        spec = moving_quad_spec(n_frames=3, n_val=1, seed=3)
        bundle = synth_scene(spec, tmp_path / "s")
        a = densify_dynamic(bundle.train_frames, budget=10, seed=7)
        b = densify_dynamic(bundle.train_frames, budget=10, seed=7)
        assert len(a.cloud) == 10
        assert torch.equal(a.cloud.positions, b.cloud.positions)

    def test_flow_fallback_when_no_mask_channel(self, tmp_path):
        spec = moving_quad_spec(n_frames=3, n_val=1, camera_span=0.0, seed=4)
        bundle = synth_scene(spec, tmp_path / "s")
        for f in bundle.train_frames:
            f.dynamic_mask = None
        result = densify_dynamic(bundle.train_frames, budget=40, seed=5)
        assert len(result.cloud) == 40
        z = result.cloud.positions.detach().numpy()[:, 2]
        assert np.max(np.abs(z - spec.quads[0].center[2])) < 1e-6

    def test_decoded_color_matches_source_pixel(self, tmp_path):
        spec = moving_quad_spec(n_frames=3, n_val=1, seed=5)
        bundle = synth_scene(spec, tmp_path / "s")
        result = densify_dynamic(bundle.train_frames, budget=30, seed=6)
        usable = [f for f in bundle.train_frames if f.depth is not None]
        dirs = torch.zeros(len(result.cloud), 3, dtype=torch.float64)
        dirs[:, 2] = 1.0
        decoded = eval_sh(result.cloud.features.to(torch.float64), dirs).numpy()
        for row, (fi, r, c) in enumerate(result.sampled_pixels):
            assert np.max(np.abs(decoded[row] - usable[fi].image[r, c])) < 1e-6

    def test_new_primitive_opacity(self, tmp_path):
        spec = moving_quad_spec(n_frames=3, n_val=1, seed=6)
        bundle = synth_scene(spec, tmp_path / "s")
        result = densify_dynamic(bundle.train_frames, budget=12, seed=8)
        assert torch.allclose(
            result.cloud.opacities(), torch.full((12,), 0.1), atol=1e-6
        )


class TestDensityControl:
    def _cloud(self, scales):
        n = len(scales)
        return GaussianCloud.from_numpy(
            positions=np.linspace([-1, 0, 2], [1, 0, 2], n),
            log_scales=np.log(np.asarray(scales))[:, None].repeat(3, axis=1),
            opacity_logits=np.full(n, 2.0),
        )

    def test_quiet_gradients_are_identity(self):
        cloud = self._cloud([0.05, 0.05, 0.05])
        out, stats = adaptive_density_control(cloud, torch.zeros(3))
        assert len(out) == 3
        assert stats.cloned == stats.split == stats.pruned == 0
        assert torch.equal(out.positions, cloud.positions)

    def test_large_hot_splat_splits_into_two(self):
        cloud = self._cloud([0.05, 0.2])
        grads = torch.tensor([0.0, 1.0])
        out, stats = adaptive_density_control(cloud, grads, DensityControlConfig(split_scale_threshold=0.1))
        assert stats.split == 1 and stats.cloned == 0
        assert len(out) == 3  # one untouched + two children
        child_scales = out.scales().max(dim=1).values
        assert (child_scales < 0.2).sum() >= 2

    def test_small_hot_splat_clones(self):
        cloud = self._cloud([0.05, 0.05])
        out, stats = adaptive_density_control(cloud, torch.tensor([1.0, 0.0]))
        assert stats.cloned == 1 and stats.split == 0
        assert len(out) == 3

    def test_faint_splat_pruned(self):
        cloud = self._cloud([0.05, 0.05])
        with torch.no_grad():
            cloud.opacity_logits[1] = np.log(0.001 / 0.999)
        out, stats = adaptive_density_control(cloud, torch.zeros(2))
        assert stats.pruned == 1
        assert len(out) == 1

    def test_hard_cap_suspends_growth(self):
        cloud = self._cloud([0.05] * 4)
        out, stats = adaptive_density_control(
            cloud, torch.ones(4), DensityControlConfig(max_primitives=5)
        )
        assert stats.capped
        assert len(out) == 4

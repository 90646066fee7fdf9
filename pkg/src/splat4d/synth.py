"""Synthetic dynamic-scene generator with closed-form ground truth.

Scenes are textured ellipsoids (optionally translating over time) in
front of a static textured backdrop plane, ray-traced per pixel, so
depth, optical flow, dynamic masks and co-visibility all have exact
analytic values. Ground-truth Gaussian primitives approximating the
surfaces are stored alongside for fixture tests, and a static-region
point cloud stands in for an SfM reconstruction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import NEAR_PLANE, Camera, look_at
from .checkpoint import save_model
from .core import rgb_to_band0
from .dataio import SceneBundle, load_scene
from .errors import InvalidParameterError
from .formats import write_flo, write_mask_png, write_pfm, write_ply, write_png
from .gaussians import GaussianCloud


@dataclass
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)  # world units per unit time
    color_freq: tuple[float, float, float] = (0.7, 0.9, 1.1)
    color_phase: tuple[float, float, float] = (0.0, 2.0, 4.0)

    def center_at(self, t: float) -> np.ndarray:
        return np.asarray(self.center) + t * np.asarray(self.velocity)

    @property
    def moving(self) -> bool:
        return any(v != 0.0 for v in self.velocity)


@dataclass
class Quad:
    """Fronto-parallel textured rectangle in the plane z == center.z."""

    center: tuple[float, float, float]
    half_extent: tuple[float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    color_freq: tuple[float, float] = (1.3, 1.7)
    color_phase: tuple[float, float, float] = (0.5, 2.5, 4.5)

    def center_at(self, t: float) -> np.ndarray:
        return np.asarray(self.center) + t * np.asarray(self.velocity)

    @property
    def moving(self) -> bool:
        return any(v != 0.0 for v in self.velocity)


@dataclass
class SynthSpec:
    width: int = 64
    height: int = 48
    focal: float = 70.0
    n_frames: int = 4
    n_val: int = 2
    ellipsoids: list[Ellipsoid] = field(default_factory=list)
    quads: list[Quad] = field(default_factory=list)
    background_z: float = 4.0
    bg_freq: tuple[float, float] = (0.35, 0.27)
    camera_radius: float = 4.0
    camera_span: float = 0.25  # radians of orbit across the clip; 0 == static camera
    camera_height: float = 0.0
    val_height_offset: float = 0.35
    target: tuple[float, float, float] = (0.0, 0.0, 0.6)
    n_static_points: int = 400
    n_gt_per_object: int = 48
    seed: int = 0


def single_ellipsoid_spec(moving=False, **overrides) -> SynthSpec:
    ell = Ellipsoid(
        center=(0.0, 0.0, 0.8),
        radii=(0.55, 0.45, 0.5),
        velocity=(0.9, 0.25, 0.0) if moving else (0.0, 0.0, 0.0),
    )
    return SynthSpec(ellipsoids=[ell], **overrides)


def moving_quad_spec(**overrides) -> SynthSpec:
    """A textured quad sweeping across a static backdrop; the standard
    dynamic-densification fixture."""
    quad = Quad(
        center=(-0.45, 0.0, 1.2),
        half_extent=(0.55, 0.5),
        velocity=(0.9, 0.0, 0.0),
    )
    return SynthSpec(quads=[quad], **overrides)


def _camera_at(spec: SynthSpec, u: float, height_offset=0.0, t=0.0) -> Camera:
    theta = spec.camera_span * (u - 0.5)
    tgt = np.asarray(spec.target, dtype=np.float64)
    eye = tgt + np.array(
        [
            spec.camera_radius * np.sin(theta),
            spec.camera_height + height_offset,
            -spec.camera_radius * np.cos(theta),
        ]
    )
    return Camera(
        fx=spec.focal,
        fy=spec.focal,
        cx=spec.width / 2,
        cy=spec.height / 2,
        world_to_camera=look_at(eye, tgt),
        width=spec.width,
        height=spec.height,
        t=t,
    )


def train_cameras(spec: SynthSpec) -> list[Camera]:
    n = spec.n_frames
    ts = [0.0] if n == 1 else [i / (n - 1) for i in range(n)]
    return [_camera_at(spec, t, t=t) for t in ts]


def val_cameras(spec: SynthSpec) -> list[Camera]:
    ts = [(i + 0.5) / spec.n_val for i in range(spec.n_val)]
    return [_camera_at(spec, t, height_offset=spec.val_height_offset, t=t) for t in ts]


# -- ray tracing ------------------------------------------------------------


def _pixel_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Rays o + s*d with d chosen so the parameter s equals camera-space depth."""
    grid = cam.pixel_grid().reshape(-1, 2)
    d_cam = np.stack(
        [(grid[:, 0] - cam.cx) / cam.fx, (grid[:, 1] - cam.cy) / cam.fy, np.ones(len(grid))],
        axis=-1,
    )
    d_world = d_cam @ cam.rotation  # R^T @ d_cam, batched
    return cam.center, d_world


def _bg_id(spec: SynthSpec) -> int:
    return len(spec.ellipsoids) + len(spec.quads)


def _intersect(spec: SynthSpec, origin: np.ndarray, dirs: np.ndarray, t: float):
    """Nearest hit along each ray.

    Object ids: ellipsoids, then quads, then the backdrop plane; -1 == no hit.
    """
    n = dirs.shape[0]
    best_s = np.full(n, np.inf)
    best_obj = np.full(n, -1, dtype=np.int64)
    for k, ell in enumerate(spec.ellipsoids):
        inv_r2 = 1.0 / np.asarray(ell.radii) ** 2
        oc = origin - ell.center_at(t)
        A = np.sum(dirs * dirs * inv_r2, axis=-1)
        B = 2.0 * np.sum(dirs * oc * inv_r2, axis=-1)
        C = float(np.sum(oc * oc * inv_r2)) - 1.0
        disc = B * B - 4 * A * C
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        s_near = (-B - sq) / (2 * A)
        s_far = (-B + sq) / (2 * A)
        s = np.where(s_near > NEAR_PLANE, s_near, s_far)
        hit = ok & (s > NEAR_PLANE) & (s < best_s)
        best_s = np.where(hit, s, best_s)
        best_obj = np.where(hit, k, best_obj)
    for j, quad in enumerate(spec.quads):
        center = quad.center_at(t)
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (center[2] - origin[2]) / dz
        px = origin[0] + s * dirs[:, 0]
        py = origin[1] + s * dirs[:, 1]
        inside = (np.abs(px - center[0]) <= quad.half_extent[0]) & (
            np.abs(py - center[1]) <= quad.half_extent[1]
        )
        hit = np.isfinite(s) & inside & (s > NEAR_PLANE) & (s < best_s)
        best_s = np.where(hit, s, best_s)
        best_obj = np.where(hit, len(spec.ellipsoids) + j, best_obj)
    if spec.background_z is not None:
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (spec.background_z - origin[2]) / dz
        hit = np.isfinite(s) & (s > NEAR_PLANE) & (s < best_s)
        best_s = np.where(hit, s, best_s)
        best_obj = np.where(hit, _bg_id(spec), best_obj)
    best_s = np.where(best_obj >= 0, best_s, 0.0)
    return best_s, best_obj


def _albedo(spec: SynthSpec, points: np.ndarray, obj: np.ndarray, t: float) -> np.ndarray:
    colors = np.full((points.shape[0], 3), 0.06)
    for k, ell in enumerate(spec.ellipsoids):
        sel = obj == k
        if not sel.any():
            continue
        local = (points[sel] - ell.center_at(t)) / np.asarray(ell.radii)
        arg = 2 * np.pi * np.asarray(ell.color_freq) * local + np.asarray(ell.color_phase)
        colors[sel] = 0.5 + 0.42 * np.sin(arg)
    for j, quad in enumerate(spec.quads):
        sel = obj == len(spec.ellipsoids) + j
        if not sel.any():
            continue
        center = quad.center_at(t)
        lx = (points[sel, 0] - center[0]) / quad.half_extent[0]
        ly = (points[sel, 1] - center[1]) / quad.half_extent[1]
        fu, fv = quad.color_freq
        phase = np.asarray(quad.color_phase)
        arg = 2 * np.pi * (fu * lx + fv * ly)
        colors[sel] = 0.5 + 0.42 * np.sin(arg[:, None] + phase)
    sel = obj == _bg_id(spec)
    if sel.any():
        fx, fy = spec.bg_freq
        x, y = points[sel, 0], points[sel, 1]
        colors[sel] = 0.5 + 0.35 * np.stack(
            [np.sin(2 * np.pi * fx * x), np.sin(2 * np.pi * fy * y), np.sin(2 * np.pi * (fx * x + fy * y))],
            axis=-1,
        )
    return np.clip(colors, 0.0, 1.0)


def _movers(spec: SynthSpec) -> list:
    return list(spec.ellipsoids) + list(spec.quads)


def _material_points_at(spec: SynthSpec, points: np.ndarray, obj: np.ndarray, t_from: float, t_to: float) -> np.ndarray:
    """Track each hit point's material position from t_from to t_to."""
    moved = points.copy()
    for k, body in enumerate(_movers(spec)):
        sel = obj == k
        if sel.any():
            moved[sel] += body.center_at(t_to) - body.center_at(t_from)
    return moved


def trace_frame(spec: SynthSpec, cam: Camera):
    """-> dict with image, depth, hit points, object map, dynamic mask."""
    origin, dirs = _pixel_rays(cam)
    s, obj = _intersect(spec, origin, dirs, cam.t)
    points = origin + s[:, None] * dirs
    image = _albedo(spec, points, obj, cam.t)
    dyn = np.zeros(len(obj), dtype=bool)
    for k, body in enumerate(_movers(spec)):
        if body.moving:
            dyn |= obj == k
    shape = (cam.height, cam.width)
    return {
        "image": image.reshape(*shape, 3),
        "depth": s.reshape(shape).astype(np.float32),
        "points": points.reshape(*shape, 3),
        "object": obj.reshape(shape),
        "dynamic": dyn.reshape(shape),
    }


def flow_to_frame(spec: SynthSpec, frame: dict, cam: Camera, cam_next: Camera) -> np.ndarray:
    """Forward optical flow: material points advected to the next frame and
    reprojected through the next camera."""
    h, w = cam.height, cam.width
    pts = frame["points"].reshape(-1, 3)
    obj = frame["object"].reshape(-1)
    moved = _material_points_at(spec, pts, obj, cam.t, cam_next.t)
    uv_next, _ = cam_next.project_points(moved)
    uv_here, _ = cam.project_points(pts)  # == pixel centers up to roundoff
    flow = uv_next - uv_here
    flow[obj < 0] = 0.0
    return flow.reshape(h, w, 2).astype(np.float32)


def covisibility(spec: SynthSpec, frame: dict, cam: Camera, train_cams: list[Camera]) -> np.ndarray:
    """Pixel covisible iff its material point is unoccluded and in frame in
    at least one training view (evaluated at that view's own time)."""
    h, w = cam.height, cam.width
    pts = frame["points"].reshape(-1, 3)
    obj = frame["object"].reshape(-1)
    covis = np.zeros(len(pts), dtype=bool)
    valid = obj >= 0
    for tc in train_cams:
        moved = _material_points_at(spec, pts, obj, cam.t, tc.t)
        uv, z = tc.project_points(moved)
        in_view = (
            valid
            & (z > NEAR_PLANE)
            & (uv[:, 0] >= 0)
            & (uv[:, 0] <= w)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] <= h)
        )
        if not in_view.any():
            continue
        dirs = moved[in_view] - tc.center
        s_hit, _ = _intersect(spec, tc.center, dirs, tc.t)
        unoccluded = s_hit >= 1.0 - 1e-6  # the sample point itself sits at s == 1
        idx = np.nonzero(in_view)[0]
        covis[idx[unoccluded]] = True
    return covis.reshape(h, w)


# -- fixture primitives and points -------------------------------------------


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack(
        [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=-1
    )


def gt_primitives(spec: SynthSpec, bands: int = 1) -> GaussianCloud:
    """Surface-sampled Gaussian cloud approximating the canonical (t=0) scene."""
    positions = []
    colors = []
    scales = []
    for k, ell in enumerate(spec.ellipsoids):
        unit = _fibonacci_sphere(spec.n_gt_per_object)
        pts = np.asarray(ell.center_at(0.0)) + unit * np.asarray(ell.radii) * 0.92
        positions.append(pts)
        colors.append(_albedo(spec, pts, np.full(len(pts), k, dtype=np.int64), 0.0))
        spacing = np.sqrt(4 * np.pi * np.mean(np.asarray(ell.radii)) ** 2 / spec.n_gt_per_object)
        scales.append(np.full((len(pts), 3), np.log(0.7 * spacing)))
    for j, quad in enumerate(spec.quads):
        side = int(np.ceil(np.sqrt(spec.n_gt_per_object)))
        hx, hy = quad.half_extent
        xs, ys = np.meshgrid(np.linspace(-hx, hx, side), np.linspace(-hy, hy, side))
        center = quad.center_at(0.0)
        pts = center + np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], axis=-1)
        obj_id = len(spec.ellipsoids) + j
        positions.append(pts)
        colors.append(_albedo(spec, pts, np.full(len(pts), obj_id, dtype=np.int64), 0.0))
        scales.append(np.full((len(pts), 3), np.log(0.7 * 2 * max(hx, hy) / side)))
    if spec.background_z is not None:
        side = int(np.ceil(np.sqrt(spec.n_gt_per_object * 2)))
        span = 3.2
        xs, ys = np.meshgrid(np.linspace(-span, span, side), np.linspace(-span, span, side))
        pts = np.stack([xs.ravel(), ys.ravel(), np.full(xs.size, spec.background_z)], axis=-1)
        positions.append(pts)
        colors.append(_albedo(spec, pts, np.full(len(pts), _bg_id(spec), dtype=np.int64), 0.0))
        scales.append(np.full((len(pts), 3), np.log(0.6 * (2 * span / side))))
    positions = np.concatenate(positions)
    colors = np.concatenate(colors)
    scales = np.concatenate(scales)
    n = len(positions)
    features = np.zeros((n, bands, 3))
    features[:, 0, :] = rgb_to_band0(colors)
    return GaussianCloud.from_numpy(
        positions,
        log_scales=scales,
        opacity_logits=np.full(n, 2.5),
        features=features,
        bands=bands,
    )


def static_points(spec: SynthSpec, frame: dict, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """SfM-style point cloud: samples of frame-0 surface points on static objects."""
    pts = frame["points"].reshape(-1, 3)
    img = frame["image"].reshape(-1, 3)
    static = (~frame["dynamic"].reshape(-1)) & (frame["object"].reshape(-1) >= 0)
    idx = np.nonzero(static)[0]
    if len(idx) == 0:
        return np.zeros((0, 3), dtype=np.float32), np.zeros((0, 3))
    take = min(spec.n_static_points, len(idx))
    sel = np.sort(rng.choice(idx, size=take, replace=False))
    return pts[sel].astype(np.float32), img[sel]


# -- scene writing --------------------------------------------------------------


def synth_scene(spec: SynthSpec, directory) -> SceneBundle:
    """Generate and write a complete scene directory; returns the loaded bundle."""
    if spec.n_frames < 1:
        raise InvalidParameterError("n_frames must be >= 1")
    root = Path(directory)
    for sub in ("images", "depth", "flow", "masks"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    cams = train_cameras(spec)
    vcams = val_cameras(spec)
    frames = [trace_frame(spec, c) for c in cams]
    vframes = [trace_frame(spec, c) for c in vcams]

    entries = []
    for i, (cam, fr) in enumerate(zip(cams, frames)):
        name = f"train_{i:03d}"
        write_png(root / "images" / f"{name}.png", fr["image"])
        write_pfm(root / "depth" / f"{name}.pfm", fr["depth"])
        write_mask_png(root / "masks" / f"{name}_dynamic.png", fr["dynamic"])
        entry = {
            "image": f"images/{name}.png",
            "depth": f"depth/{name}.pfm",
            "dynamic_mask": f"masks/{name}_dynamic.png",
            "camera": cam.to_json(),
            "t": cam.t,
        }
        if i + 1 < len(cams):
            flow = flow_to_frame(spec, fr, cam, cams[i + 1])
            write_flo(root / "flow" / f"{name}.flo", flow)
            entry["flow"] = f"flow/{name}.flo"
        entries.append(entry)

    val_entries = []
    for i, (cam, fr) in enumerate(zip(vcams, vframes)):
        name = f"val_{i:03d}"
        write_png(root / "images" / f"{name}.png", fr["image"])
        write_pfm(root / "depth" / f"{name}.pfm", fr["depth"])
        covis = covisibility(spec, fr, cam, cams)
        write_mask_png(root / "masks" / f"{name}_covis.png", covis)
        val_entries.append(
            {
                "image": f"images/{name}.png",
                "depth": f"depth/{name}.pfm",
                "covis_mask": f"masks/{name}_covis.png",
                "camera": cam.to_json(),
                "t": cam.t,
            }
        )

    xyz, rgb = static_points(spec, frames[0], rng)
    write_ply(root / "points.ply", xyz, rgb)
    save_model(root / "gt_primitives.uags", gt_primitives(spec), None, meta={"source": "synthetic"})

    manifest = {
        "schema_version": 1,
        "frames": entries,
        "val_frames": val_entries,
        "points": "points.ply",
        "gt_primitives": "gt_primitives.uags",
    }
    (root / "scene.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return load_scene(root)

"""Brute-force float64 reference renderer and deformation reference.

Everything here is written against plain numpy arrays and deliberately
shares no math code with the production path: per-pixel loops over all
primitives, no tiling, no culling, no early termination, covariance
inverses via np.linalg.inv, naive four-corner plane interpolation. Used
as the independent side of every equivalence test.
"""

from __future__ import annotations

import numpy as np

from .cameras import Camera, quat_to_rotmat_np
from .core import COV2D_FLOOR, SH_C0, SH_C1
from .deform import PLANE_AXES, PLANE_NAMES, DeformationField
from .gaussians import GaussianCloud

NEAR = 0.01


def snapshot_cloud(cloud: GaussianCloud) -> dict:
    f64 = lambda t: t.detach().numpy().astype(np.float64)
    s = {k: f64(v) for k, v in cloud.parameters().items()}
    s["uncertainty"] = f64(cloud.uncertainty)
    s["opacities"] = 1.0 / (1.0 + np.exp(-s.pop("opacity_logits")))
    return s


def snapshot_field(field: DeformationField | None) -> dict | None:
    if field is None:
        return None
    f64 = lambda t: t.detach().numpy().astype(np.float64)
    return {
        "planes": {n: f64(p) for n, p in field.planes.items()},
        "w1": f64(field.w1),
        "b1": f64(field.b1),
        "w2": f64(field.w2),
        "b2": f64(field.b2),
        "box_min": field.box_min.copy(),
        "box_max": field.box_max.copy(),
    }


def interp_plane_naive(plane: np.ndarray, a: float, b: float) -> np.ndarray:
    """Four-corner bilinear sample of one (R0, R1, F) plane at (a, b) in [0,1]."""
    r0, r1, f = plane.shape
    ga = min(max(a, 0.0), 1.0) * (r0 - 1)
    gb = min(max(b, 0.0), 1.0) * (r1 - 1)
    i0 = min(int(np.floor(ga)), r0 - 2)
    j0 = min(int(np.floor(gb)), r1 - 2)
    wa = ga - i0
    wb = gb - j0
    out = np.zeros(f)
    for di, wi in ((0, 1 - wa), (1, wa)):
        for dj, wj in ((0, 1 - wb), (1, wb)):
            out += wi * wj * plane[i0 + di, j0 + dj]
    return out


def query_field_naive(fs: dict, mu: np.ndarray, t: float) -> np.ndarray:
    """(10,) decoded deformation at one position/time."""
    norm = (np.asarray(mu, dtype=np.float64) - fs["box_min"]) / (fs["box_max"] - fs["box_min"])
    norm = np.clip(norm, 0.0, 1.0)
    coords = (norm[0], norm[1], norm[2], min(max(t, 0.0), 1.0))
    fused = np.ones(fs["w1"].shape[1])
    for name in PLANE_NAMES:
        ia, ib = PLANE_AXES[name]
        fused = fused * interp_plane_naive(fs["planes"][name], coords[ia], coords[ib])
    h = np.maximum(fs["w1"] @ fused + fs["b1"], 0.0)
    return fs["w2"] @ h + fs["b2"]


def deform_naive(cs: dict, fs: dict | None, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = cs["positions"]
    q = cs["rotations"]
    s = cs["log_scales"]
    if fs is None:
        return mu, q / np.linalg.norm(q, axis=-1, keepdims=True), s
    deltas = np.stack([query_field_naive(fs, mu[k], t) for k in range(mu.shape[0])])
    qd = q + deltas[:, 3:7]
    return mu + deltas[:, 0:3], qd / np.linalg.norm(qd, axis=-1, keepdims=True), s + deltas[:, 7:10]


def grid_smoothness_naive(fs: dict) -> float:
    total = 0.0
    count = 0
    for plane in fs["planes"].values():
        r0, r1, f = plane.shape
        for i in range(r0 - 1):
            for j in range(r1):
                total += float(np.sum((plane[i + 1, j] - plane[i, j]) ** 2))
                count += f
        for i in range(r0):
            for j in range(r1 - 1):
                total += float(np.sum((plane[i, j + 1] - plane[i, j]) ** 2))
                count += f
    return total / count


def sh_color_naive(features: np.ndarray, direction: np.ndarray) -> np.ndarray:
    rgb = SH_C0 * features[0]
    if features.shape[0] >= 4:
        x, y, z = direction
        rgb = rgb - SH_C1 * y * features[1] + SH_C1 * z * features[2] - SH_C1 * x * features[3]
    return np.maximum(rgb + 0.5, 0.0)


def blend_weights_loop(alpha_g: np.ndarray) -> np.ndarray:
    """Sequential Eq.-5 weights from per-splat alpha*G values (depth order)."""
    weights = np.zeros_like(alpha_g)
    trans = 1.0
    for k, ag in enumerate(alpha_g):
        weights[k] = ag * trans
        trans *= 1.0 - ag
    return weights


def _project_splats(cs: dict, fs: dict | None, cam: Camera, flow_to: Camera | None):
    mu_t, q_t, s_t = deform_naive(cs, fs, cam.t)
    n = mu_t.shape[0]
    Wr = cam.rotation
    cam_pts = mu_t @ Wr.T + cam.translation
    z = cam_pts[:, 2]
    visible = z > NEAR

    splats = []
    flow_pts = None
    if flow_to is not None:
        mu_t2, _, _ = deform_naive(cs, fs, float(flow_to.t))
        flow_pts = mu_t2 @ flow_to.rotation.T + flow_to.translation

    for k in range(n):
        if not visible[k]:
            continue
        x, y, zz = cam_pts[k]
        mean2d = np.array([cam.fx * x / zz + cam.cx, cam.fy * y / zz + cam.cy])
        R = quat_to_rotmat_np(q_t[k])
        S = np.diag(np.exp(s_t[k]))
        cov3 = R @ S @ S.T @ R.T
        J = np.array(
            [
                [cam.fx / zz, 0.0, -cam.fx * x / (zz * zz)],
                [0.0, cam.fy / zz, -cam.fy * y / (zz * zz)],
            ]
        )
        cov2 = J @ Wr @ cov3 @ Wr.T @ J.T + COV2D_FLOOR * np.eye(2)
        direction = mu_t[k] - cam.center
        direction = direction / np.linalg.norm(direction)
        color = sh_color_naive(cs["features"][k], direction)
        flow = np.zeros(2)
        if flow_to is not None:
            x2, y2, z2 = flow_pts[k]
            if z2 > NEAR:
                mean2d_b = np.array(
                    [flow_to.fx * x2 / z2 + flow_to.cx, flow_to.fy * y2 / z2 + flow_to.cy]
                )
                flow = mean2d_b - mean2d
        splats.append(
            {
                "index": k,
                "mean2d": mean2d,
                "cov_inv": np.linalg.inv(cov2),
                "depth": float(zz),
                "alpha": float(cs["opacities"][k]),
                "color": color,
                "uncertainty": float(cs["uncertainty"][k]),
                "flow": flow,
            }
        )
    splats.sort(key=lambda s: (s["depth"], s["index"]))
    return splats


def render_oracle(
    cloud: GaussianCloud,
    field: DeformationField | None,
    cam: Camera,
    flow_to: Camera | None = None,
    background=(0.0, 0.0, 0.0),
) -> dict[str, np.ndarray]:
    """Reference render: per-pixel loop over every visible primitive, float64."""
    cs = snapshot_cloud(cloud)
    fs = snapshot_field(field)
    splats = _project_splats(cs, fs, cam, flow_to)
    H, W = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64)

    out = {
        "color": np.tile(bg, (H, W, 1)),
        "depth": np.zeros((H, W)),
        "uncertainty": np.zeros((H, W)),
        "alpha": np.zeros((H, W)),
        "flow": np.zeros((H, W, 2)),
        "contributions": np.zeros(len(cloud)),
    }
    if not splats:
        return out

    means = np.stack([s["mean2d"] for s in splats])
    cov_inv = np.stack([s["cov_inv"] for s in splats])
    alphas = np.array([s["alpha"] for s in splats])
    depths = np.array([s["depth"] for s in splats])
    colors = np.stack([s["color"] for s in splats])
    uncert = np.array([s["uncertainty"] for s in splats])
    flows = np.stack([s["flow"] for s in splats])
    indices = np.array([s["index"] for s in splats])

    for row in range(H):
        for col in range(W):
            pix = np.array([col + 0.5, row + 0.5])
            d = pix - means
            quad = (
                d[:, 0] * d[:, 0] * cov_inv[:, 0, 0]
                + 2.0 * d[:, 0] * d[:, 1] * cov_inv[:, 0, 1]
                + d[:, 1] * d[:, 1] * cov_inv[:, 1, 1]
            )
            ag = alphas * np.exp(-0.5 * quad)
            # Sequential transmittance product, expressed as a cumulative product.
            trans_in = np.concatenate([[1.0], np.cumprod(1.0 - ag)[:-1]])
            weights = ag * trans_in
            a = weights.sum()
            out["alpha"][row, col] = a
            out["color"][row, col] = weights @ colors + (1.0 - a) * bg
            out["depth"][row, col] = weights @ depths
            out["uncertainty"][row, col] = weights @ uncert
            out["flow"][row, col] = weights @ flows
            np.add.at(out["contributions"], indices, weights)
    return out

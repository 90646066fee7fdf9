"""Pinhole camera model: intrinsics, world-to-camera pose, timestamp.

Conventions used everywhere in this package:
  - world_to_camera is a 4x4 rigid transform; camera space is x right,
    y down, z forward (points in front of the camera have z > 0),
  - a 3D point X projects to pixel coordinates
        u = fx * x/z + cx,   v = fy * y/z + cy
    where (x, y, z) = world_to_camera @ X,
  - pixel (row i, col j) is sampled at continuous coordinates
    (j + 0.5, i + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidParameterError

NEAR_PLANE = 0.01  # world units; points with camera z <= this are culled


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # (4, 4) float64
    width: int
    height: int
    t: float = 0.0  # timestamp in [0, 1]

    def __post_init__(self):
        W = np.asarray(self.world_to_camera, dtype=np.float64)
        if W.shape != (4, 4):
            raise InvalidParameterError(f"world_to_camera must be 4x4, got {W.shape}")
        R = W[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise InvalidParameterError("world_to_camera rotation block is not a proper rotation")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        object.__setattr__(self, "world_to_camera", W)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def with_time(self, t: float) -> "Camera":
        return replace(self, t=float(t))

    def to_camera_space(self, points: np.ndarray) -> np.ndarray:
        """(N, 3) world points -> (N, 3) camera-space points."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(N, 3) world points -> ((N, 2) pixel coords, (N,) camera-space depth).

        No culling: callers check depth > NEAR_PLANE themselves.
        """
        cam = self.to_camera_space(points)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def pixel_grid(self) -> np.ndarray:
        """(H, W, 2) array of pixel-center coordinates (u, v)."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        return np.stack([u + 0.5, v + 0.5], axis=-1)

    def to_json(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "world_to_camera": [[float(x) for x in row] for row in self.world_to_camera],
            "t": self.t,
        }

    @staticmethod
    def from_json(d: dict) -> "Camera":
        return Camera(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
            t=float(d.get("t", 0.0)),
        )


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """World-to-camera 4x4 for a camera at `eye` looking at `target`.

    Default `up` keeps +y pointing down in camera space (image rows grow
    downward), matching the projection convention above.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)  # rows are camera axes in world
    W = np.eye(4)
    W[:3, :3] = R
    W[:3, 3] = -R @ eye
    return W


def quat_to_rotmat_np(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) -> 3x3 rotation, float64."""
    w, x, y, z = (float(v) for v in np.asarray(q, dtype=np.float64))
    n = np.sqrt(w * w + x * x + y * y + z * z)
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat_np(R: np.ndarray) -> np.ndarray:
    """3x3 rotation -> unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    """Spherical interpolation between unit quaternions (shortest arc)."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = float(np.dot(q0, q1))
    if dot < 0:
        q1, dot = -q1, -dot
    if dot > 1 - 1e-12:
        out = (1 - u) * q0 + u * q1
        return out / np.linalg.norm(out)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    out = (np.sin((1 - u) * theta) / s) * q0 + (np.sin(u * theta) / s) * q1
    return out / np.linalg.norm(out)


def interpolate_pose(cam_a: Camera, cam_b: Camera, u: float) -> np.ndarray:
    """Interpolated world-to-camera: linear camera centers, slerped rotation."""
    qa = rotmat_to_quat_np(cam_a.rotation)
    qb = rotmat_to_quat_np(cam_b.rotation)
    R = quat_to_rotmat_np(slerp(qa, qb, u))
    c = (1 - u) * cam_a.center + u * cam_b.center
    W = np.eye(4)
    W[:3, :3] = R
    W[:3, 3] = -R @ c
    return W

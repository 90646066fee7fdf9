"""Scene-directory ingestion: manifest, frames, channels, initial points.

A scene directory holds a `scene.json` manifest naming per-frame image
files, cameras, timestamps, and optional depth / forward-flow / dynamic
mask / co-visibility mask channels, plus an optional initial point cloud
and ground-truth primitive container. Loading is eager and fully
validated; every error message names the offending file or field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cameras import Camera
from .errors import SceneLoadError
from .formats import (
    read_flo,
    read_mask_png,
    read_pfm,
    read_ply,
    read_png,
    require_file,
)

SCHEMA_VERSION = 1


@dataclass
class Frame:
    camera: Camera
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    image_path: str
    depth: np.ndarray | None = None  # (H, W) float32, world units
    flow: np.ndarray | None = None  # (H, W, 2) float32, forward flow in pixels
    dynamic_mask: np.ndarray | None = None  # (H, W) bool
    covis_mask: np.ndarray | None = None  # (H, W) bool

    @property
    def t(self) -> float:
        return self.camera.t


@dataclass
class SceneBundle:
    root: Path
    train_frames: list[Frame]
    val_frames: list[Frame] = field(default_factory=list)
    points: tuple[np.ndarray, np.ndarray] | None = None  # (xyz, rgb)
    gt_primitives_path: Path | None = None

    @property
    def train_cameras(self) -> list[Camera]:
        return [f.camera for f in self.train_frames]


def _check_monotone(frames: list[dict], split: str):
    ts = [float(f["t"]) for f in frames]
    for t in ts:
        if not (0.0 <= t <= 1.0):
            raise SceneLoadError(f"{split}: timestamp {t} outside [0, 1]")
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise SceneLoadError(f"{split}: timestamps must be strictly increasing, got {ts}")


def _load_frame(root: Path, entry: dict, split: str, index: int) -> Frame:
    where = f"{split}[{index}]"
    try:
        cam = Camera.from_json({**entry["camera"], "t": entry["t"]})
    except KeyError as e:
        raise SceneLoadError(f"{where}: manifest entry missing key {e}") from e
    img_path = require_file(root / entry["image"], where)
    image = read_png(img_path)
    if image.ndim != 3 or image.shape[:2] != (cam.height, cam.width):
        raise SceneLoadError(
            f"{img_path}: image shape {image.shape[:2]} does not match camera ({cam.height}, {cam.width})"
        )
    frame = Frame(camera=cam, image=image, image_path=str(entry["image"]))
    if "depth" in entry:
        depth = read_pfm(require_file(root / entry["depth"], where))
        if depth.shape != (cam.height, cam.width):
            raise SceneLoadError(f"{root / entry['depth']}: depth shape {depth.shape} mismatches camera")
        frame.depth = depth
    if "flow" in entry:
        flow = read_flo(require_file(root / entry["flow"], where))
        if flow.shape[:2] != (cam.height, cam.width):
            raise SceneLoadError(f"{root / entry['flow']}: flow shape {flow.shape[:2]} mismatches camera")
        frame.flow = flow
    if "dynamic_mask" in entry:
        mask = read_mask_png(require_file(root / entry["dynamic_mask"], where))
        if mask.shape != (cam.height, cam.width):
            raise SceneLoadError(f"{root / entry['dynamic_mask']}: mask shape {mask.shape} mismatches camera")
        frame.dynamic_mask = mask
    if "covis_mask" in entry:
        mask = read_mask_png(require_file(root / entry["covis_mask"], where))
        if mask.shape != (cam.height, cam.width):
            raise SceneLoadError(f"{root / entry['covis_mask']}: mask shape {mask.shape} mismatches camera")
        frame.covis_mask = mask
    return frame


def load_scene(directory) -> SceneBundle:
    root = Path(directory)
    manifest_path = root / "scene.json"
    if not manifest_path.is_file():
        raise SceneLoadError(f"{manifest_path}: scene manifest not found")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise SceneLoadError(f"{manifest_path}: malformed JSON ({e})") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SceneLoadError(
            f"{manifest_path}: schema_version {manifest.get('schema_version')!r} unsupported (want {SCHEMA_VERSION})"
        )
    frames = manifest.get("frames", [])
    if not frames:
        raise SceneLoadError(f"{manifest_path}: manifest lists no frames")
    _check_monotone(frames, "frames")
    val_entries = manifest.get("val_frames", [])
    if val_entries:
        _check_monotone(val_entries, "val_frames")

    bundle = SceneBundle(
        root=root,
        train_frames=[_load_frame(root, e, "frames", i) for i, e in enumerate(frames)],
        val_frames=[_load_frame(root, e, "val_frames", i) for i, e in enumerate(val_entries)],
    )
    if "points" in manifest:
        bundle.points = read_ply(require_file(root / manifest["points"], "manifest points"))
    if "gt_primitives" in manifest:
        bundle.gt_primitives_path = require_file(root / manifest["gt_primitives"], "manifest gt_primitives")
    return bundle


def save_bundle(bundle: SceneBundle, directory) -> Path:
    """Write a loaded bundle back out as a scene directory (lossless round trip)."""
    from .formats import write_flo, write_mask_png, write_pfm, write_ply, write_png

    root = Path(directory)
    manifest = {"schema_version": SCHEMA_VERSION, "frames": [], "val_frames": []}

    def dump(frames: list[Frame], key: str):
        for frame in frames:
            rel = Path(frame.image_path)
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            write_png(root / rel, frame.image)
            entry = {"image": str(rel), "camera": frame.camera.to_json(), "t": frame.t}
            stem = rel.stem
            if frame.depth is not None:
                entry["depth"] = f"depth/{stem}.pfm"
                (root / "depth").mkdir(exist_ok=True)
                write_pfm(root / entry["depth"], frame.depth)
            if frame.flow is not None:
                entry["flow"] = f"flow/{stem}.flo"
                (root / "flow").mkdir(exist_ok=True)
                write_flo(root / entry["flow"], frame.flow)
            if frame.dynamic_mask is not None:
                entry["dynamic_mask"] = f"masks/{stem}_dynamic.png"
                (root / "masks").mkdir(exist_ok=True)
                write_mask_png(root / entry["dynamic_mask"], frame.dynamic_mask)
            if frame.covis_mask is not None:
                entry["covis_mask"] = f"masks/{stem}_covis.png"
                (root / "masks").mkdir(exist_ok=True)
                write_mask_png(root / entry["covis_mask"], frame.covis_mask)
            manifest[key].append(entry)

    root.mkdir(parents=True, exist_ok=True)
    dump(bundle.train_frames, "frames")
    dump(bundle.val_frames, "val_frames")
    if not manifest["val_frames"]:
        del manifest["val_frames"]
    if bundle.points is not None:
        manifest["points"] = "points.ply"
        write_ply(root / "points.ply", *bundle.points)
    if bundle.gt_primitives_path is not None:
        manifest["gt_primitives"] = bundle.gt_primitives_path.name
        (root / bundle.gt_primitives_path.name).write_bytes(bundle.gt_primitives_path.read_bytes())
    (root / "scene.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def lint_scene(directory) -> list[str]:
    """Validate a scene directory; returns human-readable problem list (empty == ok)."""
    try:
        bundle = load_scene(directory)
    except SceneLoadError as e:
        return [str(e)]
    notes = []
    for split, frames in (("frames", bundle.train_frames), ("val_frames", bundle.val_frames)):
        missing_depth = sum(1 for f in frames if f.depth is None)
        if 0 < missing_depth < len(frames):
            notes.append(f"{split}: depth present on only {len(frames) - missing_depth}/{len(frames)} frames")
    return notes

"""On-disk codecs: PNG (8/16-bit), PFM depth, Middlebury .flo flow, binary PLY.

All formats are little-endian; PFM scanlines follow the standard
bottom-to-top order with a negative scale marking little-endian data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SceneLoadError

FLO_MAGIC = 202021.25


# -- PNG ---------------------------------------------------------------------

def write_png(path, image: np.ndarray):
    """Float [0,1] (H, W, 3) or (H, W) -> 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data).save(str(path))


def read_png(path) -> np.ndarray:
    """8-bit PNG -> float64 in [0,1], (H, W, 3) for color, (H, W) for grayscale."""
    with Image.open(str(path)) as im:
        mode = "RGB" if im.mode in ("RGB", "RGBA", "P") else "L"
        arr = np.asarray(im.convert(mode), dtype=np.float64)
    return arr / 255.0


def write_png16(path, image: np.ndarray):
    """Float [0,1] (H, W) -> 16-bit grayscale PNG scaled by 65535."""
    data = (np.clip(np.asarray(image), 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)
    Image.fromarray(data).save(str(path))


def read_png16(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / 65535.0


def write_mask_png(path, mask: np.ndarray):
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(str(path))


def read_mask_png(path) -> np.ndarray:
    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


# -- PFM ---------------------------------------------------------------------

def write_pfm(path, data: np.ndarray):
    """(H, W) float32 grayscale PFM, little-endian, bottom-to-top scanlines."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise SceneLoadError(f"PFM writer expects a 2D map, got shape {data.shape}")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise SceneLoadError(f"{path}: not a PFM file (header {header!r})")
        dims = f.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        channels = 3 if header == b"PF" else 1
        endian = "<" if scale < 0 else ">"
        count = width * height * channels
        raw = np.frombuffer(f.read(count * 4), dtype=f"{endian}f4", count=count)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.flipud(raw.reshape(shape)).astype(np.float32).copy()


# -- Middlebury .flo -----------------------------------------------------------

def write_flo(path, flow: np.ndarray):
    """(H, W, 2) float32 optical flow."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise SceneLoadError(f"flow writer expects (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(flow.astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = struct.unpack("<f", f.read(4))[0]
        if abs(magic - FLO_MAGIC) > 1e-3:
            raise SceneLoadError(f"{path}: bad .flo magic {magic}")
        w, h = struct.unpack("<ii", f.read(8))
        data = np.frombuffer(f.read(w * h * 2 * 4), dtype="<f4", count=w * h * 2)
    return data.reshape(h, w, 2).astype(np.float32).copy()


# -- PLY -----------------------------------------------------------------------

def write_ply(path, positions: np.ndarray, colors: np.ndarray):
    """Binary little-endian PLY: float32 x,y,z + uint8 r,g,b per vertex."""
    positions = np.asarray(positions, dtype=np.float32).reshape(-1, 3)
    colors = np.asarray(colors)
    if colors.dtype != np.uint8:
        colors = (np.clip(colors, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    colors = colors.reshape(-1, 3)
    n = positions.shape[0]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
    rec["xyz"] = positions
    rec["rgb"] = colors
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """-> (positions (N, 3) float32, colors (N, 3) float in [0, 1])."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise SceneLoadError(f"{path}: not a PLY file")
        n = None
        props = []
        while True:
            line = f.readline()
            if not line:
                raise SceneLoadError(f"{path}: truncated PLY header")
            line = line.strip()
            if line.startswith(b"format") and b"binary_little_endian" not in line:
                raise SceneLoadError(f"{path}: only binary little-endian PLY is supported")
            if line.startswith(b"element vertex"):
                n = int(line.split()[-1])
            if line.startswith(b"property"):
                props.append(line.split()[-1].decode())
            if line == b"end_header":
                break
        if n is None:
            raise SceneLoadError(f"{path}: PLY header missing vertex element")
        if props[:6] != ["x", "y", "z", "red", "green", "blue"]:
            raise SceneLoadError(f"{path}: unexpected PLY vertex layout {props}")
        rec = np.frombuffer(f.read(n * 15), dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)], count=n)
    return rec["xyz"].astype(np.float32).copy(), rec["rgb"].astype(np.float64) / 255.0


def require_file(path: Path, referenced_by: str) -> Path:
    if not Path(path).is_file():
        raise SceneLoadError(f"{referenced_by} references missing file: {path}")
    return Path(path)

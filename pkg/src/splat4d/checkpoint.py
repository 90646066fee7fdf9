"""Single-file checkpoint container.

Layout: magic "UAGS", little-endian u32 version, u64 header length, JSON
header (meta dict + array manifest), then the raw little-endian array
payload. Writing is fully deterministic (sorted names, canonical JSON) so
fixed-seed training runs produce byte-identical checkpoints.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .deform import DeformationField
from .errors import SceneLoadError
from .gaussians import GaussianCloud

MAGIC = b"UAGS"
VERSION = 1

_DTYPES = {"f4": "<f4", "f8": "<f8", "i4": "<i4", "i8": "<i8", "u1": "|u1"}


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        code = arr.dtype.str.lstrip("<>|=")
        if code not in _DTYPES:
            raise ValueError(f"unsupported array dtype {arr.dtype} for {name!r}")
        blob = arr.astype(_DTYPES[code]).tobytes()
        entries.append(
            {"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise SceneLoadError(f"{path}: not a checkpoint container (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise SceneLoadError(f"{path}: unsupported container version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save_model(path, cloud: GaussianCloud, field: DeformationField | None, meta: dict | None = None,
               optimizer_arrays: dict[str, np.ndarray] | None = None):
    arrays = {f"cloud_{k}": v for k, v in cloud.state_arrays().items()}
    meta = dict(meta or {})
    meta["bands"] = cloud.bands
    if field is not None:
        arrays.update(field.state_arrays())
        meta["field"] = field.meta()
    if optimizer_arrays:
        arrays.update({f"opt_{k}": v for k, v in optimizer_arrays.items()})
    write_container(path, arrays, meta)


def load_model(path, dtype: torch.dtype = torch.float32):
    """-> (cloud, field_or_None, meta, optimizer_arrays)."""
    arrays, meta = read_container(path)
    cloud_arrays = {k[len("cloud_"):]: v for k, v in arrays.items() if k.startswith("cloud_")}
    cloud = GaussianCloud.from_state_arrays(cloud_arrays, dtype=dtype)
    field = None
    if "field" in meta:
        field_arrays = {k: v for k, v in arrays.items() if k.startswith("field_")}
        field = DeformationField.from_state(meta["field"], field_arrays, dtype=dtype)
    opt = {k[len("opt_"):]: v for k, v in arrays.items() if k.startswith("opt_")}
    return cloud, field, meta, opt

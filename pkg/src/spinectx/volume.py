"""Scalar volumes with physical spacing, and their on-disk formats.

Two formats are supported:

* NIfTI-1 single-file images (``.nii`` / ``.nii.gz``). Voxel data are kept in
  stored order; the file's x axis (fastest varying) becomes the last array
  axis, so arrays are indexed ``[z, y, x]``. Orientation fields are carried
  through to written headers untouched.
* A native raw format: ``<name>.json`` (dims, spacing, origin, kind, dtype,
  byte order) next to a ``<name>.f32`` little-endian float32 payload.
"""
from __future__ import annotations

import gzip
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

KINDS = ("intensity", "probability", "binary-mask")


class VolumeFormatError(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: str = "intensity"
    header: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D (d, h, w), got shape {self.data.shape}")
        if self.data.dtype != np.float32:
            self.data = self.data.astype(np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "binary-mask" and not np.all((self.data == 0) | (self.data == 1)):
            raise ValueError("binary-mask volume contains values other than 0 and 1")
        if self.kind == "probability" and (self.data.min(initial=0) < 0
                                           or self.data.max(initial=0) > 1):
            raise ValueError("probability volume has values outside [0, 1]")

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.data.shape


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

HEADER_DTYPE = np.dtype([
    ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"), ("extents", "i4"),
    ("session_error", "i2"), ("regular", "S1"), ("dim_info", "u1"), ("dim", "i2", (8,)),
    ("intent_p1", "f4"), ("intent_p2", "f4"), ("intent_p3", "f4"), ("intent_code", "i2"),
    ("datatype", "i2"), ("bitpix", "i2"), ("slice_start", "i2"), ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"), ("scl_slope", "f4"), ("scl_inter", "f4"), ("slice_end", "i2"),
    ("slice_code", "u1"), ("xyzt_units", "u1"), ("cal_max", "f4"), ("cal_min", "f4"),
    ("slice_duration", "f4"), ("toffset", "f4"), ("glmax", "i4"), ("glmin", "i4"),
    ("descrip", "S80"), ("aux_file", "S24"), ("qform_code", "i2"), ("sform_code", "i2"),
    ("quatern_b", "f4"), ("quatern_c", "f4"), ("quatern_d", "f4"),
    ("qoffset_x", "f4"), ("qoffset_y", "f4"), ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)), ("srow_y", "f4", (4,)), ("srow_z", "f4", (4,)),
    ("intent_name", "S16"), ("magic", "S4"),
]).newbyteorder("<")
assert HEADER_DTYPE.itemsize == 348

NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 16: np.dtype("f4")}
_WRITE_CODE = {"binary-mask": 2, "probability": 16, "intensity": 16}


def _is_gzip(raw: bytes) -> bool:
    return raw[:2] == b"\x1f\x8b"


def parse_nifti(raw: bytes) -> Volume:
    if _is_gzip(raw):
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise VolumeFormatError(f"corrupt gzip stream: {exc}") from None
    if len(raw) < 348:
        raise VolumeFormatError(f"truncated NIfTI header: {len(raw)} of 348 bytes")
    hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE).copy()
    if hdr["sizeof_hdr"][0] != 348:
        swapped = hdr.view(HEADER_DTYPE.newbyteorder(">"))
        if swapped["sizeof_hdr"][0] != 348:
            raise VolumeFormatError("sizeof_hdr is not 348; not a NIfTI-1 file")
        hdr = swapped.astype(HEADER_DTYPE)
        order = ">"
    else:
        order = "<"
    h = hdr[0]
    if h["magic"] != b"n+1":
        raise VolumeFormatError(f"unsupported magic {h['magic']!r}; expected single-file 'n+1'")
    ndim = int(h["dim"][0])
    if ndim < 3 or ndim > 7 or any(int(v) != 1 for v in h["dim"][4:ndim + 1]):
        raise VolumeFormatError(f"unsupported dim field {list(h['dim'])}: need a 3-D volume")
    code = int(h["datatype"])
    if code not in NIFTI_DTYPES:
        raise VolumeFormatError(f"unsupported datatype code {code}; supported {sorted(NIFTI_DTYPES)}")
    nx, ny, nz = (int(v) for v in h["dim"][1:4])
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError(f"non-positive dim field {list(h['dim'])}")
    dtype = NIFTI_DTYPES[code].newbyteorder(order)
    offset = int(h["vox_offset"])
    nbytes = nx * ny * nz * dtype.itemsize
    if offset < 348 or len(raw) < offset + nbytes:
        raise VolumeFormatError(
            f"truncated NIfTI payload: need {nbytes} bytes at offset {offset}, file has {len(raw)}")
    stored = np.frombuffer(raw, dtype=dtype, count=nx * ny * nz, offset=offset)
    stored = stored.reshape(nz, ny, nx)
    slope, inter = float(h["scl_slope"]), float(h["scl_inter"])
    if slope != 0 and np.isfinite(slope):
        data = stored.astype(np.float64) * slope + (inter if np.isfinite(inter) else 0.0)
    else:
        data = stored.astype(np.float64)
    px = [abs(float(v)) for v in h["pixdim"][1:4]]
    spacing = tuple(v if v > 0 else 1.0 for v in px[::-1])
    if int(h["qform_code"]) > 0:
        origin = (float(h["qoffset_z"]), float(h["qoffset_y"]), float(h["qoffset_x"]))
    elif int(h["sform_code"]) > 0:
        origin = (float(h["srow_z"][3]), float(h["srow_y"][3]), float(h["srow_x"][3]))
    else:
        origin = (0.0, 0.0, 0.0)
    kind = "intensity"
    if code == 2 and np.all((data == 0) | (data == 1)):
        kind = "binary-mask"
    return Volume(data.astype(np.float32), spacing, origin, kind, header=hdr)


def build_nifti(vol: Volume) -> bytes:
    code = _WRITE_CODE[vol.kind]
    if vol.header is not None:
        hdr = vol.header.astype(HEADER_DTYPE).copy()
        old = [float(v) for v in hdr[0]["pixdim"][1:4]]
    else:
        hdr = np.zeros(1, dtype=HEADER_DTYPE)
        hdr["pixdim"][0, 0] = 1.0
        hdr["xyzt_units"] = 2  # millimetres
        old = None
    h = hdr[0]
    d, hh, w = vol.data.shape
    h["sizeof_hdr"] = 348
    h["dim"][:] = [3, w, hh, d, 1, 1, 1, 1]
    h["datatype"] = code
    h["bitpix"] = NIFTI_DTYPES[code].itemsize * 8
    new = list(vol.spacing[::-1])
    h["pixdim"][1:4] = new
    h["vox_offset"] = 352.0
    h["scl_slope"] = 1.0
    h["scl_inter"] = 0.0
    h["magic"] = b"n+1"
    if old is not None and int(h["sform_code"]) > 0:
        for i in range(3):
            if old[i] > 0:
                ratio = new[i] / old[i]
                for row in ("srow_x", "srow_y", "srow_z"):
                    h[row][i] *= ratio
    if vol.header is None:
        h["qform_code"] = 1  # scanner frame, identity rotation
        h["qoffset_z"], h["qoffset_y"], h["qoffset_x"] = vol.origin
    payload = vol.data.astype(NIFTI_DTYPES[code].newbyteorder("<"))
    return hdr.tobytes() + b"\x00" * 4 + payload.tobytes()


# ---------------------------------------------------------------------------
# raw format
# ---------------------------------------------------------------------------

def _raw_paths(path: Path) -> Tuple[Path, Path]:
    stem = path.with_suffix("") if path.suffix in (".json", ".f32") else path
    return stem.with_suffix(".json"), stem.with_suffix(".f32")


def write_raw(path, vol: Volume) -> None:
    meta_path, data_path = _raw_paths(Path(path))
    meta = {
        "dims": list(vol.data.shape),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "kind": vol.kind,
        "dtype": "float32",
        "byte_order": "little",
    }
    data_path.write_bytes(vol.data.astype("<f4").tobytes())
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_raw(path) -> Volume:
    meta_path, data_path = _raw_paths(Path(path))
    meta = json.loads(meta_path.read_text())
    if meta.get("dtype", "float32") != "float32":
        raise VolumeFormatError(f"unsupported raw dtype {meta.get('dtype')!r}")
    order = {"little": "<", "big": ">"}.get(meta.get("byte_order", "little"))
    if order is None:
        raise VolumeFormatError(f"unsupported byte_order {meta.get('byte_order')!r}")
    dims = tuple(int(v) for v in meta["dims"])
    if len(dims) != 3:
        raise VolumeFormatError(f"unsupported dims field {dims}: need 3 entries")
    raw = data_path.read_bytes()
    need = int(np.prod(dims)) * 4
    if len(raw) != need:
        raise VolumeFormatError(f"raw payload is {len(raw)} bytes, expected {need}")
    data = np.frombuffer(raw, dtype=order + "f4").astype(np.float32).reshape(dims)
    return Volume(data, tuple(meta["spacing"]), tuple(meta.get("origin", (0, 0, 0))),
                  meta.get("kind", "intensity"))


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _is_nifti(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def read_volume(path, kind: Optional[str] = None) -> Volume:
    path = Path(path)
    if _is_nifti(path):
        vol = parse_nifti(path.read_bytes())
    elif path.suffix in (".json", ".f32"):
        vol = read_raw(path)
    else:
        raise VolumeFormatError(f"unrecognised volume file extension: {path.name}")
    if kind is not None and kind != vol.kind:
        vol = Volume(vol.data, vol.spacing, vol.origin, kind, vol.header)
    return vol


def write_volume(path, vol: Volume) -> None:
    path = Path(path)
    if _is_nifti(path):
        blob = build_nifti(vol)
        if path.name.lower().endswith(".gz"):
            blob = gzip.compress(blob, mtime=0)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    elif path.suffix in (".json", ".f32"):
        write_raw(path, vol)
    else:
        raise VolumeFormatError(f"unrecognised volume file extension: {path.name}")

"""3D image and label volumes: loading, saving, and synthetic phantoms.

Two on-disk formats are supported:

* ``rawv``: ``<name>.rawv`` little-endian payload (x-fastest) plus a
  ``<name>.rawv.json`` sidecar header ``{"dims", "dtype", "order"}``.
* ``nifti1``: a strict read-only subset of NIfTI-1 — uncompressed single
  file, 3 spatial dims, datatype uint8/int16/float32, magic ``n+1``.

Grids are held as numpy arrays indexed ``[x, y, z]``; the serialized order
is x-fastest, i.e. ``reshape(dims, order="F")`` of the flat payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, ShapeError, UnsupportedError
from .nn.rng import SeedStream

__all__ = [
    "Volume",
    "LabelVolume",
    "load_volume",
    "save_volume",
    "load_labels",
    "save_labels",
    "gen_phantom",
    "normalize_minmax",
]

_RAWV_DTYPES = {"f32": np.float32, "u8": np.uint8, "i32": np.int32}
_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


@dataclass
class Volume:
    """A scalar 3D grid, min-max normalized to [0, 1] on load."""

    dims: tuple[int, int, int]
    data: np.ndarray  # float32, shape dims, indexed [x, y, z]
    value_range: tuple[float, float]
    source: str = "memory"

    def __post_init__(self):
        if self.data.shape != tuple(self.dims):
            raise ShapeError(f"data shape {self.data.shape} != dims {self.dims}")
        if not np.isfinite(self.data).all():
            raise DomainError("volume contains non-finite values")


@dataclass
class LabelVolume:
    """An integer 3D grid; labels are preserved exactly."""

    dims: tuple[int, int, int]
    labels: np.ndarray  # int32, shape dims
    num_classes: int
    kind: str = "region"  # {region, tissue}

    def __post_init__(self):
        if self.labels.shape != tuple(self.dims):
            raise ShapeError(f"labels shape {self.labels.shape} != dims {self.dims}")
        if self.labels.min(initial=0) < 0:
            raise DomainError("negative labels")
        if int(self.labels.max(initial=0)) >= self.num_classes:
            raise DomainError("label >= num_classes")


def normalize_minmax(data: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    """Affine map of the grid onto [0, 1]; degenerate grids map to zeros."""
    lo = float(data.min())
    hi = float(data.max())
    if hi == lo:
        return np.zeros_like(data, dtype=np.float32), (lo, hi)
    out = (data.astype(np.float64) - lo) / (hi - lo)
    return out.astype(np.float32), (lo, hi)


# ---------------------------------------------------------------------------
# rawv


def _rawv_header_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _read_rawv(path: Path) -> np.ndarray:
    header_path = _rawv_header_path(path)
    if not header_path.exists():
        raise FormatError(f"missing rawv header {header_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"bad rawv header: {e}") from e
    for key in ("dims", "dtype", "order"):
        if key not in header:
            raise FormatError(f"rawv header missing '{key}'")
    if header["order"] != "x-fastest":
        raise UnsupportedError(f"rawv order {header['order']!r} not supported")
    if header["dtype"] not in _RAWV_DTYPES:
        raise UnsupportedError(f"rawv dtype {header['dtype']!r} not supported")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ShapeError(f"rawv dims {dims} must be 3 positive axes")
    dtype = np.dtype(_RAWV_DTYPES[header["dtype"]]).newbyteorder("<")
    payload = path.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"rawv payload is {len(payload)} bytes, expected {expected}")
    flat = np.frombuffer(payload, dtype=dtype)
    return flat.reshape(dims, order="F")


def save_volume(volume: Volume, path: str | Path) -> None:
    """Write the (already normalized) volume as f32 rawv."""
    _write_rawv(Path(path), volume.data.astype("<f4"), "f32")


def save_labels(labels: LabelVolume, path: str | Path) -> None:
    _write_rawv(Path(path), labels.labels.astype("<i4"), "i32")


def _write_rawv(path: Path, grid: np.ndarray, dtype_tag: str) -> None:
    header = {
        "dims": [int(d) for d in grid.shape],
        "dtype": dtype_tag,
        "order": "x-fastest",
    }
    _rawv_header_path(path).write_text(json.dumps(header, sort_keys=True))
    path.write_bytes(grid.flatten(order="F").tobytes())


# ---------------------------------------------------------------------------
# NIfTI-1 (read-only subset)


def _read_nifti1(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 352:
        raise FormatError("file too short for a NIfTI-1 header")
    header = raw[:348]
    sizeof_hdr = struct.unpack("<i", header[0:4])[0]
    endian = "<"
    if sizeof_hdr != 348:
        sizeof_hdr = struct.unpack(">i", header[0:4])[0]
        endian = ">"
        if sizeof_hdr != 348:
            raise FormatError("bad sizeof_hdr; not a NIfTI-1 file")
    magic = header[344:348]
    if magic[:3] != b"n+1":
        raise FormatError(f"bad magic {magic!r}; only single-file 'n+1' supported")
    dim = struct.unpack(endian + "8h", header[40:56])
    if dim[0] != 3:
        raise ShapeError(f"dim[0]={dim[0]}; only 3 spatial dims supported")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d <= 0 for d in dims):
        raise ShapeError(f"non-positive dims {dims}")
    datatype = struct.unpack(endian + "h", header[70:72])[0]
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedError(f"NIfTI datatype {datatype} not in supported set {sorted(_NIFTI_DTYPES)}")
    vox_offset = int(struct.unpack(endian + "f", header[108:112])[0])
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    count = int(np.prod(dims))
    end = vox_offset + count * dtype.itemsize
    if len(raw) < end:
        raise FormatError("payload shorter than header promises")
    flat = np.frombuffer(raw[vox_offset:end], dtype=dtype)
    # NIfTI stores the first index fastest, same as our x-fastest convention.
    return flat.reshape(dims, order="F")


# ---------------------------------------------------------------------------
# public loaders


def _read_grid(path: str | Path, format: str) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise FormatError(f"no such file: {p}")
    if format == "rawv":
        return _read_rawv(p)
    if format == "nifti1":
        return _read_nifti1(p)
    raise UnsupportedError(f"unknown format {format!r}")


def load_volume(path: str | Path, format: str = "rawv") -> Volume:
    """Load a scalar volume and min-max normalize it to [0, 1]."""
    grid = _read_grid(path, format)
    if not np.isfinite(grid.astype(np.float64)).all():
        raise DomainError(f"{path}: non-finite voxel values")
    data, value_range = normalize_minmax(grid)
    return Volume(dims=tuple(grid.shape), data=data, value_range=value_range,
                  source=f"{format}:{path}")


def load_labels(path: str | Path, format: str = "rawv") -> LabelVolume:
    """Load an integer label volume; values are preserved exactly."""
    grid = _read_grid(path, format)
    if not np.issubdtype(grid.dtype, np.integer):
        raise UnsupportedError(f"{path}: label volume must be integer-typed, got {grid.dtype}")
    if grid.min() < 0:
        raise DomainError(f"{path}: negative labels")
    labels = np.ascontiguousarray(grid, dtype=np.int32)
    return LabelVolume(dims=tuple(grid.shape), labels=labels,
                       num_classes=int(labels.max()) + 1)


# ---------------------------------------------------------------------------
# phantom generator

# Tissue classes: 0 background, 1 CSF-like rim, 2 GM-like band, 3 WM-like core.
_TISSUE_LEVELS = np.array([0.02, 0.30, 0.58, 0.88])
_R_OUTER, _R_GM, _R_WM, _R_CORE = 1.0, 0.85, 0.55, 0.30
# common asymmetry axis shared by all phantoms (normalized)
_SHADING_DIR = np.array([0.62, 0.50, 0.60]) / np.linalg.norm([0.62, 0.50, 0.60])


def _smooth_field(rng: SeedStream, dims: tuple[int, int, int], coarse: int = 5) -> np.ndarray:
    """Seeded low-frequency noise: coarse Gaussian grid, trilinearly upsampled."""
    grid = rng.normal((coarse, coarse, coarse), dtype=np.float64)
    out = grid
    for axis, n in enumerate(dims):
        pos = np.linspace(0.0, coarse - 1.0, n)
        i0 = np.clip(np.floor(pos).astype(int), 0, coarse - 2)
        frac = pos - i0
        lo = np.take(out, i0, axis=axis)
        hi = np.take(out, i0 + 1, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = n
        frac = frac.reshape(shape)
        out = lo * (1.0 - frac) + hi * frac
    return out


def gen_phantom(seed: int, dims: tuple[int, int, int]) -> tuple[Volume, LabelVolume, LabelVolume]:
    """Deterministic concentric-ellipsoid phantom.

    Returns (intensity volume, region labels, tissue labels). Tissue has
    exactly 4 classes; regions are a core nucleus plus 4 angular sectors
    carved inside the tissue foreground, so region foreground always lies
    inside tissue foreground.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ShapeError(f"phantom dims {dims} must be 3 axes of at least 16 voxels")
    rng = SeedStream(seed).child("phantom")

    axes = [np.linspace(-1.0, 1.0, n) for n in dims]
    x, y, z = np.meshgrid(*axes, indexing="ij")

    # Deformed ellipsoid radius: per-axis semi-axes plus a low-frequency warp.
    semi = rng.uniform(0.78, 0.92, (3,), dtype=np.float64)
    warp = 0.08 * _smooth_field(rng.child("warp"), dims)
    r = np.sqrt((x / semi[0]) ** 2 + (y / semi[1]) ** 2 + (z / semi[2]) ** 2) + warp

    tissue = np.zeros(dims, dtype=np.int32)
    tissue[r <= _R_OUTER] = 1
    tissue[r <= _R_GM] = 2
    tissue[r <= _R_WM] = 3

    # Regions: nucleus (1) and four angular sectors (2..5) about the x axis,
    # restricted to the GM+WM interior so region fg => tissue fg.
    region = np.zeros(dims, dtype=np.int32)
    interior = r <= _R_GM
    angle = np.arctan2(z, y)  # [-pi, pi]
    sector = np.minimum((angle + np.pi) / (np.pi / 2.0), 3.999).astype(np.int32)
    region[interior] = 2 + sector[interior]
    region[(r <= _R_CORE)] = 1

    intensity = _TISSUE_LEVELS[tissue]
    noise = 0.05 * _smooth_field(rng.child("intensity"), dims, coarse=7)
    # smooth asymmetric shading along a direction shared by every phantom
    # (anatomy-style: all subjects share one gross asymmetry layout), with
    # a small seeded amplitude jitter per subject; breaks radial symmetry
    # so appearance carries orientation information
    amp = 0.10 * float(rng.uniform(0.85, 1.15, ()))
    shading = amp * (_SHADING_DIR[0] * x + _SHADING_DIR[1] * y + _SHADING_DIR[2] * z)
    interior_mask = (tissue > 0).astype(np.float64)
    intensity = np.clip(intensity + noise + shading * interior_mask, 0.0, 1.0)
    data, value_range = normalize_minmax(intensity)

    vol = Volume(dims=dims, data=data, value_range=value_range, source=f"phantom:{seed}")
    region_lv = LabelVolume(dims=dims, labels=region, num_classes=int(region.max()) + 1, kind="region")
    tissue_lv = LabelVolume(dims=dims, labels=tissue, num_classes=4, kind="tissue")
    return vol, region_lv, tissue_lv

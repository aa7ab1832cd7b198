"""The slice rendering operator: 8-D actions -> oriented sampling planes.

Geometry convention (fixed for replay determinism):

* volume coordinates are the normalized cube [-1, 1]^3 in index space; the
  normalized coordinate c maps to the continuous index (c + 1) / 2 * (n - 1);
* the unrotated plane has normal e_y, columns along e_x, rows along e_z;
* rotation matrix Rmat = R_y(pi*r_yaw) @ R_x(pi*r_pitch) @ R_z(pi*r_roll),
  right-handed, applied in that order;
* in-plane scales are sigma = 2^s, so s in [-1, 1] spans zoom [0.5, 2];
* sample points outside [0, n-1] on any index axis are invalid and filled
  with ``fill_value``; all losses and metrics downstream respect the mask.

Intensities are trilinearly interpolated; labels use nearest-neighbor with
ties rounded half away from zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .volumes import LabelVolume, Volume

__all__ = [
    "Action",
    "RenderConfig",
    "SliceFrame",
    "TargetFrame",
    "rotation_matrix",
    "action_to_frame_grid",
    "render_slice",
    "render_labels",
    "render_coords",
]

ACTION_DIM = 8


@dataclass(frozen=True)
class Action:
    """8-component normalized slice state: position, rotation, in-plane scale."""

    p: tuple[float, float, float] = (0.0, 0.0, 0.0)
    r: tuple[float, float, float] = (0.0, 0.0, 0.0)  # (pitch, yaw, roll)
    s: tuple[float, float] = (0.0, 0.0)  # (s_x, s_z)

    def __post_init__(self):
        vec = self.as_array()
        for i, v in enumerate(vec):
            if not (-1.0 <= v <= 1.0) or not np.isfinite(v):
                raise ValidationError(f"action component {i} = {v} outside [-1, 1]", field=str(i))

    def as_array(self) -> np.ndarray:
        return np.array([*self.p, *self.r, *self.s], dtype=np.float32)

    @classmethod
    def from_array(cls, vec) -> "Action":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.shape[0] != ACTION_DIM:
            raise ValidationError(f"action must have {ACTION_DIM} components, got {vec.shape[0]}")
        return cls(p=tuple(vec[0:3]), r=tuple(vec[3:6]), s=tuple(vec[6:8]))


@dataclass(frozen=True)
class RenderConfig:
    """Fixed rendering parameters shared by a whole dataset."""

    out_h: int = 64
    out_w: int = 64
    base_extent: float = 1.0
    fill_value: float = 0.0

    def __post_init__(self):
        if self.out_h < 2 or self.out_w < 2:
            raise ShapeError(f"output resolution {self.out_h}x{self.out_w} must be >= 2 per axis")
        if self.base_extent <= 0:
            raise ValidationError("base_extent must be positive")


@dataclass
class SliceFrame:
    pixels: np.ndarray  # (out_h, out_w) float32 in [0, 1]
    valid: np.ndarray  # (out_h, out_w) uint8
    action: Action


@dataclass
class TargetFrame:
    valid: np.ndarray  # (out_h, out_w) uint8
    labels: np.ndarray | None = None  # (out_h, out_w) int32
    coords: np.ndarray | None = None  # (out_h, out_w, 3) float32


def rotation_matrix(r_pitch: float, r_yaw: float, r_roll: float) -> np.ndarray:
    """R_y(pi*yaw) @ R_x(pi*pitch) @ R_z(pi*roll), right-handed."""
    ax, ay, az = np.pi * r_pitch, np.pi * r_yaw, np.pi * r_roll
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return ry @ rx @ rz


def action_to_frame_grid(a: Action, cfg: RenderConfig) -> np.ndarray:
    """Sample points w(i, j) for every output pixel, shape (out_h, out_w, 3).

    w(i, j) = p + Rmat @ (u_j * 2^{s_x} * e_x + v_i * 2^{s_z} * e_z) with u
    spanning [-base_extent, +base_extent] over columns and v over rows.
    """
    rmat = rotation_matrix(*a.r)
    u = np.linspace(-cfg.base_extent, cfg.base_extent, cfg.out_w)
    v = np.linspace(-cfg.base_extent, cfg.base_extent, cfg.out_h)
    sigma_x = 2.0 ** a.s[0]
    sigma_z = 2.0 ** a.s[1]
    col_dir = rmat[:, 0]  # Rmat @ e_x
    row_dir = rmat[:, 2]  # Rmat @ e_z
    grid = (np.asarray(a.p, dtype=np.float64)[None, None, :]
            + u[None, :, None] * sigma_x * col_dir[None, None, :]
            + v[:, None, None] * sigma_z * row_dir[None, None, :])
    return grid


def _index_coords(grid: np.ndarray, dims: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Map normalized coords to continuous indices; mask points off the grid."""
    if min(dims) < 2:
        raise ShapeError(f"renderable volumes need >= 2 voxels per axis, got {dims}")
    n = np.asarray(dims, dtype=np.float64)
    idx = (grid + 1.0) * 0.5 * (n - 1.0)
    valid = np.all((idx >= 0.0) & (idx <= n - 1.0), axis=-1)
    return idx, valid.astype(np.uint8)


def render_slice(v: Volume, a: Action, cfg: RenderConfig) -> SliceFrame:
    """Trilinear resampling of the volume on the action's plane."""
    grid = action_to_frame_grid(a, cfg)
    idx, valid = _index_coords(grid, v.dims)
    clipped = np.clip(idx, 0.0, np.asarray(v.dims, dtype=np.float64) - 1.0)
    i0 = np.minimum(np.floor(clipped).astype(np.int64), np.asarray(v.dims) - 2)
    i0 = np.maximum(i0, 0)
    f = clipped - i0
    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    x1, y1, z1 = x0 + 1, y0 + 1, z0 + 1
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    d = v.data.astype(np.float64)
    c000 = d[x0, y0, z0]
    c100 = d[x1, y0, z0]
    c010 = d[x0, y1, z0]
    c110 = d[x1, y1, z0]
    c001 = d[x0, y0, z1]
    c101 = d[x1, y0, z1]
    c011 = d[x0, y1, z1]
    c111 = d[x1, y1, z1]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    value = c0 * (1 - fz) + c1 * fz
    pixels = np.where(valid.astype(bool), value, cfg.fill_value).astype(np.float32)
    return SliceFrame(pixels=pixels, valid=valid, action=a)


def render_labels(lv: LabelVolume, a: Action, cfg: RenderConfig) -> TargetFrame:
    """Nearest-neighbor label replay on the action's plane."""
    grid = action_to_frame_grid(a, cfg)
    idx, valid = _index_coords(grid, lv.dims)
    clipped = np.clip(idx, 0.0, np.asarray(lv.dims, dtype=np.float64) - 1.0)
    # Ties round half away from zero; indices are non-negative here.
    nearest = np.floor(clipped + 0.5).astype(np.int64)
    nearest = np.minimum(nearest, np.asarray(lv.dims) - 1)
    labels = lv.labels[nearest[..., 0], nearest[..., 1], nearest[..., 2]]
    labels = np.where(valid.astype(bool), labels, 0).astype(np.int32)
    return TargetFrame(valid=valid, labels=labels)


def render_coords(a: Action, cfg: RenderConfig, dims: tuple[int, int, int]) -> TargetFrame:
    """Per-pixel normalized 3D sample coordinates plus the validity mask."""
    grid = action_to_frame_grid(a, cfg)
    _, valid = _index_coords(grid, dims)
    coords = np.where(valid.astype(bool)[..., None], grid, 0.0).astype(np.float32)
    return TargetFrame(valid=valid, coords=coords)

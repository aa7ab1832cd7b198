"""Action-video trajectories: generation, label replay, storage, clip windows.

Dataset directory layout::

    dataset/
      manifest.json                  # version, seed, render config, convention,
                                     # per-trajectory entries with content hashes
      volumes/<subject>.rawv[.json]  # source volumes (and label volumes)
      traj_0000/
        actions.f32    (T, 8)   little-endian float32
        frames.f32     (T, H, W)
        valid.u8       (T, H, W)
        labels_region.i32  (T, H, W)     optional
        labels_tissue.i32  (T, H, W)     optional
        coords.f32     (T, H, W, 3)      optional

Writes are atomic (temp dir + rename); loads verify every content hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CorruptionError, DomainError, IncompleteError,
                     ShapeError, ValidationError)
from .nn.rng import SeedStream
from .slicer import (Action, RenderConfig, SliceFrame, TargetFrame,
                     render_coords, render_labels, render_slice)
from .volumes import LabelVolume, Volume, save_labels, save_volume

__all__ = [
    "ACTION_CONVENTION", "Trajectory", "TrajectoryDataset", "Clip",
    "smooth_random_walk", "sample_trajectory", "replay_targets",
    "attach_targets", "save_dataset", "load_dataset", "make_clips",
    "assign_splits",
]

ACTION_CONVENTION = "cube[-1,1];rot=Ry(pi*yaw)Rx(pi*pitch)Rz(pi*roll);scale=2^s;plane=x,z;normal=y"

DATASET_VERSION = 1

_TARGET_FILES = {
    "labels_region": ("labels_region.i32", "<i4"),
    "labels_tissue": ("labels_tissue.i32", "<i4"),
    "coords": ("coords.f32", "<f4"),
}


@dataclass
class Trajectory:
    frames: list[SliceFrame]
    actions: list[Action]
    subject_id: str
    stride: int = 4
    volume_dims: tuple[int, int, int] | None = None
    targets: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) != len(self.actions) or len(self.frames) < 2:
            raise DomainError(
                f"trajectory needs >= 2 aligned (frame, action) pairs, got "
                f"{len(self.frames)} frames / {len(self.actions)} actions")
        for t, (frame, action) in enumerate(zip(self.frames, self.actions)):
            if not np.array_equal(frame.action.as_array(), action.as_array()):
                raise ValidationError(f"frame {t} embeds a different action than actions[{t}]")

    def __len__(self) -> int:
        return len(self.frames)

    def pixel_stack(self) -> np.ndarray:
        return np.stack([f.pixels for f in self.frames])

    def valid_stack(self) -> np.ndarray:
        return np.stack([f.valid for f in self.frames])

    def action_matrix(self) -> np.ndarray:
        return np.stack([a.as_array() for a in self.actions])


@dataclass
class TrajectoryDataset:
    trajectories: list[Trajectory]
    split_of: dict[str, str]  # subject_id -> {train, val, test}
    manifest: dict

    def __post_init__(self):
        seen: dict[str, str] = {}
        for traj in self.trajectories:
            split = self.split_of.get(traj.subject_id)
            if split is None:
                raise ValidationError(f"subject {traj.subject_id!r} has no split")
            if seen.setdefault(traj.subject_id, split) != split:
                raise ValidationError(f"subject {traj.subject_id!r} appears in two splits")

    def split(self, name: str) -> list[Trajectory]:
        return [t for t in self.trajectories if self.split_of[t.subject_id] == name]


@dataclass
class Clip:
    frames: np.ndarray  # (K, H, W) float32
    valid: np.ndarray  # (K, H, W) uint8
    actions: np.ndarray  # (K, 8) float32
    subject_id: str
    end_index: int
    target: np.ndarray | None = None  # final-frame target
    target_valid: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# generation


def smooth_random_walk(seed: int, n_states: int, max_delta: float = 0.1,
                       init_span: float = 0.3, span: float = 1.0) -> np.ndarray:
    """Bounded random walk in action space, (n_states, 8) in [-span, span].

    ``span`` (<= 1) confines the walk to a sub-box of the action cube, the
    stand-in for how far a human recording session actually strays from
    canonical views; per-step deltas stay bounded by ``max_delta``.
    """
    rng = SeedStream(seed).child("walk")
    lo, hi = -min(span, 1.0), min(span, 1.0)
    states = np.empty((n_states, 8), dtype=np.float32)
    states[0] = rng.uniform(max(lo, -init_span), min(hi, init_span), (8,))
    for t in range(1, n_states):
        delta = rng.uniform(-max_delta, max_delta, (8,))
        states[t] = np.clip(states[t - 1] + delta, lo, hi)
    return states


def sample_trajectory(v: Volume, seed: int, T: int, stride: int = 4,
                      policy: str = "smooth_random", cfg: RenderConfig | None = None,
                      sweep_axis: int = 1, walk_span: float = 1.0,
                      subject_id: str = "") -> Trajectory:
    """Render a T-frame trajectory under a procedural action policy.

    smooth_random walks at single-state granularity and renders every
    stride-th state; axis_sweep sweeps one position component linearly over
    [-1, 1] across the T rendered frames.
    """
    if T < 2:
        raise DomainError(f"trajectory length {T} < 2")
    cfg = cfg or RenderConfig()
    if policy == "smooth_random":
        walk = smooth_random_walk(seed, (T - 1) * stride + 1, span=walk_span)
        action_rows = walk[::stride]
    elif policy == "axis_sweep":
        action_rows = np.zeros((T, 8), dtype=np.float32)
        action_rows[:, sweep_axis] = np.linspace(-1.0, 1.0, T)
    else:
        raise DomainError(f"unknown policy {policy!r}")
    actions = [Action.from_array(row) for row in action_rows]
    frames = [render_slice(v, a, cfg) for a in actions]
    return Trajectory(frames=frames, actions=actions, subject_id=subject_id,
                      stride=stride, volume_dims=v.dims)


def replay_targets(traj: Trajectory, target_source, cfg: RenderConfig,
                   kind: str) -> list[TargetFrame]:
    """Re-render the stored action sequence against a target volume.

    ``kind`` is {labels, coords}; for coords ``target_source`` is the volume
    dims tuple, otherwise a LabelVolume with dims matching the trajectory's
    source volume.
    """
    if kind == "coords":
        dims = tuple(target_source)
        if traj.volume_dims is not None and dims != tuple(traj.volume_dims):
            raise ShapeError(f"coord dims {dims} != trajectory volume dims {traj.volume_dims}")
        return [render_coords(a, cfg, dims) for a in traj.actions]
    if kind == "labels":
        lv: LabelVolume = target_source
        if traj.volume_dims is not None and tuple(lv.dims) != tuple(traj.volume_dims):
            raise ShapeError(f"label dims {lv.dims} != trajectory volume dims {traj.volume_dims}")
        return [render_labels(lv, a, cfg) for a in traj.actions]
    raise DomainError(f"unknown replay kind {kind!r}")


def attach_targets(traj: Trajectory, cfg: RenderConfig,
                   region: LabelVolume | None = None,
                   tissue: LabelVolume | None = None,
                   coords: bool = False) -> Trajectory:
    """Replay and store downstream targets alongside the frames."""
    if region is not None:
        tfs = replay_targets(traj, region, cfg, "labels")
        traj.targets["labels_region"] = np.stack([t.labels for t in tfs])
    if tissue is not None:
        tfs = replay_targets(traj, tissue, cfg, "labels")
        traj.targets["labels_tissue"] = np.stack([t.labels for t in tfs])
    if coords:
        tfs = replay_targets(traj, traj.volume_dims, cfg, "coords")
        traj.targets["coords"] = np.stack([t.coords for t in tfs])
    return traj


def assign_splits(subject_ids: list[str], ratios: tuple[float, float, float],
                  seed: int) -> dict[str, str]:
    """Seeded subject-level split; ratios (train, val, test) sum to 1."""
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise ValidationError(f"split ratios {ratios} must sum to 1")
    order = SeedStream(seed).child("split").permutation(len(subject_ids))
    shuffled = [subject_ids[i] for i in order]
    n = len(shuffled)
    n_val = int(round(ratios[1] * n))
    n_test = int(round(ratios[2] * n))
    n_train = n - n_val - n_test
    out = {}
    for i, sid in enumerate(shuffled):
        if i < n_train:
            out[sid] = "train"
        elif i < n_train + n_val:
            out[sid] = "val"
        else:
            out[sid] = "test"
    return out


# ---------------------------------------------------------------------------
# storage


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _traj_blobs(traj: Trajectory) -> dict[str, bytes]:
    blobs = {
        "actions.f32": traj.action_matrix().astype("<f4").tobytes(),
        "frames.f32": traj.pixel_stack().astype("<f4").tobytes(),
        "valid.u8": traj.valid_stack().astype(np.uint8).tobytes(),
    }
    for key, (fname, dtype) in _TARGET_FILES.items():
        if key in traj.targets:
            blobs[fname] = traj.targets[key].astype(dtype).tobytes()
    return blobs


def save_dataset(ds: TrajectoryDataset, path: str | Path,
                 volumes: dict[str, tuple[Volume, LabelVolume, LabelVolume]] | None = None) -> None:
    """Atomically write the dataset directory (temp dir + rename)."""
    path = Path(path)
    parent = path.parent
    parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".tmp.", dir=parent))
    try:
        entries = []
        for i, traj in enumerate(ds.trajectories):
            tdir = tmp / f"traj_{i:04d}"
            tdir.mkdir()
            blobs = _traj_blobs(traj)
            hashes = {}
            for fname, blob in blobs.items():
                (tdir / fname).write_bytes(blob)
                hashes[fname] = _sha256(blob)
            h, w = traj.frames[0].pixels.shape
            entries.append({
                "id": f"traj_{i:04d}",
                "subject_id": traj.subject_id,
                "split": ds.split_of[traj.subject_id],
                "length": len(traj),
                "stride": traj.stride,
                "frame_hw": [h, w],
                "volume_dims": list(traj.volume_dims) if traj.volume_dims else None,
                "hashes": hashes,
            })
        volume_hashes = {}
        if volumes:
            vdir = tmp / "volumes"
            vdir.mkdir()
            for sid, (vol, region, tissue) in sorted(volumes.items()):
                save_volume(vol, vdir / f"{sid}.rawv")
                save_labels(region, vdir / f"{sid}.region.rawv")
                save_labels(tissue, vdir / f"{sid}.tissue.rawv")
                volume_hashes[sid] = _sha256((vdir / f"{sid}.rawv").read_bytes())
        manifest = dict(ds.manifest)
        manifest.update({
            "version": DATASET_VERSION,
            "action_convention": ACTION_CONVENTION,
            "splits": ds.split_of,
            "trajectories": entries,
            "volume_hashes": volume_hashes,
        })
        (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
        if path.exists():
            shutil.rmtree(path)
        os.rename(tmp, path)
    except Exception:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _read_checked(path: Path, expected_hash: str) -> bytes:
    if not path.exists():
        raise IncompleteError(f"dataset file missing: {path}")
    blob = path.read_bytes()
    if _sha256(blob) != expected_hash:
        raise CorruptionError(f"content hash mismatch: {path}")
    return blob


def load_dataset(path: str | Path) -> TrajectoryDataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise IncompleteError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise CorruptionError(f"unsupported dataset version {manifest.get('version')}")
    trajectories = []
    for entry in manifest["trajectories"]:
        tdir = path / entry["id"]
        t_len = entry["length"]
        h, w = entry["frame_hw"]
        hashes = entry["hashes"]
        actions = np.frombuffer(
            _read_checked(tdir / "actions.f32", hashes["actions.f32"]), "<f4"
        ).reshape(t_len, 8)
        pixels = np.frombuffer(
            _read_checked(tdir / "frames.f32", hashes["frames.f32"]), "<f4"
        ).reshape(t_len, h, w)
        valid = np.frombuffer(
            _read_checked(tdir / "valid.u8", hashes["valid.u8"]), np.uint8
        ).reshape(t_len, h, w)
        action_objs = [Action.from_array(row) for row in actions]
        frames = [SliceFrame(pixels=pixels[t].astype(np.float32), valid=valid[t].copy(),
                             action=action_objs[t]) for t in range(t_len)]
        targets = {}
        for key, (fname, dtype) in _TARGET_FILES.items():
            if fname in hashes:
                blob = _read_checked(tdir / fname, hashes[fname])
                arr = np.frombuffer(blob, dtype)
                shape = (t_len, h, w, 3) if key == "coords" else (t_len, h, w)
                targets[key] = arr.reshape(shape).copy()
        traj = Trajectory(
            frames=frames, actions=action_objs, subject_id=entry["subject_id"],
            stride=entry["stride"],
            volume_dims=tuple(entry["volume_dims"]) if entry["volume_dims"] else None,
            targets=targets)
        trajectories.append(traj)
    return TrajectoryDataset(trajectories=trajectories,
                             split_of=dict(manifest["splits"]), manifest=manifest)


# ---------------------------------------------------------------------------
# clip windows


def make_clips(ds: TrajectoryDataset, k: int, task: str = "none",
               split: str | None = None) -> tuple[list[Clip], int]:
    """All maximal contiguous K-windows; targets attach to the final frame.

    Trajectories shorter than K are skipped; the skip count is returned so
    callers can warn.
    """
    target_key = {
        "region_seg": "labels_region",
        "tissue_seg": "labels_tissue",
        "coord_field": "coords",
        "none": None,
    }.get(task)
    if task != "none" and target_key is None:
        raise DomainError(f"unknown task {task!r}")
    source = ds.trajectories if split is None else ds.split(split)
    clips: list[Clip] = []
    skipped = 0
    for traj in source:
        t_len = len(traj)
        if k > t_len:
            skipped += 1
            continue
        if target_key is not None and target_key not in traj.targets:
            raise DomainError(f"trajectory lacks {target_key!r} targets for task {task!r}")
        pixels = traj.pixel_stack()
        valid = traj.valid_stack()
        actions = traj.action_matrix()
        for end in range(k - 1, t_len):
            start = end - k + 1
            clip = Clip(
                frames=pixels[start:end + 1], valid=valid[start:end + 1],
                actions=actions[start:end + 1], subject_id=traj.subject_id,
                end_index=end)
            if target_key is not None:
                clip.target = traj.targets[target_key][end]
                clip.target_valid = valid[end]
            clips.append(clip)
    return clips, skipped

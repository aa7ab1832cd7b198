"""Config-driven pipeline: data generation, pretraining, probing, reports.

Every artifact directory gets a ``resolved_config.json`` embedding the full
config plus its hash and the action-geometry convention tag; `compare`
refuses to mix artifacts whose conventions disagree.
"""

from __future__ import annotations

import dataclasses
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from . import report
from .config import ExperimentConfig, config_hash, resolved_config_json
from .diagnostics import ratio_curves, summarize_action_use
from .dynamics import LatentDynamics, extract_features
from .errors import ConfigError, IncompleteError
from .probes import ProbeHead, context_sweep, run_comparison
from .slicer import ACTION_DIM, RenderConfig
from .tokenizer import SliceTokenizer
from .trajectory import (ACTION_CONVENTION, TrajectoryDataset, assign_splits,
                         attach_targets, load_dataset, make_clips,
                         sample_trajectory, save_dataset)
from .volumes import gen_phantom

__all__ = [
    "render_config", "generate_dataset", "pretrain_tokenizer",
    "pretrain_dynamics", "load_backbone", "build_clipset", "run_probe",
    "run_compare", "run_sweep", "run_diagnose", "run_full_pipeline",
]


def render_config(cfg: ExperimentConfig) -> RenderConfig:
    r = cfg.render
    return RenderConfig(out_h=r.out_h, out_w=r.out_w, base_extent=r.base_extent,
                        fill_value=r.fill_value)


def _write_resolved_config(cfg: ExperimentConfig, target: Path) -> None:
    payload = json.loads(resolved_config_json(cfg))
    payload["config_hash"] = config_hash(cfg)
    payload["action_convention"] = ACTION_CONVENTION
    target.write_text(json.dumps(payload, sort_keys=True, indent=1))


def _check_convention(*artifact_dirs: Path) -> None:
    tags = {}
    for d in artifact_dirs:
        path = Path(d) / "resolved_config.json"
        if not path.exists():
            continue
        data = json.loads(path.read_text())
        tags[str(d)] = (data.get("action_convention"),
                        json.dumps(data.get("render"), sort_keys=True))
    if len(set(tags.values())) > 1:
        raise ConfigError(f"artifacts mix render conventions: {tags}",
                          code="convention_mismatch")


class _AtomicDir:
    """Build an artifact directory in a temp sibling, then swap it in."""

    def __init__(self, final: Path):
        self.final = Path(final)

    def __enter__(self) -> Path:
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=self.final.name + ".tmp.",
                                         dir=self.final.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.final.exists():
            shutil.rmtree(self.final)
        os.rename(self.tmp, self.final)
        return False


# ---------------------------------------------------------------------------
# stages


def generate_dataset(cfg: ExperimentConfig) -> Path:
    """Phantom subjects -> trajectories with replayed targets, atomically."""
    out = Path(cfg.out_dir) / "dataset"
    rc = render_config(cfg)
    d = cfg.data
    subject_ids = [f"subj_{i:03d}" for i in range(d.subjects)]
    split_of = assign_splits(subject_ids, tuple(d.split_ratios), cfg.seed)
    trajectories = []
    volumes = {}
    for i, sid in enumerate(subject_ids):
        vol, region, tissue = gen_phantom(cfg.seed * 1000 + i, tuple(d.dims))
        volumes[sid] = (vol, region, tissue)
        for j in range(d.trajectories_per_subject):
            traj = sample_trajectory(
                vol, seed=cfg.seed * 100_000 + i * 1000 + j,
                T=d.frames_per_trajectory, stride=d.stride, policy=d.policy,
                cfg=rc, walk_span=d.walk_span, subject_id=sid)
            attach_targets(traj, rc,
                           region=region if "region" in d.targets else None,
                           tissue=tissue if "tissue" in d.targets else None,
                           coords="coords" in d.targets)
            trajectories.append(traj)
    ds = TrajectoryDataset(trajectories=trajectories, split_of=split_of,
                           manifest={"seed": cfg.seed,
                                     "render": dataclasses.asdict(cfg.render),
                                     "config_hash": config_hash(cfg)})
    save_dataset(ds, out, volumes=volumes)
    _write_resolved_config(cfg, out / "resolved_config.json")
    return out


def _dataset(cfg: ExperimentConfig) -> TrajectoryDataset:
    path = Path(cfg.out_dir) / "dataset"
    if not path.exists():
        raise ConfigError(f"dataset missing at {path}; run gen-data first",
                          code="missing_dataset")
    return load_dataset(path)


def pretrain_tokenizer(cfg: ExperimentConfig, dataset: TrajectoryDataset | None = None,
                       seed: int | None = None, out_subdir: str = "tokenizer") -> SliceTokenizer:
    dataset = dataset or _dataset(cfg)
    seed = cfg.seed if seed is None else seed
    frames = np.concatenate([t.pixel_stack() for t in dataset.split("train")])
    t = cfg.tokenizer
    out = Path(cfg.out_dir) / out_subdir
    with _AtomicDir(out) as tmp:
        tok = SliceTokenizer(
            patch_size=t.patch_size, width=t.width, depth=t.depth, heads=t.heads,
            dec_width=t.dec_width, dec_depth=t.dec_depth, mlp_ratio=t.mlp_ratio,
            mask_ratio=t.mask_ratio, lambda_perc=t.lambda_perc, steps=t.steps,
            batch_size=t.batch_size, lr=t.lr, weight_decay=t.weight_decay,
            warmup=t.warmup, seed=seed, log_path=str(tmp / "log.jsonl"))
        tok.fit(frames)
        tok.save(tmp / "ckpt")
        _write_resolved_config(cfg, tmp / "resolved_config.json")
    tok.log_path = None
    return tok


def pretrain_dynamics(cfg: ExperimentConfig, tok: SliceTokenizer,
                      dataset: TrajectoryDataset | None = None,
                      action_mode: str = "real", seed: int | None = None,
                      out_subdir: str | None = None) -> LatentDynamics:
    dataset = dataset or _dataset(cfg)
    seed = cfg.seed if seed is None else seed
    out = Path(cfg.out_dir) / (out_subdir or f"dynamics_{action_mode}")
    d = cfg.dynamics
    train = dataset.split("train")
    z_list = [tok.transform(t.pixel_stack()) for t in train]
    a_list = [t.action_matrix() for t in train]
    with _AtomicDir(out) as tmp:
        dyn = LatentDynamics(
            width=d.width, depth=d.depth, heads=d.heads, pack_window=d.pack_window,
            context=d.context, m_max=d.m_max, lambda_sc=d.lambda_sc,
            weighting=d.weighting, steps=d.steps, batch_size=d.batch_size,
            lr=d.lr, weight_decay=d.weight_decay, action_mode=action_mode,
            diag_every=d.diag_every, diag_sigma=d.diag_sigma, seed=seed,
            log_path=str(tmp / "log.jsonl"))
        dyn.fit(z_list, a_list, token_grid_hw=tok.core_.grid_hw)
        dyn.save(tmp / "ckpt")
        _write_resolved_config(cfg, tmp / "resolved_config.json")
    dyn.log_path = None
    return dyn


def load_backbone(cfg: ExperimentConfig, method: str,
                  base_dir: Path | None = None) -> tuple[SliceTokenizer, LatentDynamics | None]:
    """Load (tokenizer, dynamics|None) for a method name from artifact dirs."""
    base = Path(base_dir) if base_dir else Path(cfg.out_dir)
    tok_dir = base / "tokenizer"
    if not (tok_dir / "ckpt.meta.json").exists():
        raise ConfigError(f"missing tokenizer checkpoint under {tok_dir}",
                          code="missing_backbone")
    tok = SliceTokenizer.load(tok_dir / "ckpt")
    if method == "tokenizer_only":
        return tok, None
    sub = {"no_action_dyn": "dynamics_zero", "action_cond_dyn": "dynamics_real"}.get(method)
    if sub is None:
        raise ConfigError(f"unknown method {method!r}", code="unknown_method")
    dyn_dir = base / sub
    if not (dyn_dir / "ckpt.meta.json").exists():
        raise ConfigError(f"missing dynamics checkpoint under {dyn_dir}",
                          code="missing_backbone")
    _check_convention(tok_dir, dyn_dir)
    return tok, LatentDynamics.load(dyn_dir / "ckpt")


# ---------------------------------------------------------------------------
# features


_TASK_NUM_CLASSES_KEY = {"region_seg": "labels_region", "tissue_seg": "labels_tissue"}


def dataset_num_classes(dataset: TrajectoryDataset, task: str) -> int | None:
    key = _TASK_NUM_CLASSES_KEY.get(task)
    if key is None:
        return None
    top = 0
    for traj in dataset.trajectories:
        if key in traj.targets:
            top = max(top, int(traj.targets[key].max()))
    return top + 1


def _extract_batched(dyn, tok, frames, actions, grid_hw, window, m_max,
                     zero_actions, batch=64):
    outs = []
    for start in range(0, frames.shape[0], batch):
        outs.append(extract_features(
            dyn, tok.core_, frames[start:start + batch],
            actions[start:start + batch], grid_hw, window, m_max,
            zero_actions=zero_actions))
    return np.concatenate(outs)


def build_clipset(cfg: ExperimentConfig, dataset: TrajectoryDataset,
                  tok: SliceTokenizer, dyn: LatentDynamics | None, task: str,
                  k: int, zero_actions: bool = False,
                  feature_cache: dict | None = None,
                  splits=("train", "val", "test")) -> dict:
    """Precompute frozen features + targets per split for one (backbone, K)."""
    grid_hw = tok.core_.grid_hw
    d = cfg.dynamics
    clipset = {"grid_hw": grid_hw,
               "frame_hw": (cfg.render.out_h, cfg.render.out_w),
               "k": k, "task": task}
    for split in splits:
        clips, _ = make_clips(dataset, k=k, task=task, split=split)
        if not clips:
            raise IncompleteError(f"no clips for split {split!r} at K={k}")
        cache_key = (id(dyn), split, k, zero_actions)
        if feature_cache is not None and cache_key in feature_cache:
            feats = feature_cache[cache_key]
        else:
            frames = np.stack([c.frames for c in clips])
            actions = np.stack([c.actions for c in clips])
            feats = _extract_batched(
                dyn.core_ if dyn is not None else None, tok, frames, actions,
                grid_hw, d.pack_window, d.m_max, zero_actions)
            if feature_cache is not None:
                feature_cache[cache_key] = feats
        clipset[split] = {
            "features": feats,
            "targets": np.stack([c.target for c in clips]),
            "valid": np.stack([c.target_valid for c in clips]),
        }
    return clipset


# ---------------------------------------------------------------------------
# protocol runners


def run_probe(cfg: ExperimentConfig, task: str, k: int | None = None,
              method: str = "action_cond_dyn") -> dict:
    """Train one probe on the main pretrained backbone; report val/test metrics."""
    dataset = _dataset(cfg)
    tok, dyn = load_backbone(cfg, method)
    _check_convention(Path(cfg.out_dir) / "dataset", Path(cfg.out_dir) / "tokenizer")
    k = k or cfg.probe.k
    p = cfg.probe
    clipset = build_clipset(cfg, dataset, tok, dyn, task, k,
                            zero_actions=(method == "no_action_dyn"))
    nc = dataset_num_classes(dataset, task)
    head = ProbeHead(task=task, num_classes=nc, hidden=p.hidden, epochs=p.epochs,
                     lr=p.lr, batch_size=p.batch_size, seed=cfg.seed)
    head.fit(clipset["train"]["features"], clipset["train"]["targets"],
             clipset["train"]["valid"], grid_hw=clipset["grid_hw"],
             frame_hw=clipset["frame_hw"],
             val=(clipset["val"]["features"], clipset["val"]["targets"],
                  clipset["val"]["valid"]))
    test_metrics = head.evaluate(clipset["test"]["features"],
                                 clipset["test"]["targets"],
                                 clipset["test"]["valid"])
    out = Path(cfg.out_dir) / "probes" / f"{method}_{task}_k{k}"
    with _AtomicDir(out) as tmp:
        head.core_.params.save(tmp / "head")
        payload = {
            "task": task, "k": k, "method": method, "seed": cfg.seed,
            "val_curve": head.val_curve_,
            "best_val": getattr(head, "best_val_", None),
            "test": dataclasses.asdict(test_metrics),
            "skipped_batches": head.skipped_batches_,
        }
        report.write_json(tmp / "metrics.json", payload)
        report.plot_curves({"val": head.val_curve_}, tmp / "val_curve.svg",
                           xlabel="epoch", ylabel="val metric")
        _write_resolved_config(cfg, tmp / "resolved_config.json")
    return payload


def _train_backbones_for_seed(cfg: ExperimentConfig, dataset: TrajectoryDataset,
                              seed: int, base: Path) -> dict:
    """tokenizer + real/zero dynamics for one seed, cached under ``base``."""
    from .config import load_config
    sub = load_config(dataclasses.asdict(cfg))  # deep copy
    sub.out_dir = str(base)
    marker = base / "done.json"
    if marker.exists():
        tok = SliceTokenizer.load(base / "tokenizer" / "ckpt")
        dyn_real = LatentDynamics.load(base / "dynamics_real" / "ckpt")
        dyn_zero = LatentDynamics.load(base / "dynamics_zero" / "ckpt")
    else:
        tok = pretrain_tokenizer(sub, dataset, seed=seed)
        dyn_real = pretrain_dynamics(sub, tok, dataset, action_mode="real", seed=seed)
        dyn_zero = pretrain_dynamics(sub, tok, dataset, action_mode="zero", seed=seed)
        marker.write_text(json.dumps({"seed": seed}))
    return {"tokenizer_only": (tok, None, False),
            "no_action_dyn": (tok, dyn_zero, True),
            "action_cond_dyn": (tok, dyn_real, False)}


def run_compare(cfg: ExperimentConfig) -> dict:
    """Table-1-shaped grid over methods x epochs x tasks, per-seed + means."""
    dataset = _dataset(cfg)
    _check_convention(Path(cfg.out_dir) / "dataset")
    comp = cfg.compare
    k = cfg.probe.k
    clipsets: dict = {}
    for seed in comp.seeds:
        base = Path(cfg.out_dir) / "compare" / f"seed_{seed}"
        backbones = _train_backbones_for_seed(cfg, dataset, seed, base)
        cache: dict = {}
        clipsets[seed] = {}
        for method, (tok, dyn, zero_actions) in backbones.items():
            clipsets[seed][method] = {}
            for task in comp.tasks:
                clipsets[seed][method][task] = build_clipset(
                    cfg, dataset, tok, dyn, task, k, zero_actions=zero_actions,
                    feature_cache=cache)
    num_classes = {t: dataset_num_classes(dataset, t) for t in comp.tasks}
    table = run_comparison(clipsets, comp.tasks, epochs=tuple(comp.epochs),
                           seeds=tuple(comp.seeds), num_classes=num_classes,
                           hidden=cfg.probe.hidden, lr=cfg.probe.lr,
                           batch_size=cfg.probe.batch_size)
    table["paper_reference"] = {
        "note": "paper-scale values, not reproducible at desk scale",
        "epoch5_region_dice": {"tokenizer_only": 0.5449, "no_action_dyn": 0.5721,
                               "action_cond_dyn": 0.5736},
        "epoch5_coord_mae": {"tokenizer_only": 0.0117, "no_action_dyn": 0.0090,
                             "action_cond_dyn": 0.0090},
    }
    out = Path(cfg.out_dir) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "compare.json", table)
    (out / "compare.txt").write_text(report.comparison_table_text(table))
    return table


def run_sweep(cfg: ExperimentConfig) -> dict:
    """Table-3-shaped context-length sweep on the action-cond backbone."""
    dataset = _dataset(cfg)
    tok, dyn = load_backbone(cfg, "action_cond_dyn")
    sweep = cfg.sweep
    cache: dict = {}
    clipsets_by_k = {}
    for k in sweep.ks:
        if k > cfg.dynamics.context:
            raise ConfigError(
                f"sweep K={k} exceeds dynamics context {cfg.dynamics.context}",
                code="context_too_short")
        clipsets_by_k[k] = {
            task: build_clipset(cfg, dataset, tok, dyn, task, k,
                                feature_cache=cache)
            for task in sweep.tasks
        }
    num_classes = {t: dataset_num_classes(dataset, t) for t in sweep.tasks}
    test_clips = {k: make_clips(dataset, k=k, split="test")[0][:1]
                  for k in sweep.ks}
    heads = {k: ProbeHead(task="coord_field", hidden=cfg.probe.hidden,
                          epochs=1, seed=0) for k in sweep.ks}
    grid_hw = tok.core_.grid_hw
    frame_hw = (cfg.render.out_h, cfg.render.out_w)
    for k, head in heads.items():
        feats = clipsets_by_k[k]["coord_field"]["train"]["features"][:2]
        targets = clipsets_by_k[k]["coord_field"]["train"]["targets"][:2]
        valid = clipsets_by_k[k]["coord_field"]["train"]["valid"][:2]
        head.fit(feats, targets, valid, grid_hw=grid_hw, frame_hw=frame_hw)

    def forward_fn(k: int) -> None:
        clip = test_clips[k][0]
        feats = extract_features(dyn.core_, tok.core_, clip.frames, clip.actions,
                                 grid_hw, cfg.dynamics.pack_window, cfg.dynamics.m_max)
        heads[k].predict(feats[None])

    table = context_sweep(clipsets_by_k, sweep.tasks, tuple(sweep.seeds),
                          sweep.epochs, forward_fn, num_classes=num_classes,
                          hidden=cfg.probe.hidden, lr=cfg.probe.lr,
                          batch_size=cfg.probe.batch_size,
                          latency_runs=sweep.latency_runs)
    table["paper_reference"] = {
        "note": "paper-scale values, not reproducible at desk scale",
        "K16_region_dice": 0.6749, "K16_coord_mae": 0.0085,
    }
    out = Path(cfg.out_dir) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "sweep.json", table)
    (out / "sweep.txt").write_text(report.sweep_table_text(table))
    return table


def run_diagnose(cfg: ExperimentConfig) -> dict:
    """Ratio curves + tail means from the two dynamics training logs."""
    out = Path(cfg.out_dir) / "diagnostics"
    summary = {}
    for mode in ("real", "zero"):
        log_path = Path(cfg.out_dir) / f"dynamics_{mode}" / "log.jsonl"
        if not log_path.exists():
            raise ConfigError(
                f"missing dynamics log {log_path}; run pretrain-dynamics "
                f"--action-mode {mode}", code="missing_backbone")
        records = [json.loads(line) for line in log_path.read_text().splitlines()]
        diag = [r for r in records if "ratio_zero" in r]
        if not diag:
            raise ConfigError(f"no diagnostic records in {log_path}; "
                              f"set dynamics.diag_every > 0", code="no_diagnostics")
        out.mkdir(parents=True, exist_ok=True)
        ratio_curves(diag, window=25, out_base=out / f"ratios_{mode}")
        summary[mode] = summarize_action_use(diag, tail=100)
    summary["verdict"] = {
        "real_zero_over_base": summary["real"]["mean_ratio_zero"],
        "real_shuffle_over_base": summary["real"]["mean_ratio_shuffle"],
        "zero_shuffle_over_base": summary["zero"]["mean_ratio_shuffle"],
        "real_action_use": bool(summary["real"]["mean_ratio_zero"] > 1.05
                                and summary["real"]["mean_ratio_shuffle"] > 1.05),
        "zero_control_flat": bool(0.95 <= summary["zero"]["mean_ratio_shuffle"] <= 1.05),
    }
    report.write_json(out / "summary.json", summary)
    return summary


def run_full_pipeline(cfg: ExperimentConfig) -> dict:
    """gen-data -> tokenizer -> dynamics(real+zero) -> probe -> diagnose -> compare."""
    generate_dataset(cfg)
    dataset = _dataset(cfg)
    tok = pretrain_tokenizer(cfg, dataset)
    pretrain_dynamics(cfg, tok, dataset, action_mode="real")
    pretrain_dynamics(cfg, tok, dataset, action_mode="zero")
    probe_result = run_probe(cfg, task="coord_field")
    diagnose = run_diagnose(cfg)
    table = run_compare(cfg)
    return {"probe": probe_result, "diagnose": diagnose["verdict"],
            "compare_rows": len(table["rows"])}

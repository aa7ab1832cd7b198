"""Frozen-feature probes: lightweight heads plus Dice/mIoU/MAE metrics.

A probe head is two linear layers with a nonlinearity applied per token,
broadcast to pixels through a fixed bilinear-interpolation matrix from the
token grid to the frame grid. Backbones stay frozen: heads own their
parameters and optimizers exclusively.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import DomainError, ShapeError
from .nn import AdamW, ModelParams, SeedStream, Tape
from .nn import engine as en
from .nn.layers import Linear

__all__ = [
    "ProbeMetrics", "dice_miou", "masked_mae", "bilinear_upsample_matrix",
    "ProbeHead", "probe_train", "run_comparison", "context_sweep",
]


@dataclass
class ProbeMetrics:
    mean_dice: float | None = None
    mean_iou: float | None = None
    per_class_dice: dict[int, float] = field(default_factory=dict)
    mae: float | None = None
    per_axis_mae: tuple[float, float, float] | None = None

    def primary(self, task: str) -> float:
        return self.mae if task == "coord_field" else self.mean_dice


def dice_miou(pred_labels: np.ndarray, true_labels: np.ndarray,
              valid: np.ndarray, num_classes: int | None = None) -> ProbeMetrics:
    """Macro Dice and mIoU over valid pixels; classes absent from both the
    prediction and the truth are excluded from the means."""
    pred = np.asarray(pred_labels).reshape(-1)
    true = np.asarray(true_labels).reshape(-1)
    mask = np.asarray(valid).reshape(-1).astype(bool)
    if pred.shape != true.shape or pred.shape != mask.shape:
        raise ShapeError(f"dice shapes differ: {pred.shape}/{true.shape}/{mask.shape}")
    pred = pred[mask]
    true = true[mask]
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), true.max(initial=0))) + 1
    per_class = {}
    ious = {}
    for c in range(num_classes):
        in_p = pred == c
        in_t = true == c
        p, t = int(in_p.sum()), int(in_t.sum())
        if p + t == 0:
            continue
        both = int((in_p & in_t).sum())
        per_class[c] = 2.0 * both / (p + t)
        union = p + t - both
        ious[c] = both / union if union else 0.0
    if not per_class:
        raise DomainError("no class present in prediction or truth")
    return ProbeMetrics(
        mean_dice=float(np.mean(list(per_class.values()))),
        mean_iou=float(np.mean(list(ious.values()))),
        per_class_dice=per_class)


def masked_mae(pred_coords: np.ndarray, true_coords: np.ndarray,
               valid: np.ndarray) -> ProbeMetrics:
    """Mean |error| over valid pixels and the 3 axes, plus per-axis means."""
    pred = np.asarray(pred_coords, dtype=np.float64).reshape(-1, 3)
    true = np.asarray(true_coords, dtype=np.float64).reshape(-1, 3)
    mask = np.asarray(valid).reshape(-1).astype(bool)
    if pred.shape != true.shape or mask.shape[0] != pred.shape[0]:
        raise ShapeError(f"mae shapes differ: {pred.shape}/{true.shape}/{mask.shape}")
    if mask.sum() == 0:
        raise DomainError("masked_mae needs at least one valid pixel")
    err = np.abs(pred[mask] - true[mask])
    per_axis = err.mean(axis=0)
    return ProbeMetrics(mae=float(per_axis.mean()),
                        per_axis_mae=tuple(float(v) for v in per_axis))


# ---------------------------------------------------------------------------
# head


def bilinear_upsample_matrix(grid_hw: tuple[int, int], frame_hw: tuple[int, int]) -> np.ndarray:
    """(H*W, L) interpolation matrix from token-grid centers to pixels."""
    gh, gw = grid_hw
    h, w = frame_hw
    ps_h, ps_w = h / gh, w / gw
    mat = np.zeros((h * w, gh * gw), dtype=np.float32)
    for y in range(h):
        ty = np.clip((y + 0.5) / ps_h - 0.5, 0.0, gh - 1.0)
        y0 = min(int(np.floor(ty)), gh - 2) if gh > 1 else 0
        fy = ty - y0 if gh > 1 else 0.0
        for x in range(w):
            tx = np.clip((x + 0.5) / ps_w - 0.5, 0.0, gw - 1.0)
            x0 = min(int(np.floor(tx)), gw - 2) if gw > 1 else 0
            fx = tx - x0 if gw > 1 else 0.0
            row = y * w + x
            mat[row, y0 * gw + x0] += (1 - fy) * (1 - fx)
            if gw > 1:
                mat[row, y0 * gw + x0 + 1] += (1 - fy) * fx
            if gh > 1:
                mat[row, (y0 + 1) * gw + x0] += fy * (1 - fx)
            if gh > 1 and gw > 1:
                mat[row, (y0 + 1) * gw + x0 + 1] += fy * fx
    return mat


class _HeadCore:
    def __init__(self, d_in: int, hidden: int, channels: int,
                 grid_hw: tuple[int, int], frame_hw: tuple[int, int], seed: int):
        rng = SeedStream(seed).child("probe-init")
        store = ModelParams()
        self.params = store
        self.fc1 = Linear(store, "fc1", d_in, hidden, rng.child("fc1"))
        # zero-init output: predictions start at the all-zero baseline
        self.fc2 = Linear(store, "fc2", hidden, channels, rng.child("fc2"),
                          zero_init=True)
        self.upsample = en.constant(bilinear_upsample_matrix(grid_hw, frame_hw))
        self.frame_hw = tuple(frame_hw)
        self.channels = channels

    def forward(self, feats: np.ndarray) -> "en.Tensor":
        """(B, L, D) token features -> (B, H*W, C) per-pixel outputs."""
        x = self.fc2(en.gelu(self.fc1(en.constant(feats))))
        return en.matmul(self.upsample, x)


class ProbeHead(BaseEstimator):
    """Task head over frozen per-token features.

    fit(F, Y, valid) trains with cross-entropy (segmentation, valid-masked)
    or L1 (coordinates); predict(F) returns labels or coordinate fields.
    """

    def __init__(self, task="coord_field", num_classes=None, hidden=64,
                 epochs=5, lr=3e-3, weight_decay=0.01, batch_size=16, seed=0):
        self.task = task
        self.num_classes = num_classes
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.seed = seed

    # ------------------------------------------------------------------

    def _loss(self, core: _HeadCore, feats, targets, valid) -> "en.Tensor | None":
        b = feats.shape[0]
        hw = core.frame_hw[0] * core.frame_hw[1]
        weights = valid.reshape(b, hw).astype(np.float64)
        total = weights.sum()
        if total == 0:
            return None
        out = core.forward(feats)
        if self.task == "coord_field":
            target = en.constant(targets.reshape(b, hw, 3).astype(np.float64))
            diff = en.tabs(en.sub(en.cast(out, np.float64), target))
            masked = en.mul(diff, en.constant(weights[..., None]))
            return en.div(en.tsum(masked), float(total * 3.0))
        logits = en.reshape(out, (b * hw, core.channels))
        logp = en.take_classes(en.log_softmax(logits),
                               targets.reshape(-1).astype(np.int64))
        nll = en.neg(en.mul(logp, en.constant(weights.reshape(-1))))
        return en.div(en.tsum(nll), float(total))

    def fit(self, F, Y, valid, grid_hw=None, frame_hw=None, val=None):
        feats = np.asarray(F, dtype=np.float32)
        if grid_hw is None or frame_hw is None:
            raise DomainError("fit needs grid_hw and frame_hw")
        if self.task in ("region_seg", "tissue_seg") and not self.num_classes:
            raise DomainError("segmentation probes need num_classes")
        channels = 3 if self.task == "coord_field" else int(self.num_classes)
        self.core_ = _HeadCore(feats.shape[-1], self.hidden, channels,
                               grid_hw, frame_hw, self.seed)
        opt = AdamW(self.core_.params, lr=self.lr, weight_decay=self.weight_decay)
        stream = SeedStream(self.seed).child("probe-batches")
        self.skipped_batches_ = 0
        self.val_curve_ = []
        n = feats.shape[0]
        targets = np.asarray(Y)
        valid = np.asarray(valid)
        best_metric = None
        best_params = None
        for epoch in range(self.epochs):
            order = stream.child(f"epoch/{epoch}").permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                opt.zero_grad()
                with Tape() as tape:
                    loss = self._loss(self.core_, feats[idx], targets[idx], valid[idx])
                    if loss is None:
                        self.skipped_batches_ += 1
                        continue
                    tape.backward(loss)
                opt.step()
            if val is not None:
                metric = self.evaluate(*val).primary(self.task)
                self.val_curve_.append(metric)
                better = (best_metric is None
                          or (metric < best_metric if self.task == "coord_field"
                              else metric > best_metric))
                if better:
                    best_metric = metric
                    best_params = {name: t.data.copy()
                                   for name, t in self.core_.params.items()}
        if best_params is not None:
            for name, t in self.core_.params.items():
                t.data = best_params[name]
            self.best_val_ = best_metric
        return self

    def _check_fitted(self):
        if not hasattr(self, "core_"):
            raise NotFittedError("ProbeHead is not fitted")

    def predict(self, F, batch: int = 256) -> np.ndarray:
        self._check_fitted()
        feats = np.asarray(F, dtype=np.float32)
        h, w = self.core_.frame_hw
        outs = []
        with en.no_grad():
            for start in range(0, feats.shape[0], batch):
                out = self.core_.forward(feats[start:start + batch]).data
                outs.append(out)
        out = np.concatenate(outs)
        if self.task == "coord_field":
            return out.reshape(-1, h, w, 3)
        return out.argmax(axis=-1).reshape(-1, h, w).astype(np.int32)

    def evaluate(self, F, Y, valid) -> ProbeMetrics:
        self._check_fitted()
        pred = self.predict(F)
        if self.task == "coord_field":
            return masked_mae(pred, Y, valid)
        return dice_miou(pred, Y, valid, num_classes=self.num_classes)


# ---------------------------------------------------------------------------
# protocol ops


def probe_train(backbone, clipset, task: str, epochs: int, seed: int,
                hidden: int = 64, lr: float = 3e-3, batch_size: int = 16,
                num_classes: int | None = None) -> tuple[ProbeHead, list[float]]:
    """Train a head on frozen features; returns (best-val head, val curve).

    ``backbone`` is a FeatureBackbone; ``clipset`` holds precomputed features
    and targets for the train and val splits (see experiments.build_clipset).
    """
    head = ProbeHead(task=task, num_classes=num_classes, hidden=hidden,
                     epochs=epochs, lr=lr, batch_size=batch_size, seed=seed)
    head.fit(clipset["train"]["features"], clipset["train"]["targets"],
             clipset["train"]["valid"], grid_hw=clipset["grid_hw"],
             frame_hw=clipset["frame_hw"],
             val=(clipset["val"]["features"], clipset["val"]["targets"],
                  clipset["val"]["valid"]))
    return head, head.val_curve_


def run_comparison(clipsets_by_seed_method: dict, tasks: list[str],
                   epochs: tuple[int, ...] = (1, 3, 5), seeds: tuple[int, ...] = (0, 1, 2),
                   num_classes: dict | None = None, hidden: int = 64,
                   lr: float = 3e-3, batch_size: int = 16) -> dict:
    """Method-comparison grid: rows epoch x method, columns per-task metrics.

    For each (seed, method, task) one head trains for max(epochs) epochs and
    the validation metric is read at each epoch budget (training is
    deterministic, so epoch-k state equals a k-epoch run).
    """
    methods = ("tokenizer_only", "no_action_dyn", "action_cond_dyn")
    cells: dict = {}
    for seed in seeds:
        for method in methods:
            clipset_by_task = clipsets_by_seed_method[seed][method]
            for task in tasks:
                clipset = clipset_by_task[task]
                nc = (num_classes or {}).get(task)
                head = ProbeHead(task=task, num_classes=nc, hidden=hidden,
                                 epochs=max(epochs), lr=lr,
                                 batch_size=batch_size, seed=seed)
                head.fit(clipset["train"]["features"], clipset["train"]["targets"],
                         clipset["train"]["valid"], grid_hw=clipset["grid_hw"],
                         frame_hw=clipset["frame_hw"],
                         val=(clipset["val"]["features"], clipset["val"]["targets"],
                              clipset["val"]["valid"]))
                for e in epochs:
                    cells[(e, method, task, seed)] = head.val_curve_[e - 1]
    table = {"epochs": list(epochs), "methods": list(methods), "tasks": list(tasks),
             "seeds": list(seeds), "rows": []}
    for e in epochs:
        for method in methods:
            row = {"epoch": e, "method": method}
            for task in tasks:
                vals = [cells[(e, method, task, s)] for s in seeds]
                row[task] = {"per_seed": vals, "mean": float(np.mean(vals))}
            table["rows"].append(row)
    return table


def context_sweep(clipsets_by_k: dict, tasks: list[str], seeds: tuple[int, ...],
                  epochs: int, forward_fn, num_classes: dict | None = None,
                  hidden: int = 64, lr: float = 3e-3, batch_size: int = 16,
                  latency_runs: int = 100) -> dict:
    """Accuracy/latency/memory per context length K.

    ``forward_fn(k)`` must run one full batch-1 forward (feature extraction
    plus head) for latency/memory measurement.
    """
    rows = []
    for k, clipset_by_task in sorted(clipsets_by_k.items()):
        row = {"K": k}
        for task in tasks:
            clipset = clipset_by_task[task]
            nc = (num_classes or {}).get(task)
            per_seed = []
            for seed in seeds:
                head, _ = probe_train(None, clipset, task, epochs, seed,
                                      hidden=hidden, lr=lr, batch_size=batch_size,
                                      num_classes=nc)
                metrics = head.evaluate(clipset["test"]["features"],
                                        clipset["test"]["targets"],
                                        clipset["test"]["valid"])
                per_seed.append(metrics.primary(task))
            row[task] = {"per_seed": per_seed, "mean": float(np.mean(per_seed))}
        forward_fn(k)  # warmup
        times = []
        for _ in range(latency_runs):
            start = time.perf_counter()
            forward_fn(k)
            times.append(time.perf_counter() - start)
        tracemalloc.start()
        forward_fn(k)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        row["latency_ms"] = float(np.median(times) * 1e3)
        row["peak_mem_mb"] = float(peak / 1e6)
        rows.append(row)
    return {"tasks": list(tasks), "seeds": list(seeds), "rows": rows}

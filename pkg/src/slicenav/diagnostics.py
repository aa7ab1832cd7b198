"""Action-use diagnostics: does the trained dynamics model rely on correct
action-observation alignment?

Every evaluation reuses bit-identical corrupted latents, noise draws, and a
fixed sigma level; only the action stream differs between the three passes
(recorded / all-zero / within-clip shuffled). Nothing here touches
parameters or gradients.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError
from .nn import SeedStream
from .nn import engine as en

__all__ = ["ActionSwapReport", "action_swap_eval", "moving_average_centered",
           "ratio_curves", "summarize_action_use"]


@dataclass
class ActionSwapReport:
    step: int
    loss_real: float
    loss_zero: float
    loss_shuffle: float
    trained_mode: str  # which action stream the model was trained with

    def base(self) -> float:
        return self.loss_zero if self.trained_mode == "zero" else self.loss_real

    def ratios(self) -> dict:
        b = self.base()
        return {
            "ratio_zero": self.loss_zero / b,
            "ratio_shuffle": self.loss_shuffle / b,
            "diag_base": self.trained_mode,
        }


def _shuffled_actions(actions: np.ndarray, stream: SeedStream) -> np.ndarray:
    """Seeded temporal permutation within each clip."""
    out = actions.copy()
    for b in range(actions.shape[0]):
        perm = stream.child(f"clip/{b}").permutation(actions.shape[1])
        out[b] = actions[b, perm]
    return out


def action_swap_eval(core, z_clips: np.ndarray, action_clips: np.ndarray,
                     seed: int, step: int, sigma_level: float = 0.5,
                     weighting: str = "uniform", m_max: int = 3,
                     trained_mode: str = "real") -> ActionSwapReport:
    """Evaluate L_emp under real / zero / shuffled actions on identical inputs."""
    from .dynamics import _mix, emp_loss  # local import to avoid a cycle

    b, t = z_clips.shape[:2]
    stream = SeedStream(seed).child(f"diag/{step}")
    sigma = np.full((b, t), sigma_level, dtype=np.float32)
    delta = np.full((b, t), 0.5 ** m_max, dtype=np.float32)
    eps = stream.normal(z_clips.shape, dtype=z_clips.dtype)
    z_tilde = _mix(eps, z_clips, sigma)
    variants = {
        "real": action_clips,
        "zero": np.zeros_like(action_clips),
        "shuffle": _shuffled_actions(action_clips, stream.child("shuffle")),
    }
    losses = {}
    with en.no_grad():
        for name, acts in variants.items():
            pred = core.predict(z_tilde, acts, sigma, delta)
            losses[name] = float(emp_loss(pred, z_clips, sigma, weighting).data)
    return ActionSwapReport(step=step, loss_real=losses["real"],
                            loss_zero=losses["zero"],
                            loss_shuffle=losses["shuffle"],
                            trained_mode=trained_mode)


# ---------------------------------------------------------------------------
# curves


def moving_average_centered(series, window: int) -> np.ndarray:
    """Centered moving average with clipped windows at the edges."""
    series = np.asarray(series, dtype=np.float64)
    n = series.size
    if n == 0:
        raise DomainError("empty series")
    if window > n:
        window = n  # reduce with warning semantics; callers may log
    half = (window - 1) // 2
    out = np.empty(n)
    for i in range(n):
        lo = max(0, i - half)
        hi = min(n, i + window - half)
        out[i] = series[lo:hi].mean()
    return out


def ratio_curves(reports: list[ActionSwapReport] | list[dict], window: int = 25,
                 out_base: str | Path | None = None) -> dict:
    """Smoothed zero/base and shuffle/base ratio series; optional SVG + CSV."""
    if not reports:
        raise DomainError("no diagnostic reports")
    if isinstance(reports[0], ActionSwapReport):
        rows = [{"step": r.step, **r.ratios()} for r in reports]
    else:
        rows = [r for r in reports if "ratio_zero" in r]
    steps = np.array([r["step"] for r in rows])
    zero = np.array([r["ratio_zero"] for r in rows])
    shuffle = np.array([r["ratio_shuffle"] for r in rows])
    out = {
        "steps": steps,
        "ratio_zero_raw": zero,
        "ratio_shuffle_raw": shuffle,
        "ratio_zero": moving_average_centered(zero, window),
        "ratio_shuffle": moving_average_centered(shuffle, window),
    }
    if out_base is not None:
        out_base = Path(out_base)
        out_base.parent.mkdir(parents=True, exist_ok=True)
        with open(str(out_base) + ".csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "ratio_zero_raw", "ratio_shuffle_raw",
                             "ratio_zero_smooth", "ratio_shuffle_smooth"])
            for i in range(steps.size):
                writer.writerow([int(steps[i]), zero[i], shuffle[i],
                                 out["ratio_zero"][i], out["ratio_shuffle"][i]])
        _plot_ratios(out, str(out_base) + ".svg")
    return out


def _plot_ratios(curves: dict, path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(curves["steps"], curves["ratio_zero_raw"], color="tab:blue", alpha=0.25)
    ax.plot(curves["steps"], curves["ratio_shuffle_raw"], color="tab:orange", alpha=0.25)
    ax.plot(curves["steps"], curves["ratio_zero"], color="tab:blue", label="zero/base")
    ax.plot(curves["steps"], curves["ratio_shuffle"], color="tab:orange", label="shuffle/base")
    ax.axhline(1.0, color="gray", linewidth=0.8, linestyle="--")
    ax.set_xlabel("training step")
    ax.set_ylabel("loss ratio")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def summarize_action_use(reports, tail: int = 100) -> dict:
    """Mean ratios over the final ``tail`` diagnostic points."""
    if isinstance(reports[0], ActionSwapReport):
        rows = [{"step": r.step, **r.ratios()} for r in reports]
    else:
        rows = [r for r in reports if "ratio_zero" in r]
    tail_rows = rows[-tail:]
    return {
        "points": len(rows),
        "tail": len(tail_rows),
        "mean_ratio_zero": float(np.mean([r["ratio_zero"] for r in tail_rows])),
        "mean_ratio_shuffle": float(np.mean([r["ratio_shuffle"] for r in tail_rows])),
    }

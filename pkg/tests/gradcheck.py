"""Central finite-difference gradient oracle.

Independent of the tape: it re-evaluates the loss closure with perturbed
parameter entries and compares against whatever backward() accumulated.
Checks run on float64 model instances so h=1e-3 truncation dominates
roundoff.
"""

from __future__ import annotations

import numpy as np

from slicenav.nn import Tape
from slicenav.nn.params import ModelParams


def fd_gradients(build_loss, store: ModelParams, h: float = 1e-3) -> dict[str, np.ndarray]:
    grads = {}
    for name, p in store.items():
        g = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = build_loss().item()
            flat[i] = orig - h
            lm = build_loss().item()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * h)
        grads[name] = g
    return grads


def check_gradients(build_loss, store: ModelParams, h: float = 1e-3,
                    rel_tol: float = 1e-3) -> float:
    """Backward vs finite differences; returns the worst relative error.

    Relative error is the per-tensor L2 norm ratio ||ad - fd|| /
    max(||ad||, ||fd||): pointwise ratios are meaningless on near-zero
    entries where h^2 truncation dominates, while a single wrong element
    still moves the norm far beyond tolerance.
    """
    store.zero_grad()
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    ad = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
          for name, p in store.items()}
    fd = fd_gradients(build_loss, store, h=h)
    worst = 0.0
    for name in store.names():
        a, f = ad[name].astype(np.float64), fd[name]
        num = np.linalg.norm((a - f).reshape(-1))
        denom = max(np.linalg.norm(a.reshape(-1)), np.linalg.norm(f.reshape(-1)), 1e-8)
        rel = num / denom
        worst = max(worst, float(rel))
        assert rel <= rel_tol, f"{name}: rel err {rel:.3e} (||ad||={denom:.3e})"
    return worst

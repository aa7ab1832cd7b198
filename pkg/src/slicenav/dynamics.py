"""Stage-2 pretraining: causal action-conditioned latent dynamics.

Tokenizer latents are spatially packed (2x2 window concat), corrupted along
a straight-line noise path, and a temporally-causal transformer predicts the
clean latents conditioned on actions, noise level sigma, and step size
delta. The self-consistency term ties one delta-step prediction to the
composition of two delta/2-step predictions (targets detached).

The action embedder is zero-initialized, so an untrained model is exactly
action-invariant and a zero-action-trained control keeps zero action
weights (their gradient is identically zero under zero inputs).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import DomainError, NonFiniteError, ShapeError
from .nn import AdamW, ModelParams, SeedStream, Tape
from .nn import engine as en
from .nn.layers import (LayerNorm, Linear, TransformerBlock,
                        causal_frame_bias, sinusoidal_features)

__all__ = [
    "pack", "unpack_duplicate", "ShortcutSample", "shortcut_corrupt",
    "DynamicsCore", "emp_loss", "sc_loss", "dynamics_train_step",
    "extract_features", "LatentDynamics",
]

SIN_DIM = 16


# ---------------------------------------------------------------------------
# packing


def pack(tokens: np.ndarray, grid_hw: tuple[int, int], window: int = 2) -> np.ndarray:
    """(..., L, d) -> (..., L/window^2, d*window^2) by window-wise channel concat.

    Tokens are gathered per non-overlapping window in row-major order and
    concatenated along channels; constant token fields stay constant.
    """
    gh, gw = grid_hw
    if gh % window or gw % window:
        raise ShapeError(f"token grid {gh}x{gw} not divisible by window {window}")
    d = tokens.shape[-1]
    lead = tokens.shape[:-2]
    if tokens.shape[-2] != gh * gw:
        raise ShapeError(f"expected {gh * gw} tokens, got {tokens.shape[-2]}")
    x = tokens.reshape(*lead, gh // window, window, gw // window, window, d)
    x = np.moveaxis(x, -4, -3)  # (..., gh/w, gw/w, window, window, d)
    return np.ascontiguousarray(
        x.reshape(*lead, (gh // window) * (gw // window), window * window * d))


def unpack_duplicate(packed: np.ndarray, grid_hw: tuple[int, int],
                     window: int = 2) -> np.ndarray:
    """(..., S, c) -> (..., L, c): nearest duplication back to the token grid."""
    gh, gw = grid_hw
    lead = packed.shape[:-2]
    c = packed.shape[-1]
    x = packed.reshape(*lead, gh // window, gw // window, c)
    x = np.repeat(np.repeat(x, window, axis=-3), window, axis=-2)
    return x.reshape(*lead, gh * gw, c)


# ---------------------------------------------------------------------------
# shortcut corruption


@dataclass
class ShortcutSample:
    sigma: np.ndarray  # (B, T) in [0, 1]
    delta: np.ndarray  # (B, T) dyadic step sizes
    eps: np.ndarray  # gaussian, shaped like z
    z_tilde: np.ndarray  # corrupted latents


def _mix(eps: np.ndarray, z: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    sig = sigma[..., None, None].astype(z.dtype)
    return (1.0 - sig) * eps + sig * z


def shortcut_corrupt(z: np.ndarray, seed: int, sigma: np.ndarray | None = None,
                     m_max: int = 3, sigma_max_minus_half_delta: bool = False) -> ShortcutSample:
    """Straight-line corruption z~ = (1 - sigma) eps + sigma z per frame.

    sigma defaults to i.i.d. uniform [0, 1]; delta is uniform over the
    dyadic set {1, 1/2, ..., 1/2^m_max} (restricted to halvable steps and
    sigma <= 1 - delta/2 when the self-consistency branch asks for it).
    """
    b, t = z.shape[:2]
    stream = SeedStream(seed).child("corrupt")
    if sigma_max_minus_half_delta:
        idx = stream.integers(0, m_max, (b, t))  # excludes the smallest step
        delta = (0.5 ** idx).astype(np.float32)
        if sigma is None:
            sigma = (stream.uniform(0.0, 1.0, (b, t), dtype=np.float64)
                     * (1.0 - delta / 2.0)).astype(np.float32)
    else:
        idx = stream.integers(0, m_max + 1, (b, t))
        delta = (0.5 ** idx).astype(np.float32)
        if sigma is None:
            sigma = stream.uniform(0.0, 1.0, (b, t))
    eps = stream.normal(z.shape, dtype=z.dtype)
    return ShortcutSample(sigma=np.asarray(sigma, dtype=np.float32), delta=delta,
                          eps=eps, z_tilde=_mix(eps, z, np.asarray(sigma)))


# ---------------------------------------------------------------------------
# model


class DynamicsCore:
    """Temporal-causal transformer over packed latents with (a, sigma, delta)
    conditioning added per frame in latent space."""

    def __init__(self, d_z: int, tokens_per_frame: int, width: int, depth: int,
                 heads: int, t_max: int, seed: int, mlp_ratio: int = 4,
                 dtype=np.float32):
        self.d_z = d_z
        self.s = tokens_per_frame
        self.width = width
        self.t_max = t_max
        rng = SeedStream(seed).child("dynamics-init")
        store = ModelParams()
        self.params = store
        self.act_embed = Linear(store, "cond.action", 8, d_z, rng.child("act"),
                                zero_init=True, dtype=dtype)
        self.sigma_embed = Linear(store, "cond.sigma", SIN_DIM, d_z,
                                  rng.child("sigma"), dtype=dtype)
        self.delta_embed = Linear(store, "cond.delta", SIN_DIM, d_z,
                                  rng.child("delta"), dtype=dtype)
        self.in_proj = Linear(store, "in_proj", d_z, width, rng.child("inp"), dtype=dtype)
        self.pos_time = store.add(
            "pos.time", (rng.child("pt").normal((t_max, width), dtype=np.float64)
                         * 0.02).astype(dtype))
        self.pos_space = store.add(
            "pos.space", (rng.child("ps").normal((tokens_per_frame, width), dtype=np.float64)
                          * 0.02).astype(dtype))
        self.blocks = [TransformerBlock(store, f"block{i}", width, heads,
                                        rng.child(f"b{i}"), mlp_ratio, dtype=dtype)
                       for i in range(depth)]
        self.ln_f = LayerNorm(store, "ln_f", width, dtype=dtype)
        self.head = Linear(store, "head", width, d_z, rng.child("head"), dtype=dtype)
        self._bias_cache: dict[int, np.ndarray] = {}

    def config(self) -> dict:
        return {"d_z": self.d_z, "tokens_per_frame": self.s, "width": self.width,
                "t_max": self.t_max, "depth": len(self.blocks)}

    def _bias(self, t_frames: int) -> np.ndarray:
        if t_frames not in self._bias_cache:
            self._bias_cache[t_frames] = causal_frame_bias(t_frames, self.s)
        return self._bias_cache[t_frames]

    def _conditioned_input(self, z_tilde: np.ndarray, actions: np.ndarray,
                           sigma: np.ndarray, delta: np.ndarray) -> "en.Tensor":
        b, t, s, d = z_tilde.shape
        if s != self.s or d != self.d_z:
            raise ShapeError(f"latents {z_tilde.shape} != (*, *, {self.s}, {self.d_z})")
        if actions.shape != (b, t, 8):
            raise ShapeError(f"actions {actions.shape} != {(b, t, 8)}")
        if sigma.shape != (b, t) or delta.shape != (b, t):
            raise ShapeError(f"sigma/delta must be (B, T), got {sigma.shape}/{delta.shape}")
        act = self.act_embed(en.constant(actions.astype(z_tilde.dtype)))
        sig = self.sigma_embed(en.constant(sinusoidal_features(sigma, SIN_DIM)))
        dlt = self.delta_embed(en.constant(sinusoidal_features(delta, SIN_DIM)))
        cond = en.add(en.add(act, sig), dlt)  # (B, T, d_z)
        cond = en.reshape(cond, (b, t, 1, self.d_z))
        return en.add(en.constant(z_tilde), cond)

    def hidden_states(self, z_tilde: np.ndarray, actions: np.ndarray,
                      sigma: np.ndarray, delta: np.ndarray) -> "en.Tensor":
        """Pre-head transformer states, (B, T, S, width)."""
        b, t = z_tilde.shape[:2]
        if t > self.t_max:
            raise ShapeError(f"sequence length {t} exceeds t_max {self.t_max}")
        x = self.in_proj(self._conditioned_input(z_tilde, actions, sigma, delta))
        pos_t = en.reshape(self.pos_time[:t], (1, t, 1, self.width))
        pos_s = en.reshape(self.pos_space, (1, 1, self.s, self.width))
        x = en.add(en.add(x, pos_t), pos_s)
        x = en.reshape(x, (b, t * self.s, self.width))
        bias = self._bias(t)
        for blk in self.blocks:
            x = blk(x, bias)
        x = self.ln_f(x)
        return en.reshape(x, (b, t, self.s, self.width))

    def predict(self, z_tilde: np.ndarray, actions: np.ndarray,
                sigma: np.ndarray, delta: np.ndarray) -> "en.Tensor":
        """Clean-latent predictions for every frame, (B, T, S, d_z)."""
        hidden = self.hidden_states(z_tilde, actions, sigma, delta)
        return self.head(hidden)

    def predict_values(self, z_tilde, actions, sigma, delta) -> np.ndarray:
        """Inference-only prediction (never recorded on a tape)."""
        with en.no_grad():
            return self.predict(z_tilde, actions, sigma, delta).data


# ---------------------------------------------------------------------------
# losses


def _weight_fn(name: str):
    if name == "uniform":
        return lambda sigma: np.ones_like(np.asarray(sigma, dtype=np.float64))
    if name == "inverse-noise":
        return lambda sigma: 1.0 / (1.0 - np.asarray(sigma, dtype=np.float64) + 0.01)
    raise DomainError(f"unknown weighting {name!r}")


def emp_loss(pred, target: np.ndarray, sigma: np.ndarray,
             weighting: str = "uniform") -> "en.Tensor":
    """Mean over frames/tokens/channels of w(sigma_t) * squared error."""
    pred_t = pred if isinstance(pred, en.Tensor) else en.constant(np.asarray(pred))
    if pred_t.shape != target.shape:
        raise ShapeError(f"emp_loss shapes differ: {pred_t.shape} vs {target.shape}")
    w = _weight_fn(weighting)(sigma)
    diff = en.sub(en.cast(pred_t, np.float64),
                  en.constant(target.astype(np.float64)))
    sq = en.mul(diff, diff)
    while w.ndim < len(pred_t.shape):
        w = w[..., None]
    return en.tmean(en.mul(sq, en.constant(w)))


def sc_loss(core: DynamicsCore, z_clean: np.ndarray, actions: np.ndarray,
            seed: int, m_max: int = 3) -> "en.Tensor":
    """Self-consistency: one delta-step prediction vs the detached
    composition of two delta/2-step predictions along the noise path."""
    sample = shortcut_corrupt(z_clean, seed, m_max=m_max,
                              sigma_max_minus_half_delta=True)
    half = sample.delta / 2.0
    with en.no_grad():  # composed target is detached
        pred_half = core.predict(sample.z_tilde, actions, sample.sigma, half).data
        sigma2 = sample.sigma + half
        z_tilde2 = _mix(sample.eps, pred_half, sigma2)
        target = core.predict(z_tilde2, actions, sigma2, half).data
    pred_big = core.predict(sample.z_tilde, actions, sample.sigma, sample.delta)
    diff = en.sub(en.cast(pred_big, np.float64),
                  en.constant(target.astype(np.float64)))
    return en.tmean(en.mul(diff, diff))


def dynamics_train_step(core: DynamicsCore, opt: AdamW, z_batch: np.ndarray,
                        action_batch: np.ndarray, seed: int, step: int,
                        lambda_sc: float = 0.5, weighting: str = "uniform",
                        m_max: int = 3, action_mode: str = "real") -> dict:
    """One forward/backward/AdamW cycle on a clip batch of packed latents."""
    if action_mode == "zero":
        action_batch = np.zeros_like(action_batch)
    elif action_mode != "real":
        raise DomainError(f"unknown action_mode {action_mode!r}")
    sample = shortcut_corrupt(z_batch, seed + step * 7919, m_max=m_max)
    opt.zero_grad()
    with Tape() as tape:
        pred = core.predict(sample.z_tilde, action_batch, sample.sigma, sample.delta)
        loss_emp = emp_loss(pred, z_batch, sample.sigma, weighting)
        if lambda_sc > 0.0:
            loss_sc = sc_loss(core, z_batch, action_batch,
                              seed + step * 7919 + 13, m_max=m_max)
            loss = en.add(loss_emp, en.mul(loss_sc, lambda_sc))
        else:
            loss_sc = None
            loss = loss_emp
        tape.backward(loss)
    opt.step()
    return {
        "step": step,
        "L_emp": float(loss_emp.data),
        "L_sc": float(loss_sc.data) if loss_sc is not None else 0.0,
        "L_dyn": float(loss.data),
    }


# ---------------------------------------------------------------------------
# frozen-feature extraction


def extract_features(core: DynamicsCore | None, tokenizer_core, frames: np.ndarray,
                     actions: np.ndarray, grid_hw: tuple[int, int],
                     window: int = 2, m_max: int = 3,
                     zero_actions: bool = False) -> np.ndarray:
    """Per-token features of the final frame of one clip or a clip batch.

    Concatenates (a) the final frame's tokenizer tokens and (b) the dynamics
    transformer's final-frame hidden states, duplicated back onto the token
    grid. The context frames enter clean (sigma = 1); the final frame enters
    in forecast pose (sigma = 0 with the noise term fixed to zero), so its
    hidden states are the model's action-conditioned prediction of the view
    rather than a pass-through of content the tokenizer already provides.
    Deterministic; ``core=None`` gives the tokenizer-only variant.
    """
    single = frames.ndim == 3
    if single:
        frames = frames[None]
        actions = actions[None]
    b, k = frames.shape[:2]
    flat = frames.reshape(b * k, *frames.shape[2:])
    tokens = tokenizer_core.encode_frames(flat).reshape(b, k, -1, tokenizer_core.width)
    final_tokens = tokens[:, -1]  # (B, L, d)
    if core is None:
        out = final_tokens
    else:
        z = pack(tokens, grid_hw, window).astype(np.float32)  # (B, K, S, d_z)
        z[:, -1] = 0.0  # forecast pose: (1-sigma)*0 + 0*z
        acts = (np.zeros_like(actions) if zero_actions else actions).astype(np.float32)
        sigma = np.ones((b, k), dtype=np.float32)
        sigma[:, -1] = 0.0
        delta = np.full((b, k), 0.5 ** m_max, dtype=np.float32)
        with en.no_grad():
            hidden = core.hidden_states(z, acts, sigma, delta)
            cond = core.act_embed(en.constant(acts[:, -1]))  # learned action code
        final_hidden = hidden.data[:, -1]  # (B, S, width)
        unpooled = unpack_duplicate(final_hidden, grid_hw, window)  # (B, L, width)
        l = final_tokens.shape[1]
        cond_tiled = np.repeat(cond.data[:, None, :], l, axis=1)
        out = np.concatenate([final_tokens, unpooled, cond_tiled], axis=-1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# estimator


class LatentDynamics(BaseEstimator):
    """Action-conditioned latent dynamics with a fit/transform surface.

    ``fit`` consumes per-trajectory token sequences (list of (T, L, d)) and
    aligned action sequences (list of (T, 8)); ``transform`` maps clip
    batches to frozen features for probing.
    """

    def __init__(self, width=96, depth=2, heads=4, pack_window=2, context=8,
                 m_max=3, lambda_sc=0.5, weighting="uniform", steps=300,
                 batch_size=8, lr=1e-3, weight_decay=0.01, action_mode="real",
                 diag_every=0, diag_sigma=0.5, seed=0, log_path=None):
        self.width = width
        self.depth = depth
        self.heads = heads
        self.pack_window = pack_window
        self.context = context
        self.m_max = m_max
        self.lambda_sc = lambda_sc
        self.weighting = weighting
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.action_mode = action_mode
        self.diag_every = diag_every
        self.diag_sigma = diag_sigma
        self.seed = seed
        self.log_path = log_path

    def fit(self, X, y, token_grid_hw=None):
        if token_grid_hw is None:
            raise DomainError("fit needs token_grid_hw=(gh, gw) of the tokenizer")
        self.grid_hw_ = tuple(token_grid_hw)
        d = X[0].shape[-1]
        w2 = self.pack_window ** 2
        self.d_z_ = d * w2
        self.s_ = (self.grid_hw_[0] // self.pack_window) * (self.grid_hw_[1] // self.pack_window)
        packed = [pack(np.asarray(z, dtype=np.float32), self.grid_hw_, self.pack_window)
                  for z in X]
        acts = [np.asarray(a, dtype=np.float32) for a in y]
        windows = [(i, s) for i, z in enumerate(packed)
                   for s in range(z.shape[0] - self.context + 1)]
        if not windows:
            raise DomainError(f"no trajectory is long enough for context {self.context}")
        self.core_ = DynamicsCore(
            d_z=self.d_z_, tokens_per_frame=self.s_, width=self.width,
            depth=self.depth, heads=self.heads, t_max=max(self.context, 1),
            seed=self.seed)
        opt = AdamW(self.core_.params, lr=self.lr, weight_decay=self.weight_decay)
        stream = SeedStream(self.seed).child("dyn-batches")
        self.history_ = []
        self.diag_log_ = []
        log_file = open(self.log_path, "w") if self.log_path else None
        try:
            for step in range(self.steps):
                pick = stream.child(f"step/{step}").integers(0, len(windows),
                                                             (self.batch_size,))
                z_batch = np.stack([packed[windows[i][0]]
                                    [windows[i][1]:windows[i][1] + self.context]
                                    for i in pick])
                a_batch = np.stack([acts[windows[i][0]]
                                    [windows[i][1]:windows[i][1] + self.context]
                                    for i in pick])
                try:
                    record = dynamics_train_step(
                        self.core_, opt, z_batch, a_batch, self.seed, step,
                        lambda_sc=self.lambda_sc, weighting=self.weighting,
                        m_max=self.m_max, action_mode=self.action_mode)
                except NonFiniteError:
                    record = {"step": step, "aborted": True}
                record["seed"] = self.seed
                if self.diag_every and step % self.diag_every == 0:
                    # swap actions on the step's own batch; gradients above
                    # already used the correct (training-mode) actions
                    from .diagnostics import action_swap_eval
                    report = action_swap_eval(
                        self.core_, z_batch, a_batch,
                        seed=self.seed, step=step, sigma_level=self.diag_sigma,
                        weighting=self.weighting, m_max=self.m_max,
                        trained_mode=self.action_mode)
                    self.diag_log_.append(report)
                    record.update(report.ratios())
                self.history_.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
        finally:
            if log_file:
                log_file.close()
        return self

    def _check_fitted(self):
        if not hasattr(self, "core_"):
            raise NotFittedError("LatentDynamics is not fitted")

    def transform(self, clips, tokenizer=None):
        """Frozen features for a batch of (frames, actions) clip arrays."""
        self._check_fitted()
        if tokenizer is None:
            raise DomainError("transform needs the frozen tokenizer")
        frames, actions = clips
        return extract_features(
            self.core_, tokenizer.core_, np.asarray(frames), np.asarray(actions),
            self.grid_hw_, self.pack_window, self.m_max,
            zero_actions=(self.action_mode == "zero"))

    # persistence -------------------------------------------------------

    def save(self, base: str | Path) -> None:
        self._check_fitted()
        self.core_.params.save(base)
        meta = {"estimator": self.get_params(), "core": self.core_.config(),
                "grid_hw": list(self.grid_hw_)}
        meta["estimator"]["log_path"] = None
        Path(str(base) + ".meta.json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, base: str | Path) -> "LatentDynamics":
        meta = json.loads(Path(str(base) + ".meta.json").read_text())
        est = cls(**meta["estimator"])
        cfg = meta["core"]
        est.grid_hw_ = tuple(meta["grid_hw"])
        est.d_z_ = cfg["d_z"]
        est.s_ = cfg["tokens_per_frame"]
        est.core_ = DynamicsCore(
            d_z=cfg["d_z"], tokens_per_frame=cfg["tokens_per_frame"],
            width=cfg["width"], depth=cfg["depth"], heads=est.heads,
            t_max=cfg["t_max"], seed=est.seed)
        loaded = ModelParams.load(base)
        for name, tensor in est.core_.params.items():
            tensor.data = loaded[name].data
        est.core_.params.opt_state = loaded.opt_state
        est.core_.params.step_count = loaded.step_count
        est.history_ = []
        est.diag_log_ = []
        return est

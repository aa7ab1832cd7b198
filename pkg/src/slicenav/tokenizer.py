"""Stage-1 pretraining: masked-patch autoencoding of slice frames.

The encoder sees only visible patches (plus their positions); the decoder
fills masked slots from a learned mask token and reconstructs every patch.
The loss is the per-frame masked reconstruction error (per-patch summed
squared error, averaged over masked patches), optionally plus a multi-scale
image-gradient perceptual term.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import DomainError, NonFiniteError, ShapeError
from .nn import AdamW, ModelParams, SeedStream, Tape
from .nn import engine as en
from .nn.layers import LayerNorm, Linear, TransformerBlock

__all__ = [
    "patchify", "unpatchify", "sample_mask", "sample_masks",
    "mae_loss", "perceptual_term", "TokenizerCore", "tokenizer_train_step",
    "SliceTokenizer",
]


# ---------------------------------------------------------------------------
# patch grid


def patchify(frames: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., H, W) -> (..., N_p, patch_size^2), row-major patches."""
    h, w = frames.shape[-2:]
    if h % patch_size or w % patch_size:
        raise ShapeError(f"frame {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    lead = frames.shape[:-2]
    x = frames.reshape(*lead, gh, patch_size, gw, patch_size)
    x = np.moveaxis(x, -2, -3)  # (..., gh, gw, ps, ps)
    return x.reshape(*lead, gh * gw, patch_size * patch_size)


def unpatchify(patches: np.ndarray, patch_size: int, grid_hw: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    gh, gw = grid_hw
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, gh, gw, patch_size, patch_size)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, gh * patch_size, gw * patch_size)


def _unpatchify_t(patches: "en.Tensor", patch_size: int, grid_hw: tuple[int, int]) -> "en.Tensor":
    """Differentiable unpatchify for (B, N_p, d_p) tensors."""
    gh, gw = grid_hw
    b = patches.shape[0]
    x = en.reshape(patches, (b, gh, gw, patch_size, patch_size))
    x = en.transpose(x, (0, 1, 3, 2, 4))
    return en.reshape(x, (b, gh * patch_size, gw * patch_size))


# ---------------------------------------------------------------------------
# masking


def sample_mask(seed: int, n_patches: int, mask_ratio: float) -> np.ndarray:
    """Binary mask, 1 = masked; exactly round(ratio * N_p) ones, uniform."""
    if not 0.0 < mask_ratio < 1.0:
        raise DomainError(f"mask_ratio {mask_ratio} outside (0, 1)")
    count = int(round(mask_ratio * n_patches))
    if count == 0:
        raise DomainError(f"mask_ratio {mask_ratio} masks zero of {n_patches} patches")
    if count == n_patches:
        raise DomainError(f"mask_ratio {mask_ratio} masks every patch")
    masked = SeedStream(seed).child("mask").choice_without_replacement(n_patches, count)
    mask = np.zeros(n_patches, dtype=np.uint8)
    mask[masked] = 1
    return mask


def sample_masks(stream: SeedStream, batch: int, n_patches: int, mask_ratio: float) -> np.ndarray:
    count = int(round(mask_ratio * n_patches))
    if count == 0 or count == n_patches:
        raise DomainError(f"mask_ratio {mask_ratio} degenerate for {n_patches} patches")
    out = np.zeros((batch, n_patches), dtype=np.uint8)
    for b in range(batch):
        masked = stream.child(f"row/{b}").choice_without_replacement(n_patches, count)
        out[b, masked] = 1
    return out


def _visible_indices(masks: np.ndarray) -> np.ndarray:
    """(B, N_p) masks -> (B, V) ascending visible indices (equal V per row)."""
    b, n = masks.shape
    v = n - int(masks[0].sum())
    idx = np.empty((b, v), dtype=np.int64)
    for i in range(b):
        row = np.flatnonzero(masks[i] == 0)
        if row.size != v:
            raise ShapeError("masks must share one visible count per batch")
        idx[i] = row
    return idx


# ---------------------------------------------------------------------------
# losses


def mae_loss(pred, target, mask) -> "en.Tensor":
    """Masked reconstruction loss, Eq.-style normalization.

    Per frame: sum of squared element errors within each patch, summed over
    masked patches, divided by the masked-patch count; then averaged over
    the batch. Accepts (N_p, d_p) or (B, N_p, d_p) tensors.
    """
    pred_t = pred if isinstance(pred, en.Tensor) else en.constant(np.asarray(pred))
    target_t = target if isinstance(target, en.Tensor) else en.constant(np.asarray(target))
    if pred_t.shape != target_t.shape:
        raise ShapeError(f"mae_loss shapes differ: {pred_t.shape} vs {target_t.shape}")
    mask = np.asarray(mask)
    counts = mask.sum(axis=-1)
    if np.any(counts < 1):
        raise DomainError("mae_loss needs at least one masked patch per frame")
    diff = en.sub(en.cast(pred_t, np.float64), en.cast(target_t, np.float64))
    per_patch = en.tsum(en.mul(diff, diff), axis=-1)  # (..., N_p)
    weights = (mask / counts[..., None]).astype(np.float64)
    per_frame = en.tsum(en.mul(per_patch, en.constant(weights)), axis=-1)
    return en.tmean(per_frame) if per_frame.shape else per_frame


def _pool2(x: "en.Tensor") -> "en.Tensor":
    b, h, w = x.shape
    return en.tmean(en.reshape(x, (b, h // 2, 2, w // 2, 2)), axis=(2, 4))


def _grad_l1(a: "en.Tensor", b: "en.Tensor") -> "en.Tensor":
    gx = lambda t: en.sub(t[:, :, 1:], t[:, :, :-1])
    gy = lambda t: en.sub(t[:, 1:, :], t[:, :-1, :])
    term_x = en.tmean(en.tabs(en.sub(gx(a), gx(b))))
    term_y = en.tmean(en.tabs(en.sub(gy(a), gy(b))))
    return en.mul(en.add(term_x, term_y), 0.5)


def perceptual_term(pred_image, target_image) -> "en.Tensor":
    """Multi-scale image-gradient L1 at scales {1, 1/2, 1/4}.

    Scales whose pooled image would fall under 2 px per axis are dropped
    (only reachable on tiny test frames); the mean runs over kept scales.
    """
    a = pred_image if isinstance(pred_image, en.Tensor) else en.constant(np.asarray(pred_image))
    b = target_image if isinstance(target_image, en.Tensor) else en.constant(np.asarray(target_image))
    if a.shape != b.shape:
        raise ShapeError(f"perceptual shapes differ: {a.shape} vs {b.shape}")
    if len(a.shape) == 2:
        a = en.reshape(a, (1, *a.shape))
        b = en.reshape(b, (1, *b.shape))
    total = _grad_l1(a, b)
    kept = 1
    for _ in range(2):
        h, w = a.shape[1:]
        if h % 2 or w % 2 or h // 2 < 2 or w // 2 < 2:
            break
        a, b = _pool2(a), _pool2(b)
        total = en.add(total, _grad_l1(a, b))
        kept += 1
    return en.div(total, float(kept))


# ---------------------------------------------------------------------------
# model


def sincos_grid_embedding(grid_hw: tuple[int, int], dim: int) -> np.ndarray:
    """Fixed 2D sin-cos positional embeddings over a patch grid."""
    gh, gw = grid_hw

    def axis_embed(n, d):
        pos = np.arange(n)
        omega = 1.0 / (10000.0 ** (np.arange(d // 2) / max(d // 2 - 1, 1)))
        ang = pos[:, None] * omega[None]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)[:, :d]

    dh = dim // 2
    ey = axis_embed(gh, dh)
    ex = axis_embed(gw, dim - dh)
    out = np.zeros((gh * gw, dim), dtype=np.float32)
    for i in range(gh):
        for j in range(gw):
            out[i * gw + j, :dh] = ey[i]
            out[i * gw + j, dh:] = ex[j]
    return out


class TokenizerCore:
    """Parameter bundle + forward passes for one tokenizer instance."""

    def __init__(self, frame_hw: tuple[int, int], patch_size: int, width: int,
                 depth: int, heads: int, dec_width: int, dec_depth: int,
                 seed: int, mlp_ratio: int = 4, dtype=np.float32):
        h, w = frame_hw
        if h % patch_size or w % patch_size:
            raise ShapeError(f"frame {h}x{w} not divisible by patch {patch_size}")
        self.frame_hw = (h, w)
        self.patch_size = patch_size
        self.grid_hw = (h // patch_size, w // patch_size)
        self.n_patches = self.grid_hw[0] * self.grid_hw[1]
        self.patch_dim = patch_size * patch_size
        self.width = width
        self.dec_width = dec_width
        rng = SeedStream(seed).child("tokenizer-init")
        store = ModelParams()
        self.params = store
        self.patch_embed = Linear(store, "enc.embed", self.patch_dim, width,
                                  rng.child("embed"), dtype=dtype)
        # learned positions, initialized at the fixed 2D sin-cos table
        self.pos_embed = store.add(
            "enc.pos", sincos_grid_embedding(self.grid_hw, width).astype(dtype))
        self.enc_blocks = [TransformerBlock(store, f"enc.block{i}", width, heads,
                                            rng.child(f"eb{i}"), mlp_ratio, dtype=dtype)
                           for i in range(depth)]
        self.enc_ln = LayerNorm(store, "enc.ln", width, dtype=dtype)
        self.dec_embed = Linear(store, "dec.embed", width, dec_width,
                                rng.child("dembed"), dtype=dtype)
        self.mask_token = store.add(
            "dec.mask_token", (rng.child("mtok").normal((dec_width,), dtype=np.float64)
                               * 0.02).astype(dtype))
        self.dec_pos = store.add(
            "dec.pos", sincos_grid_embedding(self.grid_hw, dec_width).astype(dtype))
        self.dec_blocks = [TransformerBlock(store, f"dec.block{i}", dec_width, heads,
                                            rng.child(f"db{i}"), mlp_ratio, dtype=dtype)
                           for i in range(dec_depth)]
        self.dec_ln = LayerNorm(store, "dec.ln", dec_width, dtype=dtype)
        self.head = Linear(store, "dec.head", dec_width, self.patch_dim,
                           rng.child("head"), zero_init=True, dtype=dtype)

    def config(self) -> dict:
        return {
            "frame_hw": list(self.frame_hw), "patch_size": self.patch_size,
            "width": self.width, "dec_width": self.dec_width,
            "depth": len(self.enc_blocks), "dec_depth": len(self.dec_blocks),
        }

    def encode(self, patches: np.ndarray, masks: np.ndarray) -> tuple["en.Tensor", np.ndarray]:
        """Embed visible patches only; returns (tokens (B, V, width), visible idx)."""
        if patches.ndim == 2:
            patches = patches[None]
            masks = np.asarray(masks)[None]
        if patches.shape[-2:] != (self.n_patches, self.patch_dim):
            raise ShapeError(f"patches {patches.shape} != (*, {self.n_patches}, {self.patch_dim})")
        x = self.patch_embed(en.constant(patches))
        x = en.add(x, self.pos_embed)
        vis_idx = _visible_indices(np.asarray(masks))
        x = en.take_tokens(x, vis_idx)
        for blk in self.enc_blocks:
            x = blk(x)
        return self.enc_ln(x), vis_idx

    def decode(self, z: "en.Tensor", vis_idx: np.ndarray) -> "en.Tensor":
        """Fill masked slots from the mask token; predict all patches."""
        b = z.shape[0]
        if vis_idx.shape[0] != b or vis_idx.shape[1] != z.shape[1]:
            raise ShapeError(f"visible idx {vis_idx.shape} inconsistent with tokens {z.shape}")
        y = self.dec_embed(z)
        base = en.add(en.constant(np.zeros((b, self.n_patches, self.dec_width),
                                           dtype=z.dtype)),
                      en.reshape(self.mask_token, (1, 1, self.dec_width)))
        filled = en.put_tokens(base, vis_idx, y)
        filled = en.add(filled, self.dec_pos)
        for blk in self.dec_blocks:
            filled = blk(filled)
        return self.head(self.dec_ln(filled))

    def encode_frames(self, frames: np.ndarray, batch: int = 64) -> np.ndarray:
        """Inference-time tokens (no masking): (N, H, W) -> (N, N_p, width)."""
        frames = np.asarray(frames, dtype=np.float32)
        single = frames.ndim == 2
        if single:
            frames = frames[None]
        out = np.empty((frames.shape[0], self.n_patches, self.width), dtype=np.float32)
        zeros = np.zeros((1, self.n_patches), dtype=np.uint8)
        for start in range(0, frames.shape[0], batch):
            chunk = frames[start:start + batch]
            patches = patchify(chunk, self.patch_size)
            masks = np.repeat(zeros, chunk.shape[0], axis=0)
            z, _ = self.encode(patches, masks)
            out[start:start + batch] = z.data
        return out[0] if single else out


def tokenizer_train_step(core: TokenizerCore, opt: AdamW, frames: np.ndarray,
                         seed: int, step: int, mask_ratio: float,
                         lambda_perc: float) -> dict:
    """One forward/backward/AdamW cycle; returns the loss breakdown."""
    if frames.shape[0] == 0:
        raise DomainError("empty batch")
    stream = SeedStream(seed).child(f"tok-step/{step}")
    masks = sample_masks(stream, frames.shape[0], core.n_patches, mask_ratio)
    patches = patchify(frames.astype(np.float32), core.patch_size)
    opt.zero_grad()
    with Tape() as tape:
        z, vis_idx = core.encode(patches, masks)
        pred = core.decode(z, vis_idx)
        loss_mae = mae_loss(pred, en.constant(patches), masks)
        if lambda_perc > 0.0:
            recon = _unpatchify_t(pred, core.patch_size, core.grid_hw)
            loss_perc = perceptual_term(recon, en.constant(frames.astype(np.float32)))
            loss = en.add(loss_mae, en.mul(loss_perc, lambda_perc))
        else:
            loss_perc = None
            loss = loss_mae
        tape.backward(loss)
    opt.step()
    return {
        "step": step,
        "L_mae": float(loss_mae.data),
        "L_perc": float(loss_perc.data) if loss_perc is not None else 0.0,
        "L_token": float(loss.data),
    }


# ---------------------------------------------------------------------------
# estimator


class SliceTokenizer(BaseEstimator):
    """Masked-autoencoder tokenizer with a fit/transform surface.

    ``fit`` trains on a stack of frames (N, H, W); ``transform`` returns the
    unmasked latent tokens (N, N_p, width) used by the dynamics stage.
    """

    def __init__(self, patch_size=8, width=48, depth=2, heads=4, dec_width=48,
                 dec_depth=1, mlp_ratio=4, mask_ratio=0.75, lambda_perc=0.0,
                 steps=200, batch_size=32, lr=5e-3, weight_decay=0.01,
                 warmup=20, seed=0, log_path=None):
        self.patch_size = patch_size
        self.width = width
        self.depth = depth
        self.heads = heads
        self.dec_width = dec_width
        self.dec_depth = dec_depth
        self.mlp_ratio = mlp_ratio
        self.mask_ratio = mask_ratio
        self.lambda_perc = lambda_perc
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup = warmup
        self.seed = seed
        self.log_path = log_path

    def fit(self, X, y=None):
        frames = np.asarray(X, dtype=np.float32)
        if frames.ndim != 3:
            raise ShapeError(f"expected (N, H, W) frames, got {frames.shape}")
        self.core_ = TokenizerCore(
            frame_hw=frames.shape[1:], patch_size=self.patch_size, width=self.width,
            depth=self.depth, heads=self.heads, dec_width=self.dec_width,
            dec_depth=self.dec_depth, seed=self.seed, mlp_ratio=self.mlp_ratio)
        opt = AdamW(self.core_.params, lr=self.lr, weight_decay=self.weight_decay)
        stream = SeedStream(self.seed).child("tok-batches")
        self.history_ = []
        log_file = open(self.log_path, "w") if self.log_path else None
        try:
            for step in range(self.steps):
                opt.lr = self.lr * min(1.0, (step + 1) / max(self.warmup, 1))
                idx = stream.child(f"step/{step}").integers(0, frames.shape[0],
                                                            (self.batch_size,))
                try:
                    record = tokenizer_train_step(
                        self.core_, opt, frames[idx], self.seed, step,
                        self.mask_ratio, self.lambda_perc)
                except NonFiniteError:
                    record = {"step": step, "aborted": True}
                record["lr"] = opt.lr
                record["seed"] = self.seed
                self.history_.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
        finally:
            if log_file:
                log_file.close()
        return self

    def _check_fitted(self):
        if not hasattr(self, "core_"):
            raise NotFittedError("SliceTokenizer is not fitted")

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        return self.core_.encode_frames(np.asarray(X, dtype=np.float32))

    def reconstruct(self, X, mask_seed: int = 0) -> np.ndarray:
        """Masked-autoencode a frame stack back to images (diagnostic)."""
        self._check_fitted()
        frames = np.asarray(X, dtype=np.float32)
        patches = patchify(frames, self.patch_size)
        stream = SeedStream(mask_seed).child("recon")
        masks = sample_masks(stream, frames.shape[0], self.core_.n_patches,
                             self.mask_ratio)
        z, vis_idx = self.core_.encode(patches, masks)
        pred = self.core_.decode(z, vis_idx)
        return unpatchify(pred.data, self.patch_size, self.core_.grid_hw)

    # persistence -------------------------------------------------------

    def save(self, base: str | Path) -> None:
        self._check_fitted()
        self.core_.params.save(base)
        meta = {"estimator": self.get_params(), "core": self.core_.config()}
        meta["estimator"]["log_path"] = None
        Path(str(base) + ".meta.json").write_text(json.dumps(meta, sort_keys=True))

    @classmethod
    def load(cls, base: str | Path) -> "SliceTokenizer":
        meta = json.loads(Path(str(base) + ".meta.json").read_text())
        est = cls(**meta["estimator"])
        core_cfg = meta["core"]
        est.core_ = TokenizerCore(
            frame_hw=tuple(core_cfg["frame_hw"]), patch_size=core_cfg["patch_size"],
            width=core_cfg["width"], depth=core_cfg["depth"], heads=est.heads,
            dec_width=core_cfg["dec_width"], dec_depth=core_cfg["dec_depth"],
            seed=est.seed, mlp_ratio=est.mlp_ratio)
        loaded = ModelParams.load(base)
        for name, tensor in est.core_.params.items():
            tensor.data = loaded[name].data
        est.core_.params.opt_state = loaded.opt_state
        est.core_.params.step_count = loaded.step_count
        est.history_ = []
        return est

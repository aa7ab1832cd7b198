from . import engine, layers
from .engine import Tape, Tensor, backward
from .optim import AdamW, adamw_step
from .params import ModelParams, checkpoint_hash
from .rng import SeedStream, stream_id

__all__ = [
    "engine", "layers", "Tape", "Tensor", "backward",
    "AdamW", "adamw_step", "ModelParams", "checkpoint_hash",
    "SeedStream", "stream_id",
]

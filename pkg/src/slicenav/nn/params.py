"""Named parameter store with bit-exact checkpoint IO.

Checkpoint = ``<base>.json`` manifest (names, shapes, step, optimizer slot
names) plus ``<base>.bin`` holding the little-endian f32 payloads in
manifest order: parameters first, then optimizer moments.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import CorruptionError, DomainError, FormatError
from .engine import Tensor

__all__ = ["ModelParams", "checkpoint_hash"]


class ModelParams:
    """Ordered mapping name -> trainable Tensor, plus optimizer state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.opt_state: dict[str, dict[str, np.ndarray]] = {}
        self.step_count: int = 0

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise DomainError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------------
    # checkpoint IO

    def save(self, base: str | Path) -> None:
        base = Path(base)
        manifest = {
            "version": 1,
            "step": self.step_count,
            "params": [{"name": n, "shape": list(t.data.shape)}
                       for n, t in self._params.items()],
            "opt": sorted(self.opt_state),
        }
        blobs = [np.ascontiguousarray(t.data, dtype="<f4").tobytes()
                 for t in self._params.values()]
        for name in manifest["opt"]:
            state = self.opt_state[name]
            blobs.append(np.ascontiguousarray(state["m"], dtype="<f4").tobytes())
            blobs.append(np.ascontiguousarray(state["v"], dtype="<f4").tobytes())
        payload = b"".join(blobs)
        manifest["payload_sha256"] = hashlib.sha256(payload).hexdigest()
        base.parent.mkdir(parents=True, exist_ok=True)
        Path(str(base) + ".json").write_text(json.dumps(manifest, sort_keys=True))
        Path(str(base) + ".bin").write_bytes(payload)

    @classmethod
    def load(cls, base: str | Path) -> "ModelParams":
        base = Path(base)
        try:
            manifest = json.loads(Path(str(base) + ".json").read_text())
        except FileNotFoundError as e:
            raise FormatError(f"missing checkpoint manifest {base}.json") from e
        payload = Path(str(base) + ".bin").read_bytes()
        if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
            raise CorruptionError(f"checkpoint payload hash mismatch for {base}")
        store = cls()
        store.step_count = int(manifest["step"])
        offset = 0

        def take(shape):
            nonlocal offset
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
            offset += n * 4
            return arr.reshape(shape).astype(np.float32)

        for entry in manifest["params"]:
            store.add(entry["name"], take(entry["shape"]))
        shapes = {e["name"]: e["shape"] for e in manifest["params"]}
        for name in manifest["opt"]:
            store.opt_state[name] = {"m": take(shapes[name]), "v": take(shapes[name])}
        return store


def checkpoint_hash(base: str | Path) -> str:
    """Hash of the on-disk payload; used by freeze-contract checks."""
    return hashlib.sha256(Path(str(base) + ".bin").read_bytes()).hexdigest()

"""Named parameter stores, the Adam optimizer, and checkpoint archives."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, parameter

CHECKPOINT_MAGIC = b"BONES4D-CKPT-v1\n"


@dataclass
class AdamConfig:
    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


class ParamStore:
    """Ordered collection of named leaf tensors plus per-parameter Adam state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = parameter(value, name=name)
        self._params[name] = p
        self._m[name] = np.zeros_like(p.data)
        self._v[name] = np.zeros_like(p.data)
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def values(self):
        return self._params.values()

    def items(self):
        return self._params.items()

    def n_values(self) -> int:
        return sum(p.data.size for p in self._params.values())


def adam_step(store: ParamStore, grads: dict, cfg: AdamConfig) -> ParamStore:
    """One in-place Adam update; missing grads are treated as zero."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in store.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} of shape {p.data.shape}"
            )
        m = store._m[name]
        v = store._v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return store


# -- checkpoint archive ----------------------------------------------------------
#
# Layout: magic line, then a JSON metadata blob (uint64 length + utf8), then
# uint64 parameter count, then per parameter: name (uint64 len + utf8),
# ndim (uint64), shape (uint64 each), and three float64 blocks (value, adam m,
# adam v). Finally the global step count (uint64). Fully deterministic bytes.


def _write_block(f, arr: np.ndarray):
    f.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def save_checkpoint(path, store: ParamStore, metadata: dict | None = None):
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(meta)))
        f.write(meta)
        f.write(struct.pack("<Q", len(store)))
        for name, p in store.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", p.data.ndim))
            for s in p.data.shape:
                f.write(struct.pack("<Q", s))
            _write_block(f, p.data)
            _write_block(f, store._m[name])
            _write_block(f, store._v[name])
        f.write(struct.pack("<Q", store.step_count))


class CheckpointError(IOError):
    pass


def load_checkpoint(path):
    """Returns (ParamStore, metadata dict)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic {magic!r}")

        def read_u64():
            return struct.unpack("<Q", f.read(8))[0]

        meta = json.loads(f.read(read_u64()).decode("utf-8"))
        store = ParamStore()
        count = read_u64()
        for _ in range(count):
            name = f.read(read_u64()).decode("utf-8")
            ndim = read_u64()
            shape = tuple(read_u64() for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            blocks = []
            for _ in range(3):
                raw = f.read(8 * n)
                if len(raw) != 8 * n:
                    raise CheckpointError(f"{path}: truncated block for {name!r}")
                blocks.append(np.frombuffer(raw, dtype=np.float64).reshape(shape).copy())
            store.add(name, blocks[0])
            store._m[name] = blocks[1]
            store._v[name] = blocks[2]
        store.step_count = read_u64()
    return store, meta

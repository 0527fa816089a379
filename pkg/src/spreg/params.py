"""Named parameter storage, Adam with decoupled weight decay, and the
binary weight format ("SPWT")."""
from __future__ import annotations

import io
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

from .errors import ContractError
from .tensor import Tensor

MAGIC = b"SPWT"


class ParameterStore:
    """Map from slash-separated path to a leaf Tensor; iterates sorted by path."""

    def __init__(self, seed: int = 0):
        self._params: dict[str, Tensor] = {}
        self.seed = seed
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def items(self) -> list[tuple[str, Tensor]]:
        return [(k, self._params[k]) for k in sorted(self._params)]

    def add(self, path: str, value: np.ndarray) -> Tensor:
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter {path!r} has non-finite values")
        t = Tensor(value, requires_grad=True, name=path)
        self._params[path] = t
        return t

    def get_or_create(self, path: str, shape: tuple[int, ...], init: str = "glorot") -> Tensor:
        """Fetch ``path``, creating it with the given initializer on first use."""
        if path in self._params:
            t = self._params[path]
            if t.shape != tuple(shape):
                raise ValueError(f"parameter {path!r} has shape {t.shape}, expected {tuple(shape)}")
            return t
        return self.add(path, self._init(path, shape, init))

    def _init(self, path, shape, init):
        if init == "zeros":
            return np.zeros(shape)
        if init == "ones":
            return np.ones(shape)
        if init == "glorot":
            fan_in, fan_out = (shape[0], shape[-1]) if len(shape) >= 2 else (shape[0], shape[0])
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            # seeded per path so values do not depend on creation order
            rng = np.random.Generator(np.random.PCG64([self.seed, zlib.crc32(path.encode())]))
            return rng.uniform(-bound, bound, size=shape)
        if isinstance(init, (int, float)):
            return np.full(shape, float(init))
        raise ValueError(f"unknown initializer {init!r}")

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def num_values(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def copy(self) -> ParameterStore:
        other = ParameterStore(self.seed)
        other.rng.bit_generator.state = self.rng.bit_generator.state
        for k, t in self.items():
            other.add(k, t.data.copy())
        return other

    # ------------------------------------------------------------ serialization

    def write(self, fh: BinaryIO) -> None:
        items = self.items()
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for path, t in items:
            raw = path.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(t.data.astype("<f4").tobytes())

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.write(buf)
        return buf.getvalue()

    @classmethod
    def read(cls, fh: BinaryIO) -> ParameterStore:
        if fh.read(4) != MAGIC:
            raise ValueError("not a SPWT parameter file")
        (count,) = struct.unpack("<I", fh.read(4))
        store = cls()
        for _ in range(count):
            (plen,) = struct.unpack("<H", fh.read(2))
            path = fh.read(plen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float64)
            store.add(path, payload.reshape(dims))
        return store

    @classmethod
    def from_bytes(cls, data: bytes) -> ParameterStore:
        return cls.read(io.BytesIO(data))

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            self.write(fh)

    @classmethod
    def load(cls, path: str | Path) -> ParameterStore:
        with open(path, "rb") as fh:
            return cls.read(fh)


@dataclass
class AdamState:
    lr: float = 1e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterStore, state: AdamState) -> None:
    """One AdamW update over every parameter, then zero the gradients."""
    for path, t in params.items():
        if t.grad is None:
            raise ContractError(f"parameter {path!r} has no gradient")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for path, t in params.items():
        g = t.grad
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(t.data)
            state.v[path] = np.zeros_like(t.data)
        v = state.v[path]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        t.data = t.data - state.lr * (update + state.weight_decay * t.data)
        t.grad = np.zeros_like(t.data)

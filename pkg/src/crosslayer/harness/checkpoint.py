"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"XLIJ"                      magic
    u32  version                 currently 1
    u32  n + n bytes             run config, UTF-8 ``section.key = value`` text
    u64  training step
    u32  n + n bytes             RNG state blob
    u32  tensor count
    per tensor:
        u16 n + n bytes          parameter name, UTF-8
        u8                       dtype code (0 float32, 1 float64, 2 int64)
        u8                       ndim
        ndim * u32               shape
        payload                  little-endian, row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..errors import BadMagicError, TruncatedCheckpointError, VersionMismatchError
from ..model import CrossLayerVLM
from .config import RunConfig

MAGIC = b"XLIJ"
VERSION = 1
_DTYPES = {0: torch.float32, 1: torch.float64, 2: torch.int64}
_CODES = {v: k for k, v in _DTYPES.items()}
_NP = {0: "<f4", 1: "<f8", 2: "<i8"}


@dataclass
class Checkpoint:
    config: RunConfig
    state: "OrderedDict[str, torch.Tensor]"
    step: int = 0
    rng_state: bytes = b""

    @classmethod
    def from_model(cls, model: CrossLayerVLM, config: RunConfig, step: int = 0, rng_state: bytes | None = None):
        state = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
        if rng_state is None:
            rng_state = torch.get_rng_state().numpy().tobytes()
        return cls(config.copy(), state, step, rng_state)

    def build_model(self) -> CrossLayerVLM:
        model = CrossLayerVLM(self.config.model, self.config.fusion)
        dtype = torch.float64 if self.config.train.precision == "float64" else torch.float32
        model.to(dtype)
        model.load_state_dict(self.state)
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write atomically: a temp file in the target directory is renamed into place."""
    path = Path(path)
    config = ckpt.config.to_text().encode()
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(config)),
        config,
        struct.pack("<Q", ckpt.step),
        struct.pack("<I", len(ckpt.rng_state)),
        ckpt.rng_state,
        struct.pack("<I", len(ckpt.state)),
    ]
    for name, tensor in ckpt.state.items():
        code = _CODES.get(tensor.dtype)
        if code is None:
            raise ValueError(f"cannot serialise {name} of dtype {tensor.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, tensor.dim()))
        parts.append(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
        parts.append(tensor.detach().cpu().contiguous().numpy().astype(_NP[code], copy=False).tobytes())
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(b"".join(parts))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.off + n})")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def load_checkpoint(path, precision: str | None = None) -> Checkpoint:
    """Read a checkpoint; ``precision`` optionally converts floats to another width.

    Narrowing float64 to float32 emits a warning.
    """
    r = _Reader(Path(path).read_bytes())
    if len(r.buf) < 4 or r.buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic {r.buf[:4]!r})")
    r.take(4)
    (version,) = r.unpack("I")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, this build reads {VERSION}")
    (n,) = r.unpack("I")
    config = RunConfig.from_text(r.take(n).decode())
    (step,) = r.unpack("Q")
    (n,) = r.unpack("I")
    rng_state = r.take(n)
    (count,) = r.unpack("I")
    state: OrderedDict[str, torch.Tensor] = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("H")
        name = r.take(n).decode()
        code, ndim = r.unpack("BB")
        if code not in _DTYPES:
            raise TruncatedCheckpointError(f"{path}: corrupt dtype code {code} for {name}")
        shape = r.unpack(f"{ndim}I") if ndim else ()
        numel = int(np.prod(shape)) if shape else 1
        raw = r.take(numel * np.dtype(_NP[code]).itemsize)
        arr = np.frombuffer(raw, dtype=_NP[code]).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if r.off != len(r.buf):
        raise TruncatedCheckpointError(f"{path}: {len(r.buf) - r.off} trailing bytes")

    saved = config.train.precision
    if precision is not None and precision != saved:
        target = torch.float64 if precision == "float64" else torch.float32
        if precision == "float32":
            warnings.warn(f"narrowing float64 checkpoint {path} to float32", RuntimeWarning, stacklevel=2)
        for k, v in state.items():
            if v.is_floating_point():
                state[k] = v.to(target)
        config.train.precision = precision
    return Checkpoint(config, state, step, rng_state)

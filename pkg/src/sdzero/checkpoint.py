"""Binary checkpoint format.

Layout (all integers little-endian):

    magic "SDZ0" | u32 format version | u32 header length | header JSON
    | one raw little-endian array blob per parameter, in header order
    | optional optimizer moment blobs (m then v per parameter)
    | u32 CRC32 over everything before it

The header carries the model config, parameter names/shapes/dtype, training
step, phase tag, RNG state, optimizer hyperparameters, and a semantic version
string. Save/load round-trips are bitwise exact; the trailing checksum makes
truncation and corruption loud.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .autodiff import Tensor
from .model import ModelConfig, param_names
from .optim import AdamWConfig, OptimizerState

MAGIC = b"SDZ0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, corrupt, or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, Tensor]
    step: int = 0
    phase: str = "init"
    rng_state: dict | None = None
    optimizer: OptimizerState | None = None
    semver: str = field(default=__version__)


def _dtype_code(dtype: np.dtype) -> str:
    if dtype == np.float32:
        return "<f4"
    if dtype == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported parameter dtype {dtype}")


def params_hash(params: dict[str, Tensor]) -> str:
    """SHA-256 over parameter names, shapes, and raw values in name order.

    This is the identity of the policy: optimizer state, step counters, and
    RNG state deliberately do not participate.
    """
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        data = params[name].data
        h.update(name.encode())
        h.update(str(data.shape).encode())
        h.update(_dtype_code(data.dtype).encode())
        h.update(np.ascontiguousarray(data).astype(_dtype_code(data.dtype)).tobytes())
    return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    order = [n for n in param_names(ckpt.config) if n in ckpt.params]
    if set(order) != set(ckpt.params):
        raise CheckpointError("parameter names do not match the model config")
    header = {
        "config": asdict(ckpt.config),
        "params": [
            {
                "name": n,
                "shape": list(ckpt.params[n].data.shape),
                "dtype": _dtype_code(ckpt.params[n].data.dtype),
            }
            for n in order
        ],
        "step": ckpt.step,
        "phase": ckpt.phase,
        "rng_state": ckpt.rng_state,
        "optimizer": None,
        "semver": ckpt.semver,
    }
    if ckpt.optimizer is not None:
        header["optimizer"] = {
            "step": ckpt.optimizer.step,
            "beta1": ckpt.optimizer.config.beta1,
            "beta2": ckpt.optimizer.config.beta2,
            "eps": ckpt.optimizer.config.eps,
            "weight_decay": ckpt.optimizer.config.weight_decay,
        }
    blob = bytearray()
    blob += MAGIC
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob += struct.pack("<II", FORMAT_VERSION, len(header_bytes))
    blob += header_bytes
    for n in order:
        data = ckpt.params[n].data
        blob += np.ascontiguousarray(data).astype(_dtype_code(data.dtype)).tobytes()
    if ckpt.optimizer is not None:
        for n in order:
            code = _dtype_code(ckpt.params[n].data.dtype)
            blob += np.ascontiguousarray(ckpt.optimizer.m[n]).astype(code).tobytes()
            blob += np.ascontiguousarray(ckpt.optimizer.v[n]).astype(code).tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt or truncated")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header_end = 12 + header_len
    header = json.loads(raw[12:header_end].decode())
    cfg = ModelConfig(**header["config"])

    params: dict[str, Tensor] = {}
    offset = header_end
    for meta in header["params"]:
        shape = tuple(meta["shape"])
        dtype = np.dtype(meta["dtype"])
        nbytes = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
        params[meta["name"]] = Tensor(
            arr.reshape(shape).copy(), requires_grad=True, name=meta["name"]
        )
        offset += nbytes

    optimizer = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        optimizer = OptimizerState(
            config=AdamWConfig(
                beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], weight_decay=o["weight_decay"]
            ),
            step=o["step"],
        )
        for meta in header["params"]:
            shape = tuple(meta["shape"])
            dtype = np.dtype(meta["dtype"])
            count = int(np.prod(shape))
            optimizer.m[meta["name"]] = (
                np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
            )
            offset += count * dtype.itemsize
            optimizer.v[meta["name"]] = (
                np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
            )
            offset += count * dtype.itemsize

    if offset != len(raw) - 4:
        raise CheckpointError(f"{path}: trailing bytes do not match the header")

    return Checkpoint(
        config=cfg,
        params=params,
        step=header["step"],
        phase=header["phase"],
        rng_state=header["rng_state"],
        optimizer=optimizer,
        semver=header["semver"],
    )


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Deep copy of parameter arrays (fresh Tensors, gradients cleared)."""
    return {n: Tensor(p.data.copy(), requires_grad=True, name=n) for n, p in params.items()}

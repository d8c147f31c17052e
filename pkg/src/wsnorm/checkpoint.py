"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"WSNCKPT\\0"
    uint32    format version
    uint32    header length in bytes
    header    UTF-8 JSON: metadata plus a table of named tensors
              (name, shape, dtype, element offset, element count)
    payload   every tensor as little-endian float64, in table order
    uint32    CRC-32 of all preceding bytes
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import __version__
from .models import Model, ModelSpec, build_model

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "CheckpointError",
    "Checkpoint",
    "write_container",
    "read_container",
    "checkpoint_save",
    "checkpoint_load",
    "restore",
]

MAGIC = b"WSNCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, corrupted or incompatible checkpoint."""

    def __init__(self, message: str, kind: str = "format", tensor: str | None = None):
        super().__init__(message)
        self.kind = kind
        self.tensor = tensor


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray]
    dtypes: dict[str, str]


def write_container(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    table, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        flat = arr.astype("<f8").reshape(-1)
        table.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                      "offset": offset, "count": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += flat.size
    header = json.dumps({"meta": meta, "tensors": table}, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def read_container(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    version, hlen = struct.unpack_from("<II", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}", kind="version")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted)", kind="checksum")
    start = len(MAGIC) + 8
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    payload = np.frombuffer(body, dtype="<f8", offset=start + hlen)
    tensors, dtypes = {}, {}
    for entry in header["tensors"]:
        flat = payload[entry["offset"]:entry["offset"] + entry["count"]]
        tensors[entry["name"]] = flat.astype(entry["dtype"]).reshape(entry["shape"])
        dtypes[entry["name"]] = entry["dtype"]
    return Checkpoint(header["meta"], tensors, dtypes)


def checkpoint_save(path, model: Model, trainer=None, extra: dict | None = None) -> None:
    """Write parameters, normalization buffers and, when a trainer is given,
    optimizer velocities, RNG state and step counters."""
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        tensors[f"param/{name}"] = p.data
    for name, b in model.named_buffers():
        tensors[f"buffer/{name}"] = np.asarray(b)
    meta = {
        "code_version": __version__,
        "model_spec": model.spec.to_dict(),
        "model_seed": model.seed,
        "dtype": np.dtype(model.dtype).name,
        "norm_rates": [s.rate for s in model.norm_states()],
    }
    if trainer is not None:
        for name, v in trainer.opt.velocity.items():
            tensors[f"opt/{name}"] = v
        meta.update({
            "epoch": trainer.epoch,
            "step": trainer.step,
            "rng_state": trainer.rng.bit_generator.state,
            "train_config": trainer.cfg.to_dict(),
            "history": [r.__dict__ for r in trainer.history],
        })
    if extra:
        meta["extra"] = extra
    write_container(path, tensors, _jsonable(meta))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def restore(ckpt: Checkpoint, model: Model, trainer=None) -> None:
    """Load tensors into an existing model (and trainer). Raises
    :class:`CheckpointError` naming the first tensor that does not match."""
    expected = [(f"param/{n}", p.data) for n, p in model.named_parameters()]
    expected += [(f"buffer/{n}", b) for n, b in model.named_buffers()]
    for name, arr in expected:
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint has no tensor {name!r} required by the model",
                                  kind="mismatch", tensor=name)
        if ckpt.tensors[name].shape != np.shape(arr):
            raise CheckpointError(
                f"tensor {name!r}: checkpoint shape {ckpt.tensors[name].shape} != model shape {np.shape(arr)}",
                kind="mismatch", tensor=name)
    extra = sorted(set(k for k in ckpt.tensors if not k.startswith("opt/")) - {n for n, _ in expected})
    if extra:
        raise CheckpointError(f"checkpoint tensor {extra[0]!r} has no counterpart in the model",
                              kind="mismatch", tensor=extra[0])
    for name, p in model.named_parameters():
        p.data = np.array(ckpt.tensors[f"param/{name}"], dtype=p.dtype)
    for norm_name, norm in model.norms.items():
        s = norm.state
        for key in s.buffers():
            setattr(s, key, np.array(ckpt.tensors[f"buffer/{norm_name}.{key}"], dtype=np.float64))
    for s, r in zip(model.norm_states(), ckpt.meta.get("norm_rates", [])):
        s.rate = r
    if trainer is not None:
        from .train import EpochRecord

        for name in trainer.opt.velocity:
            key = f"opt/{name}"
            if key not in ckpt.tensors:
                raise CheckpointError(f"checkpoint has no optimizer state {key!r}", kind="mismatch", tensor=key)
            trainer.opt.velocity[name] = np.array(ckpt.tensors[key], dtype=np.float64)
        trainer.epoch = int(ckpt.meta["epoch"])
        trainer.step = int(ckpt.meta["step"])
        trainer.rng.bit_generator.state = ckpt.meta["rng_state"]
        trainer.history = [EpochRecord(**r) for r in ckpt.meta.get("history", [])]


def checkpoint_load(path, model: Model | None = None, trainer=None) -> tuple[Model, Checkpoint]:
    """Read ``path``; build the model from the stored spec when none is given."""
    ckpt = read_container(path)
    if model is None:
        spec = ModelSpec(**ckpt.meta["model_spec"])
        model = build_model(spec, ckpt.meta["model_seed"], np.dtype(ckpt.meta["dtype"]).type)
    restore(ckpt, model, trainer)
    return model, ckpt

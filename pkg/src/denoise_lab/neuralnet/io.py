"""Binary model container: magic ``DNSM``, format version, genome JSON, float32 parameters."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .genome import Genome
from .model import UNet

MAGIC = b"DNSM"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def save_model(path, model: UNet, meta: dict | None = None) -> Path:
    header = {"genome": model.genome.to_dict(), "seed": model.seed, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode()
    params = [p for _, p in model.parameters()]
    flat = np.concatenate([p.ravel() for p in params]).astype("<f4") if params else np.zeros(0, "<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<Q", flat.size))
        f.write(flat.tobytes())
    return path


def load_model(path, dtype=np.float32):
    """Return ``(model, header)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ModelFormatError(f"{path}: not a denoiser model file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported format version {version}")
    header = json.loads(data[12:12 + n])
    off = 12 + n
    (count,) = struct.unpack_from("<Q", data, off)
    flat = np.frombuffer(data, "<f4", count, off + 8)
    model = UNet(Genome.from_dict(header["genome"]), seed=header["seed"], dtype=dtype)
    params = [p for _, p in model.parameters()]
    if sum(p.size for p in params) != count:
        raise ModelFormatError(f"{path}: parameter count {count} does not match genome")
    pos = 0
    for p in params:
        p[...] = flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    return model, header

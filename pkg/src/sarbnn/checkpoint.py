"""Binary checkpoint container for Bayesian models.

Layout (all integers little-endian)::

    b"BNNV1\\0"                      magic, 6 bytes
    u32                              format version
    u32 + UTF-8                      architecture descriptor
    per parametrized layer:          float32 mu (weight then bias),
                                     float32 rho (weight then bias)
    u32                              CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .bnn import ArchitectureSpec, BayesianModel, GaussianPosterior, PriorSpec, param_shapes
from .data import _atomic_write

MAGIC = b"BNNV1\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: BayesianModel) -> bytes:
    desc = model.arch.to_descriptor().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(desc)), desc]
    for w, b in model.params:
        parts.append(np.ascontiguousarray(w.mu, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b.mu, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(w.rho, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b.rho, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(blob: bytes, prior: PriorSpec | None = None, source: str = "<bytes>") -> BayesianModel:
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError(f"{source}: file too short for a checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{source}: CRC mismatch (corrupt checkpoint)")
    if body[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {body[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    (dlen,) = struct.unpack_from("<I", body, pos + 4)
    pos += 8
    try:
        arch = ArchitectureSpec.from_descriptor(body[pos:pos + dlen].decode("utf-8")).validate()
    except ValueError as exc:
        raise CheckpointError(f"{source}: {exc}") from exc
    pos += dlen
    params = []
    for wshape, bshape, _ in param_shapes(arch):
        arrays = []
        for shape in (wshape, bshape, wshape, bshape):
            count = int(np.prod(shape))
            end = pos + 4 * count
            if end > len(body):
                raise CheckpointError(f"{source}: payload shorter than the architecture requires")
            arrays.append(np.frombuffer(body, dtype="<f4", count=count, offset=pos)
                          .reshape(shape).astype(np.float32))
            pos = end
        mu_w, mu_b, rho_w, rho_b = arrays
        params.append((GaussianPosterior(mu_w, rho_w), GaussianPosterior(mu_b, rho_b)))
    if pos != len(body):
        raise CheckpointError(f"{source}: {len(body) - pos} trailing bytes after the parameter arrays")
    return BayesianModel(arch, prior or PriorSpec(), params)


def save(model: BayesianModel, path) -> None:
    _atomic_write(Path(path), dumps(model))


def load(path, prior: PriorSpec | None = None) -> BayesianModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes(), prior, str(path))

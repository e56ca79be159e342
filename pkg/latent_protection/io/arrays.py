"""
Binary field container.

Layout (all integers little-endian):
  magic            4 bytes  b"LPTF"
  version          1 byte
  dtype tag        1 byte
  ndim             varint
  dims             ndim varints
  metadata length  varint
  metadata         UTF-8 JSON, sorted keys
  payload          row-major little-endian elements
  checksum         32 bytes, sha256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
import torch

from latent_protection.analysis.types import BiasField
from latent_protection.errors import ChecksumMismatchError, ContainerError, UnsupportedVersionError

log = logging.getLogger("latent_protection.io.arrays")

MAGIC = b"LPTF"
VERSION = 1
_DIGEST = 32

DTYPE_TAGS: dict[int, np.dtype] = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<f2"),
    4: np.dtype("<i8"),
}
_TAG_BY_KIND = {dt.str: tag for tag, dt in DTYPE_TAGS.items()}


def _varint_encode(value: int) -> bytes:
    if value < 0:
        raise ContainerError(f"varint must be nonnegative, got {value}")
    out = bytearray()
    v = int(value)
    while v >= 0x80:
        out.append((v & 0x7F) | 0x80)
        v >>= 7
    out.append(v & 0x7F)
    return bytes(out)


def _varint_decode(buf: bytes, start: int) -> tuple[int, int]:
    shift = 0
    value = 0
    i = start
    while i < len(buf):
        b = buf[i]
        value |= (b & 0x7F) << shift
        i += 1
        if (b & 0x80) == 0:
            return value, i
        shift += 7
    raise ContainerError("truncated varint in container header")


def encode_tensor(data: torch.Tensor, metadata: dict[str, Any] | None = None) -> bytes:
    arr = data.detach().to("cpu").contiguous().numpy()
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    tag = _TAG_BY_KIND.get(le.dtype.str)
    if tag is None:
        raise ContainerError(f"unsupported dtype {arr.dtype}; supported: {[str(d) for d in DTYPE_TAGS.values()]}")
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(MAGIC)
    body.append(VERSION)
    body.append(tag)
    body.extend(_varint_encode(le.ndim))
    for dim in le.shape:
        body.extend(_varint_encode(int(dim)))
    body.extend(_varint_encode(len(meta)))
    body.extend(meta)
    body.extend(le.tobytes(order="C"))
    body.extend(hashlib.sha256(bytes(body)).digest())
    return bytes(body)


def decode_tensor(raw: bytes) -> tuple[torch.Tensor, dict[str, Any]]:
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise ContainerError("not a field container (bad magic)")
    if len(raw) < len(MAGIC) + 2 + _DIGEST:
        raise ChecksumMismatchError(f"container of {len(raw)} bytes is too short to hold a checksum")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatchError("container checksum does not match its contents (truncated or corrupted)")
    version = body[len(MAGIC)]
    if version != VERSION:
        raise UnsupportedVersionError(f"container version {version} is not supported (expected {VERSION})")
    tag = body[len(MAGIC) + 1]
    if tag not in DTYPE_TAGS:
        raise ContainerError(f"unknown dtype tag {tag}")
    dtype = DTYPE_TAGS[tag]
    idx = len(MAGIC) + 2
    ndim, idx = _varint_decode(body, idx)
    shape = []
    for _ in range(ndim):
        dim, idx = _varint_decode(body, idx)
        shape.append(dim)
    meta_len, idx = _varint_decode(body, idx)
    meta = json.loads(body[idx: idx + meta_len].decode("utf-8"))
    idx += meta_len
    payload = body[idx:]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise ContainerError(f"payload holds {len(payload)} bytes, shape {shape} needs {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return torch.from_numpy(arr.copy()), meta


def export_array(field: BiasField, path: Path | str) -> Path:
    meta = {k: v for k, v in field.metadata().items() if k != "hash"}
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(encode_tensor(field.data, meta))
    log.debug("exported %s field %s to %s", field.kind, field.shape, out)
    return out


def import_array(path: Path | str) -> BiasField:
    data, meta = decode_tensor(Path(path).read_bytes())
    if "kind" not in meta or "mc_samples" not in meta:
        raise ContainerError(f"{path} does not describe a bias field")
    return BiasField(
        data=data,
        timestep=meta.get("timestep"),
        mc_samples=int(meta["mc_samples"]),
        kind=str(meta["kind"]),
        sources={str(k): str(v) for k, v in (meta.get("sources") or {}).items()},
    )

"""Bit-exact, language-neutral checkpoint archive.

Layout (all integers little-endian):

    magic b"VTCK" | u32 format_version
    u64 manifest byte length | manifest utf-8 ("key=value" lines)
    u64 tensor count, then per tensor:
        u32 name length | name utf-8
        u64 rank | u64 dims... | raw float32 data

Float32 payloads round-trip exactly, so save->load->forward is bitwise
reproducible.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"VTCK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Corrupt, truncated, or version-incompatible checkpoint file."""


def _encode_manifest(manifest: dict[str, str]) -> bytes:
    lines = []
    for k, v in manifest.items():
        if "\n" in k or "=" in k or "\n" in v:
            raise CheckpointError(f"manifest entry {k!r} not representable")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _decode_manifest(raw: bytes) -> dict[str, str]:
    manifest = {}
    text = raw.decode("utf-8")
    for line in text.splitlines():
        if not line:
            continue
        k, _, v = line.partition("=")
        manifest[k] = v
    return manifest


def save_archive(path: str | Path, manifest: dict[str, str],
                 tensors: dict[str, torch.Tensor]) -> None:
    """Atomic write: serialize to a temp file, then rename into place."""
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    m = _encode_manifest(manifest)
    blob += struct.pack("<Q", len(m))
    blob += m
    blob += struct.pack("<Q", len(tensors))
    for name, t in tensors.items():
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb))
        blob += nb
        dims = tuple(t.shape)
        blob += struct.pack("<Q", len(dims))
        blob += struct.pack(f"<{len(dims)}Q", *dims) if dims else b""
        data = t.detach().cpu().contiguous().to(torch.float32).numpy()
        blob += data.astype("<f4", copy=False).tobytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(blob))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint file")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_archive(path: str | Path) -> tuple[dict[str, str], dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint archive")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {version}, expected {FORMAT_VERSION}")
    manifest = _decode_manifest(r.take(r.u64()))
    tensors: dict[str, torch.Tensor] = {}
    count = r.u64()
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u64()
        dims = tuple(r.u64() for _ in range(rank))
        numel = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * numel), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(data.copy())
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after last tensor record")
    return manifest, tensors

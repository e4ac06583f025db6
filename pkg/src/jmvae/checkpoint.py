"""Portable model files.

Layout (all integers little-endian)::

    b"JMCK"  u32 version  u32 manifest_len  manifest (UTF-8 JSON)  payload

The manifest records the variant, modality specs, alpha, latent size,
layer widths, seed and a tensor table of ``name``/``shape``/``offset``
(byte offset into the payload). The payload holds every tensor as
little-endian float32 in table order. float64 models are quantised to
float32 on save.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import ModalitySpec
from .models import VARIANTS, ModelHandle, build_model
from .networks import Architecture

MAGIC = b"JMCK"
VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass


class UnknownVariantError(CheckpointError):
    pass


def to_bytes(handle: ModelHandle) -> bytes:
    table, chunks, offset = [], [], 0
    for name, p in handle.named_parameters():
        buf = np.ascontiguousarray(p.data, dtype=_LE_F32).tobytes()
        table.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    manifest = {
        "variant": handle.variant,
        "alpha": handle.alpha,
        "latent_dim": handle.latent_dim,
        "seed": handle.seed,
        "x_spec": handle.x_spec.to_dict(),
        "w_spec": handle.w_spec.to_dict(),
        "arch": handle.arch.to_dict(),
        "payload_bytes": offset,
        "tensors": table,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<II", VERSION, len(text)), text, *chunks])


def save(handle: ModelHandle, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(handle))


def from_bytes(buf: bytes) -> ModelHandle:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 12:
        raise ManifestError("truncated header")
    version, mlen = struct.unpack("<II", buf[4:12])
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {VERSION}")
    try:
        m = json.loads(buf[12 : 12 + mlen].decode("utf-8"))
        variant = m["variant"]
        table = m["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise ManifestError(f"unreadable manifest: {e}") from None
    if variant not in VARIANTS:
        raise UnknownVariantError(f"unknown variant {variant!r}")
    payload = memoryview(buf)[12 + mlen :]
    if len(payload) != m.get("payload_bytes"):
        raise ManifestError(f"payload holds {len(payload)} bytes, manifest says {m.get('payload_bytes')}")
    try:
        handle = build_model(
            variant,
            ModalitySpec.from_dict(m["x_spec"]),
            ModalitySpec.from_dict(m["w_spec"]),
            Architecture.from_dict(m["arch"]),
            alpha=float(m["alpha"]),
            seed=int(m["seed"]),
            dtype=np.float32,
            init="zero",
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"inconsistent manifest: {e}") from None
    params = dict(handle.named_parameters())
    names = [t["name"] for t in table]
    if sorted(names) != sorted(params) or len(set(names)) != len(names):
        raise ManifestError("tensor table does not list each parameter of the variant exactly once")
    spans = []
    for t in table:
        p = params[t["name"]]
        shape = tuple(t["shape"])
        if shape != p.shape:
            raise ManifestError(f"{t['name']}: shape {shape} but the architecture needs {p.shape}")
        start, nbytes = int(t["offset"]), 4 * int(np.prod(shape))
        if start < 0 or start + nbytes > len(payload):
            raise ManifestError(f"{t['name']}: offset out of bounds")
        spans.append((start, start + nbytes))
        p.data = np.frombuffer(payload, dtype=_LE_F32, count=int(np.prod(shape)), offset=start).reshape(shape).astype(np.float32)
    spans.sort()
    if any(a[1] > b[0] for a, b in zip(spans, spans[1:])):
        raise ManifestError("tensor payloads overlap")
    return handle


def load(path: str | Path) -> ModelHandle:
    return from_bytes(Path(path).read_bytes())

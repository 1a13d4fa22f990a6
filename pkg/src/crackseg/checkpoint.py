"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CRKN"  u16 version
    u16 len, family tag (utf-8)
    u32 len, config echo (utf-8 JSON)
    u32 parameter count, then per parameter:
        u16 len, name (utf-8)   u8 trainable   u8 ndim   ndim x u32 dims
        u32 len, float32 little-endian data
    u32 CRC-32 of everything above
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .architectures import Model, build_model
from .errors import CheckpointError, ConfigError

MAGIC = b"CRKN"
VERSION = 1


@dataclass
class Checkpoint:
    version: int
    family: str
    config: dict
    extra: dict
    params: dict[str, np.ndarray]
    trainable: dict[str, bool]


def encode_checkpoint(model: Model, extra: dict | None = None) -> bytes:
    echo = json.dumps({"model": model.config_dict(), "extra": extra or {}}, sort_keys=True)
    fam = model.family.encode()
    cfg = echo.encode()
    out = [MAGIC, struct.pack("<HH", VERSION, len(fam)), fam, struct.pack("<I", len(cfg)), cfg]
    named = list(model.named_parameters())
    out.append(struct.pack("<I", len(named)))
    for name, p in named:
        nb = name.encode()
        blob = p.data.astype("<f4").tobytes()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", int(p.requires_grad), p.data.ndim))
        out.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        out.append(struct.pack("<I", len(blob)))
        out.append(blob)
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Model, path: str | os.PathLike, extra: dict | None = None) -> Path:
    path = Path(path)
    data = encode_checkpoint(model, extra)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    r = _Reader(buf)
    r.take(4)
    version, fam_len = r.unpack("<HH")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(buf) < 4 or struct.unpack("<I", buf[-4:])[0] != zlib.crc32(buf[:-4]):
        raise CheckpointError("checkpoint is corrupt or truncated (checksum mismatch)")
    r.buf = buf[:-4]
    try:
        family = r.take(fam_len).decode()
        (cfg_len,) = r.unpack("<I")
        echo = json.loads(r.take(cfg_len).decode())
        (count,) = r.unpack("<I")
        params, trainable = {}, {}
        for _ in range(count):
            (name_len,) = r.unpack("<H")
            name = r.take(name_len).decode()
            flag, ndim = r.unpack("<BB")
            shape = r.unpack(f"<{ndim}I")
            (nbytes,) = r.unpack("<I")
            if nbytes != 4 * int(np.prod(shape)):
                raise CheckpointError(f"parameter {name!r}: blob size {nbytes} does not match shape {shape}")
            params[name] = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape).astype(np.float32)
            trainable[name] = bool(flag)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header is malformed ({exc})") from exc
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after parameter blobs")
    return Checkpoint(version, family, echo.get("model", {}), echo.get("extra", {}), params, trainable)


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    try:
        return decode_checkpoint(buf)
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def model_from_checkpoint(ck: Checkpoint, expected_family: str | None = None) -> Model:
    if expected_family is not None and ck.family != expected_family:
        raise CheckpointError(f"checkpoint holds a {ck.family!r} model, expected {expected_family!r}")
    try:
        model = build_model(ck.family, ck.config)
    except (ConfigError, KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint config does not describe a {ck.family!r} model ({exc})") from exc
    params = model.parameters()
    if list(params) != list(ck.params):
        raise CheckpointError(f"parameter names do not match the {ck.family!r} architecture")
    for name, p in params.items():
        arr = ck.params[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"parameter {name!r}: shape {arr.shape} != expected {p.shape}")
        p.data = arr.copy()
        p.requires_grad = ck.trainable[name]
    return model


def load_checkpoint(path: str | os.PathLike, expected_family: str | None = None) -> Model:
    """Rebuild the model stored at ``path``; ``extra`` metadata lands on ``model.extra``."""
    ck = read_checkpoint(path)
    model = model_from_checkpoint(ck, expected_family)
    model.extra = ck.extra
    return model

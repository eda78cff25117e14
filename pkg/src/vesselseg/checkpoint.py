"""BGCK checkpoint files.

Layout (little-endian)::

    magic      b"BGCK"
    version    u32
    config     u32 length + UTF-8 ``key=value`` lines
    records    repeated until EOF:
               u32 name length, name bytes, u8 dtype (0 f32, 1 f64),
               u8 rank, u32 extent x rank, raw data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, SegModel, build_model
from .volume_io import ParseError, TruncatedError

MAGIC = b"BGCK"
VERSION = 1
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
MAX_ELEMENTS = 1 << 31


def format_config(cfg: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.items())


def parse_config_text(text: str) -> dict[str, str]:
    """``key=value`` per line; ``#`` starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def encode_checkpoint(model: SegModel, extra: dict[str, str] | None = None) -> bytes:
    cfg = model.config.to_dict()
    if extra:
        cfg.update(extra)
    text = format_config(cfg).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text]
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        arr = t.data
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise ParseError(f"bad magic {bytes(buf[:4])!r}", 0)

    pos = 4

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"truncated {what}: need {n} bytes, {len(buf) - pos} left", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    (clen,) = struct.unpack("<I", take(4, "config length"))
    cfg_start = pos
    try:
        config = parse_config_text(take(clen, "config block").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ParseError(f"malformed config block: {exc}", cfg_start) from None
    params: dict[str, np.ndarray] = {}
    while pos < len(buf):
        rec = pos
        (nlen,) = struct.unpack("<I", take(4, "record name length"))
        name = take(nlen, "record name").decode("utf-8", errors="replace")
        code, rank = struct.unpack("<BB", take(2, f"record header of {name!r}"))
        if code not in _CODE_DTYPES:
            raise ParseError(f"parameter {name!r}: unknown dtype code {code}", rec)
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name!r}"))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        if count > MAX_ELEMENTS:
            raise ParseError(f"parameter {name!r}: extent overflow ({count} elements)", rec)
        dt = _CODE_DTYPES[code]
        raw = take(count * dt.itemsize, f"data of parameter {name!r}")
        params[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return config, params


def model_from_checkpoint(buf: bytes) -> tuple[SegModel, dict[str, str]]:
    config, params = decode_checkpoint(buf)
    mcfg = ModelConfig.from_dict(config)
    dtype = next(iter(params.values())).dtype if params else np.float32
    model = build_model(mcfg, seed=0, dtype=dtype)
    missing = set(model.params) - set(params)
    extra = set(params) - set(model.params)
    if missing or extra:
        raise ParseError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}", 0)
    for name, t in model.params.items():
        if params[name].shape != t.shape:
            raise ParseError(f"parameter {name!r}: shape {params[name].shape} != expected {t.shape}", 0)
        t.data[...] = params[name]
    return model, config


def save_checkpoint(model: SegModel, path, extra: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, extra))


def load_checkpoint(path) -> SegModel:
    return model_from_checkpoint(Path(path).read_bytes())[0]

"""Binary checkpoint files.

Layout: magic "DSPN", u32 LE version, u32 LE header length, UTF-8 JSON
header (run metadata + tensor table), zero padding to a 64-byte payload
boundary, little-endian raw tensor payload (each tensor 64-byte aligned),
and a trailing u32 LE CRC32 of the whole payload. Deterministic: tensors
are laid out in sorted name order and the header JSON is canonical.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import CheckpointError

MAGIC = b"DSPN"
VERSION = 1
ALIGN = 64

_DTYPES = {"f4": "<f4", "f8": "<f8", "i4": "<i4", "i8": "<i8", "u8": "<u8"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def save_checkpoint(path, meta: dict, tensors: dict):
    """Write metadata and named arrays; fully deterministic byte layout."""
    table = []
    offset = 0
    ordered = sorted(tensors)
    blobs = []
    for name in ordered:
        arr = np.ascontiguousarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        code = _CODES.get(np.dtype(le.dtype.newbyteorder("=")))
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        data = le.tobytes()
        offset = _align(offset)
        table.append({"name": name, "dtype": code, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append((offset, data))
        offset += len(data)
    payload = bytearray(offset)
    for off, data in blobs:
        payload[off:off + len(data)] = data
    header = json.dumps({"meta": meta, "tensors": table},
                        sort_keys=True, separators=(",", ":")).encode()
    prefix_len = len(MAGIC) + 8 + len(header)
    pad = _align(prefix_len) - prefix_len
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        fh.write(b"\0" * pad)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF))


def load_checkpoint(path):
    """Read (meta, tensors). Raises CheckpointError on any corruption."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header_start = len(MAGIC) + 8
    header_end = header_start + header_len
    if header_end > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[header_start:header_end].decode())
        meta = header["meta"]
        table = header["tensors"]
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    payload_start = _align(header_end)
    if len(raw) < payload_start + 4:
        raise CheckpointError(f"{path}: truncated payload")
    payload = raw[payload_start:-4]
    (crc_stored,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: payload CRC mismatch")
    tensors = {}
    spans = []
    for entry in table:
        try:
            name, code = entry["name"], entry["dtype"]
            shape, off, nbytes = entry["shape"], entry["offset"], entry["nbytes"]
        except KeyError as exc:
            raise CheckpointError(f"{path}: incomplete tensor table: {exc}") from exc
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code!r}")
        if off < 0 or off + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {name!r} out of payload bounds")
        spans.append((off, off + nbytes, name))
        arr = np.frombuffer(payload, dtype=_DTYPES[code], count=nbytes // np.dtype(_DTYPES[code]).itemsize,
                            offset=off)
        tensors[name] = arr.reshape(shape).astype(np.dtype(_DTYPES[code]).newbyteorder("="))
    spans.sort()
    for (s1, e1, n1), (s2, e2, n2) in zip(spans, spans[1:]):
        if s2 < e1:
            raise CheckpointError(f"{path}: tensors {n1!r} and {n2!r} overlap")
    return meta, tensors

"""Checkpoint container: ASCII manifest plus flat little-endian arrays.

The manifest carries ``key=value`` metadata (config echo, counters, RNG
state) and one declaration line per array (name, dtype, shape). Arrays are
written back-to-back in declared order. Writing is canonical, so
save -> load -> save reproduces identical bytes.
"""

from __future__ import annotations

import os
import re
import zlib
from pathlib import Path

import numpy as np

_MAGIC = "LVMCKPT1"
_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8", "u1": "|u1"}


def write_checkpoint(path: str | os.PathLike, meta: dict[str, str],
                     arrays: dict[str, np.ndarray]) -> None:
    """Serialize ``meta`` and ``arrays`` to ``path``; key order is preserved."""
    lines = [_MAGIC]
    for key, value in meta.items():
        if "\n" in key or "\n" in value or "=" not in f"{key}=":
            raise ValueError(f"invalid meta entry {key!r}")
        lines.append(f"meta {key}={value}")
    payload_parts = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = {"float32": "f4", "float64": "f8", "int64": "i8", "uint8": "u1"}.get(arr.dtype.name)
        if code is None:
            raise ValueError(f"unsupported checkpoint dtype {arr.dtype} for {name!r}")
        shape = ",".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"array {name}:{code}:{shape}")
        payload_parts.append(np.ascontiguousarray(arr).astype(_DTYPES[code], copy=False).tobytes())
    payload = b"".join(payload_parts)
    header = "\n".join(lines) + "\n"
    crc = zlib.crc32(header.encode("utf-8") + payload)
    blob = header.encode("utf-8") + f"crc={crc}\n\n".encode("utf-8") + payload
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_checkpoint(path: str | os.PathLike) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Read a checkpoint written by :func:`write_checkpoint`."""
    path = os.fspath(path)

    def bad(reason: str) -> ValueError:
        return ValueError(f"corrupt checkpoint {path}: {reason}")

    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from None
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise bad("missing header terminator")
    header_bytes, payload = blob[:sep + 1], blob[sep + 2:]
    try:
        lines = header_bytes.decode("utf-8").splitlines()
    except UnicodeDecodeError:
        raise bad("header is not UTF-8") from None
    if not lines or lines[0] != _MAGIC:
        raise bad("bad magic")
    crc_lines = [line for line in lines if line.startswith("crc=")]
    if len(crc_lines) != 1:
        raise bad("missing checksum")
    without_crc = "\n".join(line for line in lines if not line.startswith("crc=")) + "\n"
    if zlib.crc32(without_crc.encode("utf-8") + payload) != int(crc_lines[0][4:]):
        raise bad("checksum mismatch")

    meta: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    cursor = 0
    for line in lines[1:]:
        if line.startswith("crc="):
            continue
        if line.startswith("meta "):
            key, eq, value = line[5:].partition("=")
            if not eq:
                raise bad(f"malformed meta line {line!r}")
            meta[key] = value
        elif line.startswith("array "):
            match = re.fullmatch(r"array ([\w./]+):(\w+):([\d,]+|scalar)", line)
            if not match or match.group(2) not in _DTYPES:
                raise bad(f"malformed array line {line!r}")
            name, code, shape_s = match.groups()
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split(","))
            dtype = np.dtype(_DTYPES[code])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
            if cursor + nbytes > len(payload):
                raise bad("payload shorter than declared arrays")
            arrays[name] = np.frombuffer(payload[cursor:cursor + nbytes],
                                         dtype=dtype).reshape(shape).copy()
            cursor += nbytes
        else:
            raise bad(f"unrecognized header line {line!r}")
    if cursor != len(payload):
        raise bad("payload longer than declared arrays")
    return meta, arrays

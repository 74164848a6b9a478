"""Checkpoint files: a text manifest followed by raw little-endian float64 data.

Layout::

    PREFPOSE-CKPT 1
    meta <key> <value>          (zero or more)
    param <name> <d0>x<d1>... <byte offset> <value count>
    end
    <raw bytes>

Offsets are relative to the first byte after the ``end`` line.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .params import ParameterSet

MAGIC = "PREFPOSE-CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParameterSet, meta: dict[str, str] | None = None) -> None:
    lines = [f"{MAGIC} {VERSION}"]
    for k in sorted(meta or {}):
        v = str(meta[k])
        if not k or any(ch.isspace() for ch in k) or "\n" in v:
            raise CheckpointError(f"bad meta entry {k!r}")
        lines.append(f"meta {k} {v}")
    blobs = []
    offset = 0
    for name, t in params.items():
        shape = "x".join(str(d) for d in t.shape) if t.shape else "scalar"
        lines.append(f"param {name} {shape} {offset} {t.data.size}")
        blob = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        blobs.append(blob)
        offset += len(blob)
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    Path(path).write_bytes(header + b"".join(blobs))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if cut < 0:
        raise CheckpointError(f"{path}: missing manifest terminator")
    body = raw[cut + len(marker) :]
    lines = raw[:cut].decode("ascii").split("\n")
    head = lines[0].split()
    if len(head) != 2 or head[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if int(head[1]) != VERSION:
        raise CheckpointError(f"{path}: unsupported version {head[1]}")
    meta: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            k, _, v = rest.partition(" ")
            meta[k] = v
        elif kind == "param":
            name, shape_s, off_s, n_s = rest.split(" ")
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
            off, n = int(off_s), int(n_s)
            if off + 8 * n > len(body):
                raise CheckpointError(f"{path}: truncated data for {name}")
            arrays[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        else:
            raise CheckpointError(f"{path}: unexpected manifest line {line!r}")
    return arrays, meta

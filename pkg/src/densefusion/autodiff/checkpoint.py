"""Parameter checkpoint files.

Layout: an ASCII header, one line per record, terminated by ``end``::

    DFCKPT 1
    config <json>                  (optional, at most one)
    section <name>
    param <name> <dim> <dim> ...
    ...
    end

followed by every parameter as little-endian float64, in header order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..exceptions import MalformedFile, MissingCheckpoint
from .tensor import Tensor

MAGIC = "DFCKPT 1"


def save_checkpoint(path, sections, config=None):
    """Write ``sections`` (name -> {param name -> Tensor or array}) to ``path``."""
    lines = [MAGIC]
    if config is not None:
        lines.append("config " + json.dumps(config, sort_keys=True))
    blobs = []
    for section, params in sections.items():
        if any(c.isspace() for c in section):
            raise ValueError(f"section name may not contain whitespace: {section!r}")
        lines.append(f"section {section}")
        for name, value in params.items():
            arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
            lines.append(" ".join(["param", name] + [str(d) for d in arr.shape]))
            blobs.append(arr.tobytes(order="C"))
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Return ``(sections, config)``; parameters come back as trainable Tensors."""
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    pos = 0
    header = []
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise MalformedFile("unterminated checkpoint header", pos)
        line = raw[pos:nl].decode("ascii", errors="replace")
        pos = nl + 1
        if line == "end":
            break
        header.append(line)
    if not header or header[0] != MAGIC:
        raise MalformedFile("bad checkpoint magic", 0)
    sections, config, current = {}, None, None
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            config = json.loads(rest)
        elif kind == "section":
            current = sections.setdefault(rest, {})
        elif kind == "param":
            if current is None:
                raise MalformedFile("param before any section", pos)
            parts = rest.split()
            shape = tuple(int(d) for d in parts[1:])
            nbytes = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + nbytes > len(raw):
                raise MalformedFile(f"truncated data for parameter {parts[0]}", pos)
            arr = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape)
            current[parts[0]] = Tensor(arr.astype(np.float64), requires_grad=True, name=parts[0])
            pos += nbytes
        else:
            raise MalformedFile(f"unknown header record {kind!r}", pos)
    return sections, config

"""Single-file checkpoints: magic, JSON header, torch state dict.

Layout: ``b"SITSXCKP"`` | uint32 little-endian header length | UTF-8 JSON
header | ``torch.save`` payload.  Writes go to a temporary file that is
renamed into place.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from pathlib import Path

import torch

from .errors import CheckpointMismatch

MAGIC = b"SITSXCKP"
VERSION = 1


def save_checkpoint(path, state_dict: dict, header: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = json.dumps({"version": VERSION, **header}, sort_keys=True).encode()
    buf = io.BytesIO()
    torch.save(state_dict, buf)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(head)))
            f.write(head)
            f.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_header(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f, path)


def _read_header(f, path) -> dict:
    if f.read(len(MAGIC)) != MAGIC:
        raise CheckpointMismatch(f"{path} is not a sitsx checkpoint")
    (n,) = struct.unpack("<I", f.read(4))
    return json.loads(f.read(n).decode())


def load_checkpoint(path, expected_fingerprint: str | None = None) -> tuple[dict, dict]:
    """Return ``(header, state_dict)``; verify the config fingerprint when given."""
    with open(path, "rb") as f:
        header = _read_header(f, path)
        state = torch.load(io.BytesIO(f.read()), map_location="cpu", weights_only=True)
    if expected_fingerprint is not None and header.get("fingerprint") != expected_fingerprint:
        raise CheckpointMismatch(
            f"checkpoint fingerprint {header.get('fingerprint')} != expected {expected_fingerprint}"
        )
    return header, state

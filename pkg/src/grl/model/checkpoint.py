"""GRLW checkpoints: named GRLT records plus a JSON config sidecar.

Layout: ``b"GRLW"``, u8 version, u32 parameter count, then per parameter a
u16 name length, the UTF-8 name, and one GRLT tensor record.
"""

import io
import json
import os
import struct
from collections import OrderedDict

from ..fileio import atomic_write_bytes, atomic_write_text
from ..tensor.io import FormatError, encode_tensor, read_record
from .config import GRLConfig

MAGIC = b"GRLW"
VERSION = 1


def encode_checkpoint(params):
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<BI", VERSION, len(params)))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(encode_tensor(getattr(arr, "data", arr)))
    return buf.getvalue()


def decode_checkpoint(payload):
    fh = io.BytesIO(payload)
    if fh.read(4) != MAGIC:
        raise FormatError("bad GRLW magic")
    head = fh.read(5)
    if len(head) != 5:
        raise FormatError("truncated GRLW header")
    version, count = struct.unpack("<BI", head)
    if version != VERSION:
        raise FormatError(f"unsupported GRLW version {version}")
    params = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack("<H", fh.read(2))
        name = fh.read(n).decode("utf-8")
        params[name] = read_record(fh)
    if fh.read(1):
        raise FormatError("trailing bytes after GRLW records")
    return params


def sidecar_path(path):
    return os.fspath(path) + ".json"


def save_checkpoint(path, model, extra=None):
    """Write ``path`` (GRLW) and ``path + '.json'`` (config + extra metadata)."""
    meta = {"config": model.cfg.to_dict()}
    if extra:
        meta.update(extra)
    atomic_write_bytes(path, encode_checkpoint(model.state()))
    atomic_write_text(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Return ``(GRL model, sidecar metadata)``."""
    from .network import GRL

    with open(path, "rb") as fh:
        params = decode_checkpoint(fh.read())
    with open(sidecar_path(path)) as fh:
        meta = json.load(fh)
    cfg = GRLConfig.from_dict(meta["config"])
    return GRL(cfg, params), meta

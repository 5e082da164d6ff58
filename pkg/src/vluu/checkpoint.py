"""Binary checkpoints and text loss histories.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic b"VLUUCKPT"
    u32       format version
    u32       header length L
    L bytes   UTF-8 JSON header: kind, arch, step, strategy, seed, params [[name, shape], ...]
    ...       parameters in header order, little-endian float32
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from vluu import nn
from vluu.errors import CheckpointError
from vluu.train import losses_text

MAGIC = b"VLUUCKPT"
VERSION = 1
_KINDS = {"segnet": nn.SegNet, "discriminator": nn.Discriminator, "kt": nn.KTNet}


def checkpoint_bytes(model, step, meta=None):
    params = model.params
    header = {
        "kind": model.kind,
        "arch": model.arch.to_dict(),
        "step": int(step),
        "params": [[name, list(arr.shape)] for name, arr in params.items()],
    }
    header.update(meta or {})
    blob = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.values())
    return MAGIC + struct.pack("<II", VERSION, len(blob)) + blob + body


def write_checkpoint(path, model, step, meta=None):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, step, meta))
    tmp.replace(path)


def read_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, header)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[16:16 + hlen].decode())
        cls = _KINDS[header["kind"]]
        arch = nn.ArchConfig.from_dict(header["arch"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    model = cls(arch)
    params = model.params
    expected = [[n, list(a.shape)] for n, a in params.items()]
    if header.get("params") != expected:
        raise CheckpointError(f"{path}: parameter layout does not match a {header['kind']} "
                              f"for {header['arch']}")
    offset = 16 + hlen
    for name, arr in params.items():
        nbytes = arr.size * 4
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated at parameter {name}")
        arr[...] = np.frombuffer(chunk, dtype="<f4").reshape(arr.shape)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return model, header


def write_history(path, history):
    Path(path).write_text(history.to_text())


def write_disc_logs(directory, history):
    """Critic loss history and the range of critic scores seen during training."""
    directory = Path(directory)
    (directory / "disc_history.tsv").write_text(losses_text(history.disc_losses))
    lo, hi = history.disc_score_range
    (directory / "disc_scores.txt").write_text(f"min\t{lo!r}\nmax\t{hi!r}\n")


def read_history(path):
    out = []
    for line in Path(path).read_text().splitlines():
        step, loss = line.split("\t")
        out.append((int(step), float(loss)))
    return out

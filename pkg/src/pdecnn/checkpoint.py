"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic     8 bytes   b"PDECNNCK"
    version   u32
    count     u32       number of sections
    section*  name_len u16, name utf-8, kind u8, ndim u8, dims u64[ndim],
              nbytes u64, payload

``kind`` 0 is UTF-8 JSON text (ndim 0), ``kind`` 1 a float64 array stored as
little-endian doubles in C order. Arrays round-trip bit for bit.

Sections written by :func:`save_checkpoint`: ``meta`` (spec, configs, epoch,
best record, RNG state, history), ``w/<key>`` weights, ``v/<key>`` momentum,
``bn/<layer>/{mean,var}``, ``best/<key>``, ``bestbn/<layer>/{mean,var}`` and
``data/{mean,std}`` input normalization.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PDECNNCK"
VERSION = 1
KIND_JSON = 0
KIND_F64 = 1


class CheckpointError(ValueError):
    pass


def write_sections(path: str, sections: dict) -> None:
    """Atomically write ``name -> (dict | ndarray)`` sections."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, value in sections.items():
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        if isinstance(value, np.ndarray):
            a = np.asarray(value, dtype="<f8")
            payload = a.tobytes(order="C")
            chunks.append(struct.pack("<BB", KIND_F64, a.ndim))
            chunks.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        else:
            payload = json.dumps(value).encode("utf-8")
            chunks.append(struct.pack("<BB", KIND_JSON, 0))
        chunks.append(struct.pack("<Q", len(payload)) + payload)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_sections(path: str) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos} (needed {n} more bytes)")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version} is not supported "
                              f"(this build reads version {VERSION})")
    sections = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        kind, ndim = struct.unpack("<BB", take(2))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        (nbytes,) = struct.unpack("<Q", take(8))
        payload = take(nbytes)
        if kind == KIND_F64:
            if nbytes != 8 * int(np.prod(dims, dtype=np.int64)):
                raise CheckpointError(f"{path}: section {name!r} size does not match its shape {dims}")
            sections[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
        elif kind == KIND_JSON:
            sections[name] = json.loads(payload.decode("utf-8"))
        else:
            raise CheckpointError(f"{path}: section {name!r} has unknown kind {kind}")
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes after last section")
    return sections


@dataclass
class Checkpoint:
    spec: dict
    weights: dict
    velocity: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)
    best_weights: dict = field(default_factory=dict)
    best_bn: dict = field(default_factory=dict)
    rng_state: dict | None = None
    epoch: int = 0
    best: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    reg: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    data_mean: np.ndarray | None = None
    data_std: np.ndarray | None = None


def save_checkpoint(cp: Checkpoint, path: str) -> None:
    meta = {
        "spec": cp.spec, "rng_state": cp.rng_state, "epoch": cp.epoch, "best": cp.best,
        "train_config": cp.train_config, "reg": cp.reg, "history": cp.history,
        "weight_keys": list(cp.weights), "bn_keys": list(cp.bn),
    }
    sections = {"meta": meta}
    for prefix, d in (("w", cp.weights), ("v", cp.velocity), ("best", cp.best_weights)):
        for k, v in d.items():
            sections[f"{prefix}/{k}"] = v
    for prefix, d in (("bn", cp.bn), ("bestbn", cp.best_bn)):
        for k, (mean, var) in d.items():
            sections[f"{prefix}/{k}/mean"] = mean
            sections[f"{prefix}/{k}/var"] = var
    if cp.data_mean is not None:
        sections["data/mean"] = cp.data_mean
        sections["data/std"] = cp.data_std
    write_sections(path, sections)


def load_checkpoint(path: str) -> Checkpoint:
    s = read_sections(path)
    try:
        meta = s["meta"]
    except KeyError:
        raise CheckpointError(f"{path}: missing meta section") from None
    keys = meta["weight_keys"]

    def group(prefix):
        return {k: s[f"{prefix}/{k}"] for k in keys if f"{prefix}/{k}" in s}

    def bn_group(prefix):
        return {k: (s[f"{prefix}/{k}/mean"], s[f"{prefix}/{k}/var"])
                for k in meta["bn_keys"] if f"{prefix}/{k}/mean" in s}

    return Checkpoint(
        spec=meta["spec"], weights=group("w"), velocity=group("v"), bn=bn_group("bn"),
        best_weights=group("best"), best_bn=bn_group("bestbn"), rng_state=meta["rng_state"],
        epoch=meta["epoch"], best=meta["best"], train_config=meta["train_config"], reg=meta["reg"],
        history=meta["history"], data_mean=s.get("data/mean"), data_std=s.get("data/std"),
    )

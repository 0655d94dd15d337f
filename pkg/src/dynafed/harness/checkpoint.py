"""DYNA binary container for parameters, synthetic datasets and trajectories.

Layout (little-endian): b"DYNA", u32 version, u32 block count, then per
block u16 name length, utf-8 name, u64 element count, float64 data.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import BadMagicError, BadVersionError, ParseError, TruncatedFileError, ValidationError
from ..model import MlpSpec, ParamVector
from ..synthesis import SyntheticDataset, Trajectory

MAGIC = b"DYNA"
VERSION = 1


def encode_blocks(blocks: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(blocks))]
    for name, arr in blocks.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError(f"block name too long: {name[:40]!r}...")
        data = np.ascontiguousarray(arr, dtype="<f8").reshape(-1)
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<Q", data.size))
        out.append(data.tobytes())
    return b"".join(out)


def decode_blocks(raw: bytes) -> dict:
    def need(off, n, what):
        if off + n > len(raw):
            raise TruncatedFileError(f"truncated while reading {what}", offset=off)

    need(0, 4, "magic")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"magic {raw[:4]!r}, expected {MAGIC!r}", offset=0)
    need(4, 8, "header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise BadVersionError(f"format version {version}, only {VERSION} is supported", offset=4)
    off = 12
    blocks = {}
    for i in range(count):
        need(off, 2, f"block {i} name length")
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        need(off, nlen, f"block {i} name")
        try:
            name = raw[off:off + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"block {i} name is not utf-8", offset=off) from exc
        off += nlen
        need(off, 8, f"block {name!r} element count")
        (n,) = struct.unpack_from("<Q", raw, off)
        off += 8
        need(off, 8 * n, f"block {name!r} data")
        blocks[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
    if off != len(raw):
        raise ParseError(f"{len(raw) - off} trailing bytes after the last block", offset=off)
    return blocks


def save_blocks(path, blocks: dict):
    Path(path).write_bytes(encode_blocks(blocks))


def load_blocks(path) -> dict:
    return decode_blocks(Path(path).read_bytes())


def to_blocks(obj) -> dict:
    if isinstance(obj, ParamVector):
        return {"layer_sizes": np.array(obj.spec.layer_sizes, dtype=np.float64), "params": obj.values}
    if isinstance(obj, SyntheticDataset):
        return {"X": obj.X, "Ylogits": obj.Ylogits, "meta": np.array([obj.n, obj.d, obj.K], dtype=np.float64)}
    if isinstance(obj, Trajectory):
        return {
            "layer_sizes": np.array(obj.spec.layer_sizes, dtype=np.float64),
            "rounds": np.array(obj.rounds, dtype=np.float64),
            "trajectory": np.stack([c.values for c in obj.checkpoints]),
        }
    raise ValidationError(f"cannot checkpoint a {type(obj).__name__}")


def _ints(arr, what):
    if not np.all(arr == np.round(arr)) or np.any(arr < 0):
        raise ParseError(f"{what} block must hold non-negative integers")
    return tuple(int(v) for v in arr)


def from_blocks(blocks: dict):
    names = set(blocks)
    if {"X", "Ylogits", "meta"} <= names:
        n, d, K = _ints(blocks["meta"], "meta")
        if blocks["X"].size != n * d or blocks["Ylogits"].size != n * K:
            raise ParseError("synthetic dataset blocks disagree with meta")
        return SyntheticDataset(blocks["X"].reshape(n, d), blocks["Ylogits"].reshape(n, K))
    if "layer_sizes" not in names:
        raise ParseError(f"unrecognized block set {sorted(names)}")
    spec = MlpSpec(_ints(blocks["layer_sizes"], "layer_sizes"))
    if "trajectory" in names and "rounds" in names:
        rounds = _ints(blocks["rounds"], "rounds")
        flat = blocks["trajectory"]
        if flat.size != len(rounds) * spec.n_params:
            raise ParseError("trajectory block size does not match rounds x parameters")
        rows = flat.reshape(len(rounds), spec.n_params)
        return Trajectory(tuple(ParamVector(spec, r) for r in rows), rounds)
    if "params" in names:
        if blocks["params"].size != spec.n_params:
            raise ParseError("parameter block size does not match layer_sizes")
        return ParamVector(spec, blocks["params"])
    raise ParseError(f"unrecognized block set {sorted(names)}")


def save_checkpoint(obj, path):
    """ParamVector, SyntheticDataset or Trajectory to a DYNA file."""
    save_blocks(path, to_blocks(obj))


def load_checkpoint(path):
    return from_blocks(load_blocks(path))

"""Versioned binary container for networks, SVM models and descriptor files.

Byte layout (all integers little-endian)::

    0   8 bytes   magic  b"MSCNNBIN"
    8   u32       format version (currently 1)
    12  u64       header length H in bytes
    20  H bytes   UTF-8 JSON header
    ..  zero padding up to the next multiple of 8
    ..  payload: arrays back to back, each starting on an 8-byte boundary

The header is ``{"kind": str, "meta": {...}, "crc32": int, "arrays": [...]}``
where every array entry is ``{"name", "dtype", "shape", "offset", "nbytes"}``;
``offset`` is relative to the payload start, ``dtype`` is a numpy type string
in little-endian form (e.g. ``"<f8"``) and data is C-ordered. ``crc32`` covers
the whole payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import Network, NetworkConfig

MAGIC = b"MSCNNBIN"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def _pad(n: int) -> int:
    return (-n) % 8


def save_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append(
            {"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw + b"\0" * _pad(len(raw)))
        offset += len(raw) + _pad(len(raw))
    payload = b"".join(chunks)
    header = json.dumps(
        {"kind": kind, "meta": meta, "crc32": zlib.crc32(payload), "arrays": entries},
        sort_keys=True,
    ).encode("utf-8")
    head = _PREFIX.pack(MAGIC, VERSION, len(header)) + header
    with open(path, "wb") as f:
        f.write(head + b"\0" * _pad(len(head)))
        f.write(payload)


def load_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    end = _PREFIX.size + hlen
    if len(blob) < end:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(blob[_PREFIX.size : end].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} file, found {header['kind']!r}")
    start = end + _pad(end)
    payload = blob[start:]
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch (truncated or corrupt)")
    arrays = {}
    for e in header["arrays"]:
        buf = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], arrays


def network_state(net: Network) -> dict[str, np.ndarray]:
    state = {f"param:{n}": p.data for n, p in net.named_parameters()}
    state.update({f"buffer:{n}": b for n, b in net.named_buffers()})
    return state


def load_network_state(net: Network, state: dict[str, np.ndarray]) -> None:
    params = dict(net.named_parameters())
    buffers = dict(net.named_buffers())
    expected = {f"param:{n}" for n in params} | {f"buffer:{n}" for n in buffers}
    if set(state) != expected:
        missing = sorted(expected - set(state))[:3]
        extra = sorted(set(state) - expected)[:3]
        raise CheckpointError(f"state mismatch; missing {missing}, unexpected {extra}")
    for key, arr in state.items():
        kind, name = key.split(":", 1)
        target = params[name].data if kind == "param" else buffers[name]
        if target.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != {target.shape}")
        target[...] = arr


def save_checkpoint(path, net: Network, *, epoch: int = 0, extra: dict | None = None) -> None:
    meta = {
        "config": net.cfg.to_dict(),
        "seed": net.seed,
        "epoch": epoch,
        "extra": extra or {},
    }
    save_container(path, "network", meta, network_state(net))


def load_checkpoint(path) -> tuple[Network, dict]:
    meta, arrays = load_container(path, "network")
    net = Network(NetworkConfig.from_dict(meta["config"]), meta["seed"])
    load_network_state(net, arrays)
    return net, meta

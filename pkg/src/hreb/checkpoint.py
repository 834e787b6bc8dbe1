"""Checkpoint serialization.

Layout: 4-byte magic "HREB", uint32 LE format version, uint64 LE header
length, a UTF-8 JSON header, then the payload: every array as raw
little-endian float64 in header order. The header carries the effective
config, token and tag lists, parameter names and shapes, and the residual
gate-cache dims. Weights round-trip bit-identically.
"""

import json
import struct

import numpy as np

from .config import RunConfig
from .data import Vocab
from .errors import CheckpointError
from .model import HrebModel

MAGIC = b"HREB"
VERSION = 1


def _pack(arr):
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path, config, vocab, state):
    """Write config, vocab, and a snapshot (params plus gate caches)."""
    header = {
        "config": config.to_dict(),
        "tokens": vocab.tokens,
        "tags": vocab.tags,
        "params": [{"name": name, "shape": list(arr.shape)}
                   for name, arr in state["params"].items()],
        "cache_dims": [int(cf.shape[0]) for cf, _ in state["caches"]],
    }
    blob = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in state["params"].values():
            fh.write(_pack(arr))
        for cf, cx in state["caches"]:
            fh.write(_pack(cf))
            fh.write(_pack(cx))


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: short read in {what}")
    return data


def load_checkpoint(path):
    """Read (config, vocab, state) back; refuses foreign or newer files."""
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}")
    with fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(
                f"checkpoint format version {version}; this build reads {VERSION}")
        (hlen,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        try:
            header = json.loads(_read_exact(fh, hlen, "header").decode("utf-8"))
        except ValueError:
            raise CheckpointError(f"{path}: corrupt checkpoint header")
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 8 * n, f"parameter {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        caches = []
        for d in header["cache_dims"]:
            cf = np.frombuffer(_read_exact(fh, 8 * d, "gate cache"), dtype="<f8").copy()
            cx = np.frombuffer(_read_exact(fh, 8 * d, "gate cache"), dtype="<f8").copy()
            caches.append((cf, cx))
    config = RunConfig.from_dict(header["config"])
    vocab = Vocab.from_maps(header["tokens"], header["tags"])
    return config, vocab, {"params": params, "caches": caches}


def load_model(path):
    """Rebuild a ready-to-run model from a checkpoint.

    Initialization reads no external embedding file even when the stored
    config says embeddings=file; the trained rows are in the payload.
    """
    config, vocab, state = load_checkpoint(path)
    build_cfg = RunConfig.from_dict(
        {**config.to_dict(), "embeddings": "scratch", "embedding_path": ""})
    model = HrebModel(build_cfg, vocab)
    stored = set(state["params"])
    current = set(model.param_names())
    if stored != current:
        raise CheckpointError(
            "checkpoint parameters do not match this architecture: "
            f"missing {sorted(current - stored)}, extra {sorted(stored - current)}")
    for p in model.params():
        arr = state["params"][p.name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"parameter {p.name}: stored shape {arr.shape} != built {p.data.shape}")
        p.data = arr.copy()
    gate_states = model.gate_states()
    if len(gate_states) != len(state["caches"]):
        raise CheckpointError("gate cache count does not match this architecture")
    for gs, (cf, cx) in zip(gate_states, state["caches"]):
        gs.cache_f = cf.copy()
        gs.cache_x = cx.copy()
    model.config = config
    return model, config

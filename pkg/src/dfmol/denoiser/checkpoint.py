"""Versioned binary checkpoints: JSON header followed by named float64 arrays.

Layout::

    MAGIC (8 bytes) | header length (uint64 LE) | header JSON (UTF-8) | payload

The header lists every array with its name, shape and byte offset into the
payload; arrays are little-endian float64 in C order. Integer optimiser
counters are stored as float64 too (exact below 2**53).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np
import torch

from ..datasets import AtomCountSampler
from ..flows import FlowVariant
from ..molgraph import AtomVocabulary
from .model import MoleculeDenoiser
from .training import TrainConfig, TrainState, make_optimizer

MAGIC = b"DFMOLCK\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", v.detach().numpy()) for k, v in state.model.state_dict().items()]
    names = [k for k, _ in state.model.named_parameters()]
    opt_state = state.optimizer.state_dict()["state"]
    for i, name in enumerate(names):
        s = opt_state.get(i)
        if s is None:
            continue
        out.append((f"adam/step/{name}", np.array([float(s["step"])])))
        out.append((f"adam/exp_avg/{name}", s["exp_avg"].detach().numpy()))
        out.append((f"adam/exp_avg_sq/{name}", s["exp_avg_sq"].detach().numpy()))
    return out


def save_checkpoint(state: TrainState, path) -> None:
    arrays = _arrays(state)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "version": VERSION,
        "variant": state.variant.to_json(),
        "vocabulary": state.vocab.to_json(),
        "config": state.config.to_json(),
        "atom_counts": state.atom_counts.to_json(),
        "step": state.step,
        "seed": state.seed,
        "history": state.history,
        "arrays": entries,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".", prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_header(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("checkpoint corrupt: bad magic bytes")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + hlen > len(blob):
        raise CheckpointError("checkpoint corrupt: truncated header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint corrupt: unreadable header ({exc})") from None
    if not isinstance(header, dict) or "version" not in header:
        raise CheckpointError("checkpoint corrupt: header lacks a version")
    if header["version"] != VERSION:
        raise CheckpointError(f"checkpoint version {header['version']} is not supported (expected {VERSION})")
    payload = blob[start + hlen :]
    if len(payload) < header.get("payload_bytes", 0):
        raise CheckpointError("checkpoint truncated: payload shorter than declared")
    return header, payload


def load_checkpoint(path) -> TrainState:
    header, payload = read_header(path)
    try:
        vocab = AtomVocabulary.from_json(header["vocabulary"])
        variant = FlowVariant.from_json(header["variant"])
        config = TrainConfig.from_json(header["config"])
        counts = AtomCountSampler.from_json(header["atom_counts"])
        entries = header["arrays"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint corrupt: bad header field ({exc})") from None
    arrays = {}
    for ent in entries:
        lo, hi = ent["offset"], ent["offset"] + ent["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"checkpoint truncated in array {ent['name']}")
        arr = np.frombuffer(payload[lo:hi], dtype="<f8")
        if arr.size != int(np.prod(ent["shape"], dtype=np.int64)):
            raise CheckpointError(f"checkpoint corrupt: size of {ent['name']} disagrees with its shape")
        arrays[ent["name"]] = arr.reshape(ent["shape"]).copy()

    model = MoleculeDenoiser(vocab, variant, config.model, seed=config.seed)
    sd = model.state_dict()
    loaded = {}
    for k, v in sd.items():
        arr = arrays.get(f"param/{k}")
        if arr is None:
            raise CheckpointError(f"checkpoint is missing parameter {k}")
        if tuple(arr.shape) != tuple(v.shape):
            raise CheckpointError(f"shape mismatch for {k}: checkpoint {tuple(arr.shape)}, model {tuple(v.shape)}")
        loaded[k] = torch.from_numpy(arr)
    model.load_state_dict(loaded)

    opt = make_optimizer(model, config)
    opt_sd = opt.state_dict()
    for i, (name, p) in enumerate(model.named_parameters()):
        if f"adam/step/{name}" not in arrays:
            continue
        m, v = arrays[f"adam/exp_avg/{name}"], arrays[f"adam/exp_avg_sq/{name}"]
        if m.shape != tuple(p.shape) or v.shape != tuple(p.shape):
            raise CheckpointError(f"shape mismatch for optimiser moments of {name}")
        opt_sd["state"][i] = {
            "step": torch.tensor(arrays[f"adam/step/{name}"][0], dtype=torch.float32),
            "exp_avg": torch.from_numpy(m),
            "exp_avg_sq": torch.from_numpy(v),
        }
    opt.load_state_dict(opt_sd)
    model.eval()
    return TrainState(model, opt, int(header["step"]), int(header["seed"]), config, counts, list(header.get("history", [])))

"""Bit-exact checkpoint format.

Layout (all integers little endian):

    magic   4 bytes  b"OAKN"
    version u32
    metalen u64
    meta    UTF-8 JSON: architecture name, full network spec, spec digest,
            seed, epoch, tensor manifest, optimizer manifest, RNG state
    payload per-tensor little-endian float32 blocks in manifest order
            (trainable weights, then non-trainable state, then optimizer
            slots)
    check   8 bytes: first 8 bytes of SHA-256 over everything above

A save -> load round trip reproduces bit-identical forward outputs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .network import Network
from .optim import Optimizer, OptimizerConfig, init_state
from .specs import NetworkSpec

MAGIC = b"OAKN"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Truncated or structurally invalid checkpoint file."""


class CheckpointIntegrityError(ValueError):
    """Checksum mismatch: the payload bytes were corrupted."""


class SpecDigestError(ValueError):
    """The checkpoint does not belong to the requested architecture."""


def _tensor_blocks(network: Network, optimizer: Optimizer | None):
    blocks = []
    for lname, pname, arr in network.parameters():
        blocks.append((f"{lname}.{pname}", arr))
    for lname, pname, arr in network.state_tensors():
        blocks.append((f"{lname}.{pname}", arr))
    if optimizer is not None:
        for sname, arr in optimizer.state_tensors():
            blocks.append((f"optimizer.{sname}", arr))
    return blocks


def save_checkpoint(network: Network, path, optimizer: Optimizer | None = None,
                    epoch: int = 0, rng_state=None):
    blocks = _tensor_blocks(network, optimizer)
    meta = {
        "architecture": network.spec.name,
        "spec": network.spec.to_dict(),
        "spec_digest": network.spec.digest(),
        "seed": network.seed,
        "epoch": int(epoch),
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in blocks],
        "optimizer": None,
        "rng_state": _encode_rng(rng_state if rng_state is not None
                                 else network.rng.bit_generator.state),
    }
    if optimizer is not None:
        meta["optimizer"] = {
            "kind": optimizer.cfg.kind,
            "config": optimizer.cfg.__dict__,
            "t": optimizer.state["t"] if optimizer.state else 0,
        }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += VERSION.to_bytes(4, "little")
    out += len(meta_bytes).to_bytes(8, "little")
    out += meta_bytes
    for _, arr in blocks:
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += hashlib.sha256(bytes(out)).digest()[:8]
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, preset: str | None = None, dtype=np.float32):
    """Rebuild a network (and optionally optimizer) from a checkpoint.

    ``preset``, when given, must match the stored architecture name.
    Returns ``(network, extras)`` with extras holding epoch, optimizer and
    RNG state.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not an OAKN checkpoint")
    version = int.from_bytes(raw[4:8], "little")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    digest = hashlib.sha256(raw[:-8]).digest()[:8]
    if digest != raw[-8:]:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch")
    meta_len = int.from_bytes(raw[8:16], "little")
    meta_end = 16 + meta_len
    if meta_end > len(raw) - 8:
        raise CheckpointFormatError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[16:meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: bad metadata ({e})") from None

    if preset is not None and meta["architecture"] != preset:
        raise SpecDigestError(f"{path}: checkpoint holds {meta['architecture']!r}, "
                              f"not {preset!r}")
    spec = NetworkSpec.from_dict(meta["spec"])
    if spec.digest() != meta["spec_digest"]:
        raise SpecDigestError(f"{path}: spec digest mismatch")

    network = Network(spec, seed=meta["seed"], dtype=dtype)
    blocks = []
    for lname, pname, arr in network.parameters():
        blocks.append((f"{lname}.{pname}", arr))
    for lname, pname, arr in network.state_tensors():
        blocks.append((f"{lname}.{pname}", arr))

    pos = meta_end
    stored = {t["name"]: tuple(t["shape"]) for t in meta["tensors"]}
    optimizer = None
    opt_slots = []
    if meta.get("optimizer"):
        cfg = OptimizerConfig(**meta["optimizer"]["config"])
        optimizer = Optimizer(cfg)
        params = [arr for _, _, arr in network.parameters()]
        optimizer.state = init_state(params, cfg)
        optimizer.state["t"] = meta["optimizer"]["t"]
        for sname, arr in optimizer.state_tensors():
            opt_slots.append((f"optimizer.{sname}", arr))

    for name, arr in blocks + opt_slots:
        if name not in stored:
            raise SpecDigestError(f"{path}: tensor {name!r} missing from checkpoint")
        if stored[name] != arr.shape:
            raise SpecDigestError(f"{path}: tensor {name!r} shape {stored[name]} "
                                  f"does not match network shape {arr.shape}")
        nbytes = arr.size * 4
        chunk = raw[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointFormatError(f"{path}: truncated payload at {name!r}")
        arr[...] = np.frombuffer(chunk, dtype="<f4").reshape(arr.shape).astype(arr.dtype)
        pos += nbytes
    if pos != len(raw) - 8:
        raise CheckpointFormatError(f"{path}: {len(raw) - 8 - pos} unexpected "
                                    "trailing payload bytes")

    if meta.get("rng_state"):
        network.rng.bit_generator.state = _decode_rng(meta["rng_state"])
    extras = {"epoch": meta["epoch"], "optimizer": optimizer,
              "architecture": meta["architecture"]}
    return network, extras


def _encode_rng(state):
    def enc(v):
        if isinstance(v, dict):
            return {k: enc(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"__ndarray__": v.tolist(), "dtype": str(v.dtype)}
        if isinstance(v, (np.integer,)):
            return int(v)
        return v
    return enc(state)


def _decode_rng(state):
    def dec(v):
        if isinstance(v, dict):
            if "__ndarray__" in v:
                return np.asarray(v["__ndarray__"], dtype=v["dtype"])
            return {k: dec(x) for k, x in v.items()}
        return v
    return dec(state)

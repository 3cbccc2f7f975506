"""Versioned binary checkpoints.

Layout::

    b"GIFTCKPT\\n" | uint64 LE header length | JSON header | float64 LE payload | sha256 of all preceding bytes

The header is JSON with sorted keys and lists every array's name, shape and offset
into the payload, so saving the same checkpoint twice gives identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from gift.nn import MlpParams
from gift.policy import ObsNorm, PolicyParams, ValueParams

MAGIC = b"GIFTCKPT\n"
FORMAT_VERSION = 1
PHASES = ("pretrained", "gifted")


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class PhaseMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    policy: PolicyParams
    value: ValueParams
    phase: str
    config: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")


def _named_arrays(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"policy.{i}", a) for i, a in enumerate(ck.policy.mean_net.arrays())]
    out.append(("policy.log_std", ck.policy.log_std))
    out += [(f"value.{i}", a) for i, a in enumerate(ck.value.net.arrays())]
    out += [("obs_norm.mean", ck.policy.obs_norm.mean), ("obs_norm.var", ck.policy.obs_norm.var)]
    return out


def to_bytes(ck: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in _named_arrays(ck):
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append(dict(name=name, shape=list(np.shape(arr)), offset=offset))
        chunks.append(data)
        offset += len(data)
    header = dict(
        version=ck.version,
        phase=ck.phase,
        action_bound=repr(float(ck.policy.action_bound)),
        obs_norm_count=repr(float(ck.policy.obs_norm.count)),
        activation=ck.policy.mean_net.activation,
        arrays=entries,
        config=ck.config,
    )
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if not blob.startswith(MAGIC):
        raise CorruptCheckpointError(f"{source}: not a checkpoint (bad magic)")
    if len(blob) < len(MAGIC) + 8 + 32:
        raise CorruptCheckpointError(f"{source}: truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{source}: checksum mismatch (truncated or corrupted)")
    (hlen,) = struct.unpack("<Q", body[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(body[start : start + hlen])
    except ValueError as exc:
        raise CorruptCheckpointError(f"{source}: unreadable header") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{source}: format version {header.get('version')} but this build reads {FORMAT_VERSION}"
        )
    payload = body[start + hlen :]
    arrays: dict[str, np.ndarray] = {}
    for e in header["arrays"]:
        size = int(np.prod(e["shape"], dtype=np.int64)) * 8
        chunk = payload[e["offset"] : e["offset"] + size]
        if len(chunk) != size:
            raise CorruptCheckpointError(f"{source}: array {e['name']} is truncated")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)

    def layers(prefix: str) -> list[np.ndarray]:
        n = sum(1 for k in arrays if k.startswith(prefix) and k[len(prefix):].isdigit())
        return [arrays[f"{prefix}{i}"] for i in range(n)]

    norm = ObsNorm(arrays["obs_norm.mean"], arrays["obs_norm.var"], float(header["obs_norm_count"]))
    policy = PolicyParams(
        MlpParams.from_arrays(layers("policy."), header["activation"]),
        arrays["policy.log_std"],
        float(header["action_bound"]),
        norm,
    )
    value = ValueParams(MlpParams.from_arrays(layers("value."), header["activation"]))
    return Checkpoint(policy, value, header["phase"], header["config"], header["version"])


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load_checkpoint(
    path: str | Path, expected_phase: str | None = None, allow_phase_mismatch: bool = False
) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ck = from_bytes(blob, str(path))
    if expected_phase is not None and ck.phase != expected_phase and not allow_phase_mismatch:
        raise PhaseMismatchError(
            f"{path} holds a {ck.phase!r} policy where {expected_phase!r} was expected "
            "(pass the phase-override flag to load it anyway)"
        )
    return ck

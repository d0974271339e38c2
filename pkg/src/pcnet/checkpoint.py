"""Binary checkpoint files.

Layout (little-endian)::

    b"PCN1" | u32 version | u32 n + config text (UTF-8) |
    u32 count | count x (u32 n + name | u8 dtype | u8 rank | rank x u64 extent | payload) |
    u32 CRC32 of everything before it

The config text is the ``key = value`` run configuration followed by
``_``-prefixed state lines (epoch, RNG states, class names, metric history).
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from pcnet import seeding
from pcnet.config import from_mapping, parse_text

MAGIC = b"PCN1"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointError(ValueError):
    """Malformed checkpoint."""


class ChecksumError(CheckpointError):
    """Stored CRC32 does not match the file content (truncated or corrupted)."""


class VersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


def encode(config_text: str, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    text = config_text.encode("utf-8")
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim)]
        parts += [struct.pack("<Q", n) for n in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if len(blob) < 16:
        raise ChecksumError("checkpoint truncated: shorter than the fixed header")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch (file truncated or corrupted)")
    if body[:4] != MAGIC:
        raise CheckpointError(f"bad magic {body[:4]!r}; not a PCN1 checkpoint")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version} unsupported (expected {VERSION})")
    pos = 8
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    text = body[pos:pos + n].decode("utf-8")
    pos += n
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos:pos + n].decode("utf-8")
        pos += n
        tag, rank = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}Q", body, pos)
        pos += 8 * rank
        dt = _TAG_DTYPES.get(tag)
        if dt is None:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(body[pos:pos + nbytes], dtype=dt).reshape(shape).copy()
        pos += nbytes
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after tensor table")
    return text, tensors


def _state_text(state) -> str:
    lines = [state.config.to_text().rstrip("\n"), f"_epoch = {state.epoch}",
             f"_class_names = {json.dumps(state.class_names)}",
             f"_history = {json.dumps(state.history)}"]
    for name, rng in sorted(state.rngs.items()):
        lines.append(f"_rng.{name} = {json.dumps(seeding.get_state(rng))}")
    return "\n".join(lines) + "\n"


def save_checkpoint(state, path) -> None:
    """Write atomically: the file is either the old or the new checkpoint, never partial."""
    tensors = {f"param/{k}": v.data for k, v in state.model.parameters().items()}
    tensors.update({f"velocity/{k}": v for k, v in state.velocity.items()})
    if state.data_mean is not None:
        tensors["data/mean"] = np.asarray(state.data_mean, dtype=np.float64)
        tensors["data/std"] = np.asarray(state.data_std, dtype=np.float64)
    blob = encode(_state_text(state), tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def load_checkpoint(path):
    """Rebuild a :class:`~pcnet.training.TrainState` from a checkpoint file."""
    from pcnet.training import init_state

    text, tensors = read_checkpoint(path)
    values = parse_text(text)
    state_values = {k: v for k, v in values.items() if k.startswith("_")}
    config = from_mapping({k: v for k, v in values.items() if not k.startswith("_")})
    class_names = json.loads(state_values.get("_class_names", "[]"))
    num_classes = tensors["param/classifier.b"].shape[0]
    state = init_state(config, num_classes, class_names)
    for name, t in state.model.parameters().items():
        stored = tensors.get(f"param/{name}")
        if stored is None or stored.shape != t.shape:
            raise CheckpointError(f"parameter {name!r} missing or mis-shaped in checkpoint")
        t.data[...] = stored
        state.velocity[name][...] = tensors[f"velocity/{name}"]
    state.epoch = int(state_values.get("_epoch", 0))
    state.history = json.loads(state_values.get("_history", "[]"))
    for name, rng in state.rngs.items():
        key = f"_rng.{name}"
        if key in state_values:
            seeding.set_state(rng, json.loads(state_values[key]))
    if "data/mean" in tensors:
        state.data_mean, state.data_std = tensors["data/mean"], tensors["data/std"]
    return state

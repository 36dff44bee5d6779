"""
Binary checkpoint codec.

Layout: the magic bytes b"FOCKPT1\\n" followed by records of
    name length (u32 LE) | UTF-8 name | rank (u32 LE) | extents (u32 LE each) | values (f64 LE)
Metadata travels as empty records named "__meta__:<key>=<value>".
"""

import logging
import os

import numpy as np

from ..core.errors import CheckpointError, ConfigurationError

logger = logging.getLogger(__name__)

MAGIC = b"FOCKPT1\n"
META_PREFIX = "__meta__:"
_U32 = np.dtype("<u4")
_F64 = np.dtype("<f8")


def encode_checkpoint(state, meta=None):
    chunks = [MAGIC]
    records = [(f"{META_PREFIX}{key}={value}", np.zeros(0)) for key, value in sorted((meta or {}).items())]
    records += [(name, np.asarray(array)) for name, array in state.items()]
    for name, array in records:
        encoded = name.encode("utf-8")
        chunks.append(np.array([len(encoded)], dtype=_U32).tobytes())
        chunks.append(encoded)
        chunks.append(np.array([array.ndim] + list(array.shape), dtype=_U32).tobytes())
        chunks.append(np.ascontiguousarray(array, dtype=_F64).tobytes())
    return b"".join(chunks)


def decode_checkpoint(payload, source="<bytes>"):
    """Return (state, meta); raises CheckpointError on any size or magic inconsistency."""
    if not payload.startswith(MAGIC):
        raise CheckpointError(f"{source}: bad magic, not a checkpoint")
    state, meta = {}, {}
    offset = len(MAGIC)
    total = len(payload)

    def take(count, what):
        nonlocal offset
        if offset + count > total:
            raise CheckpointError(f"{source}: truncated while reading {what} at byte {offset}")
        chunk = payload[offset:offset + count]
        offset += count
        return chunk

    while offset < total:
        (name_len,) = np.frombuffer(take(4, "name length"), dtype=_U32)
        try:
            name = take(int(name_len), "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{source}: record name is not UTF-8 at byte {offset}") from exc
        (rank,) = np.frombuffer(take(4, f"rank of {name}"), dtype=_U32)
        shape = tuple(int(n) for n in np.frombuffer(take(4 * int(rank), f"extents of {name}"), dtype=_U32))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(take(8 * count, f"values of {name}"), dtype=_F64).reshape(shape)
        if name.startswith(META_PREFIX):
            key, _, value = name[len(META_PREFIX):].partition("=")
            meta[key] = value
        else:
            if name in state:
                raise CheckpointError(f"{source}: duplicate record {name}")
            state[name] = values.astype(np.float64)
    return state, meta


def save_checkpoint(path, state, meta=None):
    payload = encode_checkpoint(state, meta)
    directory = os.path.dirname(os.fspath(path))
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "wb") as handle:
            handle.write(payload)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.info("Saved checkpoint %s (%d records, %d bytes)", path, len(state), len(payload))
    return path


def load_checkpoint(path, expected_preset=None):
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with open(path, "rb") as handle:
            payload = handle.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    state, meta = decode_checkpoint(payload, source=str(path))
    if expected_preset is not None and meta.get("preset") not in (None, expected_preset):
        raise ConfigurationError(
            f"checkpoint {path} was written for preset {meta['preset']!r}, config uses {expected_preset!r}")
    logger.info("Loaded checkpoint %s (%d records)", path, len(state))
    return state, meta

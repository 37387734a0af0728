"""Seeded random streams.

Every stream is a Philox-4x64 counter-based generator whose 128-bit key is
the first 16 bytes of ``sha256("<seed>/<label>/<label>...")``, read as two
little-endian uint64 words. Streams for different labels are therefore
independent and reproducible from ``(seed, labels)`` alone.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *labels) -> np.ndarray:
    text = "/".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return np.frombuffer(digest[:16], dtype="<u8").copy()


def make_rng(seed: int, *labels) -> np.random.Generator:
    """Independent generator for the substream named by ``labels`` under ``seed``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *labels)))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-safe snapshot of a generator's state."""
    return _jsonable(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    bitgen = np.random.Philox()
    bitgen.state = _from_jsonable(state)
    return np.random.Generator(bitgen)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj

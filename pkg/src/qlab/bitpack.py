"""MSB-first bit packing for fixed-width fields and variable-length codes."""

from __future__ import annotations

import numpy as np

_CHUNK = 1 << 20  # values per packing chunk; a multiple of 8 keeps chunks byte-aligned


def pack_fixed(values, width: int) -> bytes:
    """Pack unsigned integers into width-bit fields, MSB first."""
    values = np.asarray(values, dtype=np.uint64)
    if width < 1 or width > 64:
        raise ValueError("width must be in 1..64")
    if values.size and int(values.max()) >> width:
        raise ValueError(f"value does not fit in {width} bits")
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    parts = []
    for start in range(0, values.size, _CHUNK):
        chunk = values[start:start + _CHUNK]
        bits = ((chunk[:, None] >> shifts) & 1).astype(np.uint8).ravel()
        parts.append(np.packbits(bits).tobytes())
    return b"".join(parts)


def unpack_fixed(data: bytes, width: int, count: int) -> np.ndarray:
    """Inverse of pack_fixed; returns int64 values."""
    total = count * width
    raw = np.frombuffer(data, dtype=np.uint8)
    if raw.size * 8 < total:
        raise ValueError("packed data shorter than expected")
    bits = np.unpackbits(raw, count=total)
    weights = (1 << np.arange(width - 1, -1, -1)).astype(np.int64)
    out = np.empty(count, dtype=np.int64)
    step = _CHUNK
    for start in range(0, count, step):
        stop = min(start + step, count)
        out[start:stop] = bits[start * width:stop * width].reshape(-1, width) @ weights
    return out


def pack_varlen(codewords, lengths) -> tuple[bytes, int]:
    """Concatenate MSB-first variable-length codewords; returns (bytes, nbits)."""
    codewords = np.asarray(codewords, dtype=np.uint64)
    lengths = np.asarray(lengths, dtype=np.int64)
    total = int(lengths.sum())
    if total == 0:
        return b"", 0
    ends = np.cumsum(lengths)
    offsets = ends - lengths
    bits = np.zeros(total, dtype=np.uint8)
    for j in range(int(lengths.max())):
        mask = lengths > j
        pos = offsets[mask] + j
        shift = (lengths[mask] - 1 - j).astype(np.uint64)
        bits[pos] = ((codewords[mask] >> shift) & 1).astype(np.uint8)
    return np.packbits(bits).tobytes(), total


def to_bits(data: bytes, nbits: int) -> np.ndarray:
    """Expand packed bytes into a uint8 bit array of length nbits."""
    raw = np.frombuffer(data, dtype=np.uint8)
    if raw.size * 8 < nbits:
        raise ValueError("packed data shorter than expected")
    return np.unpackbits(raw, count=nbits)

"""Packed deployment format for NxM-compliant tensors.

Binary layout (little-endian throughout, groups byte-aligned):

    8 bytes   magic "NXMC0001"
    u32       n
    u32       m
    u32       rank
    u64[rank] dims
    per group, in row-major order over the dense tensor:
        m float64 values, in ascending intra-group position order
        m intra-group positions, ceil(log2 n) bits each, packed
        little-endian (first index in the least significant bits),
        padded to a whole number of bytes

Groups run along the last axis, matching the grouping convention of the
projection.  Decompression of a compressed tensor reproduces the dense
tensor bit-for-bit (dropped positions are restored as exact +0.0).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .nxm import SparsityPattern, check_compliance, extract_mask

MAGIC = b"NXMC0001"


class CodecError(ValueError):
    """Compression rejected or a byte stream does not match the layout."""


def index_bits(n: int) -> int:
    """Bits needed to address a position inside a group of n (ceil(log2 n))."""
    return (n - 1).bit_length()


def group_payload_bytes(pattern: SparsityPattern) -> int:
    """Serialized size of one group: m float64 values plus packed indices."""
    return 8 * pattern.m + (pattern.m * index_bits(pattern.n) + 7) // 8


@dataclass
class CompressedNxM:
    """Retained values plus their intra-group positions for one dense tensor."""

    pattern: SparsityPattern
    shape: tuple[int, ...]
    values: np.ndarray  # (groups, m) float64, ascending position order
    positions: np.ndarray  # (groups, m) uint8 intra-group positions

    @property
    def group_count(self) -> int:
        return self.values.shape[0]

    def nbytes(self) -> int:
        header = len(MAGIC) + 4 + 4 + 4 + 8 * len(self.shape)
        return header + self.group_count * group_payload_bytes(self.pattern)


def compress(w: np.ndarray, pattern: SparsityPattern) -> CompressedNxM:
    """Pack a compliant tensor; raises ``CodecError`` otherwise.

    Groups holding fewer than m nonzeros are padded with explicit 0.0
    values at the lowest free positions, so every group stores exactly m
    entries.  Negative zeros at dropped positions are not representable
    and come back as +0.0.
    """
    w = np.asarray(w, dtype=np.float64)
    if not check_compliance(w, pattern):
        raise CodecError(f"tensor of shape {w.shape} violates the {pattern} constraint")
    mask = extract_mask(w, pattern).reshape(-1, pattern.n)
    groups = w.reshape(-1, pattern.n)
    rows = np.arange(groups.shape[0])[:, None]
    # argsort(~mask) lists retained positions first, in ascending order.
    positions = np.argsort(~mask, axis=1, kind="stable")[:, : pattern.m]
    return CompressedNxM(
        pattern=pattern,
        shape=w.shape,
        values=groups[rows, positions],
        positions=positions.astype(np.uint8),
    )


def decompress(c: CompressedNxM) -> np.ndarray:
    """Reconstruct the dense tensor."""
    groups = int(np.prod(c.shape)) // c.pattern.n
    dense = np.zeros((groups, c.pattern.n), dtype=np.float64)
    rows = np.arange(groups)[:, None]
    dense[rows, c.positions.astype(np.intp)] = c.values
    return dense.reshape(c.shape)


def _pack_indices(positions: np.ndarray, bits: int, width: int) -> bytes:
    packed = 0
    for i, pos in enumerate(positions):
        packed |= int(pos) << (i * bits)
    return packed.to_bytes(width, "little") if width else b""


def to_bytes(c: CompressedNxM) -> bytes:
    bits = index_bits(c.pattern.n)
    idx_width = (c.pattern.m * bits + 7) // 8
    out = bytearray()
    out += MAGIC
    out += struct.pack("<III", c.pattern.n, c.pattern.m, len(c.shape))
    out += struct.pack(f"<{len(c.shape)}Q", *c.shape)
    for g in range(c.group_count):
        out += c.values[g].astype("<f8").tobytes()
        out += _pack_indices(c.positions[g], bits, idx_width)
    return bytes(out)


def from_bytes(blob: bytes) -> CompressedNxM:
    if blob[: len(MAGIC)] != MAGIC:
        raise CodecError("bad magic; not a compressed tensor stream")
    offset = len(MAGIC)
    n, m, rank = struct.unpack_from("<III", blob, offset)
    offset += 12
    shape = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    pattern = SparsityPattern(n, m)
    total = int(np.prod(shape))
    if total % n != 0:
        raise CodecError(f"dims {shape} not divisible by group size {n}")
    groups = total // n
    bits = index_bits(n)
    idx_width = (m * bits + 7) // 8
    expected = offset + groups * (8 * m + idx_width)
    if len(blob) != expected:
        raise CodecError(f"stream length {len(blob)} != expected {expected}")
    values = np.empty((groups, m), dtype=np.float64)
    positions = np.empty((groups, m), dtype=np.uint8)
    pos_mask = (1 << bits) - 1
    for g in range(groups):
        values[g] = np.frombuffer(blob, dtype="<f8", count=m, offset=offset)
        offset += 8 * m
        packed = int.from_bytes(blob[offset : offset + idx_width], "little")
        offset += idx_width
        for i in range(m):
            positions[g, i] = (packed >> (i * bits)) & pos_mask
    return CompressedNxM(pattern=pattern, shape=tuple(int(d) for d in shape), values=values, positions=positions)


def save(path, c: CompressedNxM) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(c))


def load(path) -> CompressedNxM:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())

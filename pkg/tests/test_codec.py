"""Packed format: round trips and the documented byte layout."""

import struct

import numpy as np
import pytest

from nxmprune.codec import (
    CodecError,
    MAGIC,
    compress,
    decompress,
    from_bytes,
    group_payload_bytes,
    index_bits,
    load,
    save,
    to_bytes,
)
from nxmprune.nxm import SparsityPattern, project_nxm

P42 = SparsityPattern(4, 2)


class TestCompress:
    def test_leading_pair_group(self):
        c = compress(np.array([[3.0, -5.0, 0.0, 0.0]]), P42)
        np.testing.assert_array_equal(c.values, [[3.0, -5.0]])
        np.testing.assert_array_equal(c.positions, [[0, 1]])

    def test_trailing_pair_group(self):
        c = compress(np.array([[0.0, 0.0, 2.0, -1.0]]), P42)
        np.testing.assert_array_equal(c.values, [[2.0, -1.0]])
        np.testing.assert_array_equal(c.positions, [[2, 3]])

    def test_non_compliant_rejected(self):
        with pytest.raises(CodecError):
            compress(np.ones((1, 4)), P42)

    def test_value_count_invariant(self):
        rng = np.random.default_rng(0)
        w = project_nxm(rng.standard_normal((16, 32)), P42)
        c = compress(w, P42)
        assert c.values.size == w.size // P42.n * P42.m

    def test_underfull_group_padded_with_zero_values(self):
        w = np.zeros((1, 4))
        w[0, 2] = 7.0  # only one nonzero; second slot padded
        c = compress(w, P42)
        # Retained positions are ascending: the nonzero at 2 plus the lowest pad position.
        assert list(c.positions[0]) == [0, 2]
        np.testing.assert_array_equal(c.values, [[0.0, 7.0]])


class TestRoundTrip:
    @pytest.mark.parametrize("pattern", [SparsityPattern(4, 2), SparsityPattern(8, 4), SparsityPattern(4, 1)])
    def test_bit_exact_on_random_compliant_tensors(self, pattern):
        rng = np.random.default_rng(pattern.n * 10 + pattern.m)
        w = project_nxm(rng.standard_normal((32, 64)), pattern)
        back = decompress(compress(w, pattern))
        assert back.tobytes() == w.tobytes()

    def test_large_tensor_round_trip(self):
        rng = np.random.default_rng(9)
        w = project_nxm(rng.standard_normal((768, 768)), P42)
        back = decompress(compress(w, P42))
        assert back.tobytes() == w.tobytes()

    def test_bytes_round_trip(self):
        rng = np.random.default_rng(10)
        w = project_nxm(rng.standard_normal((8, 16)), P42)
        c = compress(w, P42)
        c2 = from_bytes(to_bytes(c))
        assert c2.shape == c.shape
        np.testing.assert_array_equal(c2.values, c.values)
        np.testing.assert_array_equal(c2.positions, c.positions)
        assert decompress(c2).tobytes() == w.tobytes()

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        w = project_nxm(rng.standard_normal((4, 8)), P42)
        path = tmp_path / "t.nxmc"
        save(path, compress(w, P42))
        assert decompress(load(path)).tobytes() == w.tobytes()


class TestLayout:
    def test_index_bits(self):
        assert index_bits(4) == 2
        assert index_bits(8) == 3
        assert index_bits(5) == 3
        assert index_bits(1) == 0

    def test_payload_bytes_4_2(self):
        """4:2 float64 stores half the values plus one index byte per group."""
        assert group_payload_bytes(P42) == 2 * 8 + 1

    def test_layout_bytes_match_manual_encoding(self):
        """Independently packed bytes for a two-group tensor equal the codec output."""
        w = np.array([[3.0, -5.0, 0.0, 0.0, 0.0, 0.0, 2.0, -1.0]])
        blob = to_bytes(compress(w, P42))
        expected = bytearray()
        expected += MAGIC
        expected += struct.pack("<III", 4, 2, 2)
        expected += struct.pack("<QQ", 1, 8)
        expected += struct.pack("<dd", 3.0, -5.0)
        expected += bytes([0b0100])  # positions 0,1: first index in low bits
        expected += struct.pack("<dd", 2.0, -1.0)
        expected += bytes([0b1110])  # positions 2,3
        assert blob == bytes(expected)

    def test_stream_length_validation(self):
        w = np.array([[3.0, -5.0, 0.0, 0.0]])
        blob = to_bytes(compress(w, P42))
        with pytest.raises(CodecError):
            from_bytes(blob[:-1])
        with pytest.raises(CodecError):
            from_bytes(b"BADMAGIC" + blob[8:])

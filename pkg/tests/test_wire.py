import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codealign.codespace import CodeMap
from codealign.core import ConfigError, CorruptionError, Pose
from codealign.wire import (FIXED_HEADER_BYTES, CodeMessage, EncodeError, bandwidth_report, bits_per_index,
                            compression_ratio, dense_bytes, pack, pack_indices, payload_size, unpack,
                            unpack_indices)


def test_golden_nibbles():
    assert pack_indices([0, 1, 2, 3], 4) == bytes([0x01, 0x23])


def test_golden_single_bits():
    assert pack_indices([1, 0, 1, 0, 1, 0, 1, 0], 1) == bytes([0xAA])


def test_golden_padding_three_bits():
    # 5 = 101, 3 = 011, 7 = 111 -> 1010 1111 1(000 0000)
    assert pack_indices([5, 3, 7], 3) == bytes([0b10101111, 0b10000000])


def test_golden_full_message():
    M = CodeMap([[0, 1], [2, 3]], "mB", 16)
    raw = pack(M, sender_id=7, scene_id=258, pose=Pose(1.0, -2.0, 0.5)).to_bytes()
    want = (struct.pack("<IIB", 7, 258, 2) + b"mB" + struct.pack("<HHBB3f", 2, 2, 4, 15, 1.0, -2.0, 0.5)
            + bytes([0x01, 0x23]))
    assert raw == want
    assert len(raw) == FIXED_HEADER_BYTES + 2 + 2 == 31


def test_bits_per_index():
    assert [bits_per_index(D) for D in (2, 3, 4, 5, 16, 17, 256)] == [1, 2, 2, 3, 4, 5, 8]
    with pytest.raises(ConfigError):
        bits_per_index(1)
    with pytest.raises(ConfigError):
        bits_per_index(257)


def test_ratio_examples():
    assert payload_size(32, 32, 16) == 512
    assert dense_bytes(32, 32, 16) == 65536
    assert compression_ratio(32, 32, 16, 16) == 128
    assert compression_ratio(32, 32, 128, 16) == 1024


@settings(max_examples=60)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(2, 256), st.integers(1, 512))
def test_ratio_law_measured(H, W, D, C):
    M = CodeMap(np.zeros((H, W), int), "t", D)
    msg = pack(M)
    assert len(msg.payload) == -(-H * W * bits_per_index(D) // 8)
    if H * W * bits_per_index(D) % 8 == 0:
        assert dense_bytes(H, W, C) / len(msg.payload) == 32 * C / bits_per_index(D)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 256), st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**31),
       st.integers(0, 2**32 - 1), st.text(max_size=10))
def test_codec_law(D, H, W, seed, sender, owner):
    rng = np.random.default_rng(seed)
    M = CodeMap(rng.integers(0, D, size=(H, W)), owner, D)
    pose = Pose(*rng.normal(size=3))
    msg = pack(M, sender_id=sender, scene_id=seed, pose=pose)
    back, meta = unpack(msg.to_bytes())
    np.testing.assert_array_equal(back.indices, M.indices)
    assert (back.owner, back.D) == (owner, D)
    assert meta["sender_id"] == sender and meta["scene_id"] == seed
    assert CodeMessage.from_bytes(msg.to_bytes()) == msg


def test_pack_rejects_oversized_index():
    with pytest.raises(EncodeError):
        pack_indices([0, 16], 4)


def test_truncated_and_padded_payload():
    raw = pack(CodeMap(np.ones((4, 4), int), "t", 16)).to_bytes()
    for bad in (raw[:-1], raw + b"\x00", raw[:10], b""):
        with pytest.raises(CorruptionError):
            unpack(bad)
    with pytest.raises(CorruptionError):
        unpack_indices(b"\x00", 4, 4)


def test_index_beyond_D_is_corruption():
    msg = pack(CodeMap(np.zeros((1, 2), int), "t", 3))  # b = 2, so 3 is representable but invalid
    raw = bytearray(msg.to_bytes())
    raw[-1] = 0b11110000
    with pytest.raises(CorruptionError):
        unpack(bytes(raw))


def test_inconsistent_bit_width_is_corruption():
    raw = bytearray(pack(CodeMap(np.zeros((2, 2), int), "t", 16)).to_bytes())
    raw[13 + 1] = 3  # the b field sits at 13 + name length
    with pytest.raises(CorruptionError):
        unpack(bytes(raw))


def test_empty_grid_rejected():
    with pytest.raises(ConfigError):
        CodeMessage(0, 0, "t", 0, 0, 16, Pose(), b"")


def test_bandwidth_report():
    recs = [
        {"sender": 1, "receiver": 0, "kind": "codemap", "payload_bytes": 512, "header_bytes": 29,
         "H": 32, "W": 32, "C": 128, "D": 16},
        {"sender": 1, "receiver": 0, "kind": "codemap", "payload_bytes": 512, "header_bytes": 29,
         "H": 32, "W": 32, "C": 128, "D": 16},
        {"sender": 2, "receiver": 0, "kind": "boxes", "payload_bytes": 36},
    ]
    rep = bandwidth_report(recs)
    code, boxes = rep["links"]
    assert code["ratio"] == 1024 and code["messages"] == 2 and code["header_bytes"] == 58
    assert boxes["ratio"] is None and boxes["payload_bytes"] == 36
    assert rep["total_payload_bytes"] == 1060

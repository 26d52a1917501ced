"""Bit-packed code-map messages and bandwidth accounting.

Byte layout of a message (all integers little-endian)::

    offset  size  field
    0       4     sender_id      u32
    4       4     scene_id       u32
    8       1     name_len       u8
    9       n     target owner   utf-8, n = name_len
    9+n     2     H              u16
    11+n    2     W              u16
    13+n    1     b              u8   bits per index, ceil(log2 D)
    14+n    1     D - 1          u8
    15+n    12    pose x, y, heading   3 x f32
    27+n    ...   payload        ceil(H*W*b / 8) bytes

Indices are written row-major, ``b`` bits each, most significant bit first;
the final byte is zero-padded.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .codespace import CodeMap
from .core import ConfigError, CorruptionError, Pose

_HEAD = struct.Struct("<IIB")
_DIMS = struct.Struct("<HHBB3f")
FIXED_HEADER_BYTES = _HEAD.size + _DIMS.size  # 27, plus the owner name


class EncodeError(ValueError):
    pass


def bits_per_index(D: int) -> int:
    if not 2 <= D <= 256:
        raise ConfigError(f"codebook size must be in [2, 256] for the wire format, got {D}")
    return max(1, math.ceil(math.log2(D)))


def payload_size(H: int, W: int, D: int) -> int:
    return (H * W * bits_per_index(D) + 7) // 8


@dataclass(frozen=True)
class CodeMessage:
    sender_id: int
    scene_id: int
    target_owner: str
    H: int
    W: int
    D: int
    pose: Pose
    payload: bytes

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ConfigError(f"empty grid {self.H}x{self.W} cannot be sent")
        if not 0 <= self.sender_id < 2**32 or not 0 <= self.scene_id < 2**32:
            raise ConfigError("sender_id and scene_id must fit in u32")
        if self.H >= 2**16 or self.W >= 2**16:
            raise ConfigError("grid dims must fit in u16")

    @property
    def b(self) -> int:
        return bits_per_index(self.D)

    @property
    def header_bytes(self) -> int:
        return FIXED_HEADER_BYTES + len(self.target_owner.encode("utf-8"))

    def to_bytes(self) -> bytes:
        name = self.target_owner.encode("utf-8")
        if len(name) > 255:
            raise EncodeError("target owner name longer than 255 bytes")
        return (_HEAD.pack(self.sender_id, self.scene_id, len(name)) + name
                + _DIMS.pack(self.H, self.W, self.b, self.D - 1, self.pose.x, self.pose.y, self.pose.heading)
                + self.payload)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "CodeMessage":
        if len(raw) < _HEAD.size:
            raise CorruptionError("message shorter than its fixed header")
        sender, scene, n = _HEAD.unpack_from(raw)
        off = _HEAD.size
        if len(raw) < off + n + _DIMS.size:
            raise CorruptionError("message truncated inside header")
        try:
            name = raw[off:off + n].decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptionError("owner name is not valid utf-8") from e
        H, W, b, dm1, x, y, h = _DIMS.unpack_from(raw, off + n)
        D = dm1 + 1
        if H < 1 or W < 1:
            raise CorruptionError(f"header declares empty grid {H}x{W}")
        if D < 2 or b != bits_per_index(D):
            raise CorruptionError(f"header bit width {b} inconsistent with D={D}")
        payload = raw[off + n + _DIMS.size:]
        if len(payload) != payload_size(H, W, D):
            raise CorruptionError(f"payload is {len(payload)} bytes, header implies {payload_size(H, W, D)}")
        return cls(sender, scene, name, H, W, D, Pose(x, y, h), bytes(payload))


def pack_indices(indices: np.ndarray, b: int) -> bytes:
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= 2**b):
        raise EncodeError(f"index does not fit in {b} bits")
    bits = np.unpackbits(idx.astype(">u2").view(np.uint8).reshape(-1, 2), axis=1)[:, 16 - b:]
    return np.packbits(bits.ravel()).tobytes()


def unpack_indices(payload: bytes, n: int, b: int) -> np.ndarray:
    need = (n * b + 7) // 8
    if len(payload) != need:
        raise CorruptionError(f"payload is {len(payload)} bytes, expected {need}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[:n * b].reshape(n, b)
    weights = 1 << np.arange(b - 1, -1, -1)
    return bits.astype(np.int64) @ weights


def pack(M: CodeMap, sender_id: int = 0, scene_id: int = 0, pose: Pose = Pose()) -> CodeMessage:
    b = bits_per_index(M.D)
    H, W = M.shape
    if M.indices.size and M.indices.max() >= M.D:
        raise EncodeError(f"index {int(M.indices.max())} >= D={M.D}")
    # the pose travels as f32; keep the message object equal to what unpack will see
    wire_pose = Pose(*(float(np.float32(v)) for v in pose.to_list()))
    return CodeMessage(sender_id, scene_id, M.owner, H, W, M.D, wire_pose, pack_indices(M.indices, b))


def unpack(msg) -> tuple[CodeMap, dict]:
    if isinstance(msg, (bytes, bytearray, memoryview)):
        msg = CodeMessage.from_bytes(bytes(msg))
    idx = unpack_indices(msg.payload, msg.H * msg.W, msg.b)
    if idx.size and idx.max() >= msg.D:
        raise CorruptionError(f"decoded index {int(idx.max())} >= D={msg.D}")
    meta = {"sender_id": msg.sender_id, "scene_id": msg.scene_id, "pose": msg.pose}
    return CodeMap(idx.reshape(msg.H, msg.W), msg.target_owner, msg.D), meta


# ---------------------------------------------------------------- accounting

def dense_bytes(H: int, W: int, C: int) -> int:
    return H * W * C * 4


def compression_ratio(H: int, W: int, C: int, D: int) -> float:
    return dense_bytes(H, W, C) / payload_size(H, W, D)


def bandwidth_report(records) -> dict:
    """Aggregate per-link message sizes.

    ``records`` are dicts with ``sender``, ``receiver``, ``kind`` and
    ``payload_bytes``; code-map links also carry ``H``, ``W``, ``C`` (the dense
    channel count the message replaces), ``D`` and ``header_bytes``.
    """
    links = {}
    for r in records:
        key = (r["sender"], r["receiver"], r["kind"])
        e = links.setdefault(key, {"sender": r["sender"], "receiver": r["receiver"], "kind": r["kind"],
                                   "messages": 0, "payload_bytes": 0, "header_bytes": 0, "dense_bytes": 0})
        e["messages"] += 1
        e["payload_bytes"] += int(r["payload_bytes"])
        e["header_bytes"] += int(r.get("header_bytes", 0))
        if r["kind"] == "codemap":
            e["dense_bytes"] += dense_bytes(r["H"], r["W"], r["C"])
    out = []
    for e in links.values():
        e = dict(e)
        e["mean_payload_bytes"] = e["payload_bytes"] / e["messages"]
        e["ratio"] = e["dense_bytes"] / e["payload_bytes"] if e["kind"] == "codemap" and e["payload_bytes"] else None
        out.append(e)
    out.sort(key=lambda e: (str(e["sender"]), str(e["receiver"]), e["kind"]))
    return {"links": out, "total_payload_bytes": sum(e["payload_bytes"] for e in out),
            "total_header_bytes": sum(e["header_bytes"] for e in out)}

"""Source and sink framing, AES-128-GCM protection of frames, TCP helpers.

Frame wire format::

    u8   type     port << 4 | encrypted << 3 | kind      (kind: see FrameKind)
    u32  length   little-endian payload length
    payload       plaintext, or 12 B nonce + ciphertext + 16 B GCM tag

The GCM associated data is the type byte. Plaintext payloads by kind:

* EVENTS     packed events (12 or 16 bytes each)
* WATERMARK  u64 event-time microseconds
* END        empty
* RESULT     u64 window index followed by the result array bytes
"""

from __future__ import annotations

import enum
import os
import socket
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .errors import AuthFail, Corrupt, ParamInvalid

HEADER = struct.Struct("<BI")
NONCE_LEN = 12
GCM_TAG_LEN = 16
MAX_FRAME = 1 << 30

# static edge fixtures (source->edge and edge->cloud links)
DEFAULT_INGRESS_KEY = bytes.fromhex("000102030405060708090a0b0c0d0e0f")
DEFAULT_EGRESS_KEY = bytes.fromhex("f0e1d2c3b4a5968778695a4b3c2d1e0f")


class FrameKind(enum.IntEnum):
    EVENTS = 1
    WATERMARK = 2
    END = 3
    RESULT = 4


class IngestPath(enum.Enum):
    TRUSTED_DIRECT = "trusted-direct"
    VIA_OS = "via-os"


@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    port: int
    encrypted: bool
    payload: bytes

    @property
    def type_byte(self) -> int:
        return type_byte(self.kind, self.port, self.encrypted)


def type_byte(kind: FrameKind, port: int, encrypted: bool) -> int:
    if not 0 <= port < 16:
        raise ParamInvalid(f"port {port} does not fit the frame type byte")
    return (port << 4) | (int(encrypted) << 3) | int(kind)


def _aead(key: bytes):
    from cryptography.hazmat.primitives.ciphers.aead import AESGCM

    if len(key) != 16:
        raise ParamInvalid("AES-128 needs a 16-byte key")
    return AESGCM(key)


def seal_payload(tb: int, plaintext, key: bytes, nonce: bytes | None = None) -> bytes:
    nonce = os.urandom(NONCE_LEN) if nonce is None else nonce
    return nonce + _aead(key).encrypt(nonce, bytes(plaintext), bytes([tb]))


def open_payload(tb: int, payload, key: bytes) -> bytes:
    from cryptography.exceptions import InvalidTag

    if len(payload) < NONCE_LEN + GCM_TAG_LEN:
        raise Corrupt("encrypted payload shorter than nonce and tag")
    mv = memoryview(payload)
    try:
        return _aead(key).decrypt(bytes(mv[:NONCE_LEN]), bytes(mv[NONCE_LEN:]), bytes([tb]))
    except InvalidTag as exc:
        raise AuthFail("frame authentication failed") from exc


def encode_frame(kind: FrameKind, payload=b"", port: int = 0, key: bytes | None = None) -> bytes:
    tb = type_byte(kind, port, key is not None)
    body = seal_payload(tb, payload, key) if key is not None else bytes(payload)
    if len(body) > MAX_FRAME:
        raise ParamInvalid("frame payload too large")
    return HEADER.pack(tb, len(body)) + body


def parse_frame(buf) -> Frame:
    """Split one complete frame; the payload stays encrypted if it was."""
    mv = memoryview(buf)
    if len(mv) < HEADER.size:
        raise Corrupt("frame shorter than its header")
    tb, n = HEADER.unpack_from(mv)
    if len(mv) != HEADER.size + n:
        raise Corrupt(f"frame length field {n} does not match {len(mv) - HEADER.size} payload bytes")
    try:
        kind = FrameKind(tb & 0x7)
    except ValueError as exc:
        raise Corrupt(f"unknown frame kind {tb & 0x7}") from exc
    return Frame(kind, tb >> 4, bool(tb & 0x8), mv[HEADER.size:])


def frame_plaintext(frame: Frame, key: bytes | None) -> bytes | memoryview:
    if not frame.encrypted:
        return frame.payload
    if key is None:
        raise AuthFail("encrypted frame but no key configured")
    return open_payload(frame.type_byte, frame.payload, key)


# -- convenience builders ----------------------------------------------------

def events_frame(events: np.ndarray, port: int = 0, key: bytes | None = None) -> bytes:
    return encode_frame(FrameKind.EVENTS, np.ascontiguousarray(events).tobytes(), port, key)


def watermark_frame(value: int, port: int = 0, key: bytes | None = None) -> bytes:
    return encode_frame(FrameKind.WATERMARK, struct.pack("<Q", value), port, key)


def end_frame(port: int = 0, key: bytes | None = None) -> bytes:
    return encode_frame(FrameKind.END, b"", port, key)


def result_frame(window: int, data: bytes, key: bytes | None = None) -> bytes:
    return encode_frame(FrameKind.RESULT, struct.pack("<Q", window) + data, 0, key)


def decode_result(buf, key: bytes | None = None) -> tuple[int, bytes]:
    """Consumer side of egress: authenticate, decrypt, split the window index."""
    frame = parse_frame(buf)
    if frame.kind != FrameKind.RESULT:
        raise Corrupt(f"expected a RESULT frame, got {frame.kind.name}")
    plain = bytes(frame_plaintext(frame, key))
    if len(plain) < 8:
        raise Corrupt("result payload lacks its window index")
    (window,) = struct.unpack_from("<Q", plain)
    return window, plain[8:]


# -- streams -----------------------------------------------------------------

def read_frames(fh: BinaryIO) -> Iterator[bytes]:
    """Yield complete frames (header included) from a byte stream until EOF."""
    while True:
        head = fh.read(HEADER.size)
        if not head:
            return
        if len(head) < HEADER.size:
            raise Corrupt("truncated frame header")
        _, n = HEADER.unpack(head)
        if n > MAX_FRAME:
            raise Corrupt(f"frame length {n} exceeds limit")
        body = fh.read(n)
        if len(body) != n:
            raise Corrupt("truncated frame payload")
        yield head + body


def write_frames(fh: BinaryIO, frames: Iterable[bytes]) -> int:
    total = 0
    for f in frames:
        fh.write(f)
        total += len(f)
    return total


def send_frames(address: tuple[str, int], frames: Iterable[bytes]) -> int:
    with socket.create_connection(address) as sock:
        total = 0
        for f in frames:
            sock.sendall(f)
            total += len(f)
        return total


def tcp_source(listener: socket.socket) -> Iterator[bytes]:
    """Accept one connection on a bound, listening socket and yield its frames."""
    conn, _ = listener.accept()
    with conn, conn.makefile("rb") as fh:
        yield from read_frames(fh)

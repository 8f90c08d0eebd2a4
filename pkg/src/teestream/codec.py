"""Columnar compression of audit-record blocks, and the ``.sbtlog`` container.

Block wire format (little-endian; varints are unsigned LEB128)::

    u8       format byte 0xB1
    u8       flags      bit 0: payload encrypted (AES-128-GCM), bit 1: 32-byte tag
    u16      column modes, 2 bits per column in ``COLUMNS`` order
    varint   record count
    7 x varint  column byte lengths, in ``COLUMNS`` order
    [12 B nonce when encrypted]
    payload  the seven columns back to back (ciphertext + 16 B GCM tag when encrypted)
    tag      HMAC-SHA256 over everything above, truncated to 16 bytes unless flag bit 1

Columns and the values they hold:

* SHAPE   per-record symbol: row header byte (kind + presence bits), op or
  port << 8, n_out << 16, n_in << 32
* COUNT   the count field of records that carry one
* TS      zigzag deltas of ts (the first delta is taken from 0)
* IDS     zigzag deltas over all output ids in record order, followed by
  zigzag deltas over all input ids
* WINDOW, WM   zigzag deltas over the present values
* HINT    hint digests, undelta'd

Each integer column is written in one of three modes, whichever is smallest
for the block: 0 = varints, 1 = canonical Huffman over the values,
2 = canonical Huffman over bit lengths followed by the bits under the leading
one. A Huffman table is ``varint n``, the ascending symbols as unsigned delta
varints, then 4-bit code lengths packed two per byte (high nibble first). A
one-symbol alphabet has code length 0 and no bitstream. Bitstreams are
MSB-first and zero-padded to a byte.
"""

from __future__ import annotations

import hashlib
import heapq
import hmac
import os
import socket
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from . import kernels
from .audit import AuditRecord, RecordKind
from .errors import AuthFail, Corrupt, ParamInvalid
from .model import PrimitiveId

FORMAT_BYTE = 0xB1
FLAG_ENCRYPTED = 0x01
FLAG_LONG_TAG = 0x02
COLUMNS = ("SHAPE", "COUNT", "TS", "IDS", "WINDOW", "WM", "HINT")
MAX_CODE_LEN = 15

# static fixtures; key provisioning is outside this package
DEFAULT_AUDIT_KEY = b"teestream-audit-mac-key-fixture!"
DEFAULT_AUDIT_ENC_KEY = bytes(range(16))

SBTLOG_MAGIC = b"SBTLOG1\n"


# ---------------------------------------------------------------------------
# varints

def zigzag(values: np.ndarray) -> np.ndarray:
    v = values.astype(np.int64)
    return ((v << 1) ^ (v >> 63)).astype(np.uint64)


def unzigzag(values: np.ndarray) -> np.ndarray:
    u = values.astype(np.uint64)
    return ((u >> np.uint64(1)).astype(np.int64)) ^ -((u & np.uint64(1)).astype(np.int64))


def _uvarint(v: int) -> bytes:
    return kernels.varint_encode(np.array([v], dtype=np.uint64))


def _read_uvarint(buf: bytes, pos: int) -> tuple[int, int]:
    try:
        vals, pos = kernels.varint_decode(buf, 1, pos)
    except ValueError as exc:
        raise Corrupt(f"header varint: {exc}") from exc
    return int(vals[0]), pos


# ---------------------------------------------------------------------------
# canonical Huffman and integer columns

def huffman_lengths(freqs: dict[int, int], limit: int = MAX_CODE_LEN) -> dict[int, int]:
    """Code length per symbol; frequencies are halved until the depth fits ``limit``."""
    if not freqs:
        return {}
    if len(freqs) == 1:
        return {next(iter(freqs)): 0}
    if len(freqs) > 1 << limit:
        raise ParamInvalid(f"{len(freqs)} symbols cannot fit {limit}-bit codes")
    work = dict(freqs)
    while True:
        heap = [(f, i, (s,)) for i, (s, f) in enumerate(sorted(work.items()))]
        heapq.heapify(heap)
        depth = dict.fromkeys(work, 0)
        tie = len(heap)
        while len(heap) > 1:
            f1, _, a = heapq.heappop(heap)
            f2, _, b = heapq.heappop(heap)
            for s in a + b:
                depth[s] += 1
            heapq.heappush(heap, (f1 + f2, tie, a + b))
            tie += 1
        if max(depth.values()) <= limit:
            return depth
        work = {s: (f + 1) // 2 for s, f in work.items()}


def canonical_codes(lengths: dict[int, int]) -> dict[int, tuple[int, int]]:
    code = 0
    prev_len = 0
    out = {}
    for sym, ln in sorted(lengths.items(), key=lambda kv: (kv[1], kv[0])):
        code <<= ln - prev_len
        out[sym] = (code, ln)
        code += 1
        prev_len = ln
    return out


def _table_bytes(lengths: dict[int, int]) -> bytes:
    alphabet = sorted(lengths)
    out = bytearray(_uvarint(len(alphabet)))
    if alphabet:
        out += kernels.varint_encode(np.diff(np.array(alphabet, dtype=np.uint64),
                                             prepend=np.uint64(0)))
        nib = [lengths[s] for s in alphabet]
        if len(nib) % 2:
            nib.append(0)
        out += bytes((a << 4) | b for a, b in zip(nib[::2], nib[1::2]))
    return bytes(out)


def _read_table(buf: bytes, pos: int) -> tuple[list[int], list[int], int]:
    n, pos = _read_uvarint(buf, pos)
    if n == 0:
        return [], [], pos
    if n > 1 << MAX_CODE_LEN:
        raise Corrupt("Huffman alphabet too large")
    try:
        vals, pos = kernels.varint_decode(buf, n, pos)
    except ValueError as exc:
        raise Corrupt(f"Huffman table: {exc}") from exc
    alphabet = [int(x) for x in np.cumsum(vals, dtype=np.uint64)]
    if any(b <= a for a, b in zip(alphabet, alphabet[1:])):
        raise Corrupt("Huffman alphabet not strictly ascending")
    nb = (n + 1) // 2
    if pos + nb > len(buf):
        raise Corrupt("truncated Huffman code lengths")
    lens = []
    for byte in buf[pos:pos + nb]:
        lens += [byte >> 4, byte & 0xF]
    return alphabet, lens[:n], pos + nb


def _decoder(alphabet: list[int], lens: list[int]):
    if len(alphabet) == 1:
        if lens[0] != 0:
            raise Corrupt("one-symbol alphabet must use code length 0")
        return None
    if min(lens) < 1:
        raise Corrupt("zero code length in a multi-symbol alphabet")
    if sum(2.0 ** -ln for ln in lens) > 1.0 + 1e-12:
        raise Corrupt("Huffman code lengths violate Kraft inequality")
    codes = canonical_codes(dict(zip(alphabet, lens)))
    return {(ln, c): s for s, (c, ln) in codes.items()}, max(lens)


class _BitReader:
    def __init__(self, data: bytes):
        self.bits = bin(int.from_bytes(data, "big"))[2:].zfill(len(data) * 8) if data else ""
        self.pos = 0

    def symbol(self, decoder) -> int:
        table, maxlen = decoder
        bits = self.bits
        code = 0
        ln = 0
        i = self.pos
        while True:
            if i >= len(bits):
                raise Corrupt("truncated Huffman bitstream")
            code = (code << 1) | (bits[i] == "1")
            ln += 1
            i += 1
            sym = table.get((ln, code))
            if sym is not None:
                self.pos = i
                return sym
            if ln >= maxlen:
                raise Corrupt("invalid Huffman code")

    def raw(self, n: int) -> int:
        if n == 0:
            return 0
        if self.pos + n > len(self.bits):
            raise Corrupt("truncated bitstream")
        v = int(self.bits[self.pos:self.pos + n], 2)
        self.pos += n
        return v

    def finish(self) -> None:
        rest = self.bits[self.pos:]
        if len(rest) >= 8 or "1" in rest:
            raise Corrupt("trailing bits in column")


def _pack_bits(pieces: list[str]) -> bytes:
    bits = "".join(pieces)
    if not bits:
        return b""
    bits += "0" * (-len(bits) % 8)
    return int(bits, 2).to_bytes(len(bits) // 8, "big")


def _freqs(values) -> dict[int, int]:
    out: dict[int, int] = {}
    for v in values:
        out[v] = out.get(v, 0) + 1
    return out


def huffman_encode(symbols: list[int]) -> bytes:
    """Table followed by the bitstream; symbols must be non-negative."""
    lengths = huffman_lengths(_freqs(symbols))
    head = _table_bytes(lengths)
    if len(lengths) <= 1:
        return head
    codes = canonical_codes(lengths)
    return head + _pack_bits([format(codes[s][0], f"0{codes[s][1]}b") for s in symbols])


def huffman_decode(data: bytes, count: int) -> list[int]:
    alphabet, lens, pos = _read_table(data, 0)
    if not alphabet:
        if count or pos != len(data):
            raise Corrupt("empty Huffman table with symbols expected")
        return []
    dec = _decoder(alphabet, lens)
    if dec is None:
        if pos != len(data):
            raise Corrupt("bitstream after a one-symbol table")
        return [alphabet[0]] * count
    reader = _BitReader(data[pos:])
    out = [reader.symbol(dec) for _ in range(count)]
    reader.finish()
    return out


def _bucket_encode(values: list[int]) -> bytes:
    # Huffman over bit lengths; the bits below the leading one follow raw
    classes = [v.bit_length() for v in values]
    lengths = huffman_lengths(_freqs(classes))
    codes = canonical_codes(lengths)
    pieces = []
    for v, c in zip(values, classes):
        code, ln = codes[c]
        if ln:
            pieces.append(format(code, f"0{ln}b"))
        if c > 1:
            pieces.append(format(v & ((1 << (c - 1)) - 1), f"0{c - 1}b"))
    return _table_bytes(lengths) + _pack_bits(pieces)


def _bucket_decode(data: bytes, count: int) -> list[int]:
    alphabet, lens, pos = _read_table(data, 0)
    if not alphabet or max(alphabet) > 64:
        raise Corrupt("bad bit-length table")
    dec = _decoder(alphabet, lens)
    reader = _BitReader(data[pos:])
    out = []
    for _ in range(count):
        c = alphabet[0] if dec is None else reader.symbol(dec)
        out.append(0 if c == 0 else (1 << (c - 1)) | reader.raw(c - 1))
    reader.finish()
    return out


MODE_VARINT, MODE_HUFFMAN, MODE_BUCKET = 0, 1, 2


def encode_ints(values: list[int], modes=(MODE_VARINT, MODE_HUFFMAN, MODE_BUCKET)) -> tuple[int, bytes]:
    """Smallest encoding of non-negative integers among ``modes``; returns (mode, bytes)."""
    best = None
    for mode in modes:
        try:
            if mode == MODE_VARINT:
                data = kernels.varint_encode(np.array(values, dtype=np.uint64))
            elif mode == MODE_HUFFMAN:
                data = huffman_encode(values) if values else b"\x00"
            else:
                data = _bucket_encode(values) if values else b"\x00"
        except ParamInvalid:
            continue
        if best is None or len(data) < len(best[1]):
            best = (mode, data)
    return best


def decode_ints(mode: int, data: bytes, count: int) -> list[int]:
    if mode == MODE_VARINT:
        if count == 0:
            if data:
                raise Corrupt("trailing bytes in empty column")
            return []
        try:
            vals, pos = kernels.varint_decode(data, count, 0)
        except ValueError as exc:
            raise Corrupt(f"varint column: {exc}") from exc
        if pos != len(data):
            raise Corrupt("trailing bytes in varint column")
        return [int(v) for v in vals]
    if mode == MODE_HUFFMAN:
        return huffman_decode(data, count)
    if mode == MODE_BUCKET:
        if count == 0:
            if data != b"\x00":
                raise Corrupt("bad empty column")
            return []
        return _bucket_decode(data, count)
    raise Corrupt(f"unknown column mode {mode}")


def _deltas(values: list[int]) -> list[int]:
    if not values:
        return []
    d = np.diff(np.array(values, dtype=np.int64), prepend=np.int64(0))
    return [int(x) for x in zigzag(d)]


def _undeltas(values: list[int]) -> list[int]:
    if not values:
        return []
    return [int(x) for x in np.cumsum(unzigzag(np.array(values, dtype=np.uint64)))]


# ---------------------------------------------------------------------------
# record <-> columns

def _shape(r: AuditRecord) -> int:
    header = int(r.kind)
    header |= (r.window_no is not None) << 3
    header |= (r.count is not None) << 4
    header |= (r.watermark_value is not None) << 5
    header |= (r.hint_digest is not None) << 6
    header |= (r.op is not None) << 7
    aux = int(r.op) if r.op is not None else (r.port if r.kind == RecordKind.INGRESS else 0)
    if aux > 0xFF or len(r.outputs) > 0xFFFF:
        raise ParamInvalid("port above 255 or more than 65535 outputs in one record")
    return header | (aux << 8) | (len(r.outputs) << 16) | (len(r.inputs) << 32)


def _columns(records: list[AuditRecord]) -> tuple[int, list[bytes]]:
    ins, outs = [], []
    windows, counts, wms, hints = [], [], [], []
    for r in records:
        ins.extend(r.inputs)
        outs.extend(r.outputs)
        if r.window_no is not None:
            windows.append(r.window_no)
        if r.count is not None:
            counts.append(r.count)
        if r.watermark_value is not None:
            wms.append(r.watermark_value)
        if r.hint_digest is not None:
            hints.append(r.hint_digest)
    coded = [
        encode_ints([_shape(r) for r in records]),
        encode_ints(counts),
        encode_ints(_deltas([r.ts for r in records])),
        encode_ints(_deltas(outs) + _deltas(ins)),
        encode_ints(_deltas(windows)),
        encode_ints(_deltas(wms)),
        encode_ints(hints),
    ]
    modes = 0
    for i, (mode, _) in enumerate(coded):
        modes |= mode << (2 * i)
    return modes, [c for _, c in coded]


def _records(nrec: int, modes: int, cols: list[bytes]) -> list[AuditRecord]:
    mode = [(modes >> (2 * i)) & 3 for i in range(len(COLUMNS))]
    shapes = decode_ints(mode[0], cols[0], nrec)
    n_in = n_out = 0
    n_win = n_cnt = n_wm = n_hint = 0
    for s in shapes:
        h = s & 0xFF
        n_out += (s >> 16) & 0xFFFF
        n_in += s >> 32
        n_win += (h >> 3) & 1
        n_cnt += (h >> 4) & 1
        n_wm += (h >> 5) & 1
        n_hint += (h >> 6) & 1
    if n_in + n_out > 64 * len(b"".join(cols)) + 64:
        raise Corrupt("id count exceeds payload")
    counts = decode_ints(mode[1], cols[1], n_cnt)
    ts = _undeltas(decode_ints(mode[2], cols[2], nrec))
    id_deltas = decode_ints(mode[3], cols[3], n_out + n_in)
    out_ids = _undeltas(id_deltas[:n_out])
    in_ids = _undeltas(id_deltas[n_out:])
    wins = _undeltas(decode_ints(mode[4], cols[4], n_win))
    wms = _undeltas(decode_ints(mode[5], cols[5], n_wm))
    hints = decode_ints(mode[6], cols[6], n_hint)
    if any(x > 0xFFFFFFFF for x in hints):
        raise Corrupt("hint digest wider than 32 bits")
    out = []
    ip = op_ = wp = cp = mp = hp = 0
    try:
        for i, s in enumerate(shapes):
            h = s & 0xFF
            kind = RecordKind(h & 7)
            aux = (s >> 8) & 0xFF
            n_out = (s >> 16) & 0xFFFF
            n_in = s >> 32
            op = PrimitiveId(aux) if h & 0x80 else None
            if not h & 0x80 and kind != RecordKind.INGRESS and aux:
                raise ValueError("port set on a non-ingress record")
            port = aux if kind == RecordKind.INGRESS and not h & 0x80 else 0
            ins = tuple(in_ids[ip:ip + n_in])
            ip += n_in
            outs = tuple(out_ids[op_:op_ + n_out])
            op_ += n_out
            win = cnt = wm = hint = None
            if h & 0x08:
                win = wins[wp]
                wp += 1
            if h & 0x10:
                cnt = counts[cp]
                cp += 1
            if h & 0x20:
                wm = wms[mp]
                mp += 1
            if h & 0x40:
                hint = hints[hp]
                hp += 1
            if ts[i] < 0 or min(ins + outs, default=0) < 0 or (win is not None and win < 0) \
                    or (wm is not None and wm < 0):
                raise ValueError("negative field value")
            out.append(AuditRecord(ts[i], kind, op, ins, outs, win, cnt, wm, hint, port))
    except ValueError as exc:
        raise Corrupt(f"bad record: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# blocks

@dataclass(frozen=True)
class BlockInfo:
    records: int
    encrypted: bool
    tag_len: int
    header_bytes: int
    column_bytes: dict
    column_modes: tuple
    total_bytes: int


@dataclass
class BlockCodec:
    """Encoder/decoder bound to the edge-cloud keys.

    ``encrypt`` turns on AES-128-GCM over the column payload; ``tag_len`` is 16
    (truncated HMAC-SHA256) or 32.
    """

    mac_key: bytes = DEFAULT_AUDIT_KEY
    enc_key: bytes = DEFAULT_AUDIT_ENC_KEY
    encrypt: bool = False
    tag_len: int = 16

    def __post_init__(self):
        if self.tag_len not in (16, 32):
            raise ParamInvalid("tag length must be 16 or 32 bytes")

    def encode(self, records: list[AuditRecord]) -> bytes:
        if not records:
            raise ParamInvalid("a block holds at least one record")
        modes, cols = _columns(records)
        flags = (FLAG_ENCRYPTED if self.encrypt else 0) | (FLAG_LONG_TAG if self.tag_len == 32 else 0)
        head = bytearray([FORMAT_BYTE, flags]) + struct.pack("<H", modes)
        head += _uvarint(len(records))
        for c in cols:
            head += _uvarint(len(c))
        payload = b"".join(cols)
        if self.encrypt:
            from cryptography.hazmat.primitives.ciphers.aead import AESGCM

            nonce = os.urandom(12)
            head += nonce
            payload = AESGCM(self.enc_key).encrypt(nonce, payload, bytes(head))
        body = bytes(head) + payload
        return body + hmac.new(self.mac_key, body, hashlib.sha256).digest()[: self.tag_len]

    def _split(self, block: bytes):
        if len(block) < 5 or block[0] != FORMAT_BYTE:
            raise Corrupt("not an audit block")
        flags = block[1]
        if flags & ~(FLAG_ENCRYPTED | FLAG_LONG_TAG):
            raise Corrupt(f"unknown block flags 0x{flags:02x}")
        tag_len = 32 if flags & FLAG_LONG_TAG else 16
        if len(block) < 5 + tag_len:
            raise Corrupt("block shorter than its tag")
        body, tag = block[:-tag_len], block[-tag_len:]
        expect = hmac.new(self.mac_key, body, hashlib.sha256).digest()[:tag_len]
        if not hmac.compare_digest(tag, expect):
            raise AuthFail("audit block tag mismatch")
        (modes,) = struct.unpack_from("<H", body, 2)
        if modes >> 14:
            raise Corrupt("unknown column mode bits")
        nrec, pos = _read_uvarint(body, 4)
        lens = []
        for _ in COLUMNS:
            ln, pos = _read_uvarint(body, pos)
            lens.append(ln)
        encrypted = bool(flags & FLAG_ENCRYPTED)
        header_end = pos + (12 if encrypted else 0)
        return flags, modes, nrec, lens, body, header_end, tag_len

    def decode(self, block: bytes) -> list[AuditRecord]:
        flags, modes, nrec, lens, body, header_end, _ = self._split(block)
        payload = body[header_end:]
        if flags & FLAG_ENCRYPTED:
            from cryptography.exceptions import InvalidTag
            from cryptography.hazmat.primitives.ciphers.aead import AESGCM

            try:
                payload = AESGCM(self.enc_key).decrypt(body[header_end - 12:header_end], payload,
                                                       body[:header_end])
            except InvalidTag as exc:
                raise AuthFail("audit block decryption failed") from exc
        if sum(lens) != len(payload):
            raise Corrupt("column directory does not match payload size")
        cols = []
        pos = 0
        for ln in lens:
            cols.append(payload[pos:pos + ln])
            pos += ln
        if nrec == 0:
            raise Corrupt("block declares zero records")
        return _records(nrec, modes, cols)

    def inspect(self, block: bytes) -> BlockInfo:
        flags, modes, nrec, lens, body, header_end, tag_len = self._split(block)
        return BlockInfo(
            records=nrec,
            encrypted=bool(flags & FLAG_ENCRYPTED),
            tag_len=tag_len,
            header_bytes=header_end,
            column_bytes=dict(zip(COLUMNS, lens)),
            column_modes=tuple((modes >> (2 * i)) & 3 for i in range(len(COLUMNS))),
            total_bytes=len(block),
        )


_DEFAULT = BlockCodec()


def encode_columnar(records: list[AuditRecord], codec: BlockCodec = _DEFAULT) -> bytes:
    return codec.encode(records)


def decode_columnar(block: bytes, codec: BlockCodec = _DEFAULT) -> list[AuditRecord]:
    return codec.decode(block)


# ---------------------------------------------------------------------------
# .sbtlog container: magic, then u32-length-prefixed blocks

class SbtlogWriter:
    def __init__(self, fh: BinaryIO):
        self.fh = fh
        fh.write(SBTLOG_MAGIC)

    def __call__(self, block: bytes) -> None:
        self.fh.write(struct.pack("<I", len(block)))
        self.fh.write(block)

    def flush(self) -> None:
        self.fh.flush()


def write_sbtlog(path, blocks: Iterable[bytes]) -> None:
    with open(path, "wb") as fh:
        w = SbtlogWriter(fh)
        for b in blocks:
            w(b)


def iter_blocks(fh: BinaryIO) -> Iterator[bytes]:
    if fh.read(len(SBTLOG_MAGIC)) != SBTLOG_MAGIC:
        raise Corrupt("missing .sbtlog magic")
    while True:
        head = fh.read(4)
        if not head:
            return
        if len(head) < 4:
            raise Corrupt("truncated block length")
        (n,) = struct.unpack("<I", head)
        block = fh.read(n)
        if len(block) != n:
            raise Corrupt("truncated block")
        yield block


def read_sbtlog(path) -> list[bytes]:
    with open(path, "rb") as fh:
        return list(iter_blocks(fh))


def send_blocks(sock: socket.socket, blocks: Iterable[bytes]) -> None:
    sock.sendall(SBTLOG_MAGIC)
    for b in blocks:
        sock.sendall(struct.pack("<I", len(b)) + b)


def recv_blocks(sock: socket.socket) -> list[bytes]:
    with sock.makefile("rb") as fh:
        return list(iter_blocks(fh))

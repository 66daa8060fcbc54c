"""Binary shard format for feature-record sequences.

Layout (all little-endian):

    header:   magic 43 53 46 44 ("CSFD"), u16 version = 1
    sequence: u32 body length, body, u32 CRC32C of the body
    body:     u64 run id, u16 start slot, then the records
    record:   u8 channel type, u32 subcarrier count,
              5 matrices (u16 rows, u16 cols, row-major complex64 as
              interleaved float32 re/im) in the order noise covariance,
              frequency correlation, time covariance, time correlation,
              precoder, then f64 delay center, delay length, Doppler width,
              spectral efficiency, then u8 rank

Sequences follow each other until end of file. The run id packs the config
id in its upper 56 bits and the run index in the low 8; slot indices are
start slot + position. The checksum is CRC32C (Castagnoli), chosen over
zlib's CRC32 for its better error detection on short bursts.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import CHANNEL_TYPES
from .estimators import FeatureRecord

MAGIC = b"CSFD"
VERSION = 1

_MATRIX_FIELDS = ("noise_cov", "freq_corr", "time_cov", "time_corr", "precoder")
_SCALAR_FIELDS = ("delay_center", "delay_len", "doppler_width", "spectral_eff")


class ShardError(Exception):
    """Base class for shard format violations."""


class BadMagicError(ShardError):
    pass


class BadVersionError(ShardError):
    pass


class TruncatedShardError(ShardError):
    pass


class ChecksumError(ShardError):
    pass


# ---------------------------------------------------------------------------
# CRC32C (Castagnoli), reflected polynomial 0x82F63B78
# ---------------------------------------------------------------------------

def _make_table() -> np.ndarray:
    table = np.empty(256, dtype=np.uint32)
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ 0x82F63B78 if c & 1 else c >> 1
        table[i] = c
    return table

_TABLE = _make_table()
_TABLE_LIST = [int(x) for x in _TABLE]


def crc32c(data: bytes, crc: int = 0) -> int:
    """CRC32C of a byte string; ``crc`` allows incremental use."""
    c = crc ^ 0xFFFFFFFF
    tab = _TABLE_LIST
    for b in data:
        c = tab[(c ^ b) & 0xFF] ^ (c >> 8)
    return c ^ 0xFFFFFFFF


def crc32c_rows(rows: np.ndarray) -> np.ndarray:
    """CRC32C of each row of a uint8 matrix, vectorized across rows.

    Equal-length bodies are the common case in a shard, and checksumming
    them together column by column avoids a per-byte Python loop.
    """
    rows = np.ascontiguousarray(rows, dtype=np.uint8)
    c = np.full(rows.shape[0], 0xFFFFFFFF, dtype=np.uint32)
    for col in rows.T:
        c = _TABLE[(c ^ col) & 0xFF] ^ (c >> 8)
    return c ^ np.uint32(0xFFFFFFFF)


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------

@dataclass
class SequenceRecord:
    """A window of consecutive slots from one run."""

    run_id: int
    start_slot: int
    records: list          # FeatureRecord per slot

    @property
    def config_id(self) -> int:
        return self.run_id >> 8

    @property
    def run_index(self) -> int:
        return self.run_id & 0xFF


def _pack_matrix(m: np.ndarray) -> bytes:
    m = np.atleast_2d(np.asarray(m))
    rows, cols = m.shape
    inter = np.empty((rows, cols, 2), dtype="<f4")
    inter[..., 0] = m.real
    inter[..., 1] = m.imag
    return struct.pack("<HH", rows, cols) + inter.tobytes()


def _pack_record(rec: FeatureRecord) -> bytes:
    parts = [struct.pack("<BI", CHANNEL_TYPES.index(rec.channel_type),
                         rec.n_subcarriers)]
    for name in _MATRIX_FIELDS:
        parts.append(_pack_matrix(getattr(rec, name)))
    parts.append(struct.pack("<4d", *(getattr(rec, name) for name in _SCALAR_FIELDS)))
    parts.append(struct.pack("<B", rec.rank))
    return b"".join(parts)


def _pack_sequence(seq: SequenceRecord) -> bytes:
    body = struct.pack("<QH", seq.run_id, seq.start_slot)
    body += b"".join(_pack_record(r) for r in seq.records)
    return body


def write_shard(path, sequences) -> None:
    """Write sequences to one shard file."""
    bodies = [_pack_sequence(s) for s in sequences]
    crcs = _crc_bodies(bodies)
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<H", VERSION))
        for body, crc in zip(bodies, crcs):
            f.write(struct.pack("<I", len(body)))
            f.write(body)
            f.write(struct.pack("<I", crc))


def _crc_bodies(bodies) -> list:
    """Checksum many bodies, batching the ones with equal length."""
    crcs = [0] * len(bodies)
    by_len: dict[int, list[int]] = {}
    for i, b in enumerate(bodies):
        by_len.setdefault(len(b), []).append(i)
    for length, idxs in by_len.items():
        if len(idxs) == 1 or length == 0:
            for i in idxs:
                crcs[i] = crc32c(bodies[i])
        else:
            mat = np.frombuffer(b"".join(bodies[i] for i in idxs),
                                dtype=np.uint8).reshape(len(idxs), length)
            for i, c in zip(idxs, crc32c_rows(mat)):
                crcs[i] = int(c)
    return crcs


class _Cursor:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedShardError(
                f"{self.path}: needed {n} bytes at offset {self.off}, "
                f"file has {len(self.buf)}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self.off >= len(self.buf)


def _unpack_matrix(cur: _Cursor) -> np.ndarray:
    rows, cols = cur.unpack("<HH")
    raw = np.frombuffer(cur.take(rows * cols * 8), dtype="<f4")
    m = raw.astype(np.float64).reshape(rows, cols, 2)
    return m[..., 0] + 1j * m[..., 1]


def _unpack_record(cur: _Cursor, config_id: int, slot_index: int) -> FeatureRecord:
    ct_code, n_sub = cur.unpack("<BI")
    if ct_code >= len(CHANNEL_TYPES):
        raise ShardError(f"unknown channel type code {ct_code}")
    mats = {name: _unpack_matrix(cur) for name in _MATRIX_FIELDS}
    scalars = cur.unpack("<4d")
    (rank,) = cur.unpack("<B")
    return FeatureRecord(
        channel_type=CHANNEL_TYPES[ct_code],
        n_subcarriers=n_sub,
        delay_center=scalars[0], delay_len=scalars[1],
        doppler_width=scalars[2], spectral_eff=scalars[3],
        rank=rank, slot_index=slot_index, config_id=config_id,
        **mats,
    )


def read_shard(path, verify: bool = True) -> list:
    """Read every sequence of a shard, verifying checksums by default."""
    buf = Path(path).read_bytes()
    cur = _Cursor(buf, path)
    if cur.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not a CSFD shard")
    (version,) = cur.unpack("<H")
    if version != VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")

    spans = []
    while not cur.exhausted:
        (length,) = cur.unpack("<I")
        start = cur.off
        cur.take(length)
        (crc,) = cur.unpack("<I")
        spans.append((start, length, crc))

    if verify:
        bodies = [buf[s:s + l] for s, l, _ in spans]
        for i, (crc, (_, _, stored)) in enumerate(zip(_crc_bodies(bodies), spans)):
            if crc != stored:
                raise ChecksumError(f"{path}: checksum mismatch in sequence {i}")

    sequences = []
    for start, length, _ in spans:
        body = _Cursor(buf[start:start + length], path)
        run_id, start_slot = body.unpack("<QH")
        config_id = run_id >> 8
        records = []
        while not body.exhausted:
            records.append(_unpack_record(body, config_id,
                                          start_slot + len(records)))
        sequences.append(SequenceRecord(run_id=run_id, start_slot=start_slot,
                                        records=records))
    return sequences

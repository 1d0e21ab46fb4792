"""32-bit range coder driven by per-channel tables from the entropy model.

Wire format of one coded tensor::

    u32 LE  CRC-32 of the symbols as little-endian int32
    bytes   range coder output (absent when there are no symbols)

Symbols outside ``[-A, A]`` are sent as a per-channel escape symbol followed
by the raw value as two 16-bit uniform chunks (two's complement, high first).
"""

from __future__ import annotations

import bisect
import struct
import zlib
from dataclasses import dataclass

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class BitstreamError(ValueError):
    pass


@dataclass
class CodingTables:
    alphabet: int
    freqs: np.ndarray  # [C, 2A+2] int64, last column is the escape symbol
    cum: np.ndarray  # [C, 2A+3] int64

    @property
    def channels(self) -> int:
        return self.freqs.shape[0]

    @property
    def escape(self) -> int:
        return 2 * self.alphabet + 1


def quantize_pmf(probs: np.ndarray) -> np.ndarray:
    """Integer frequencies summing to TOTAL, every symbol at least 1.

    The rounding deficit goes to the most probable symbol (first on ties).
    """
    p = np.clip(np.asarray(probs, dtype=np.float64), 0.0, None)
    p = p / p.sum()
    n = len(p)
    f = 1 + np.floor(p * (TOTAL - n)).astype(np.int64)
    f[int(np.argmax(p))] += TOTAL - f.sum()
    return f


def tables_from_pmf(pmf: np.ndarray, alphabet: int) -> CodingTables:
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.shape[1] != 2 * alphabet + 1:
        raise ValueError(f"pmf has {pmf.shape[1]} columns, expected {2 * alphabet + 1}")
    esc = np.clip(1.0 - pmf.sum(axis=1, keepdims=True), 0.0, None)
    freqs = np.stack([quantize_pmf(row) for row in np.concatenate([pmf, esc], axis=1)])
    cum = np.concatenate([np.zeros((len(freqs), 1), dtype=np.int64), np.cumsum(freqs, axis=1)], axis=1)
    return CodingTables(alphabet, freqs, cum)


def coding_tables(em, alphabet: int = 127) -> CodingTables:
    if isinstance(em, CodingTables):
        return em
    return tables_from_pmf(em.pmf_table(alphabet), alphabet)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, start: int, size: int):
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * size
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(5):
            self.code = (self.code << 8) | self._byte()
        self.code &= _MASK32

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise BitstreamError("bitstream underrun")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self) -> int:
        self._r = self.range >> PRECISION
        v = self.code // self._r
        if v >= TOTAL:
            raise BitstreamError("corrupt stream: code value outside the coding range")
        return v

    def consume(self, start: int, size: int):
        self.code -= self._r * start
        self.range = self._r * size
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range <<= 8


def _crc(symbols: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(symbols, dtype="<i4").tobytes())


def ac_encode(symbols, em, alphabet: int = 127) -> bytes:
    """Range-code an integer tensor laid out [..., C]."""
    tables = coding_tables(em, alphabet)
    sym = np.asarray(symbols)
    if sym.size and not np.array_equal(sym, np.round(sym)):
        raise ValueError("ac_encode needs integer symbols")
    sym = sym.astype(np.int64)
    if sym.size and (sym.min() < -(2 ** 31) or sym.max() >= 2 ** 31):
        raise ValueError("symbol outside the 32-bit escape range")
    flat = sym.reshape(-1)
    header = struct.pack("<I", _crc(flat))
    if flat.size == 0:
        return header
    if sym.shape[-1] != tables.channels:
        raise ValueError(f"last axis {sym.shape[-1]} != entropy model channels {tables.channels}")

    a, esc, n_ch = tables.alphabet, tables.escape, tables.channels
    cum = tables.cum.tolist()
    freqs = tables.freqs.tolist()
    enc = RangeEncoder()
    for i, v in enumerate(flat.tolist()):
        ch = i % n_ch
        s = v + a
        if 0 <= s < esc:
            enc.encode(cum[ch][s], freqs[ch][s])
        else:
            enc.encode(cum[ch][esc], freqs[ch][esc])
            raw = v & _MASK32
            enc.encode(raw >> 16, 1)
            enc.encode(raw & 0xFFFF, 1)
    return header + enc.finish()


def ac_decode(data: bytes, count: int, em, alphabet: int = 127) -> np.ndarray:
    """Inverse of :func:`ac_encode`; returns ``count`` symbols, flat int64."""
    tables = coding_tables(em, alphabet)
    if len(data) < 4:
        raise BitstreamError("bitstream underrun")
    (crc,) = struct.unpack_from("<I", data)
    body = bytes(data[4:])
    out = np.empty(count, dtype=np.int64)
    if count:
        a, esc, n_ch = tables.alphabet, tables.escape, tables.channels
        cum = tables.cum.tolist()
        dec = RangeDecoder(body)
        for i in range(count):
            c = cum[i % n_ch]
            v = dec.target()
            s = bisect.bisect_right(c, v) - 1
            dec.consume(c[s], c[s + 1] - c[s])
            if s == esc:
                hi = dec.target()
                dec.consume(hi, 1)
                lo = dec.target()
                dec.consume(lo, 1)
                raw = (hi << 16) | lo
                out[i] = raw - (1 << 32) if raw >= 1 << 31 else raw
            else:
                out[i] = s - a
        if dec.pos != len(body):
            raise BitstreamError("corrupt stream: trailing bytes after coded symbols")
    elif body:
        raise BitstreamError("corrupt stream: payload for an empty tensor")
    if _crc(out) != crc:
        raise BitstreamError("corrupt stream: checksum mismatch")
    return out

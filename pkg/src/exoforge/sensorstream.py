"""Exoskeleton sensor wire format and analog conversions.

Encoder packet layout (all multi-byte fields little-endian)::

    0xAA 0x55 | N (u8) | N x channel raw (u16) | supply raw (u16) | checksum (u8)

The checksum byte makes the whole packet sum to 0 mod 256. Tactile frames
use an open fixture layout and are not interoperable with any vendor
protocol.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidReading, LengthMismatch, ValidationError, ZeroSupply

HEADER = b"\xAA\x55"
MAX_CHANNELS = 64

FSR_SCALAR = "fsr"
MAGNET_ARRAY = "magnet_array"
MAGNET_POINTS = 120
MAGNET_SCALE = 0.01  # force units per raw count


@dataclass(frozen=True)
class AdcParams:
    full_scale: int = 4095  # 12-bit
    v_ref: float = 3.3  # nominal supply, volts

    def __post_init__(self):
        if self.full_scale <= 0:
            raise ValidationError("full_scale", "must be > 0")

    def volts(self, counts):
        return np.asarray(counts, dtype=float) / self.full_scale * self.v_ref


def checksum(data: bytes) -> int:
    return (-sum(data)) & 0xFF


def encode_packet(channels, supply_raw: int) -> bytes:
    channels = [int(c) for c in channels]
    if len(channels) > 255:
        raise ValidationError("channels", "at most 255 channels per packet")
    body = HEADER + struct.pack(f"<B{len(channels)}HH", len(channels), *channels, int(supply_raw))
    return body + bytes([checksum(body)])


@dataclass(frozen=True)
class EncoderPacket:
    channels: tuple
    supply_raw: int
    offset: int = 0  # byte offset of the header in the stream

    def encode(self) -> bytes:
        return encode_packet(self.channels, self.supply_raw)

    def angles_deg(self):
        return [encoder_angle(c, self.supply_raw) for c in self.channels]


@dataclass
class StreamDiagnostics:
    checksum_mismatch: int = 0
    truncated: int = 0
    invalid: int = 0
    events: list = field(default_factory=list)  # (kind, offset, length)
    skipped: list = field(default_factory=list)  # (offset, length) of bytes outside any packet

    @property
    def count(self) -> int:
        return self.checksum_mismatch + self.truncated + self.invalid

    def to_dict(self):
        return {"checksum_mismatch": self.checksum_mismatch, "truncated": self.truncated,
                "invalid": self.invalid, "events": [list(e) for e in self.events],
                "skipped": [list(s) for s in self.skipped]}


class StreamDecoder:
    """Incremental packet framer; feed arbitrary chunks, then ``finish()``.

    After a bad checksum the scan restarts one byte past the rejected
    header, so a real packet hidden inside a corrupt span is still found.
    """

    def __init__(self, max_channels: int = MAX_CHANNELS):
        self.max_channels = max_channels
        self.diagnostics = StreamDiagnostics()
        self._buf = bytearray()
        self._base = 0  # stream offset of _buf[0]
        self._skip_start = None

    def _skip(self, n):
        if n <= 0:
            return
        if self._skip_start is None:
            self._skip_start = self._base
        del self._buf[:n]
        self._base += n

    def _close_skip(self):
        if self._skip_start is not None:
            self.diagnostics.skipped.append((self._skip_start, self._base - self._skip_start))
            self._skip_start = None

    def _event(self, kind, length):
        self.diagnostics.events.append((kind, self._base, length))

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        out = []
        while True:
            pos = self._buf.find(HEADER)
            if pos < 0:
                # keep a trailing 0xAA that may start the next header
                keep = 1 if self._buf[-1:] == HEADER[:1] else 0
                self._skip(len(self._buf) - keep)
                return out
            self._skip(pos)
            if len(self._buf) < 3:
                return out
            n = self._buf[2]
            if n > self.max_channels:
                self.diagnostics.invalid += 1
                self._event("InvalidLength", 3)
                self._skip(1)
                continue
            size = 2 + 1 + 2 * n + 2 + 1
            if len(self._buf) < size:
                return out
            raw = bytes(self._buf[:size])
            if sum(raw) & 0xFF:
                self.diagnostics.checksum_mismatch += 1
                self._event("ChecksumMismatch", size)
                self._skip(1)
                continue
            values = struct.unpack_from(f"<{n}HH", raw, 3)
            if values[-1] == 0:
                self.diagnostics.invalid += 1
                self._event("ZeroSupply", size)
                self._skip(1)
                continue
            self._close_skip()
            out.append(EncoderPacket(tuple(values[:-1]), values[-1], self._base))
            del self._buf[:size]
            self._base += size

    def finish(self) -> None:
        """Flush: any buffered partial packet counts as truncated."""
        if self._buf:
            if self._buf.startswith(HEADER):
                self.diagnostics.truncated += 1
                self._event("TruncatedPacket", len(self._buf))
            self._skip(len(self._buf))
        self._close_skip()


def frame_stream(data: bytes, max_channels: int = MAX_CHANNELS):
    """Decode a complete byte stream; returns ``(packets, diagnostics)``."""
    dec = StreamDecoder(max_channels)
    packets = dec.feed(data)
    dec.finish()
    return packets, dec.diagnostics


def encoder_angle(raw, supply_raw) -> float:
    """Joint angle in degrees from a raw reading normalized by the supply reading."""
    if supply_raw == 0:
        raise ZeroSupply("supply reading is zero")
    return raw / supply_raw * 360.0


def fsr_force(v_adc: float, v_supply: float, k: float = 1.0) -> float:
    """Force from the FSR divider voltage; ``inf`` marks a saturated-low reading."""
    if v_adc > v_supply:
        raise InvalidReading(f"ADC voltage {v_adc} exceeds supply {v_supply}")
    if v_adc <= v_supply / 4096.0:
        return math.inf
    return k * (v_supply / v_adc - 1.0)


def fsr_saturated(v_adc: float, v_supply: float) -> bool:
    return v_adc <= v_supply / 4096.0


@dataclass(frozen=True, eq=False)
class TactileFrame:
    kind: str
    values: np.ndarray  # (120, 3) forces, or (1,) force for FSR
    timestamp_ns: int = 0
    saturated: bool = False

    def __eq__(self, other):
        if not isinstance(other, TactileFrame):
            return NotImplemented
        return (self.kind == other.kind and self.timestamp_ns == other.timestamp_ns
                and np.array_equal(self.values, other.values))


def tactile_frame_size(kind: str) -> int:
    if kind == MAGNET_ARRAY:
        return MAGNET_POINTS * 3 * 2
    if kind == FSR_SCALAR:
        return 4
    raise ValidationError("kind", f"unknown tactile kind {kind!r}")


def decode_tactile(data: bytes, kind: str, timestamp_ns: int = 0, k: float = 1.0) -> TactileFrame:
    """Parse one tactile frame.

    Magnet arrays are 120 x 3 signed 16-bit counts scaled by
    ``MAGNET_SCALE``. FSR frames are two u16 counts (divider, supply).
    """
    size = tactile_frame_size(kind)
    if len(data) != size:
        raise LengthMismatch(f"{kind} frame needs {size} bytes, got {len(data)}")
    if kind == MAGNET_ARRAY:
        raw = np.frombuffer(data, dtype="<i2").reshape(MAGNET_POINTS, 3)
        return TactileFrame(kind, raw.astype(float) * MAGNET_SCALE, timestamp_ns)
    adc, supply = struct.unpack("<HH", data)
    if supply == 0:
        raise ZeroSupply("FSR supply reading is zero")
    force = fsr_force(adc, supply, k)
    return TactileFrame(kind, np.array([force]), timestamp_ns, math.isinf(force))


def encode_tactile_raw(raw, kind: str) -> bytes:
    """Inverse of ``decode_tactile`` on raw counts (array of int16, or (adc, supply))."""
    if kind == MAGNET_ARRAY:
        arr = np.asarray(raw, dtype=np.int64).reshape(MAGNET_POINTS, 3)
        if arr.min() < -32768 or arr.max() > 32767:
            raise ValidationError("raw", "magnet counts must fit int16")
        return arr.astype("<i2").tobytes()
    adc, supply = raw
    return struct.pack("<HH", int(adc), int(supply))


def packets_to_records(packets, t0_ns: int = 0, period_ns: int = 0):
    """JSONL-ready dicts; receive times are synthesized from a fixed period."""
    for i, p in enumerate(packets):
        yield {"t_receive_ns": int(t0_ns + i * period_ns),
               "joint_angles_deg": p.angles_deg(),
               "supply_raw": p.supply_raw,
               "channels_raw": list(p.channels)}

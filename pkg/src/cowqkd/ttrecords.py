"""Bit-exact T2/T3 time-tag records, overflow handling and the record file format.

Word layout (32 bits, MSB first)::

    T2:  | special:1 | channel:6 | timetag:25 |          timetag in 5 ps units
    T3:  | special:1 | channel:6 | dtime:15   | nsync:10 |

With ``special`` set the channel field selects the record type:

    ====  ==========================  ==========================
    code  T2                          T3
    ====  ==========================  ==========================
    0     sync (timetag)              invalid (syncs are not forwarded)
    1-4   marker (timetag)            marker (nsync, dtime must be 0)
    0x3F  overflow (count in timetag) overflow (count in nsync, dtime 0)
    ====  ==========================  ==========================

All other special codes are invalid. Everything here is integer arithmetic;
absolute times are int64 picoseconds.

Event arrays use :data:`EVENT_DTYPE`. Detector channels are 0..63, the sync
input is :data:`SYNC_CHANNEL` (64) and marker ``k`` is channel ``64 + k``, so
ordering by channel index puts detections before sync and markers on ties.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from .errors import (
    FormatError,
    InvalidDivider,
    InvalidRecord,
    ModeMismatch,
    RangeError,
    UnsortedInput,
)

T2_UNIT_PS = 5
T2_TIME_BITS = 25
T2_WRAP = 1 << T2_TIME_BITS
T2_TIME_MASK = T2_WRAP - 1
CHANNEL_SHIFT = 25
CHANNEL_MASK = 0x3F
SPECIAL_BIT = 1 << 31
DTIME_BITS = 15
DTIME_SHIFT = 10
DTIME_MASK = (1 << DTIME_BITS) - 1
NSYNC_BITS = 10
NSYNC_WRAP = 1 << NSYNC_BITS
NSYNC_MASK = NSYNC_WRAP - 1
OVERFLOW_CODE = 0x3F
N_DETECTOR_CHANNELS = 64
SYNC_CHANNEL = 64
MAX_MARKER = 4
MAX_RESOLUTION_CODE = 23
VALID_DIVIDERS = (1, 2, 4, 8, 16)

EVENT_DTYPE = np.dtype([("time_ps", "<i8"), ("channel", "<i2")])
T3_FIELDS_DTYPE = np.dtype([("channel", "<i2"), ("sync_index", "<i8"), ("dtime", "<i4")])

# record kinds returned by classify()
INVALID = -1
DETECTION = 0
SYNC = 1
OVERFLOW = 2
MARKER = 3


class Mode(enum.IntEnum):
    T2 = 2
    T3 = 3


@dataclass(frozen=True)
class Detection2:
    channel: int
    timetag: int


@dataclass(frozen=True)
class Sync2:
    timetag: int


@dataclass(frozen=True)
class Overflow2:
    count: int


@dataclass(frozen=True)
class Marker2:
    id: int
    timetag: int


@dataclass(frozen=True)
class Detection3:
    channel: int
    nsync: int
    dtime: int


@dataclass(frozen=True)
class Overflow3:
    count: int


@dataclass(frozen=True)
class Marker3:
    id: int
    nsync: int


TtRecord = Union[Detection2, Sync2, Overflow2, Marker2, Detection3, Overflow3, Marker3]
_T2_TYPES = (Detection2, Sync2, Overflow2, Marker2)
_T3_TYPES = (Detection3, Overflow3, Marker3)


def _check(name, value, lo, hi):
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise RangeError(f"{name} must be an integer, got {value!r}")
    if not lo <= value <= hi:
        raise RangeError(f"{name}={value} outside [{lo}, {hi}]")
    return int(value)


def encode(record: TtRecord, mode) -> int:
    """Pack one record into its 32-bit word."""
    mode = Mode(mode)
    allowed = _T2_TYPES if mode is Mode.T2 else _T3_TYPES
    if not isinstance(record, allowed):
        raise ModeMismatch(f"{type(record).__name__} is not a {mode.name} record")

    if isinstance(record, Detection2):
        ch = _check("channel", record.channel, 0, N_DETECTOR_CHANNELS - 1)
        tag = _check("timetag", record.timetag, 0, T2_TIME_MASK)
        return (ch << CHANNEL_SHIFT) | tag
    if isinstance(record, Sync2):
        tag = _check("timetag", record.timetag, 0, T2_TIME_MASK)
        return SPECIAL_BIT | tag
    if isinstance(record, Overflow2):
        count = _check("count", record.count, 1, T2_TIME_MASK)
        return SPECIAL_BIT | (OVERFLOW_CODE << CHANNEL_SHIFT) | count
    if isinstance(record, Marker2):
        mid = _check("marker id", record.id, 1, MAX_MARKER)
        tag = _check("timetag", record.timetag, 0, T2_TIME_MASK)
        return SPECIAL_BIT | (mid << CHANNEL_SHIFT) | tag
    if isinstance(record, Detection3):
        ch = _check("channel", record.channel, 0, N_DETECTOR_CHANNELS - 1)
        nsync = _check("nsync", record.nsync, 0, NSYNC_MASK)
        dtime = _check("dtime", record.dtime, 0, DTIME_MASK)
        return (ch << CHANNEL_SHIFT) | (dtime << DTIME_SHIFT) | nsync
    if isinstance(record, Overflow3):
        count = _check("count", record.count, 1, NSYNC_MASK)
        return SPECIAL_BIT | (OVERFLOW_CODE << CHANNEL_SHIFT) | count
    mid = _check("marker id", record.id, 1, MAX_MARKER)
    nsync = _check("nsync", record.nsync, 0, NSYNC_MASK)
    return SPECIAL_BIT | (mid << CHANNEL_SHIFT) | nsync


def decode(word: int, mode) -> TtRecord:
    """Unpack one 32-bit word. Raises InvalidRecord for reserved codes."""
    mode = Mode(mode)
    word = _check("word", word, 0, 0xFFFFFFFF)
    special = word >> 31
    ch = (word >> CHANNEL_SHIFT) & CHANNEL_MASK
    if mode is Mode.T2:
        tag = word & T2_TIME_MASK
        if not special:
            return Detection2(ch, tag)
        if ch == 0:
            return Sync2(tag)
        if 1 <= ch <= MAX_MARKER:
            return Marker2(ch, tag)
        if ch == OVERFLOW_CODE and tag >= 1:
            return Overflow2(tag)
        raise InvalidRecord(f"reserved T2 word 0x{word:08X}")

    dtime = (word >> DTIME_SHIFT) & DTIME_MASK
    nsync = word & NSYNC_MASK
    if not special:
        return Detection3(ch, nsync, dtime)
    if dtime == 0:
        if 1 <= ch <= MAX_MARKER:
            return Marker3(ch, nsync)
        if ch == OVERFLOW_CODE and nsync >= 1:
            return Overflow3(nsync)
    raise InvalidRecord(f"reserved T3 word 0x{word:08X}")


def classify(words, mode) -> np.ndarray:
    """Vectorised record kind per word (DETECTION, SYNC, OVERFLOW, MARKER or INVALID)."""
    mode = Mode(mode)
    w = np.asarray(words, dtype=np.uint32)
    special = (w >> 31).astype(bool)
    ch = ((w >> CHANNEL_SHIFT) & CHANNEL_MASK).astype(np.int16)
    kind = np.full(w.shape, INVALID, dtype=np.int8)
    kind[~special] = DETECTION
    is_marker = special & (ch >= 1) & (ch <= MAX_MARKER)
    is_ovf = special & (ch == OVERFLOW_CODE)
    if mode is Mode.T2:
        tag = w & T2_TIME_MASK
        kind[special & (ch == 0)] = SYNC
        kind[is_marker] = MARKER
        kind[is_ovf & (tag >= 1)] = OVERFLOW
    else:
        dtime_zero = ((w >> DTIME_SHIFT) & DTIME_MASK) == 0
        nsync = w & NSYNC_MASK
        kind[is_marker & dtime_zero] = MARKER
        kind[is_ovf & dtime_zero & (nsync >= 1)] = OVERFLOW
    return kind


def _raise_first_invalid(words, kind, mode, offset):
    bad = np.flatnonzero(kind == INVALID)
    if bad.size:
        i = int(bad[0])
        raise InvalidRecord(f"reserved {Mode(mode).name} word 0x{int(words[i]):08X}",
                            position=offset + i)


def resolution_ps(code: int) -> int:
    """Bin width of resolution ``code``: 5 ps doubled ``code`` times."""
    code = _check("resolution code", code, 0, MAX_RESOLUTION_CODE)
    return T2_UNIT_PS << code


def t3_span_ps(code: int) -> int:
    return (DTIME_MASK + 1) * resolution_ps(code)


def apply_sync_divider(sync_times, divider: int):
    """Keep every ``divider``-th sync, starting with the first."""
    if divider not in VALID_DIVIDERS:
        raise InvalidDivider(f"sync divider must be one of {VALID_DIVIDERS}, got {divider}")
    return np.asarray(sync_times)[::divider]


def make_events(time_ps, channel) -> np.ndarray:
    time_ps = np.asarray(time_ps, dtype=np.int64)
    ev = np.empty(time_ps.shape[0], dtype=EVENT_DTYPE)
    ev["time_ps"] = time_ps
    ev["channel"] = channel
    return ev


def _check_sorted(times, stream=None):
    if times.size > 1:
        back = np.flatnonzero(np.diff(times) < 0)
        if back.size:
            pos = int(back[0]) + 1
            where = "" if stream is None else f" in stream {stream}"
            raise UnsortedInput(f"time goes backwards at record {pos}{where}",
                                stream=stream, position=pos)


def _overflow_runs(steps, max_count):
    """Split overflow increments into records of at most ``max_count`` each.

    Returns (records per event, owning event per record, count per record).
    """
    n_rec = (steps + max_count - 1) // max_count
    owner = np.repeat(np.arange(steps.size), n_rec)
    first = np.cumsum(n_rec) - n_rec
    j = np.arange(owner.size) - np.repeat(first, n_rec)
    last = j == n_rec[owner] - 1
    counts = np.where(last, steps[owner] - (n_rec[owner] - 1) * max_count, max_count)
    return n_rec, owner, counts


def _interleave(event_words, n_before, ovf_words):
    """Place ``n_before[i]`` overflow words in front of each event word."""
    n = event_words.size
    out = np.empty(n + ovf_words.size, dtype=np.uint32)
    ev_pos = np.arange(n) + np.cumsum(n_before)
    mask = np.ones(out.size, dtype=bool)
    mask[ev_pos] = False
    out[ev_pos] = event_words
    out[mask] = ovf_words
    return out


class T2Expander:
    """Incremental T2 word -> absolute event decoder (keeps the overflow count)."""

    def __init__(self):
        self.overflows = 0
        self.position = 0

    def feed(self, words) -> np.ndarray:
        w = np.asarray(words, dtype=np.uint32)
        kind = classify(w, Mode.T2)
        _raise_first_invalid(w, kind, Mode.T2, self.position)
        tag = (w & T2_TIME_MASK).astype(np.int64)
        ch = ((w >> CHANNEL_SHIFT) & CHANNEL_MASK).astype(np.int16)
        is_ovf = kind == OVERFLOW
        wraps = self.overflows + np.cumsum(np.where(is_ovf, tag, 0))
        if w.size:
            self.overflows = int(wraps[-1])
        self.position += w.size

        keep = ~is_ovf
        ev = np.empty(int(keep.sum()), dtype=EVENT_DTYPE)
        ev["time_ps"] = (wraps[keep] * T2_WRAP + tag[keep]) * T2_UNIT_PS
        k = kind[keep]
        c = ch[keep]
        ev["channel"] = np.where(k == DETECTION, c, np.where(k == SYNC, SYNC_CHANNEL, SYNC_CHANNEL + c))
        return ev


def expand_t2(words) -> np.ndarray:
    """Decode a T2 word stream into absolute events (overflow records consumed)."""
    return T2Expander().feed(words)


class T2Compressor:
    """Incremental absolute event -> canonical T2 word encoder."""

    def __init__(self):
        self.wraps = 0
        self.last_time = 0

    def feed(self, events) -> np.ndarray:
        t = np.asarray(events["time_ps"], dtype=np.int64)
        ch = np.asarray(events["channel"], dtype=np.int64)
        if t.size == 0:
            return np.empty(0, dtype=np.uint32)
        if t[0] < self.last_time:
            raise UnsortedInput("time goes backwards at record 0", position=0)
        _check_sorted(t)
        if t[0] < 0:
            raise RangeError("event times must be nonnegative")
        if ch.min() < 0 or ch.max() > SYNC_CHANNEL + MAX_MARKER:
            raise RangeError("channel outside 0..68")

        ticks = t // T2_UNIT_PS
        wrap = ticks >> T2_TIME_BITS
        tag = (ticks & T2_TIME_MASK).astype(np.uint32)
        steps = np.diff(wrap, prepend=self.wraps)
        self.wraps = int(wrap[-1])
        self.last_time = int(t[-1])

        code = np.where(ch < SYNC_CHANNEL, ch, ch - SYNC_CHANNEL).astype(np.uint32)
        special = np.where(ch < SYNC_CHANNEL, 0, SPECIAL_BIT).astype(np.uint32)
        ev_words = special | (code << CHANNEL_SHIFT) | tag

        n_rec, _, counts = _overflow_runs(steps, T2_TIME_MASK)
        ovf = (SPECIAL_BIT | (OVERFLOW_CODE << CHANNEL_SHIFT) | counts.astype(np.uint32)).astype(np.uint32)
        return _interleave(ev_words, n_rec, ovf)


def compress_t2(events) -> np.ndarray:
    """Encode time-sorted absolute events as a canonical T2 stream.

    Times are floored to the 5 ps grid. Overflow records are inserted only
    where the 25-bit timetag wraps, coalesced into as few records as possible.
    """
    return T2Compressor().feed(events)


class T3Encoder:
    """Incremental conversion of absolute events into T3 words.

    Syncs are implicit: true sync ``k`` occurs at ``k * sync_period_ps`` and
    the divider keeps every ``divider``-th one. One Overflow3 record (count 1)
    is emitted each time the effective sync counter reaches a multiple of 1024.
    Detections later than the T3 span after their sync are dropped and
    counted in ``dropped``. Sync events (channel 64) in the input are ignored.
    """

    def __init__(self, sync_period_ps: int, divider: int = 1, resolution_code: int = 0):
        if int(sync_period_ps) <= 0:
            raise RangeError("sync period must be positive")
        if divider not in VALID_DIVIDERS:
            raise InvalidDivider(f"sync divider must be one of {VALID_DIVIDERS}, got {divider}")
        self.sync_period_ps = int(sync_period_ps)
        self.divider = int(divider)
        self.resolution_ps = resolution_ps(resolution_code)
        self.span_ps = t3_span_ps(resolution_code)
        self.period_eff = self.sync_period_ps * self.divider
        self.wraps = 0
        self.last_time = 0
        self.dropped = 0

    def _overflow_words(self, n):
        return np.full(n, SPECIAL_BIT | (OVERFLOW_CODE << CHANNEL_SHIFT) | 1, dtype=np.uint32)

    def feed(self, events) -> np.ndarray:
        t = np.asarray(events["time_ps"], dtype=np.int64)
        ch = np.asarray(events["channel"], dtype=np.int64)
        if t.size and t[0] < self.last_time:
            raise UnsortedInput("time goes backwards at record 0", position=0)
        _check_sorted(t)
        if t.size and t[0] < 0:
            raise RangeError("event times must be nonnegative")
        keep = ch != SYNC_CHANNEL
        t, ch = t[keep], ch[keep]
        if t.size == 0:
            return np.empty(0, dtype=np.uint32)
        self.last_time = int(t[-1])

        j = t // self.period_eff
        dt = t - j * self.period_eff
        is_det = ch < SYNC_CHANNEL
        drop = is_det & (dt >= self.span_ps)
        self.dropped += int(drop.sum())
        t, ch, j, dt, is_det = t[~drop], ch[~drop], j[~drop], dt[~drop], is_det[~drop]

        wrap = j // NSYNC_WRAP
        steps = np.diff(wrap, prepend=self.wraps)
        if wrap.size:
            self.wraps = int(wrap[-1])
        nsync = (j & NSYNC_MASK).astype(np.uint32)
        dtime = np.where(is_det, dt // self.resolution_ps, 0).astype(np.uint32)
        code = np.where(is_det, ch, ch - SYNC_CHANNEL).astype(np.uint32)
        special = np.where(is_det, 0, SPECIAL_BIT).astype(np.uint32)
        ev_words = special | (code << CHANNEL_SHIFT) | (dtime << DTIME_SHIFT) | nsync
        return _interleave(ev_words, steps, self._overflow_words(int(steps.sum())))

    def finish(self, n_syncs: int | None = None) -> np.ndarray:
        """Emit the overflow records still owed for ``n_syncs`` true syncs."""
        if n_syncs is None:
            return np.empty(0, dtype=np.uint32)
        total = (int(n_syncs) // self.divider) // NSYNC_WRAP
        n = max(total - self.wraps, 0)
        self.wraps += n
        return self._overflow_words(n)


def t2_to_t3(events, sync_period_ps, divider=1, resolution_code=0, n_syncs=None):
    """Convert absolute events to a T3 word stream.

    ``n_syncs`` is the number of true sync pulses after the start (the start
    itself is sync 0); it only matters for trailing overflow records.

    Returns ``(words, dropped)``.
    """
    enc = T3Encoder(sync_period_ps, divider, resolution_code)
    words = enc.feed(events)
    tail = enc.finish(n_syncs)
    return np.concatenate([words, tail]), enc.dropped


def t3_fields(events, sync_period_ps, divider=1, resolution_code=0):
    """Decoded form of ``t2_to_t3`` for detections only, without packing words.

    Returns ``(fields, dropped)``; equals ``expand_t3`` of the packed stream
    restricted to detection records.
    """
    if divider not in VALID_DIVIDERS:
        raise InvalidDivider(f"sync divider must be one of {VALID_DIVIDERS}, got {divider}")
    period = int(sync_period_ps) * divider
    t = np.asarray(events["time_ps"], dtype=np.int64)
    ch = np.asarray(events["channel"])
    det = ch < SYNC_CHANNEL
    t, ch = t[det], ch[det]
    j = t // period
    dt = t - j * period
    keep = dt < t3_span_ps(resolution_code)
    out = np.empty(int(keep.sum()), dtype=T3_FIELDS_DTYPE)
    out["channel"] = ch[keep]
    out["sync_index"] = j[keep]
    out["dtime"] = dt[keep] // resolution_ps(resolution_code)
    return out, int(t.size - out.size)


class T3Expander:
    """Incremental T3 word decoder producing absolute sync indices."""

    def __init__(self):
        self.overflows = 0
        self.position = 0

    def feed(self, words) -> np.ndarray:
        w = np.asarray(words, dtype=np.uint32)
        kind = classify(w, Mode.T3)
        _raise_first_invalid(w, kind, Mode.T3, self.position)
        nsync = (w & NSYNC_MASK).astype(np.int64)
        is_ovf = kind == OVERFLOW
        wraps = self.overflows + np.cumsum(np.where(is_ovf, nsync, 0))
        if w.size:
            self.overflows = int(wraps[-1])
        self.position += w.size

        keep = ~is_ovf
        out = np.empty(int(keep.sum()), dtype=T3_FIELDS_DTYPE)
        ch = ((w[keep] >> CHANNEL_SHIFT) & CHANNEL_MASK).astype(np.int16)
        out["channel"] = np.where(kind[keep] == DETECTION, ch, SYNC_CHANNEL + ch)
        out["sync_index"] = wraps[keep] * NSYNC_WRAP + nsync[keep]
        out["dtime"] = (w[keep] >> DTIME_SHIFT) & DTIME_MASK
        return out


def expand_t3(words) -> np.ndarray:
    """Decode a T3 word stream into (channel, absolute sync index, dtime) rows."""
    return T3Expander().feed(words)


def t3_times_ps(fields, sync_period_eff_ps: int, resolution_code: int) -> np.ndarray:
    return (fields["sync_index"].astype(np.int64) * int(sync_period_eff_ps)
            + fields["dtime"].astype(np.int64) * resolution_ps(resolution_code))


# -- record files ---------------------------------------------------------

MAGIC = b"QKDTTAG\x00"
FILE_VERSION = 1
HEADER = struct.Struct("<8sHBBBBHQQ")
assert HEADER.size == 32


@dataclass(frozen=True)
class RecordFileHeader:
    """32-byte file header.

    Layout (little-endian): magic[8], version u16, mode u8, resolution u8,
    channel_count u8, reserved u8, sync_divider u16, sync_period_ps u64,
    duration_ps u64. ``sync_period_ps`` is the undivided sync period.
    """

    mode: Mode
    resolution_code: int = 0
    channel_count: int = 65
    sync_divider: int = 1
    sync_period_ps: int = 0
    duration_ps: int = 0
    version: int = FILE_VERSION

    def validate(self):
        mode = Mode(self.mode)
        _check("resolution code", self.resolution_code, 0, MAX_RESOLUTION_CODE)
        if mode is Mode.T2 and self.resolution_code != 0:
            raise RangeError("T2 files always use resolution code 0")
        _check("channel_count", self.channel_count, 1, N_DETECTOR_CHANNELS + 1)
        d = self.sync_divider
        if d < 1 or d & (d - 1):
            raise InvalidDivider(f"sync divider must be a power of two, got {d}")
        _check("sync_period_ps", self.sync_period_ps, 0, (1 << 63) - 1)
        _check("duration_ps", self.duration_ps, 0, (1 << 63) - 1)

    def pack(self) -> bytes:
        self.validate()
        return HEADER.pack(MAGIC, self.version, int(self.mode), self.resolution_code,
                           self.channel_count, 0, self.sync_divider,
                           self.sync_period_ps, self.duration_ps)

    @classmethod
    def unpack(cls, raw: bytes) -> "RecordFileHeader":
        if len(raw) < HEADER.size:
            raise FormatError("truncated header", offset=len(raw))
        magic, version, mode, res, nch, _reserved, div, period, duration = HEADER.unpack(raw[:HEADER.size])
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}", offset=0)
        if version != FILE_VERSION:
            raise FormatError(f"unsupported version {version}", offset=8)
        try:
            mode = Mode(mode)
        except ValueError:
            raise FormatError(f"unknown mode {mode}", offset=10) from None
        hdr = cls(mode, res, nch, div, period, duration, version)
        try:
            hdr.validate()
        except (RangeError, InvalidDivider) as exc:
            raise FormatError(f"invalid header field: {exc}", offset=11) from None
        return hdr


def write_record_file(path, header: RecordFileHeader, words) -> None:
    words = np.asarray(words, dtype="<u4")
    with open(path, "wb") as f:
        f.write(header.pack())
        f.write(words.tobytes())


class RecordWriter:
    """Streaming writer; the header is written up front."""

    def __init__(self, path, header: RecordFileHeader):
        self._f = open(path, "wb")
        self._f.write(header.pack())
        self.n_records = 0

    def write(self, words):
        words = np.asarray(words, dtype="<u4")
        self._f.write(words.tobytes())
        self.n_records += words.size

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_header(path) -> RecordFileHeader:
    with open(path, "rb") as f:
        return RecordFileHeader.unpack(f.read(HEADER.size))


def iter_record_file(path, chunk_records: int = 1 << 20) -> Iterator[np.ndarray]:
    """Yield the words of a record file in chunks (header already validated)."""
    path = Path(path)
    size = path.stat().st_size
    read_header(path)
    body = size - HEADER.size
    if body % 4:
        raise FormatError("trailing partial record", offset=size - body % 4)
    with open(path, "rb") as f:
        f.seek(HEADER.size)
        while True:
            buf = f.read(4 * chunk_records)
            if not buf:
                break
            yield np.frombuffer(buf, dtype="<u4").astype(np.uint32)


def read_record_file(path):
    """Return ``(header, words)`` for a whole record file."""
    header = read_header(path)
    chunks = list(iter_record_file(path))
    words = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.uint32)
    return header, words

"""Data path of the tagger: front-end FiFos, k-way merge, main FiFo and T2DM sorting.

Event streams are :data:`~cowqkd.ttrecords.EVENT_DTYPE` arrays. The global
order everywhere is ``(time_ps, channel)``, and records that tie on both keep
the order of their input streams.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ._kernels import merge_two
from .errors import UnsortedInput
from .ttrecords import EVENT_DTYPE, N_DETECTOR_CHANNELS, expand_t2

FRONT_FIFO_CAPACITY = 2048
MAIN_FIFO_CAPACITY = 268_435_456
MAX_MERGE_INPUTS = 65
PS_PER_S = 10**12

_CHANNEL_BITS = 7
_MAX_KEY_TIME = (1 << (63 - _CHANNEL_BITS)) - 1


class Push(enum.Enum):
    ACCEPTED = "accepted"
    DROPPED = "dropped"


class FrontFifo:
    """Bounded per-channel FiFo that drops new records when full."""

    def __init__(self, capacity: int = FRONT_FIFO_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.queue = deque()
        self.dropped_count = 0

    @property
    def drop_flag(self) -> bool:
        return self.dropped_count > 0

    def __len__(self):
        return len(self.queue)

    def push(self, record) -> Push:
        if len(self.queue) >= self.capacity:
            self.dropped_count += 1
            return Push.DROPPED
        self.queue.append(record)
        return Push.ACCEPTED

    def pop(self):
        return self.queue.popleft()

    def drain(self) -> list:
        out = list(self.queue)
        self.queue.clear()
        return out


def push_front(fifo: FrontFifo, record) -> Push:
    return fifo.push(record)


def front_end_filter(events, capacity: int = FRONT_FIFO_CAPACITY, poll_period_ps: int = 100_000):
    """Apply front-FiFo drops to one channel's time-sorted events.

    The merger empties the FiFo at every multiple of ``poll_period_ps``; a
    record arriving when ``capacity`` records are already waiting in the
    current poll window is dropped. Returns ``(accepted_events, n_dropped)``.
    """
    t = events["time_ps"]
    if t.size == 0:
        return events[:0], 0
    window = t // poll_period_ps
    starts = np.flatnonzero(np.r_[True, window[1:] != window[:-1]])
    rank = np.arange(t.size) - np.repeat(starts, np.diff(np.r_[starts, t.size]))
    keep = rank < capacity
    return events[keep], int(t.size - keep.sum())


def _keys(ev, stream):
    t = ev["time_ps"].astype(np.int64)
    if t.size:
        if t[0] < 0 or t[-1] > _MAX_KEY_TIME:
            raise ValueError(f"stream {stream}: times outside [0, {_MAX_KEY_TIME}] ps")
        c = ev["channel"].astype(np.int64)
        if c.min() < 0 or c.max() >= (1 << _CHANNEL_BITS):
            raise ValueError(f"stream {stream}: channel outside [0, 127]")
    else:
        c = np.empty(0, dtype=np.int64)
    key = (t << _CHANNEL_BITS) | c
    if key.size > 1:
        back = np.flatnonzero(np.diff(t) < 0)
        if back.size:
            raise UnsortedInput(f"input stream {stream} is not time-sorted "
                                f"(record {int(back[0]) + 1})", stream=stream,
                                position=int(back[0]) + 1)
    return key


def merge_sorted(inputs) -> np.ndarray:
    """Merge up to 65 individually time-sorted event streams into one.

    Streams are combined pairwise in a balanced tournament, so each record
    takes part in about log2(k) linear two-pointer merge passes. Within one stream
    records must be nondecreasing in time; equal times across channels come
    out in ascending channel order.
    """
    inputs = list(inputs)
    if len(inputs) > MAX_MERGE_INPUTS:
        raise ValueError(f"at most {MAX_MERGE_INPUTS} inputs, got {len(inputs)}")
    if not inputs:
        return np.empty(0, dtype=EVENT_DTYPE)
    arrays, level, offset = [], [], 0
    for i, s in enumerate(inputs):
        s = np.asarray(s)
        if s.dtype != EVENT_DTYPE:
            s = s.astype(EVENT_DTYPE)
        key = _keys(s, i)
        idx = np.arange(offset, offset + key.size, dtype=np.int64)
        if key.size > 1 and np.any(np.diff(key) < 0):
            # equal times with channels out of order: fix the ties locally
            order = np.argsort(key, kind="stable")
            key, idx = key[order], idx[order]
        arrays.append(s)
        level.append((key, idx))
        offset += key.size
    while len(level) > 1:
        nxt = [merge_two(*level[j], *level[j + 1]) for j in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return np.concatenate(arrays)[level[0][1]]


@dataclass
class MainFifo:
    capacity: int = MAIN_FIFO_CAPACITY
    backlog: int = 0
    overrun: bool = False
    last_bucket: int | None = None


@dataclass
class DrainResult:
    completed: bool
    at_record: int | None = None  # 1-based index of the record that overran
    max_backlog: int = 0
    consumed: int = 0


def drain_main(fifo: MainFifo, consumer_rate: float, arrival_times_ps) -> DrainResult:
    """Push a stream through the main FiFo with a per-second token bucket.

    At the start of every one-second bucket the consumer receives
    ``consumer_rate`` tokens. Tokens first clear the existing backlog, the
    rest pass newly arriving records straight through. A record that finds
    no token joins the backlog; the measurement aborts on the first record
    that would push the backlog above ``capacity``.
    """
    if consumer_rate < 0:
        raise ValueError("consumer_rate must be >= 0")
    if fifo.overrun:
        return DrainResult(False, 0, fifo.backlog)
    rate = int(consumer_rate)
    t = np.asarray(arrival_times_ps, dtype=np.int64)
    result = DrainResult(True, max_backlog=fifo.backlog)
    if t.size == 0:
        return result
    buckets, starts, counts = np.unique(t // PS_PER_S, return_index=True, return_counts=True)
    backlog = fifo.backlog
    prev = fifo.last_bucket
    for b, start, n in zip(buckets.tolist(), starts.tolist(), counts.tolist()):
        idle = 0 if prev is None else b - prev - 1
        backlog = max(backlog - rate * idle, 0)  # empty buckets between arrivals
        tokens = rate
        cleared = min(backlog, tokens)
        backlog -= cleared
        tokens -= cleared
        peak = backlog + max(n - tokens, 0)
        if peak > fifo.capacity:
            i = fifo.capacity - backlog + tokens + 1  # arrivals until overrun
            fifo.overrun = True
            fifo.backlog = fifo.capacity
            result.completed = False
            result.at_record = start + i
            result.max_backlog = max(result.max_backlog, fifo.capacity)
            return result
        result.max_backlog = max(result.max_backlog, peak)
        result.consumed += cleared + min(n, tokens)
        backlog = peak
        prev = b
    fifo.backlog = backlog
    fifo.last_bucket = prev
    return result


def sort_t2dm(module_streams) -> np.ndarray:
    """Order four unsorted-across-module T2DM word streams into one event stream.

    Module ``m`` carries channels ``16*m .. 16*m+15`` (module 0 may also carry
    the sync input). Each module stream must be sorted on its own.
    """
    streams = list(module_streams)
    if len(streams) != 4:
        raise ValueError(f"T2DM has 4 modules, got {len(streams)}")
    events = []
    for m, words in enumerate(streams):
        ev = expand_t2(words)
        det = ev["channel"] < N_DETECTOR_CHANNELS
        ch = ev["channel"][det]
        if ch.size and (ch.min() < 16 * m or ch.max() >= 16 * (m + 1)):
            raise ValueError(f"module {m} carries a channel outside {16 * m}..{16 * m + 15}")
        if m and not det.all():
            raise ValueError(f"module {m} carries sync or marker records")
        events.append(ev)
    return merge_sorted(events)


@dataclass
class DataPathResult:
    events: np.ndarray
    dropped: dict = field(default_factory=dict)  # channel -> dropped count
    drain: DrainResult | None = None

    @property
    def drop_flags(self):
        return {ch: n > 0 for ch, n in self.dropped.items()}


class DataPath:
    """Front FiFos per channel, a merger and the main FiFo, run on one chunk at a time.

    State (drop counters, main FiFo backlog) carries over between calls to
    :meth:`process`, so a long acquisition can be fed second by second.
    """

    def __init__(self, front_capacity=FRONT_FIFO_CAPACITY, poll_period_ps=100_000,
                 main_capacity=MAIN_FIFO_CAPACITY, consumer_rate=88e6):
        self.front_capacity = front_capacity
        self.poll_period_ps = poll_period_ps
        self.main = MainFifo(main_capacity)
        self.consumer_rate = consumer_rate
        self.dropped = {}

    def process(self, channel_streams) -> DataPathResult:
        accepted = []
        for s in channel_streams:
            kept, n = front_end_filter(s, self.front_capacity, self.poll_period_ps)
            if s.size:
                ch = int(s["channel"][0])
                self.dropped[ch] = self.dropped.get(ch, 0) + n
            accepted.append(kept)
        merged = merge_sorted(accepted)
        drain = drain_main(self.main, self.consumer_rate, merged["time_ps"])
        if not drain.completed:
            merged = merged[: max(drain.at_record - 1, 0)]
        return DataPathResult(merged, dict(self.dropped), drain)

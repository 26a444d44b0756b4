"""Key evaluation: slot histograms, shift search, QBER / visibility and secret-key math.

Each wavelength channel ``i`` is read from tagger channels ``2i`` (time
basis) and ``2i + 1`` (phase basis). Detections are sorted into the 192
slots of one pattern repetition, accumulated per one-second interval and
evaluated for every circular shift of the expected pattern.

Alignment convention: under shift ``s`` pattern slot ``t`` is looked up in
histogram bin ``(t + s) % 192``.
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ttrecords as tt
from .cowsim import INTERFERE, SIDE, data_bin_masks, expected_interference
from .errors import DomainError, RangeError, ResolutionMismatch

N_SLOTS = 192
PS_PER_S = 10**12

CSV_COLUMNS = ("interval_s", "channel", "wavelength_nm", "sifted_bps", "qber", "visibility",
               "delta", "r", "secret_bps", "shift", "decoy_counts", "discarded")


@dataclass(frozen=True)
class GateConfig:
    slot_ps: int = 400
    guard_ps: int = 40

    def __post_init__(self):
        if not 0 <= 2 * self.guard_ps < self.slot_ps:
            raise RangeError("need 0 <= 2*guard_ps < slot_ps")


def gate(offset_ps, cfg: GateConfig = GateConfig()) -> bool:
    """True (keep) iff the offset inside the slot is clear of both guard bands."""
    if not 0 <= offset_ps < cfg.slot_ps:
        raise RangeError(f"offset {offset_ps} outside [0, {cfg.slot_ps})")
    return cfg.guard_ps <= offset_ps < cfg.slot_ps - cfg.guard_ps


def gate_mask(offsets_ps, cfg: GateConfig = GateConfig()) -> np.ndarray:
    off = np.asarray(offsets_ps)
    return (off >= cfg.guard_ps) & (off < cfg.slot_ps - cfg.guard_ps)


@dataclass
class SlotHistogram:
    counts_time: np.ndarray = field(default_factory=lambda: np.zeros(N_SLOTS, np.int64))
    counts_phase: np.ndarray = field(default_factory=lambda: np.zeros(N_SLOTS, np.int64))
    discarded: int = 0
    interval_s: float = 1.0

    def __post_init__(self):
        self.counts_time = np.asarray(self.counts_time, dtype=np.int64)
        self.counts_phase = np.asarray(self.counts_phase, dtype=np.int64)
        if self.counts_time.shape != (N_SLOTS,) or self.counts_phase.shape != (N_SLOTS,):
            raise ValueError(f"histograms need {N_SLOTS} bins")
        if (self.counts_time < 0).any() or (self.counts_phase < 0).any() or self.discarded < 0:
            raise ValueError("counts must be nonnegative")


def _check_resolution(resolution_code, cfg):
    r = tt.resolution_ps(resolution_code)
    if cfg.slot_ps % r:
        raise ResolutionMismatch(f"resolution {r} ps does not divide the {cfg.slot_ps} ps slot")
    return r


def _slot_and_keep(dtime, r, cfg):
    pos = np.asarray(dtime, dtype=np.int64) * r
    return (pos // cfg.slot_ps) % N_SLOTS, gate_mask(pos % cfg.slot_ps, cfg)


def histogram(records, resolution_code: int = 0, cfg: GateConfig = GateConfig(),
              channel: int = 0, interval_s: float = 1.0) -> SlotHistogram:
    """Slot histogram of one wavelength channel from T3 words or decoded T3 fields."""
    r = _check_resolution(resolution_code, cfg)
    rec = np.asarray(records)
    fields = rec if rec.dtype == tt.T3_FIELDS_DTYPE else tt.expand_t3(rec)
    hist = SlotHistogram(interval_s=interval_s)
    for basis, counts in ((0, hist.counts_time), (1, hist.counts_phase)):
        sel = fields["channel"] == 2 * channel + basis
        slot, keep = _slot_and_keep(fields["dtime"][sel], r, cfg)
        counts += np.bincount(slot[keep], minlength=N_SLOTS)
        hist.discarded += int((~keep).sum())
    return hist


# -- per-shift evaluation -------------------------------------------------

def _shift_index():
    s = np.arange(N_SLOTS)
    return (s[:, None] + s[None, :]) % N_SLOTS


_SHIFTS = _shift_index()  # row s, column t -> histogram bin


def _time_counts(counts_time, occ, shifts):
    occupied, empty, decoy = data_bin_masks(occ)
    aligned = np.asarray(counts_time, dtype=np.int64)[_SHIFTS[shifts]]
    return (aligned @ occupied.astype(np.int64), aligned @ empty.astype(np.int64),
            aligned @ decoy.astype(np.int64))


def evaluate_time(hist: SlotHistogram, occ, shift: int = 0) -> dict:
    """Correct / wrong / decoy counts, sifted rate and QBER at one shift."""
    if not 0 <= shift < N_SLOTS:
        raise RangeError(f"shift {shift} outside [0, {N_SLOTS})")
    correct, wrong, decoy = (int(x[0]) for x in _time_counts(hist.counts_time, occ, [shift]))
    sifted = correct + wrong
    return {"correct": correct, "wrong": wrong, "decoy": decoy,
            "sifted_rate": sifted / hist.interval_s,
            "qber": wrong / sifted if sifted else None}


def _visibility(c_int, c_side, monitor_port):
    # c_int / c_side = 2 (1 - V) at the dark port and 2 (1 + V) at the bright one
    ratio = c_int / (2.0 * c_side)
    v = 1.0 - ratio if monitor_port == "dark" else ratio - 1.0
    return min(max(v, 0.0), 1.0)


def _phase_means(counts_phase, occ, shifts):
    cls = expected_interference(occ)
    aligned = np.asarray(counts_phase, dtype=np.int64)[_SHIFTS[shifts]]
    n_int, n_side = int((cls == INTERFERE).sum()), int((cls == SIDE).sum())
    s_int = aligned @ (cls == INTERFERE).astype(np.int64)
    s_side = aligned @ (cls == SIDE).astype(np.int64)
    return s_int / max(n_int, 1), s_side / max(n_side, 1)


def evaluate_phase(hist: SlotHistogram, occ, shift: int = 0, monitor_port: str = "dark"):
    """Visibility estimate from mean Interfere vs Side slot counts; None if undefined."""
    if not 0 <= shift < N_SLOTS:
        raise RangeError(f"shift {shift} outside [0, {N_SLOTS})")
    c_int, c_side = _phase_means(hist.counts_phase, occ, [shift])
    if c_side[0] == 0:
        return None
    return _visibility(float(c_int[0]), float(c_side[0]), monitor_port)


# -- key math -------------------------------------------------------------

def _h_pair(p, q):
    # binary entropy with both probabilities given, so q = 1 - p keeps full precision
    return sum(-x * math.log2(x) for x in (p, q) if x > 0.0)


def binary_entropy(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"binary entropy needs p in [0, 1], got {p}")
    return _h_pair(p, 1.0 - p)


def _check_v_mu(v, mu):
    if not 0.0 <= v <= 1.0:
        raise DomainError(f"visibility {v} outside [0, 1]")
    if not mu > 0.0:
        raise DomainError(f"mu must be positive, got {mu}")


def delta(v: float, mu: float) -> float:
    """Coherence term of the COW bound for visibility ``v`` and mean photon number ``mu``."""
    _check_v_mu(v, mu)
    return ((2.0 * v - 1.0) * math.exp(-mu)
            - 2.0 * math.sqrt(v * (1.0 - v)) * math.sqrt(-math.expm1(-2.0 * mu)))


def secret_fraction(q: float, v: float, mu: float) -> float:
    """Secret bits per sifted bit, ``1 - h(Q) - Q - (1 - Q) h((1 + D) / 2)``; may be negative."""
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"QBER {q} outside [0, 1]")
    d = delta(v, mu)
    return 1.0 - binary_entropy(q) - q - (1.0 - q) * _h_pair((1.0 + d) / 2.0, (1.0 - d) / 2.0)


def secret_rate(r: float, sifted_rate: float) -> float:
    return max(r, 0.0) * sifted_rate


@dataclass(frozen=True)
class Metrics:
    sifted_rate: float
    qber: float | None
    visibility: float | None
    delta: float | None
    r: float | None
    secret_rate: float
    shift: int
    correct: int = 0
    wrong: int = 0
    decoy_counts: int = 0


def metrics_from_counts(correct, wrong, decoy, visibility, mu, interval_s=1.0, shift=0) -> Metrics:
    """Key figures from sifted counts; undefined quantities become None and S = 0."""
    sifted = correct + wrong
    q = wrong / sifted if sifted else None
    d = r = None
    if visibility is not None and mu > 0:
        d = delta(visibility, mu)
        if q is not None:
            r = secret_fraction(q, visibility, mu)
    rate = sifted / interval_s
    s = secret_rate(r, rate) if r is not None else 0.0
    return Metrics(rate, q, visibility, d, r, s, int(shift), int(correct), int(wrong), int(decoy))


def shift_search(hist: SlotHistogram, occ, mu: float = 0.1, monitor_port: str = "dark"):
    """Try all 192 shifts; pick minimum QBER, then maximum visibility, then smallest shift.

    Returns ``(best_shift, Metrics)``.
    """
    shifts = np.arange(N_SLOTS)
    correct, wrong, decoy = _time_counts(hist.counts_time, occ, shifts)
    sifted = correct + wrong
    q = np.where(sifted > 0, wrong / np.maximum(sifted, 1), np.inf)
    c_int, c_side = _phase_means(hist.counts_phase, occ, shifts)
    ratio = c_int / (2.0 * np.where(c_side > 0, c_side, 1.0))
    v = np.clip(1.0 - ratio if monitor_port == "dark" else ratio - 1.0, 0.0, 1.0)
    v = np.where(c_side > 0, v, -np.inf)
    best = int(np.lexsort((shifts, -v, q))[0])
    vis = float(v[best]) if c_side[best] > 0 else None
    m = metrics_from_counts(int(correct[best]), int(wrong[best]), int(decoy[best]), vis, mu,
                            hist.interval_s, best)
    return best, m


# -- interval pipeline ----------------------------------------------------

@dataclass(frozen=True)
class ChannelSpec:
    """What the evaluator needs to know about one wavelength channel."""

    mu: float = 0.1
    wavelength_nm: float = 0.0
    monitor_port: str = "dark"


@dataclass(frozen=True)
class MetricsRow:
    interval_s: int
    channel: int
    wavelength_nm: float
    metrics: Metrics
    discarded: int


class IntervalAccumulator:
    """Per-interval slot histograms of all wavelength channels.

    Input rows are decoded T3 fields; an event belongs to interval
    ``floor(t / interval_ps)`` with ``t = sync_index * period + dtime * R``.
    """

    def __init__(self, n_channels, resolution_code=0, sync_period_eff_ps=76_800,
                 cfg: GateConfig = GateConfig(), interval_ps=PS_PER_S):
        self.n = int(n_channels)
        self.res = _check_resolution(resolution_code, cfg)
        self.period = int(sync_period_eff_ps)
        self.cfg = cfg
        self.interval_ps = int(interval_ps)
        self.bins = {}  # interval -> (counts[n, 2, 192], discarded[n])

    def _slot(self, k):
        if k not in self.bins:
            self.bins[k] = (np.zeros((self.n, 2, N_SLOTS), np.int64), np.zeros(self.n, np.int64))
        return self.bins[k]

    def add(self, fields):
        ch = fields["channel"].astype(np.int64)
        sel = ch < 2 * self.n
        if not sel.all():
            fields, ch = fields[sel], ch[sel]
        if ch.size == 0:
            return
        dt = fields["dtime"].astype(np.int64)
        t = fields["sync_index"].astype(np.int64) * self.period + dt * self.res
        iv = t // self.interval_ps
        slot, keep = _slot_and_keep(dt, self.res, self.cfg)
        lo, hi = int(iv[0]), int(iv[-1])
        if lo > hi or (iv.size > 2 and np.any(np.diff(iv) < 0)):
            lo, hi = int(iv.min()), int(iv.max())
        span = hi - lo + 1
        row = (iv - lo) * self.n + (ch >> 1)
        counts = np.bincount((row * 2 + (ch & 1))[keep] * N_SLOTS + slot[keep],
                             minlength=span * self.n * 2 * N_SLOTS).reshape(span, self.n, 2, N_SLOTS)
        disc = np.bincount(row[~keep], minlength=span * self.n).reshape(span, self.n)
        for k in range(span):
            if counts[k].any() or disc[k].any():
                c, d = self._slot(lo + k)
                c += counts[k]
                d += disc[k]

    def latest(self):
        return max(self.bins) if self.bins else None

    def pop(self, k):
        """Remove and return interval ``k`` (zeros if it saw no events)."""
        return self.bins.pop(k, None) or (np.zeros((self.n, 2, N_SLOTS), np.int64),
                                          np.zeros(self.n, np.int64))


def evaluate_interval(k, bundle, channels, occ, interval_s=1.0):
    """Metrics rows of one interval; pure in its inputs."""
    counts, disc = bundle
    rows = []
    for i, spec in enumerate(channels):
        hist = SlotHistogram(counts[i, 0], counts[i, 1], int(disc[i]), interval_s)
        _, m = shift_search(hist, occ, spec.mu, spec.monitor_port)
        rows.append(MetricsRow(int(k), i, spec.wavelength_nm, m, int(disc[i])))
    return rows


class IntervalPipeline:
    """Accumulate interval N+1 while interval N is evaluated on a worker thread.

    Feed time-ordered decoded T3 fields with :meth:`feed`; :meth:`finish`
    closes the intervals that ended before ``end_ps`` and returns all rows
    in (interval, channel) order. A trailing partial interval is dropped.
    """

    def __init__(self, channels, occ, resolution_code=0, sync_period_eff_ps=76_800,
                 cfg: GateConfig = GateConfig(), interval_ps=PS_PER_S):
        self.channels = list(channels)
        self.occ = np.asarray(occ)
        self.interval_s = interval_ps / PS_PER_S
        self.acc = IntervalAccumulator(len(self.channels), resolution_code, sync_period_eff_ps,
                                       cfg, interval_ps)
        self.interval_ps = int(interval_ps)
        self.next_interval = 0
        self.pool = ThreadPoolExecutor(1)
        self.futures = []

    def _close_before(self, k):
        while self.next_interval < k:
            bundle = self.acc.pop(self.next_interval)
            self.futures.append(self.pool.submit(evaluate_interval, self.next_interval, bundle,
                                                 self.channels, self.occ, self.interval_s))
            self.next_interval += 1

    def feed(self, fields):
        self.acc.add(fields)
        latest = self.acc.latest()
        if latest is not None:
            self._close_before(latest)

    def finish(self, end_ps: int):
        self._close_before(int(end_ps) // self.interval_ps)
        try:
            return [row for f in self.futures for row in f.result()]
        finally:
            self.pool.shutdown()


def interval_pipeline(fields_chunks, channels, occ, end_ps, **kw):
    """Evaluate an iterable of decoded T3 field chunks; see :class:`IntervalPipeline`."""
    pipe = IntervalPipeline(channels, occ, **kw)
    for chunk in fields_chunks:
        pipe.feed(chunk)
    return pipe.finish(end_ps)


# -- CSV ------------------------------------------------------------------

def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def csv_header() -> str:
    return ",".join(CSV_COLUMNS) + "\n"


def format_row(row: MetricsRow) -> str:
    m = row.metrics
    vals = (row.interval_s, row.channel, float(row.wavelength_nm), float(m.sifted_rate), m.qber,
            m.visibility, m.delta, m.r, float(m.secret_rate), m.shift, m.decoy_counts, row.discarded)
    return ",".join(_fmt(v) for v in vals) + "\n"


def format_csv(rows) -> str:
    out = io.StringIO()
    out.write(csv_header())
    for row in rows:
        out.write(format_row(row))
    return out.getvalue()

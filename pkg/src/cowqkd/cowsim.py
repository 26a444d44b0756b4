"""Monte-Carlo model of the multichannel COW link.

Alice repeats a fixed 96-symbol pattern (192 time slots). Each wavelength
channel reaches Bob through the same attenuator; a fiber coupler sends most
of the light to the time-basis detector and the rest through one delay-line
interferometer (DLI) to the phase-basis detector. Detectors are modelled as
efficiency, Gaussian jitter, Poissonian dark counts and non-extending dead
time. All times are integer picoseconds.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ttrecords as tt
from . import _kernels
from .errors import InvalidParams

PS_PER_S = 10**12
N_SYMBOLS = 96
SYMBOL_COUNTS = (43, 43, 10)
MU_SANITY_MAX = 0.2


class Symbol(enum.IntEnum):
    ZERO = 0
    ONE = 1
    DECOY = 2


# slot classes behind the DLI
EMPTY = 0
SIDE = 1
INTERFERE = 2

_SYMBOL_CHARS = {"0": Symbol.ZERO, "1": Symbol.ONE, "D": Symbol.DECOY, "d": Symbol.DECOY}


@dataclass(frozen=True)
class SymbolPattern:
    symbols: tuple

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(Symbol(s) for s in self.symbols))

    def __len__(self):
        return len(self.symbols)

    @property
    def n_slots(self) -> int:
        return 2 * len(self.symbols)

    def composition(self):
        s = np.array(self.symbols)
        return tuple(int((s == v).sum()) for v in Symbol)

    def to_string(self) -> str:
        return "".join("01D"[s] for s in self.symbols)

    @classmethod
    def from_string(cls, text: str) -> "SymbolPattern":
        try:
            return cls(tuple(_SYMBOL_CHARS[c] for c in text.strip()))
        except KeyError as exc:
            raise InvalidParams(f"pattern symbol {exc.args[0]!r} is not one of 0, 1, D") from None


def default_pattern(seed=0) -> SymbolPattern:
    """Random permutation of 43 zeros, 43 ones and 10 decoys, fixed per seed."""
    pool = np.repeat(np.arange(3), SYMBOL_COUNTS)
    rng = np.random.default_rng(seed)
    return SymbolPattern(tuple(rng.permutation(pool).tolist()))


def occupancy(pattern) -> np.ndarray:
    """Pulse occupancy per slot: ZERO -> (1, 0), ONE -> (0, 1), DECOY -> (1, 1)."""
    sym = np.asarray(pattern.symbols if isinstance(pattern, SymbolPattern) else pattern)
    occ = np.empty(2 * sym.size, dtype=np.int8)
    occ[0::2] = sym != Symbol.ONE
    occ[1::2] = sym != Symbol.ZERO
    return occ


def expected_interference(occ) -> np.ndarray:
    """Class of each slot at the DLI output, wrapping at the pattern boundary."""
    a = np.asarray(occ, dtype=np.int8)
    prev = np.roll(a, 1)
    both = (a == 1) & (prev == 1)
    one = (a + prev) == 1
    return np.where(both, INTERFERE, np.where(one, SIDE, EMPTY)).astype(np.int8)


def data_bin_masks(occ):
    """Boolean masks over slots: occupied data bins, empty data bins, decoy bins."""
    a = np.asarray(occ, dtype=np.int8).reshape(-1, 2)
    decoy = (a[:, 0] == 1) & (a[:, 1] == 1)
    data = (a.sum(axis=1) == 1)[:, None]
    occupied = ((a == 1) & data).ravel()
    empty = ((a == 0) & data).ravel()
    return occupied, empty, np.repeat(decoy, 2)


def _itu_wavelength(i):
    # 100 GHz grid around 193.1 THz
    return round(299_792.458 / (193.1 + 0.1 * (i - 4)), 3)


@dataclass(frozen=True)
class ChannelParams:
    wavelength_nm: float = 1552.524
    mu: float = 0.1
    eta_time: float = 0.04
    eta_phase: float = 0.04
    dcr_time_hz: float = 150.0
    dcr_phase_hz: float = 150.0
    jitter_sigma_ps: float = 50.0
    dead_time_ps: int = 50_000
    error_floor: float = 0.01

    def validate(self):
        if not self.wavelength_nm > 0:
            raise InvalidParams("wavelength_nm must be positive")
        if not 0 <= self.mu <= MU_SANITY_MAX:
            raise InvalidParams(f"mu={self.mu} outside [0, {MU_SANITY_MAX}]")
        for name in ("eta_time", "eta_phase", "error_floor"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise InvalidParams(f"{name}={v} outside [0, 1]")
        for name in ("dcr_time_hz", "dcr_phase_hz", "jitter_sigma_ps"):
            if not getattr(self, name) >= 0:
                raise InvalidParams(f"{name} must be >= 0")
        if int(self.dead_time_ps) != self.dead_time_ps or self.dead_time_ps < 0:
            raise InvalidParams("dead_time_ps must be a nonnegative integer")
        return self


@dataclass(frozen=True)
class LinkParams:
    attenuation_db: float = 0.0
    split_time: float = 0.9
    split_phase: float = 0.1
    dli_visibility: float = 0.97
    slot_ps: int = 400
    delay_slots: int = 0
    monitor_port: str = "dark"

    def validate(self):
        if not self.attenuation_db >= 0:
            raise InvalidParams("attenuation_db must be >= 0")
        if self.split_time < 0 or self.split_phase < 0 or self.split_time + self.split_phase > 1 + 1e-12:
            raise InvalidParams("coupler splits must be >= 0 and sum to at most 1")
        if not 0 <= self.dli_visibility <= 1:
            raise InvalidParams("dli_visibility outside [0, 1]")
        if int(self.slot_ps) != self.slot_ps or self.slot_ps <= 0 or self.slot_ps % 2:
            raise InvalidParams("slot_ps must be a positive even integer")
        if int(self.delay_slots) != self.delay_slots or self.delay_slots < 0:
            raise InvalidParams("delay_slots must be a nonnegative integer")
        if self.monitor_port not in ("dark", "bright"):
            raise InvalidParams("monitor_port must be 'dark' or 'bright'")
        return self

    @property
    def transmission(self) -> float:
        return 10.0 ** (-self.attenuation_db / 10.0)


@dataclass
class SimConfig:
    channels: list  # of (ChannelParams, LinkParams)
    pattern: SymbolPattern = field(default_factory=default_pattern)
    duration_s: float = 1.0
    seed: int = 0
    emit_mode: tt.Mode = tt.Mode.T3
    resolution_code: int = 0
    sync_divider: int = 1

    @property
    def slot_ps(self) -> int:
        slots = {link.slot_ps for _, link in self.channels} or {400}
        if len(slots) != 1:
            raise InvalidParams("all channels must share one slot width")
        return slots.pop()

    @property
    def sync_period_ps(self) -> int:
        """One sync per pattern repetition."""
        return self.pattern.n_slots * self.slot_ps

    @property
    def duration_ps(self) -> int:
        return int(round(self.duration_s * PS_PER_S))


def time_hazards(ch: ChannelParams, link: LinkParams, occ):
    """Per-slot signal and dark click hazards of the time-basis detector."""
    m_t = ch.mu * link.transmission * link.split_time * ch.eta_time
    _, empty, _ = data_bin_masks(occ)
    signal = m_t * np.asarray(occ, dtype=float) + ch.error_floor * m_t * empty
    dark = np.full(signal.size, ch.dcr_time_hz * link.slot_ps / PS_PER_S)
    return signal, dark


def phase_hazards(ch: ChannelParams, link: LinkParams, occ):
    """Per-slot signal and dark click hazards of the phase-basis detector.

    Slot ``t`` at the DLI output mixes pulses ``t`` and ``t - 1``; each arrives
    with a quarter of the mean photon number and the interference term
    ``V/2 * a_t * a_{t-1}`` is subtracted at the dark port (added at the bright one).
    """
    a = np.asarray(occ, dtype=float)
    prev = np.roll(a, 1)
    sign = 1.0 if link.monitor_port == "dark" else -1.0
    mu_p = ch.mu * link.transmission * link.split_phase
    mean = mu_p * ((a + prev) / 4.0 - sign * link.dli_visibility / 2.0 * a * prev)
    signal = np.clip(mean, 0.0, None) * ch.eta_phase
    dark = np.full(a.size, ch.dcr_phase_hz * link.slot_ps / PS_PER_S)
    return signal, dark


RNG_BLOCK = 1 << 18


def detector_rng(seed, channel_index, detector):
    """Independent generator per (seed, wavelength channel, detector)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(channel_index), int(detector)))
    return np.random.default_rng(ss)


class _Detector:
    """Resumable click generator for one detector."""

    def __init__(self, signal, dark, ch: ChannelParams, link: LinkParams, rng):
        total = signal + dark
        self.cum = np.concatenate([[0.0], np.cumsum(total)])
        self.guide = _kernels.guide_table(self.cum) if self.cum[-1] > 0 else np.zeros(1, np.int64)
        safe = np.where(total > 0, total, 1.0)
        self.dark_frac = np.where(total > 0, dark / safe, 0.0)
        self.link = link
        self.dead = int(ch.dead_time_ps)
        self.sigma = float(ch.jitter_sigma_ps)
        self.rng = rng
        self.state = np.array([0, 0, -1], dtype=np.int64)  # next slot, live until, pending slot
        self.cursor = np.zeros(3, dtype=np.int64)
        self.pools = [np.empty(0), np.empty(0), np.empty(0)]
        self.mean_per_slot = self.cum[-1] / total.size

    def _refill(self, which):
        draw = (self.rng.standard_exponential, self.rng.random, self.rng.standard_normal)[which]
        rest = self.pools[which][self.cursor[which]:]
        self.pools[which] = np.concatenate([rest, draw(RNG_BLOCK)])
        self.cursor[which] = 0

    def run(self, end_slot):
        n_slots = max(end_slot - int(self.state[0]), 0)
        est = self.mean_per_slot * n_slots
        cap = int(est * 1.05 + 6 * math.sqrt(est) + 1024)
        if self.dead:
            cap = min(cap, n_slots * self.link.slot_ps // self.dead + 2)
        parts = []
        buf = np.empty(max(cap, 16), dtype=np.int64)
        while True:
            n, reason = _kernels.detector_clicks(
                self.cum, self.guide, self.dark_frac, self.link.delay_slots, self.link.slot_ps,
                end_slot, self.dead, self.sigma, self.state,
                self.pools[0], self.pools[1], self.pools[2], self.cursor, buf)
            parts.append(buf[:n].copy() if reason != _kernels.DONE else buf[:n])
            if reason == _kernels.DONE:
                break
            if reason == _kernels.OUT_FULL:
                buf = np.empty(buf.size, dtype=np.int64)
            else:
                self._refill(reason - _kernels.NEED_EXP)
        return parts[0] if len(parts) == 1 else np.concatenate(parts)


def iter_channel(ch: ChannelParams, link: LinkParams, pattern, duration_s, seed,
                 channel_index=0, chunk_s=1.0):
    """Yield ``(time_basis_ps, phase_basis_ps)`` click arrays chunk by chunk.

    Chunk ``k`` holds the clicks of slots starting in ``[k, k+1) * chunk_s``.
    Each detector draws from its own generator keyed by
    ``(seed, channel_index, detector)`` and the realisation does not depend
    on ``chunk_s``, so neither chunking nor adding channels changes a stream.
    """
    ch.validate()
    link.validate()
    occ = occupancy(pattern)
    dets = [
        _Detector(*time_hazards(ch, link, occ), ch, link, detector_rng(seed, channel_index, 0)),
        _Detector(*phase_hazards(ch, link, occ), ch, link, detector_rng(seed, channel_index, 1)),
    ]
    total_slots = int(round(duration_s * PS_PER_S)) // link.slot_ps
    chunk_ps = int(round(chunk_s * PS_PER_S))
    if chunk_ps % link.slot_ps:
        raise InvalidParams("chunk length must be a whole number of slots")
    chunk_slots = chunk_ps // link.slot_ps
    for start in range(0, total_slots, chunk_slots):
        end = min(start + chunk_slots, total_slots)
        yield tuple(d.run(end) for d in dets)


def simulate_channel(ch: ChannelParams, link: LinkParams, pattern, duration_s, seed, channel_index=0):
    """Clicks of one wavelength channel as two sorted int64 arrays (time, phase basis)."""
    parts = list(iter_channel(ch, link, pattern, duration_s, seed, channel_index))
    if not parts:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty.copy()
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(2))


def tagger_channels(wavelength_index: int):
    """Tagger channel numbers (time basis, phase basis) of a wavelength channel."""
    return 2 * wavelength_index, 2 * wavelength_index + 1


def iter_tagger_chunks(config: SimConfig, jobs: int = 1, chunk_s: float = 1.0):
    """Yield, per chunk, one EVENT array per tagger channel (ordered by channel).

    Channels are simulated on ``jobs`` threads; the output does not depend on it.
    """
    gens = [iter_channel(ch, link, config.pattern, config.duration_s, config.seed, i, chunk_s)
            for i, (ch, link) in enumerate(config.channels)]
    pool = ThreadPoolExecutor(jobs) if jobs > 1 and len(gens) > 1 else None
    sentinel = object()
    try:
        while True:
            step = (lambda g: next(g, sentinel))
            results = list(pool.map(step, gens)) if pool else [step(g) for g in gens]
            if not results or results[0] is sentinel:
                return
            out = []
            for i, (t_time, t_phase) in enumerate(results):
                c_time, c_phase = tagger_channels(i)
                out.append(tt.make_events(t_time, c_time))
                out.append(tt.make_events(t_phase, c_phase))
            yield out
    finally:
        if pool:
            pool.shutdown()


def emit_records(events_per_channel, config: SimConfig):
    """Per-channel record streams plus the sync stream.

    ``events_per_channel`` maps tagger channel -> sorted click times (ps).
    Returns ``(streams, sync_times_ps, dropped)`` where ``streams`` maps
    channel -> uint32 words (T3 with one sync per pattern repetition, or
    canonical T2) and ``sync_times_ps`` are the syncs left after the divider.
    """
    period = config.sync_period_ps
    n_syncs = config.duration_ps // period
    streams, dropped = {}, 0
    for ch, times in sorted(events_per_channel.items()):
        ev = tt.make_events(times, ch)
        if config.emit_mode == tt.Mode.T3:
            words, d = tt.t2_to_t3(ev, period, config.sync_divider, config.resolution_code,
                                   n_syncs=n_syncs)
            dropped += d
        else:
            words = tt.compress_t2(ev)
        streams[ch] = words
    syncs = tt.apply_sync_divider(np.arange(n_syncs + 1, dtype=np.int64) * period,
                                  config.sync_divider)
    return streams, syncs, dropped

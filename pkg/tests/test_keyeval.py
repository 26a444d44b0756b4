import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cowqkd import cowsim as cs
from cowqkd import keyeval as ke
from cowqkd import ttrecords as tt
from cowqkd.streams import merge_sorted
from cowqkd.errors import DomainError, RangeError, ResolutionMismatch

mp.mp.dps = 40
PATTERN = cs.default_pattern(7)
OCC = cs.occupancy(PATTERN)


def mp_h(p):
    p = mp.mpf(p)
    if p in (0, 1):
        return mp.mpf(0)
    return -p * mp.log(p, 2) - (1 - p) * mp.log(1 - p, 2)


def mp_delta(v, mu):
    v, mu = mp.mpf(v), mp.mpf(mu)
    return (2 * v - 1) * mp.exp(-mu) - 2 * mp.sqrt(v * (1 - v)) * mp.sqrt(1 - mp.exp(-2 * mu))


def mp_r(q, v, mu):
    q = mp.mpf(q)
    return 1 - mp_h(q) - q - (1 - q) * mp_h((1 + mp_delta(v, mu)) / 2)


def _fields(channel, dtime, sync_index=0):
    f = np.zeros(len(dtime), dtype=tt.T3_FIELDS_DTYPE)
    f["channel"] = channel
    f["dtime"] = dtime
    f["sync_index"] = sync_index
    return f


# -- gate -----------------------------------------------------------------

def test_gate_examples():
    assert ke.gate(200)
    assert not ke.gate(39) and ke.gate(40)
    assert ke.gate(359) and not ke.gate(360)
    with pytest.raises(RangeError):
        ke.gate(400)
    with pytest.raises(RangeError):
        ke.GateConfig(400, 200)


def test_gate_exhaustive_5ps_grid():
    keep = [ke.gate(o) for o in range(0, 400, 5)]
    assert len(keep) == 80 and keep.count(False) == 16
    assert np.array_equal(ke.gate_mask(np.arange(0, 400, 5)), keep)


# -- histogram ------------------------------------------------------------

def test_histogram_examples():
    h = ke.histogram(_fields(0, [90]))  # 450 ps
    assert h.counts_time[1] == 1 and h.counts_time.sum() == 1 and h.discarded == 0
    h = ke.histogram(_fields(0, [6]))  # 30 ps
    assert h.counts_time.sum() == 0 and h.discarded == 1
    h = ke.histogram(_fields(0, []))
    assert h.counts_time.sum() == 0 and h.counts_phase.sum() == 0 and h.discarded == 0


def test_histogram_routing_and_words():
    f = _fields([0, 1, 2, 3, 1], [40, 48, 40, 40, 76_800 // 5 + 40])
    h = ke.histogram(f, channel=0)
    assert h.counts_time.tolist() == [1] + [0] * 191
    assert h.counts_phase[0] == 2  # slot 192 wraps to 0
    assert ke.histogram(f, channel=1).counts_time[0] == 1
    words, _ = tt.t2_to_t3(tt.make_events([200, 600], [0, 1]), 76_800)
    h2 = ke.histogram(words)
    assert h2.counts_time[0] == 1 and h2.counts_phase[1] == 1


def test_histogram_resolution_mismatch():
    with pytest.raises(ResolutionMismatch):
        ke.histogram(_fields(0, [1]), resolution_code=7)  # 640 ps bins
    h = ke.histogram(_fields(0, [1]), resolution_code=4)  # 80 ps bins: 1 * 80 = 80 ps offset
    assert h.counts_time[0] == 1


# -- time basis -----------------------------------------------------------

def _brute_time(counts, occ, shift):
    """Symbol-by-symbol loop, independent of the vectorised masks."""
    correct = wrong = decoy = 0
    for i in range(96):
        early, late = occ[2 * i], occ[2 * i + 1]
        c_early = counts[(2 * i + shift) % 192]
        c_late = counts[(2 * i + 1 + shift) % 192]
        if early and late:
            decoy += c_early + c_late
        elif early:
            correct, wrong = correct + c_early, wrong + c_late
        else:
            correct, wrong = correct + c_late, wrong + c_early
    return correct, wrong, decoy


def test_evaluate_time_extremes():
    occupied, empty, _ = cs.data_bin_masks(OCC)
    h = ke.SlotHistogram(counts_time=occupied * 10)
    assert ke.evaluate_time(h, OCC)["qber"] == 0.0
    h = ke.SlotHistogram(counts_time=(occupied | empty) * 7)
    assert ke.evaluate_time(h, OCC)["qber"] == 0.5
    assert ke.evaluate_time(ke.SlotHistogram(), OCC)["qber"] is None


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 191))
def test_evaluate_time_matches_brute_force(seed, shift):
    counts = np.random.default_rng(seed).integers(0, 1000, 192)
    h = ke.SlotHistogram(counts_time=counts, interval_s=2.0)
    res = ke.evaluate_time(h, OCC, shift)
    c, w, d = _brute_time(counts, OCC, shift)
    assert (res["correct"], res["wrong"], res["decoy"]) == (c, w, d)
    assert res["sifted_rate"] == (c + w) / 2.0


def test_qber_from_simulated_error_floor():
    """QBER against the closed form of the simulator's wrong-bin model."""
    ch = cs.ChannelParams(eta_time=0.4, error_floor=0.05, dcr_time_hz=0.0, dcr_phase_hz=0.0,
                          dead_time_ps=0, jitter_sigma_ps=0.0)
    t, _ = cs.simulate_channel(ch, cs.LinkParams(), PATTERN, 0.02, seed=1)
    f, _ = tt.t3_fields(tt.make_events(t, 0), 76_800)
    res = ke.evaluate_time(ke.histogram(f), OCC)
    m = 0.1 * 0.9 * 0.4
    p_ok, p_bad = 1 - math.exp(-m), 1 - math.exp(-0.05 * m)
    q = p_bad / (p_ok + p_bad)
    sifted = res["correct"] + res["wrong"]
    assert sifted > 10**5
    assert abs(res["qber"] - q) < 5 * math.sqrt(q * (1 - q) / sifted)


# -- phase basis ----------------------------------------------------------

def _phase_hist(c_int, c_side):
    cls = cs.expected_interference(OCC)
    counts = np.where(cls == cs.INTERFERE, c_int, np.where(cls == cs.SIDE, c_side, 0))
    return ke.SlotHistogram(counts_phase=counts)


def test_evaluate_phase_examples():
    assert ke.evaluate_phase(_phase_hist(0, 50), OCC) == 1.0
    assert ke.evaluate_phase(_phase_hist(100, 50), OCC) == 0.0
    assert ke.evaluate_phase(_phase_hist(10, 50), OCC) == pytest.approx(0.9)
    assert ke.evaluate_phase(_phase_hist(500, 50), OCC) == 0.0  # clamped
    assert ke.evaluate_phase(_phase_hist(5, 0), OCC) is None
    # bright port: int/side = 2 (1 + V)
    assert ke.evaluate_phase(_phase_hist(190, 50), OCC, monitor_port="bright") == pytest.approx(0.9)


def test_visibility_from_simulation():
    ch = cs.ChannelParams(eta_phase=0.4, eta_time=0.4)
    link = cs.LinkParams(dli_visibility=0.95)
    _, ph = cs.simulate_channel(ch, link, PATTERN, 0.1, seed=3)
    f, _ = tt.t3_fields(tt.make_events(ph, 1), 76_800)
    h = ke.histogram(f)
    assert h.counts_phase.sum() >= 10**5
    assert abs(ke.evaluate_phase(h, OCC) - 0.95) <= 0.02


# -- shift search ---------------------------------------------------------

def _simulated_hist(delay, seed, duration=0.01):
    ch = cs.ChannelParams(eta_time=0.4, eta_phase=0.4)
    link = cs.LinkParams(delay_slots=delay)
    t, ph = cs.simulate_channel(ch, link, PATTERN, duration, seed=seed)
    f = np.concatenate([tt.t3_fields(tt.make_events(t, 0), 76_800)[0],
                        tt.t3_fields(tt.make_events(ph, 1), 76_800)[0]])
    return ke.histogram(f)


@pytest.mark.parametrize("delay", [0, 1, 95, 191])
def test_shift_recovered(delay):
    h = _simulated_hist(delay, seed=delay)
    best, m = ke.shift_search(h, OCC)
    assert best == delay == m.shift


def test_shift_search_is_argmin_with_brute_force():
    h = _simulated_hist(33, seed=1, duration=0.002)
    best, m = ke.shift_search(h, OCC)
    qs = []
    for s in range(192):
        c, w, _ = _brute_time(h.counts_time, OCC, s)
        qs.append(w / (c + w))
    assert m.qber == min(qs) == qs[best]
    assert all(m.qber <= q for q in qs)


def test_shift_tie_prefers_visibility_then_smaller_shift():
    # period-2 pattern: every even shift looks the same
    occ = cs.occupancy(cs.SymbolPattern.from_string("0" * 96))
    h = ke.SlotHistogram(counts_time=np.tile([10, 0], 96))
    best, m = ke.shift_search(h, occ)
    assert best == 0 and m.qber == 0.0
    h = ke.SlotHistogram(counts_time=np.tile([0, 10], 96))
    assert ke.shift_search(h, occ)[0] == 1
    # equal QBER everywhere: the phase histogram decides
    occ = OCC
    cls = cs.expected_interference(occ)
    phase = np.where(cls == cs.INTERFERE, 1, np.where(cls == cs.SIDE, 50, 0))
    h = ke.SlotHistogram(counts_time=np.full(192, 5), counts_phase=np.roll(phase, 40))
    assert ke.shift_search(h, occ)[0] == 40


def test_shift_search_empty():
    best, m = ke.shift_search(ke.SlotHistogram(), OCC)
    assert best == 0 and m.qber is None and m.visibility is None
    assert m.sifted_rate == 0.0 and m.secret_rate == 0.0 and m.r is None


# -- key math -------------------------------------------------------------

def test_binary_entropy():
    assert ke.binary_entropy(0.5) == 1.0
    assert ke.binary_entropy(0.0) == 0.0 and ke.binary_entropy(1.0) == 0.0
    assert ke.binary_entropy(0.11) == pytest.approx(float(mp_h("0.11")), rel=1e-13)
    assert float(mp_h("0.11")) == pytest.approx(0.49991, abs=1e-5)
    for bad in (-0.01, 1.01, float("nan")):
        with pytest.raises(DomainError):
            ke.binary_entropy(bad)


@given(st.floats(0, 1))
def test_binary_entropy_symmetric(p):
    assert ke.binary_entropy(p) == pytest.approx(ke.binary_entropy(1 - p), abs=1e-12)


def test_delta_values():
    assert ke.delta(1.0, 0.1) == pytest.approx(float(mp_delta(1, "0.1")), rel=1e-14)
    assert ke.delta(1.0, 0.1) == pytest.approx(0.904837, abs=1e-6)
    assert ke.delta(0.5, 0.1) == pytest.approx(float(mp_delta("0.5", "0.1")), rel=1e-14)
    assert ke.delta(0.5, 0.1) == pytest.approx(-0.42576, abs=1e-5)
    assert ke.delta(1.0, 1e-9) == pytest.approx(1.0, abs=1e-8)
    for v, mu in ((1.1, 0.1), (-0.1, 0.1), (0.5, 0.0), (0.5, -1.0)):
        with pytest.raises(DomainError):
            ke.delta(v, mu)


def test_secret_fraction_values():
    r = ke.secret_fraction(0.0, 1.0, 0.1)
    assert r == pytest.approx(0.7240, abs=5e-4)
    assert r == pytest.approx(float(mp_r(0, 1, "0.1")), rel=1e-12)
    assert ke.secret_fraction(0.5, 1.0, 0.1) < -0.5 + 1e-12
    assert ke.secret_fraction(0.0, 1.0, 1e-12) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(DomainError):
        ke.secret_fraction(1.5, 1.0, 0.1)


def test_secret_fraction_monotone_on_grid():
    qs = np.linspace(0, 0.2, 21)
    for mu in (0.01, 0.1, 0.2):
        # r rises with V only where the coherence term is nonnegative
        v0 = 0.5
        while ke.delta(v0, mu) < 0:
            v0 += 1e-3
        vs = np.linspace(v0, 1.0, 21)
        grid = np.array([[ke.secret_fraction(q, v, mu) for v in vs] for q in qs])
        assert np.all(np.diff(grid, axis=0) < 0)  # decreasing in Q
        assert np.all(np.diff(grid, axis=1) > 0)  # increasing in V
        vs_all = np.linspace(0.0, 1.0, 101)
        grid = np.array([[ke.secret_fraction(q, v, mu) for v in vs_all] for q in qs])
        assert np.all(np.diff(grid, axis=0) < 0)


def test_secret_fraction_not_monotone_below_delta_zero():
    # h((1 + D) / 2) is symmetric in D, so r falls with V while D < 0
    assert ke.delta(0.6, 0.1) < 0
    assert ke.secret_fraction(0.0, 0.5, 0.1) > ke.secret_fraction(0.0, 0.6, 0.1)


def test_secret_rate():
    assert ke.secret_rate(0.5, 2e6) == 1e6
    assert ke.secret_rate(-0.2, 2e6) == 0.0
    assert ke.secret_rate(ke.secret_fraction(0, 1, 0.1), 1e6) == pytest.approx(724.0e3, abs=500)


def test_metrics_sentinels():
    m = ke.metrics_from_counts(0, 0, 0, None, 0.1)
    assert (m.qber, m.visibility, m.r, m.secret_rate, m.sifted_rate) == (None, None, None, 0.0, 0.0)
    m = ke.metrics_from_counts(100, 0, 0, None, 0.1)
    assert m.qber == 0.0 and m.r is None and m.secret_rate == 0.0
    m = ke.metrics_from_counts(90, 10, 3, 0.98, 0.1, interval_s=1.0)
    assert m.r == ke.secret_fraction(0.1, 0.98, 0.1)
    assert m.secret_rate == max(m.r, 0.0) * 100


# -- interval pipeline ----------------------------------------------------

def _stream_fields(duration_s, seed, n_channels=2, chunk_s=0.5):
    cfg = cs.SimConfig([(cs.ChannelParams(eta_time=0.4, eta_phase=0.4), cs.LinkParams())] * n_channels,
                       pattern=PATTERN, duration_s=duration_s, seed=seed)
    for chunk in cs.iter_tagger_chunks(cfg, chunk_s=chunk_s):
        ev = merge_sorted(chunk)
        yield tt.t3_fields(ev, 76_800)[0]


def test_pipeline_drops_partial_tail():
    specs = [ke.ChannelSpec(0.1, 1550.0)]
    rows = ke.interval_pipeline(_stream_fields(0.35, 1, 1, 0.05), specs, OCC, end_ps=350 * 10**9,
                                interval_ps=10**11)
    assert sorted({r.interval_s for r in rows}) == [0, 1, 2]
    assert len(rows) == 3


def test_pipeline_empty_intervals_and_ordering():
    specs = [ke.ChannelSpec(0.1, 1550.0), ke.ChannelSpec(0.1, 1551.0)]
    f = _fields(0, [40], sync_index=[int(2.5e12 // 76_800)])
    rows = ke.interval_pipeline([f], specs, OCC, end_ps=4 * 10**12)
    assert [(r.interval_s, r.channel) for r in rows] == [(k, c) for k in range(4) for c in range(2)]
    empty = rows[0].metrics
    assert empty.qber is None and empty.secret_rate == 0.0 and empty.sifted_rate == 0.0


def test_pipeline_chunking_invariant_and_stationary():
    specs = [ke.ChannelSpec(0.1, 1550.0), ke.ChannelSpec(0.1, 1551.0)]
    kw = dict(interval_ps=10**10)
    a = ke.interval_pipeline(_stream_fields(0.05, 2, chunk_s=0.01), specs, OCC, 5 * 10**10, **kw)
    b = ke.interval_pipeline([np.concatenate(list(_stream_fields(0.05, 2, chunk_s=0.05)))],
                             specs, OCC, 5 * 10**10, **kw)
    assert a == b and len(a) == 10
    rates = np.array([r.metrics.sifted_rate for r in a if r.channel == 0])
    assert rates.std() / rates.mean() < 0.02
    assert all(r.metrics.shift == 0 for r in a)


def test_evaluate_interval_pure():
    counts = np.random.default_rng(0).integers(0, 100, (2, 2, 192))
    bundle = (counts, np.array([3, 4]))
    specs = [ke.ChannelSpec(), ke.ChannelSpec()]
    assert ke.evaluate_interval(0, bundle, specs, OCC) == ke.evaluate_interval(0, bundle, specs, OCC)


# -- CSV ------------------------------------------------------------------

def test_csv_format():
    m = ke.metrics_from_counts(90, 10, 3, None, 0.1)
    row = ke.MetricsRow(0, 1, 1550.5, m, 7)
    text = ke.format_csv([row])
    header, line = text.splitlines()
    assert header == ("interval_s,channel,wavelength_nm,sifted_bps,qber,visibility,delta,r,"
                      "secret_bps,shift,decoy_counts,discarded")
    assert line == "0,1,1550.5,100.0,0.1,,,,0.0,0,3,7"
    assert len(line.split(",")) == len(header.split(",")) == 12

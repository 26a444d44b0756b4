"""Command-line front end: simulate, sweep, eval, decode, analyze-jitter, analyze-dnl."""

from __future__ import annotations

import argparse
import secrets
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis
from . import cowsim as cs
from . import keyeval as ke
from . import streams
from . import ttrecords as tt
from .config import RunConfig, load_config
from .errors import CowQkdError

RECORD_FILE = "records.ttr"
METRICS_FILE = "metrics.csv"
SWEEP_FILE = "sweep.csv"


class Aborted(CowQkdError):
    """The main FiFo overran and the acquisition stopped."""


def _pipeline(cfg: RunConfig, header: tt.RecordFileHeader):
    return ke.IntervalPipeline(cfg.channel_specs(), cs.occupancy(cfg.pattern),
                               resolution_code=header.resolution_code,
                               sync_period_eff_ps=header.sync_period_ps * header.sync_divider,
                               cfg=cfg.gate)


def _header(cfg: RunConfig, sim: cs.SimConfig) -> tt.RecordFileHeader:
    return tt.RecordFileHeader(sim.emit_mode, sim.resolution_code, 2 * len(sim.channels),
                               sim.sync_divider, sim.sync_period_ps, sim.duration_ps)


class _Decoder:
    """Words of either mode -> decoded T3 fields for the evaluator."""

    def __init__(self, header: tt.RecordFileHeader):
        self.header = header
        if header.mode == tt.Mode.T3:
            self.t3 = tt.T3Expander()
        else:
            self.t2 = tt.T2Expander()

    def feed(self, words):
        if self.header.mode == tt.Mode.T3:
            return self.t3.feed(words)
        events = self.t2.feed(words)
        fields, _ = tt.t3_fields(events, self.header.sync_period_ps, self.header.sync_divider)
        return fields


def run_simulate(cfg: RunConfig, seed: int, out_dir, duration_s=None, jobs=None):
    """Simulate, push through the tagger data path, write records, evaluate.

    Returns the metrics rows; writes ``records.ttr`` and ``metrics.csv`` into
    ``out_dir``. Raises :class:`Aborted` after writing partial output if the
    main FiFo overruns.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = cfg.sim_config(seed, duration_s=duration_s)
    header = _header(cfg, sim)
    t = cfg.tagger
    path = streams.DataPath(t.front_fifo_capacity, t.merge_poll_ps, t.main_fifo_capacity,
                            t.consumer_rate)
    period = sim.sync_period_ps
    if sim.emit_mode == tt.Mode.T3:
        enc = tt.T3Encoder(period, sim.sync_divider, sim.resolution_code)
    else:
        enc = tt.T2Compressor()
    decoder = _Decoder(header)
    pipe = _pipeline(cfg, header)
    end_ps = sim.duration_ps
    aborted = None
    with tt.RecordWriter(out / RECORD_FILE, header) as writer:
        t0 = 0
        for chunk in cs.iter_tagger_chunks(sim, jobs or cfg.sim.jobs):
            if sim.emit_mode == tt.Mode.T2:
                t1 = min(t0 + cs.PS_PER_S, end_ps)
                k0 = -(-t0 // (period * sim.sync_divider))
                k1 = -(-t1 // (period * sim.sync_divider))
                sync_t = np.arange(k0, k1, dtype=np.int64) * period * sim.sync_divider
                chunk = [tt.make_events(sync_t, tt.SYNC_CHANNEL)] + chunk
                t0 = t1
            res = path.process(chunk)
            words = enc.feed(res.events)
            writer.write(words)
            pipe.feed(decoder.feed(words))
            if not res.drain.completed:
                aborted = res
                break
        if sim.emit_mode == tt.Mode.T3 and aborted is None:
            tail = enc.finish(sim.duration_ps // period)
            writer.write(tail)
    if aborted is not None:
        end_ps = int(aborted.events["time_ps"][-1]) if aborted.events.size else 0
    rows = pipe.finish(end_ps)
    (out / METRICS_FILE).write_text(ke.format_csv(rows))
    if aborted is not None:
        raise Aborted(f"main FiFo overrun at record {aborted.drain.at_record} of the "
                      f"last chunk; wrote {len(rows)} complete rows")
    return rows


def run_eval(cfg: RunConfig, record_path, out_path=None):
    header = tt.read_header(record_path)
    n = header.channel_count // 2
    if n != cfg.sim.channels:
        # the file decides how many channels there are
        cfg = replace(cfg, sim=replace(cfg.sim, channels=max(n, 1)),
                      channel_overrides={k: v for k, v in cfg.channel_overrides.items() if k < n})
    decoder = _Decoder(header)
    pipe = _pipeline(cfg, header)
    for words in tt.iter_record_file(record_path):
        pipe.feed(decoder.feed(words))
    rows = pipe.finish(header.duration_ps)
    if out_path is not None:
        Path(out_path).write_text(ke.format_csv(rows))
    return rows


def sweep_point(cfg: RunConfig, seed, attenuation_db, duration_s, jobs=1):
    """Per-channel mean secret rate at one extra attenuation.

    Detections go through the front FiFos and straight into the evaluator;
    word packing and the global merge are skipped since per-channel
    histograms do not depend on cross-channel order.
    """
    sim = cfg.sim_config(seed, attenuation_db, duration_s)
    pipe = ke.IntervalPipeline(cfg.channel_specs(), cs.occupancy(cfg.pattern),
                               resolution_code=sim.resolution_code,
                               sync_period_eff_ps=sim.sync_period_ps * sim.sync_divider,
                               cfg=cfg.gate)
    t = cfg.tagger
    for chunk in cs.iter_tagger_chunks(sim, jobs):
        for ev in chunk:
            kept, _ = streams.front_end_filter(ev, t.front_fifo_capacity, t.merge_poll_ps)
            fields, _ = tt.t3_fields(kept, sim.sync_period_ps, sim.sync_divider,
                                     sim.resolution_code)
            pipe.feed(fields)
    rows = pipe.finish(sim.duration_ps)
    n = len(sim.channels)
    per = np.zeros(n)
    counts = np.zeros(n)
    for row in rows:
        per[row.channel] += row.metrics.secret_rate
        counts[row.channel] += 1
    return per / np.maximum(counts, 1)


def sweep_header(n_channels):
    cols = ["attenuation_db"] + [f"secret_bps_ch{i}" for i in range(n_channels)] + ["total_secret_bps"]
    return ",".join(cols) + "\n"


def run_sweep(cfg: RunConfig, seed, attenuations, duration_s=None, jobs=None, out_path=None):
    """Aggregate CSV text with one line per attenuation."""
    att = [float(a) for a in attenuations]
    if any(a < 0 for a in att) or att != sorted(att):
        raise CowQkdError("attenuations must be nonnegative and ascending")
    duration = cfg.sim.duration_s if duration_s is None else duration_s
    lines = [sweep_header(cfg.sim.channels)]
    results = []
    for a in att:
        per = sweep_point(cfg, seed, a, duration, jobs or cfg.sim.jobs)
        total = float(per.sum())
        results.append((a, per, total))
        lines.append(",".join([repr(a)] + [repr(float(x)) for x in per] + [repr(total)]) + "\n")
    text = "".join(lines)
    if out_path is not None:
        Path(out_path).write_text(text)
    return results, text


_KIND_NAMES = {tt.DETECTION: "detection", tt.SYNC: "sync", tt.OVERFLOW: "overflow",
               tt.MARKER: "marker"}


def _decode_lines(words, kinds, first_index, base0, header):
    """Text lines for one chunk of valid words; returns ``(lines, base)``."""
    w = words.astype(np.int64)
    ch = (w >> tt.CHANNEL_SHIFT) & tt.CHANNEL_MASK
    t2 = header.mode == tt.Mode.T2
    low = w & (tt.T2_TIME_MASK if t2 else tt.NSYNC_MASK)
    is_ovf = kinds == tt.OVERFLOW
    base = base0 + np.cumsum(np.where(is_ovf, low, 0))
    idx = np.arange(first_index, first_index + w.size)
    if t2:
        t_ps = (base * tt.T2_WRAP + low) * tt.T2_UNIT_PS
        cols = zip(idx.tolist(), words.tolist(), kinds.tolist(), ch.tolist(), low.tolist(),
                   base.tolist(), t_ps.tolist())
        lines = [f"{i} 0x{x:08x} overflow count={lo} total={b}" if k == tt.OVERFLOW
                 else f"{i} 0x{x:08x} sync t_ps={t}" if k == tt.SYNC
                 else f"{i} 0x{x:08x} {_KIND_NAMES[k]} ch={c} t_ps={t}"
                 for i, x, k, c, lo, b, t in cols]
    else:
        dtime = (w >> tt.DTIME_SHIFT) & tt.DTIME_MASK
        sync = base * tt.NSYNC_WRAP + low
        t_ps = sync * (header.sync_period_ps * header.sync_divider) \
            + dtime * tt.resolution_ps(header.resolution_code)
        cols = zip(idx.tolist(), words.tolist(), kinds.tolist(), ch.tolist(), low.tolist(),
                   base.tolist(), sync.tolist(), dtime.tolist(), t_ps.tolist())
        lines = [f"{i} 0x{x:08x} overflow count={lo} total={b}" if k == tt.OVERFLOW
                 else f"{i} 0x{x:08x} {_KIND_NAMES[k]} ch={c} sync={sy} dtime={d} t_ps={t}"
                 for i, x, k, c, lo, b, sy, d, t in cols]
    return lines, int(base[-1]) if w.size else base0


def iter_decode(record_path):
    """Yield one human-readable line per record.

    Overflow lines carry their count and the running total; time fields of
    other records include the accumulated overflows. An invalid word raises
    :class:`FormatError` with its byte offset after the preceding lines.
    """
    header = tt.read_header(record_path)
    yield (f"# mode=T{int(header.mode)} resolution_ps={tt.resolution_ps(header.resolution_code)} "
           f"channels={header.channel_count} sync_period_ps={header.sync_period_ps} "
           f"divider={header.sync_divider} duration_ps={header.duration_ps}")
    base = 0
    index = 0
    for words in tt.iter_record_file(record_path):
        kinds = tt.classify(words, header.mode)
        bad = np.flatnonzero(kinds == tt.INVALID)
        stop = int(bad[0]) if bad.size else words.size
        lines, base = _decode_lines(words[:stop], kinds[:stop], index, base, header)
        yield from lines
        if bad.size:
            pos = index + stop
            raise tt.FormatError(f"invalid record 0x{int(words[stop]):08x} (record #{pos})",
                                 offset=tt.HEADER.size + 4 * pos)
        index += words.size


def _read_histogram(path, bin_width_ps):
    """Text histogram: one count per line, or ``bin_ps,count`` pairs."""
    rows = [ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()]
    rows = [r for r in rows if r]
    if rows and "," in rows[0]:
        pairs = np.array([[float(x) for x in r.split(",")[:2]] for r in rows])
        width = float(np.median(np.diff(pairs[:, 0]))) if len(pairs) > 1 else bin_width_ps
        return analysis.AnalysisHistogram(width, pairs[:, 1].astype(np.int64),
                                          pairs[0, 0] - width / 2)
    return analysis.AnalysisHistogram(bin_width_ps, np.array([int(float(r)) for r in rows]))


def _resolve_seed(args, cfg):
    if args.seed is not None:
        return args.seed
    if cfg.sim.seed is not None:
        return cfg.sim.seed
    seed = secrets.randbits(63)
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def build_parser():
    p = argparse.ArgumentParser(prog="cowqkd", description="Multichannel COW-QKD simulator and evaluator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="configuration file")
        sp.add_argument("--seed", type=int, help="random seed (default: fresh entropy, printed)")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("simulate", help="simulate, write records and per-second metrics")
    common(sp, "output directory (default: current directory)")
    sp.add_argument("--duration", type=float, help="seconds to simulate")
    sp.add_argument("--jobs", type=int, help="simulation threads")

    sp = sub.add_parser("sweep", help="secret rate versus added attenuation")
    common(sp, "output CSV (default: stdout)")
    sp.add_argument("--attenuations", required=True, help="comma-separated dB values, ascending")
    sp.add_argument("--duration", type=float, help="seconds per attenuation")
    sp.add_argument("--jobs", type=int, help="simulation threads")

    sp = sub.add_parser("eval", help="evaluate a record file")
    common(sp, "output CSV (default: stdout)")
    sp.add_argument("records", help="record file")

    sp = sub.add_parser("decode", help="dump a record file")
    sp.add_argument("records")
    sp.add_argument("--out", help="output text file (default: stdout)")

    for name, what in (("analyze-jitter", "jitter"), ("analyze-dnl", "DNL")):
        sp = sub.add_parser(name, help=f"{what} analysis of a histogram file")
        sp.add_argument("histogram", nargs="?",
                        help="one count per line or 'bin_ps,count' lines; omit for a synthetic demo")
        sp.add_argument("--bin-width", type=float, default=5.0, help="bin width in ps")
        sp.add_argument("--seed", type=int, help="seed of the synthetic demo")
        sp.add_argument("--out", help="output file (default: stdout)")
    return p


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except CowQkdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    cmd = args.command
    if cmd in ("simulate", "sweep", "eval"):
        cfg = load_config(args.config) if args.config else RunConfig()
    if cmd == "simulate":
        seed = _resolve_seed(args, cfg)
        try:
            run_simulate(cfg, seed, args.out or ".", args.duration, args.jobs)
        except Aborted as exc:
            print(f"aborted: {exc}", file=sys.stderr)
            return 3
        return 0
    if cmd == "sweep":
        seed = _resolve_seed(args, cfg)
        att = [float(a) for a in args.attenuations.split(",") if a.strip()]
        _, text = run_sweep(cfg, seed, att, args.duration, args.jobs)
        _emit(text, args.out)
        return 0
    if cmd == "eval":
        rows = run_eval(cfg, args.records)
        _emit(ke.format_csv(rows), args.out)
        return 0
    if cmd == "decode":
        fh = open(args.out, "w") if args.out else sys.stdout
        try:
            for line in iter_decode(args.records):
                fh.write(line + "\n")
        finally:
            if args.out:
                fh.close()
        return 0
    rng = np.random.default_rng(args.seed if args.seed is not None else secrets.randbits(63))
    if cmd == "analyze-jitter":
        hist = (_read_histogram(args.histogram, args.bin_width) if args.histogram
                else analysis.jitter_pair_histogram(10**6, 30.0, 30.0, rng))
        r = analysis.analyze_jitter(hist)
        _emit(f"rms_ps={r.rms_ps!r}\nfwhm_ps={r.fwhm_ps!r}\ncentroid_ps={r.centroid_ps!r}\n", args.out)
        return 0
    hist = (_read_histogram(args.histogram, args.bin_width) if args.histogram
            else analysis.dithered_histogram(10**5, 100, rng))
    r = analysis.analyze_dnl(hist)
    _emit(f"pp_percent={r.pp_percent!r}\nrms_percent={r.rms_percent!r}\n"
          f"bins={r.region[1] - r.region[0]}\n", args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())

import csv
import io

import numpy as np
import pytest

from cowqkd import cli
from cowqkd import keyeval as ke
from cowqkd import ttrecords as tt
from cowqkd.config import DEFAULT_ETA, RunConfig, load_config, parse_config
from cowqkd.errors import ConfigError, FormatError


def _cfg(text="", channels=1):
    return parse_config(f"[sim]\nchannels = {channels}\n" + text)


def _rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


# -- configuration --------------------------------------------------------

def test_defaults():
    cfg = RunConfig()
    params = cfg.channel_params()
    assert len(params) == 9
    assert [p.eta_time for p in params] == list(DEFAULT_ETA)
    assert cfg.pattern.composition() == (43, 43, 10)


def test_parse_sections_and_overrides():
    cfg = parse_config("""
# comment
[pattern]
seed = 3
[link]
attenuation_db = 2.5   # trailing comment
monitor_port = bright
[sim]
channels = 3
emit_mode = T2
[channel]
mu = 0.05
[channel.2]
eta_time = 0.3
""")
    p = cfg.channel_params()
    assert [x.mu for x in p] == [0.05] * 3
    assert p[2].eta_time == 0.3 and p[0].eta_time == DEFAULT_ETA[0]
    assert cfg.link.attenuation_db == 2.5 and cfg.link.monitor_port == "bright"
    assert cfg.sim.emit_mode == "T2"
    assert cfg.pattern_seed == 3


def test_pattern_symbols():
    cfg = parse_config("[pattern]\nsymbols = 01D01\n")
    assert cfg.pattern.to_string() == "01D01"


@pytest.mark.parametrize("text,line", [
    ("[sim]\nchannels = 2\nbogus = 1\n", 3),
    ("[nope]\n", 1),
    ("[sim]\n\nchannels = x\n", 3),
    ("mu = 0.1\n", 1),
    ("[channel]\nmu = 0.1\ncolour = red\n", 3),
    ("[sim]\nchannels = 2\n[channel.5]\nmu = 0.1\n", 3),
    ("[link]\nsplit_time = 0.95\n", 2),
    ("[sim]\nchannels = 0\n", 2),
    ("[sim\n", 1),
    ("[sim]\njust text\n", 2),
])
def test_parse_errors_carry_line(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, path="run.cfg")
    assert exc.value.line == line
    assert f"run.cfg:{line}:" in str(exc.value)


def test_load_config_missing(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


# -- simulate / eval ------------------------------------------------------

@pytest.fixture(scope="module")
def sim_two(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    cfg = _cfg(channels=2)
    rows = cli.run_simulate(cfg, 5, out, duration_s=2.0)
    return cfg, out, rows


def test_simulate_rows_per_second(sim_two):
    _, out, rows = sim_two
    table = _rows(out / cli.METRICS_FILE)
    assert len(rows) == len(table) == 4
    assert [(int(r["interval_s"]), int(r["channel"])) for r in table] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert list(table[0]) == list(ke.CSV_COLUMNS)
    for r in table:
        assert float(r["secret_bps"]) > 0 and 0 < float(r["qber"]) < 0.1


def test_eval_matches_simulate(sim_two):
    cfg, out, rows = sim_two
    again = cli.run_eval(cfg, out / cli.RECORD_FILE)
    assert ke.format_csv(again) == (out / cli.METRICS_FILE).read_text()
    # the file header decides the channel count
    assert ke.format_csv(cli.run_eval(RunConfig(), out / cli.RECORD_FILE)) == ke.format_csv(again)


def test_simulate_deterministic_across_jobs(sim_two, tmp_path):
    cfg, out, _ = sim_two
    cli.run_simulate(cfg, 5, tmp_path, duration_s=2.0, jobs=2)
    assert (tmp_path / cli.RECORD_FILE).read_bytes() == (out / cli.RECORD_FILE).read_bytes()
    assert (tmp_path / cli.METRICS_FILE).read_text() == (out / cli.METRICS_FILE).read_text()


def test_simulate_seed_changes_output(tmp_path):
    cfg = _cfg()
    cli.run_simulate(cfg, 1, tmp_path / "a", duration_s=0.05)
    cli.run_simulate(cfg, 2, tmp_path / "b", duration_s=0.05)
    assert (tmp_path / "a" / cli.RECORD_FILE).read_bytes() != (tmp_path / "b" / cli.RECORD_FILE).read_bytes()


def test_simulate_t2_mode_evaluates_like_t3(tmp_path):
    t3 = cli.run_simulate(_cfg(), 9, tmp_path / "t3", duration_s=1.0)
    t2 = cli.run_simulate(_cfg("emit_mode = T2\n"), 9, tmp_path / "t2", duration_s=1.0)
    assert tt.read_header(tmp_path / "t2" / cli.RECORD_FILE).mode == tt.Mode.T2
    assert ke.format_csv(t2) == ke.format_csv(t3)


def test_simulate_short_run_has_header_only(tmp_path):
    rows = cli.run_simulate(_cfg(), 1, tmp_path, duration_s=0.01)
    assert rows == []
    assert (tmp_path / cli.METRICS_FILE).read_text() == ke.csv_header()


def test_simulate_main_fifo_overrun(tmp_path):
    cfg = _cfg("[tagger]\nmain_fifo_capacity = 1000\nconsumer_rate = 10\n")
    with pytest.raises(cli.Aborted):
        cli.run_simulate(cfg, 1, tmp_path, duration_s=0.05)
    assert cli.main(["simulate", "--seed", "1", "--duration", "0.05", "--out", str(tmp_path),
                     "--config", str(_write(tmp_path / "c.cfg", "[sim]\nchannels = 1\n[tagger]\n"
                                            "main_fifo_capacity = 1000\nconsumer_rate = 10\n"))]) == 3


def _write(path, text):
    path.write_text(text)
    return path


def test_eval_empty_record_file(tmp_path):
    f = tmp_path / "empty.ttr"
    tt.write_record_file(f, tt.RecordFileHeader(tt.Mode.T3, 0, 2, 1, 76_800, 0), [])
    assert cli.run_eval(_cfg(), f) == []
    assert cli.main(["eval", str(f), "--out", str(tmp_path / "m.csv")]) == 0
    assert (tmp_path / "m.csv").read_text() == ke.csv_header()


def test_eval_corrupted_magic(tmp_path, capsys):
    f = tmp_path / "bad.ttr"
    f.write_bytes(b"NOTMAGIC" + bytes(40))
    with pytest.raises(FormatError):
        cli.run_eval(_cfg(), f)
    assert cli.main(["eval", str(f)]) == 2
    assert "error:" in capsys.readouterr().err


# -- decode ---------------------------------------------------------------

@pytest.fixture(scope="module")
def small_records(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    cli.run_simulate(_cfg(), 2, out, duration_s=0.03)
    return out / cli.RECORD_FILE


def test_decode_lists_every_record(small_records):
    f = small_records
    lines = list(cli.iter_decode(f))
    words = tt.read_record_file(f)[1]
    assert lines[0].startswith("# mode=T3")
    assert len(lines) - 1 == words.size
    overflow = [ln for ln in lines[1:] if " overflow " in ln]
    assert len(overflow) == int((tt.classify(words, tt.Mode.T3) == tt.OVERFLOW).sum()) > 0
    assert "total=" in overflow[0]


def test_decode_reports_invalid_offset(tmp_path):
    f = tmp_path / "r.ttr"
    good = tt.encode(tt.Detection3(0, 1, 2), tt.Mode.T3)
    bad = (1 << 31) | (9 << 25)  # special record with an undefined code
    tt.write_record_file(f, tt.RecordFileHeader(tt.Mode.T3, 0, 2, 1, 76_800, 10**6),
                         np.array([good, good, bad], dtype=np.uint32))
    with pytest.raises(FormatError) as exc:
        list(cli.iter_decode(f))
    assert exc.value.offset == tt.HEADER.size + 8


@pytest.mark.parametrize("mode", [tt.Mode.T2, tt.Mode.T3])
def test_decode_lines_match_scalar_decoder(tmp_path, mode):
    rng = np.random.default_rng(int(mode))
    t = np.sort(rng.integers(0, 10**10, 3000))
    ev = tt.make_events(t, rng.integers(0, 3, t.size))
    if mode == tt.Mode.T2:
        words = tt.compress_t2(ev)
    else:
        words = tt.t2_to_t3(ev, 76_800, 2, 1)[0]
    f = tmp_path / "r.ttr"
    tt.write_record_file(f, tt.RecordFileHeader(mode, 0 if mode == tt.Mode.T2 else 1, 4,
                                                2, 76_800, 10**10), words)
    lines = list(cli.iter_decode(f))[1:]
    base = 0
    for i, (w, line) in enumerate(zip(words.tolist(), lines)):
        rec = tt.decode(w, mode)
        assert line.startswith(f"{i} 0x{w:08x} ")
        if isinstance(rec, (tt.Overflow2, tt.Overflow3)):
            base += rec.count
            assert line.endswith(f"count={rec.count} total={base}")
        elif mode == tt.Mode.T2:
            assert line.endswith(f" t_ps={(base * tt.T2_WRAP + rec.timetag) * 5}")
        else:
            sync = base * tt.NSYNC_WRAP + rec.nsync
            assert f" ch={rec.channel} sync={sync} dtime={rec.dtime} " in line
            assert line.endswith(f" t_ps={sync * 153_600 + rec.dtime * 10}")
    assert len(lines) == words.size


def test_decode_cli_to_file(small_records, tmp_path):
    target = tmp_path / "dump.txt"
    assert cli.main(["decode", str(small_records), "--out", str(target)]) == 0
    assert target.read_text().splitlines()[0].startswith("# mode=T3")


# -- sweep ----------------------------------------------------------------

def test_sweep_additivity_and_cutoff():
    cfg = _cfg(channels=2)
    results, text = cli.run_sweep(cfg, 3, [0, 10, 45], duration_s=1.0)
    lines = text.splitlines()
    assert lines[0] == "attenuation_db,secret_bps_ch0,secret_bps_ch1,total_secret_bps"
    assert len(lines) == 4
    for a, per, total in results:
        assert total == pytest.approx(per.sum())
    assert results[0][2] > results[1][2] > 0
    assert results[2][2] == 0.0


def test_sweep_base_attenuation_adds():
    base = _cfg("[link]\nattenuation_db = 10\n")
    plain = _cfg()
    a = cli.sweep_point(base, 4, 0.0, 1.0)
    b = cli.sweep_point(plain, 4, 10.0, 1.0)
    assert np.array_equal(a, b)


def test_sweep_rejects_unsorted():
    with pytest.raises(Exception):
        cli.run_sweep(_cfg(), 1, [5, 0], duration_s=0.1)


def test_missing_seed_is_printed(tmp_path, capsys):
    assert cli.main(["sweep", "--attenuations", "0", "--duration", "0.01",
                     "--config", str(_write(tmp_path / "c.cfg", "[sim]\nchannels = 1\n"))]) == 0
    err = capsys.readouterr()
    assert err.err.startswith("seed: ")
    assert int(err.err.split()[1]) >= 0
    assert err.out.startswith("attenuation_db,")


def test_config_seed_used(tmp_path, capsys):
    cfg = _write(tmp_path / "c.cfg", "[sim]\nchannels = 1\nseed = 12\n")
    assert cli.main(["sweep", "--attenuations", "0", "--duration", "0.01", "--config", str(cfg)]) == 0
    assert capsys.readouterr().err == ""


# -- analysis commands ----------------------------------------------------

def test_analyze_jitter_file(tmp_path, capsys):
    hist = _write(tmp_path / "h.txt", "0,1\n5,4\n10,9\n15,4\n20,1\n")
    assert cli.main(["analyze-jitter", str(hist)]) == 0
    out = dict(ln.split("=") for ln in capsys.readouterr().out.split())
    assert float(out["centroid_ps"]) == pytest.approx(10.0)
    assert float(out["fwhm_ps"]) == pytest.approx(9.0)


def test_analyze_dnl_demo(capsys):
    assert cli.main(["analyze-dnl", "--seed", "1"]) == 0
    out = dict(ln.split("=") for ln in capsys.readouterr().out.split())
    assert int(out["bins"]) == 100
    assert float(out["rms_percent"]) == pytest.approx(100 / np.sqrt(1e5), rel=0.25)

"""Flat sectioned key = value run configuration.

Example::

    [pattern]
    seed = 7

    [link]
    attenuation_db = 0

    [sim]
    channels = 9
    duration_s = 1

    [channel]            # defaults for every wavelength channel
    mu = 0.1

    [channel.3]          # overrides for channel 3 only
    eta_time = 0.05

Lines starting with ``#`` or ``;`` are comments; a trailing ``# ...`` after a
value is stripped too. Unknown sections or keys are rejected with the line
number they appear on.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import cowsim as cs
from . import ttrecords as tt
from .errors import CowQkdError, ConfigError
from .keyeval import ChannelSpec, GateConfig

# Detector efficiency spread used when no per-channel efficiency is configured;
# the listed values keep every channel in the loss-dominated regime at 0 dB.
DEFAULT_ETA = (0.045, 0.04, 0.03, 0.05, 0.025, 0.055, 0.035, 0.04, 0.06)


@dataclass(frozen=True)
class TaggerParams:
    front_fifo_capacity: int = 2048
    main_fifo_capacity: int = 268_435_456
    merge_poll_ps: int = 100_000
    consumer_rate: float = 88e6


@dataclass(frozen=True)
class SimParams:
    channels: int = 9
    duration_s: float = 1.0
    seed: int | None = None
    resolution_code: int = 0
    sync_divider: int = 1
    emit_mode: str = "T3"
    jobs: int = 1


@dataclass(frozen=True)
class EvalParams:
    guard_ps: int = 40


@dataclass
class RunConfig:
    pattern: cs.SymbolPattern = field(default_factory=lambda: cs.default_pattern(7))
    pattern_seed: int = 7
    link: cs.LinkParams = field(default_factory=cs.LinkParams)
    sim: SimParams = field(default_factory=SimParams)
    tagger: TaggerParams = field(default_factory=TaggerParams)
    eval: EvalParams = field(default_factory=EvalParams)
    channel_defaults: dict = field(default_factory=dict)
    channel_overrides: dict = field(default_factory=dict)  # index -> {key: value}

    def channel_params(self):
        out = []
        for i in range(self.sim.channels):
            kw = {"wavelength_nm": cs._itu_wavelength(i),
                  "eta_time": DEFAULT_ETA[i % len(DEFAULT_ETA)],
                  "eta_phase": DEFAULT_ETA[i % len(DEFAULT_ETA)]}
            kw.update(self.channel_defaults)
            kw.update(self.channel_overrides.get(i, {}))
            out.append(cs.ChannelParams(**kw).validate())
        return out

    def sim_config(self, seed, extra_attenuation_db=0.0, duration_s=None) -> cs.SimConfig:
        link = replace(self.link, attenuation_db=self.link.attenuation_db + extra_attenuation_db)
        link.validate()
        return cs.SimConfig(
            channels=[(ch, link) for ch in self.channel_params()],
            pattern=self.pattern,
            duration_s=self.sim.duration_s if duration_s is None else duration_s,
            seed=seed,
            emit_mode=tt.Mode[self.sim.emit_mode],
            resolution_code=self.sim.resolution_code,
            sync_divider=self.sim.sync_divider,
        )

    def channel_specs(self):
        return [ChannelSpec(ch.mu, ch.wavelength_nm, self.link.monitor_port)
                for ch in self.channel_params()]

    @property
    def gate(self) -> GateConfig:
        return GateConfig(self.link.slot_ps, self.eval.guard_ps)


def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


_CHANNEL_KEYS = _fields(cs.ChannelParams)
_SECTIONS = {
    "link": (cs.LinkParams, "link"),
    "sim": (SimParams, "sim"),
    "tagger": (TaggerParams, "tagger"),
    "eval": (EvalParams, "eval"),
}


def _convert(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int) or default is None:
        f = float(raw)
        if f != int(f):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(f)
    if isinstance(default, float):
        return float(raw)
    return raw


def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def parse_config(text: str, path=None) -> RunConfig:
    """Parse configuration text; every error names the offending line."""
    cfg = RunConfig()
    values = {name: {} for name in _SECTIONS}
    pattern_symbols = None
    section = None
    key_lines = {}
    section_lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno, path)
            section = line[1:-1].strip()
            section_lines.setdefault(section, lineno)
            if section in _SECTIONS or section in ("pattern", "channel"):
                continue
            if section.startswith("channel."):
                idx = section.split(".", 1)[1]
                if not idx.isdigit():
                    raise ConfigError(f"bad channel index in [{section}]", lineno, path)
                cfg.channel_overrides.setdefault(int(idx), {})
                continue
            raise ConfigError(f"unknown section [{section}]", lineno, path)
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, path)
        if section is None:
            raise ConfigError("key outside of any section", lineno, path)
        key, val = (s.strip() for s in line.split("=", 1))
        key_lines[(section, key)] = lineno
        try:
            if section == "pattern":
                if key == "seed":
                    cfg.pattern_seed = int(val)
                elif key == "symbols":
                    pattern_symbols = val
                else:
                    raise KeyError(key)
            elif section == "channel" or section.startswith("channel."):
                if key not in _CHANNEL_KEYS:
                    raise KeyError(key)
                target = (cfg.channel_defaults if section == "channel"
                          else cfg.channel_overrides[int(section.split(".", 1)[1])])
                target[key] = _convert(val, _default_of(_CHANNEL_KEYS[key]))
            else:
                cls, _ = _SECTIONS[section]
                spec = _fields(cls)
                if key not in spec:
                    raise KeyError(key)
                values[section][key] = _convert(val, _default_of(spec[key]))
        except KeyError:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno, path) from None
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", lineno, path) from None

    def fail(exc, section, keys):
        line = next((key_lines[(section, k)] for k in keys if (section, k) in key_lines), None)
        raise ConfigError(str(exc), line, path) from None

    try:
        cfg.pattern = (cs.SymbolPattern.from_string(pattern_symbols) if pattern_symbols
                       else cs.default_pattern(cfg.pattern_seed))
    except CowQkdError as exc:
        fail(exc, "pattern", ["symbols"])
    try:
        cfg.link = cs.LinkParams(**values["link"]).validate()
    except CowQkdError as exc:
        fail(exc, "link", list(values["link"]))
    cfg.sim = SimParams(**values["sim"])
    cfg.tagger = TaggerParams(**values["tagger"])
    cfg.eval = EvalParams(**values["eval"])
    for i in sorted(cfg.channel_overrides):
        if i >= cfg.sim.channels:
            raise ConfigError(f"[channel.{i}] but only {cfg.sim.channels} channels configured",
                              section_lines[f"channel.{i}"], path)
    try:
        validate(cfg)
    except CowQkdError as exc:
        sections = ["sim", "tagger", "eval", "channel"] + [f"channel.{i}" for i in cfg.channel_overrides]
        keys = [k for s in sections for (ss, k) in key_lines if ss == s and k in str(exc)]
        line = next((key_lines[(s, k)] for s in sections for k in keys if (s, k) in key_lines), None)
        raise ConfigError(str(exc), line, path) from None
    return cfg


def validate(cfg: RunConfig) -> RunConfig:
    s = cfg.sim
    if not 1 <= s.channels <= 32:
        raise ConfigError("channels must be in 1..32 (two tagger inputs each)")
    if not s.duration_s > 0:
        raise ConfigError("duration_s must be positive")
    if s.emit_mode not in ("T2", "T3"):
        raise ConfigError("emit_mode must be T2 or T3")
    if s.sync_divider not in tt.VALID_DIVIDERS:
        raise ConfigError(f"sync_divider must be one of {tt.VALID_DIVIDERS}")
    if not 0 <= s.resolution_code <= tt.MAX_RESOLUTION_CODE:
        raise ConfigError("resolution_code must be in 0..23")
    if s.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    if s.emit_mode == "T2" and s.resolution_code != 0:
        raise ConfigError("resolution_code must be 0 when emit_mode = T2")
    t = cfg.tagger
    if t.front_fifo_capacity < 1 or t.main_fifo_capacity < 1 or t.merge_poll_ps < 1:
        raise ConfigError("tagger capacities and merge_poll_ps must be >= 1")
    if t.consumer_rate < 0:
        raise ConfigError("consumer_rate must be >= 0")
    for i in cfg.channel_overrides:
        if i >= s.channels:
            raise ConfigError(f"[channel.{i}] but only {s.channels} channels configured")
    cfg.gate  # range-checks guard_ps against the slot width
    cfg.channel_params()
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=str(p)) from None
    return parse_config(text, str(p))

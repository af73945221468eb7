"""Command-line front end: ``heraldsim {pair,ghz,w,mermin,timing}``.

A run is described by a :class:`RunConfig`, read from an optional JSON
file and overridden by flags.  Results are emitted as CSV rows or a JSON
report; every row carries a hash of the canonical effective config.
Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import tempfile
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from . import belltest as bt
from .errors import ConfigurationError, NumericalError, UsageError
from .fock import reduced_fidelity
from .optics import DetectorModel
from .protocols import (
    DEFAULT_ATTEMPT_CAP,
    ChannelPhases,
    ExcitationParams,
    RetrievalParams,
    TimingParams,
    attempt_distribution,
    expected_time,
    ideal_pair,
    prepare_pair,
    simulate_attempts,
)

COMMANDS = ("pair", "ghz", "w", "mermin", "timing")
CSV_COLUMNS = ("experiment", "settings", "value", "stderr", "shots", "valid_fraction", "engine", "config_hash")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
FLOAT_KEYS = ("p_c", "eta", "dark", "retrieval", "phase_a2", "phase_a3", "phase_jitter", "t0", "t1")


@dataclass
class RunConfig:
    protocol: str = "ghz"
    engine: str = "exact"
    source: str = "ideal"
    p_c: float = 1e-3
    eta: float = 0.0
    dark: float = 0.0
    retrieval: float = 1.0
    phases: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    phase_a2: float = 0.0
    phase_a3: float = 0.0
    compensate: bool = True
    phase_jitter: float = 0.0
    n_max: int = 2
    flag_treatment: Optional[str] = None
    shots: int = 10000
    seed: int = 0
    t0: float = 1.0
    t1: float = 1.0
    attempt_cap: int = DEFAULT_ATTEMPT_CAP
    a: Optional[str] = None
    b: Optional[str] = None

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def validate(self) -> None:
        def choice(name, value, options):
            if value not in options:
                raise ConfigurationError(f"{name} must be one of {options}, got {value!r}")

        choice("protocol", self.protocol, ("pair", "ghz", "w", "product"))
        choice("engine", self.engine, bt.ENGINES)
        choice("source", self.source, ("ideal", "heralded"))
        if self.flag_treatment is not None:
            choice("flag_treatment", self.flag_treatment, bt.FLAG_TREATMENTS)
        for name in ("a", "b"):
            if getattr(self, name) is not None:
                choice(name, getattr(self, name), bt.SETTINGS)
        if not isinstance(self.phases, (list, tuple)) or len(self.phases) != 3:
            raise ConfigurationError("phases must list three channel phases")
        for name in FLOAT_KEYS + ("phases",):
            values = getattr(self, name) if name == "phases" else [getattr(self, name)]
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in values):
                raise ConfigurationError(f"{name} must be finite numbers")
        for name in ("shots", "seed", "n_max", "attempt_cap"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigurationError(f"{name} must be an integer")
        if self.shots < 1 or self.attempt_cap < 1 or self.seed < 0:
            raise ConfigurationError("shots and attempt_cap must be >= 1 and seed >= 0")
        if not 1 <= self.n_max <= 6:
            raise ConfigurationError("n_max must lie in [1, 6]")
        if self.phase_jitter < 0:
            raise ConfigurationError("phase_jitter must be >= 0")
        if not isinstance(self.compensate, bool):
            raise ConfigurationError("compensate must be true or false")
        # build the owning-module objects so their own range checks run
        self.excitation(), self.detector(), self.retrieval_params(), self.timing(), self.channel_phases()

    def excitation(self) -> ExcitationParams:
        return ExcitationParams(self.p_c)

    def detector(self) -> DetectorModel:
        return DetectorModel(self.eta, self.dark)

    def retrieval_params(self) -> RetrievalParams:
        return RetrievalParams(self.retrieval)

    def timing(self) -> TimingParams:
        return TimingParams(self.t0, self.t1)

    def channel_phases(self) -> ChannelPhases:
        return ChannelPhases(tuple(self.phases), self.phase_a2, self.phase_a3)

    def canonical(self) -> str:
        data = asdict(self)
        data["phases"] = [float(p) for p in self.phases]
        for name in FLOAT_KEYS:
            data[name] = float(data[name])
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ResultRecord:
    experiment: str
    settings: str
    value: float
    stderr: float
    shots: int
    valid_fraction: float
    engine: str
    config_hash: str


def fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, int):
        return str(x)
    return format(float(x), ".12g")


class Report:
    def __init__(self, command: str, config: RunConfig):
        self.command = command
        self.config = config
        self.rows: list[ResultRecord] = []
        self.warnings: list[str] = []
        self.success = True

    def add(self, experiment, settings="", value=0.0, stderr=0.0, shots=0, valid_fraction=1.0, engine=None):
        self.rows.append(
            ResultRecord(experiment, settings, float(value), float(stderr), int(shots), float(valid_fraction), engine or self.config.engine, self.config.hash())
        )

    def add_estimate(self, experiment, est):
        settings = "".join(est.settings) if hasattr(est, "settings") else getattr(est, "name", "")
        self.add(experiment, settings, est.value, est.stderr, est.shots, est.valid_fraction, est.engine)

    def csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([fmt(getattr(r, c)) if c not in ("experiment", "settings", "engine", "config_hash") else getattr(r, c) for c in CSV_COLUMNS])
        return buf.getvalue()

    def json(self) -> str:
        def num(v):
            return float(fmt(v)) if isinstance(v, float) else v

        doc = {
            "command": self.command,
            "success": self.success,
            "config": json.loads(self.config.canonical()),
            "config_hash": self.config.hash(),
            "rows": [{k: num(v) for k, v in asdict(r).items()} for r in self.rows],
            "warnings": self.warnings,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------- commands


def _setup(cfg: RunConfig) -> bt.BellSetup:
    common = dict(phases=cfg.channel_phases(), source=cfg.source, params=cfg.excitation(), detector=cfg.detector(), retrieval=cfg.retrieval_params(), compensate=cfg.compensate, n_max=cfg.n_max)
    if cfg.protocol == "ghz":
        return bt.ghz_setup(**common)
    if cfg.protocol == "w":
        return bt.w_setup(**common)
    if cfg.protocol == "product":
        return bt.product_setup(detector=cfg.detector())
    raise UsageError(f"protocol {cfg.protocol!r} has no three-party setup")


def cmd_pair(cfg: RunConfig, report: Report, workers: int) -> None:
    res = prepare_pair(cfg.phases[0], cfg.excitation(), cfg.detector(), n_max=cfg.n_max)
    report.add("herald_probability", "", res.probability, engine="exact")
    report.add("success", "", float(res.success), engine="exact")
    if not res.success:
        report.success = False
        report.warnings.append("herald probability is zero: no pair state was prepared")
        return
    target = ideal_pair(("L", "R"), res.effective_phase)
    idx = [res.state.registry.index(m) for m in ("L", "R")]
    contamination = math.fsum(abs(a) ** 2 for occ, a in res.state.items() if occ[idx[0]] + occ[idx[1]] >= 2)
    pattern = "".join("1" if c else "0" for c in res.click_pattern)
    report.add("fidelity", pattern, reduced_fidelity(target, res.state), engine="exact")
    report.add("contamination_weight", pattern, contamination, engine="exact")
    report.add("effective_phase", pattern, res.effective_phase, engine="exact")
    report.add("analytic_attempts", "", 1.0 / res.probability, engine="exact")


def _engine_kwargs(cfg: RunConfig, workers: int) -> dict:
    if cfg.phase_jitter and cfg.engine != "montecarlo":
        raise UsageError("phase_jitter needs the montecarlo engine")
    mc = cfg.engine == "montecarlo"
    return dict(engine=cfg.engine, shots=cfg.shots if mc else 0, seed=cfg.seed, workers=workers, phase_jitter=cfg.phase_jitter)


def cmd_ghz(cfg: RunConfig, report: Report, workers: int) -> None:
    if cfg.protocol != "ghz":
        raise UsageError("the ghz command runs the GHZ protocol")
    battery = bt.ghz_battery(_setup(cfg), **_engine_kwargs(cfg, workers))
    for est in battery.estimates:
        report.add_estimate("correlation", est)
    report.add("lhv_xxx_prediction", "XXX", battery.lhv_xxx_prediction, shots=battery.estimates[3].shots)
    report.add("contradiction", "XXX", float(battery.contradiction), shots=battery.estimates[3].shots)


def cmd_w(cfg: RunConfig, report: Report, workers: int) -> None:
    if cfg.protocol != "w":
        raise UsageError("the w command runs the W protocol")
    setup = _setup(cfg)
    kw = _engine_kwargs(cfg, workers)
    props = bt.w_property_probabilities(setup, flag=cfg.flag_treatment, **kw)
    for est in (props.two_minus, props.conditional_jk, props.conditional_ik):
        report.add_estimate("w_property", est)
    report.add_estimate("w_property", bt.w_all_equal_probability(setup, flag=cfg.flag_treatment, **kw))
    report.warnings.extend(props.notes)


def cmd_mermin(cfg: RunConfig, report: Report, workers: int) -> None:
    defaults = {"ghz": ("X", "Y"), "w": ("Z", "X"), "product": ("X", "Y")}
    if cfg.protocol not in defaults:
        raise UsageError("mermin needs protocol ghz, w or product")
    a = cfg.a or defaults[cfg.protocol][0]
    b = cfg.b or defaults[cfg.protocol][1]
    result = bt.mermin_value(_setup(cfg), a, b, flag=cfg.flag_treatment, **_engine_kwargs(cfg, workers))
    for est in result.terms:
        report.add_estimate("mermin_term", est)
    shots = sum(t.shots for t in result.terms)
    report.add("mermin_value", f"a={a};b={b}", result.value, result.stderr, shots)
    report.add("violated", f"a={a};b={b}", float(result.violated), shots=shots)


def cmd_timing(cfg: RunConfig, report: Report, workers: int) -> None:
    if cfg.protocol == "product":
        raise UsageError("timing needs protocol pair, ghz or w")
    timing = cfg.timing()
    report.add("formula_time", cfg.protocol, expected_time(cfg.protocol, timing, cfg.eta), engine="formula")
    if cfg.protocol == "pair":
        res = prepare_pair(cfg.phases[0], cfg.excitation(), cfg.detector(), n_max=cfg.n_max)
        report.add("success_probability", "pair", res.probability, engine="exact")
        report.add("analytic_attempts", "pair", 1.0 / res.probability, engine="exact")
        return
    flag = "erase" if cfg.protocol == "w" else "trace"
    trial = bt.attempt_trial(_setup(cfg), ("X", "X", "X"), flag)
    p = attempt_distribution(trial)
    report.add("success_probability", cfg.protocol, p, engine="exact")
    report.add("analytic_attempts", cfg.protocol, 1.0 / p, engine="exact")
    sim = simulate_attempts(trial, cfg.shots, cfg.seed, cfg.attempt_cap)
    report.add("mean_attempts", cfg.protocol, sim.mean, sim.stderr, sim.shots, engine="montecarlo")
    if cfg.protocol == "w":
        report.warnings.append(
            f"closed-form time assumes 4 rounds per success; enumeration gives {1.0 / p:.12g} rounds at this loss"
        )


HANDLERS = {"pair": cmd_pair, "ghz": cmd_ghz, "w": cmd_w, "mermin": cmd_mermin, "timing": cmd_timing}


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heraldsim", description="Heralded GHZ/W entanglement and Bell-test simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with RunConfig keys")
        p.add_argument("--protocol", choices=("pair", "ghz", "w", "product"))
        p.add_argument("--engine", choices=bt.ENGINES)
        p.add_argument("--source", choices=("ideal", "heralded"))
        p.add_argument("--shots", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--eta", type=float, help="detector loss probability")
        p.add_argument("--dark", type=float)
        p.add_argument("--pc", dest="p_c", type=float, help="emission probability per Raman pulse")
        p.add_argument("--flag-treatment", dest="flag_treatment", choices=bt.FLAG_TREATMENTS)
        p.add_argument("--t0", type=float)
        p.add_argument("--t1", type=float)
        p.add_argument("--workers", type=int, default=1, help="threads for Monte-Carlo shots (does not change results)")
        p.add_argument("--out", help="write results here instead of stdout")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        if name == "mermin":
            p.add_argument("--a", choices=bt.SETTINGS)
            p.add_argument("--b", choices=bt.SETTINGS)
    return parser


OVERRIDES = ("protocol", "engine", "source", "shots", "seed", "eta", "dark", "p_c", "flag_treatment", "t0", "t1", "a", "b")


def load_config(args: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a JSON object")
    if "protocol" not in data and args.command in ("pair", "ghz", "w"):
        data["protocol"] = args.command
    for name in OVERRIDES:
        v = getattr(args, name, None)
        if v is not None:
            data[name] = v
    try:
        cfg = RunConfig.from_mapping(data)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    if args.command in ("pair", "ghz", "w") and cfg.protocol != args.command:
        raise ConfigurationError(f"the {args.command} command cannot run protocol {cfg.protocol!r}")
    cfg.validate()
    return cfg


def write_atomically(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".heraldsim-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigurationError("--workers must be >= 1")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            cfg = load_config(args)
            report = Report(args.command, cfg)
            HANDLERS[args.command](cfg, report, args.workers)
        report.warnings[:0] = [str(w.message) for w in caught]
    except (ConfigurationError, UsageError) as exc:
        print(f"heraldsim: error: {exc}", file=stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"heraldsim: numerical failure: {exc}", file=stderr)
        return EXIT_NUMERICAL
    text = report.csv() if args.format == "csv" else report.json()
    for w in report.warnings:
        print(f"heraldsim: warning: {w}", file=stderr)
    if args.out:
        write_atomically(args.out, text)
    else:
        stdout.write(text)
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

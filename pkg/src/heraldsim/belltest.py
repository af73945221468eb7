"""Measurement stations, correlations, the GHZ battery, W-state properties and Mermin sums.

Each party owns a dual-rail qubit: ``mode_a`` holds the |0> excitation and
``mode_b`` the |1> excitation.  X and Y are read out by an interferometric
station, Z by detecting the rails (and, for W parties, the flag ensemble).

Three engines share one outcome bookkeeping:

* ``exact`` enumerates the sequential measurement tree of the full optical train,
* ``montecarlo`` walks the same tree once per shot,
* ``abstract`` projects the state onto the three-qubit coincidence subspace
  and evaluates Pauli expectations directly.

Records follow the readout convention (D_A click gives ``x = +1``; a
flag or ``mode_b`` excitation gives ``z = +1``).  Correlations use the
Pauli eigenvalue, which equals the record for X and Y and its negative
for Z.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NumericalError, UsageError
from .fock import (
    ModeRegistry,
    StateVector,
    basis_state,
    compress_environment,
    forget_modes,
    phase,
    superpose,
    tensor_all,
    with_modes,
)
from .optics import (
    BeamSplitterSpec,
    DetectorModel,
    IDEAL,
    MultiportSpec,
    beam_splitter,
    click_pattern_distribution,
    multiport,
    phase_shift,
)
from .protocols import (
    ChannelPhases,
    ExcitationParams,
    RetrievalParams,
    ghz_labels,
    ideal_pair,
    prepare_ghz_raw,
    prepare_pair,
    prepare_w_fock,
    prepare_w_raw,
    ideal_w_fock,
    retrieve,
    w_pair_labels,
)
from .sampling import Branch, OutcomeTree, SHOT_WIDTH, chunked, parallel_map, shot_uniforms, stream_key

SETTINGS = ("X", "Y", "Z")
PHASE_PLATE = {"X": 0.0, "Y": math.pi / 2}
ENGINES = ("exact", "montecarlo", "abstract")
FLAG_TREATMENTS = ("trace", "erase", "abstract")
JITTER_COLUMNS = (4, 5, 6)

Records = tuple[int, int, int]


def _photon(label: str) -> str:
    return f"{label}>ph"


@dataclass(frozen=True)
class PartyStation:
    """One party's readout.

    ``z_readout`` says how a Z setting is read: ``"flag"`` detects the
    party's flag ensemble, ``"rail"`` uses which rail clicked and
    ``"none"`` forbids Z (GHZ parties have no flag ensemble).
    """

    party: int
    mode_a: str
    mode_b: str
    flag: Optional[str] = None
    compensation: float = 0.0
    detector: DetectorModel = IDEAL
    retrieval: RetrievalParams = RetrievalParams()
    z_readout: str = "none"

    def __post_init__(self):
        modes = [self.mode_a, self.mode_b] + ([self.flag] if self.flag else [])
        if len(set(modes)) != len(modes):
            raise UsageError(f"station {self.party} modes must be distinct")
        if self.z_readout not in ("none", "flag", "rail"):
            raise UsageError(f"unknown z readout {self.z_readout!r}")
        if self.z_readout == "flag" and self.flag is None:
            raise UsageError("flag readout needs a flag mode")

    @staticmethod
    def phase_plate(setting: str) -> float:
        try:
            return PHASE_PLATE[setting]
        except KeyError:
            raise UsageError(f"setting {setting!r} is not read by the interferometric station") from None


@dataclass(frozen=True)
class BellSetup:
    """A prepared three-party state with its stations."""

    protocol: str
    state: StateVector
    stations: tuple[PartyStation, PartyStation, PartyStation]
    tag: str = ""

    @property
    def flags(self) -> tuple[Optional[str], ...]:
        return tuple(s.flag for s in self.stations)


@dataclass(frozen=True)
class StationOutcome:
    """``value`` is the ±1 record, or ``None`` for a failed coincidence (run discarded).

    A discarded run keeps the pre-measurement state; it is never measured further.
    """

    value: Optional[int]
    probability: float
    state: StateVector


@dataclass(frozen=True)
class ErasureOutcome:
    """``label`` is the index of the single firing output, ``None`` for silence or ``"multi"``."""

    label: object
    probability: float
    corrections: dict
    state: StateVector


@dataclass(frozen=True)
class CorrelationEstimate:
    settings: tuple[str, str, str]
    value: float
    stderr: float
    shots: int
    valid_fraction: float
    engine: str


@dataclass(frozen=True)
class ProbabilityEstimate:
    name: str
    value: float
    stderr: float
    shots: int
    valid_fraction: float
    engine: str


@dataclass(frozen=True)
class MerminResult:
    a: str
    b: str
    terms: tuple[CorrelationEstimate, ...]
    value: float
    stderr: float

    @property
    def violated(self) -> bool:
        return abs(self.value) > 2.0


@dataclass(frozen=True)
class GhzBattery:
    estimates: tuple[CorrelationEstimate, ...]
    lhv_xxx_prediction: float
    quantum_xxx: float

    @property
    def contradiction(self) -> bool:
        return self.lhv_xxx_prediction * self.quantum_xxx < 0


@dataclass(frozen=True)
class WProperties:
    two_minus: ProbabilityEstimate
    conditional_jk: ProbabilityEstimate
    conditional_ik: ProbabilityEstimate
    notes: tuple[str, ...] = ()


# --------------------------------------------------------------------------- setups


def _compensations(compensate: bool, values: Sequence[float]) -> list[float]:
    return [-v if compensate else 0.0 for v in values]


def ghz_setup(
    phases: ChannelPhases = ChannelPhases(),
    source: str = "ideal",
    params: ExcitationParams = ExcitationParams(),
    detector: DetectorModel = IDEAL,
    retrieval: RetrievalParams = RetrievalParams(),
    compensate: bool = True,
    wiring: str = "cyclic",
    rng: Optional[np.random.Generator] = None,
    n_max: int = 2,
) -> BellSetup:
    """Three pairs (L_i, R_i) read out by three stations.

    With ``cyclic`` wiring station i sees ``L_i`` and ``R_{i+1}`` (indices
    mod 3), so a coincidence at all stations leaves only the all-L and
    all-R branches.  ``direct`` wiring pairs ``L_i`` with ``R_i`` and
    yields a product state, kept for comparison.
    """
    pairs, effective = [], []
    for i in range(3):
        labels = ghz_labels(i + 1)
        if source == "ideal":
            pairs.append(ideal_pair(labels, phases.pair[i]))
            effective.append(phases.pair[i])
        elif source == "heralded":
            res = prepare_pair(phases.pair[i], params, detector, labels=labels, rng=rng, n_max=n_max)
            if not res.success:
                raise NumericalError(f"pair {i + 1} could not be heralded")
            pairs.append(res.state)
            effective.append(res.effective_phase)
        else:
            raise UsageError(f"unknown source {source!r}")
    state = prepare_ghz_raw(pairs)
    if wiring == "cyclic":
        partner = [(i + 1) % 3 for i in range(3)]
    elif wiring == "direct":
        partner = list(range(3))
    else:
        raise UsageError(f"unknown wiring {wiring!r}")
    comp = _compensations(compensate, [effective[p] for p in partner])
    stations = tuple(
        PartyStation(i + 1, f"L{i + 1}", f"R{partner[i] + 1}", None, comp[i], detector, retrieval)
        for i in range(3)
    )
    return BellSetup("ghz", state, stations, tag=f"ghz:{source}:{wiring}")


def w_setup(
    phases: ChannelPhases = ChannelPhases(),
    source: str = "ideal",
    params: ExcitationParams = ExcitationParams(),
    detector: DetectorModel = IDEAL,
    retrieval: RetrievalParams = RetrievalParams(),
    compensate: bool = True,
    rng: Optional[np.random.Generator] = None,
    n_max: int = 2,
) -> BellSetup:
    """Pairs (B_i, C_i) plus the shared-mode state over A_1..A_3.

    Party i reads the rails (B_i -> |0>, A_i -> |1>); C_i is its flag.
    """
    pairs, effective = [], []
    for i in range(3):
        labels = w_pair_labels(i + 1)
        if source == "ideal":
            pairs.append(ideal_pair(labels, phases.pair[i]))
            effective.append(phases.pair[i])
        elif source == "heralded":
            res = prepare_pair(phases.pair[i], params, detector, labels=labels, rng=rng, n_max=n_max)
            if not res.success:
                raise NumericalError(f"pair {i + 1} could not be heralded")
            pairs.append(res.state)
            effective.append(res.effective_phase)
        else:
            raise UsageError(f"unknown source {source!r}")
    if source == "ideal":
        fock = ideal_w_fock(phases.a2, phases.a3)
    else:
        res = prepare_w_fock(params, phases.a2, phases.a3, detector, rng=rng, n_max=n_max)
        if not res.success:
            raise NumericalError("W Fock state could not be heralded")
        fock = res.state
    state = prepare_w_raw(pairs, fock)
    a_phases = (0.0, phases.a2, phases.a3)
    comp = _compensations(compensate, [a_phases[i] + effective[i] for i in range(3)])
    stations = tuple(
        PartyStation(i + 1, f"B{i + 1}", f"A{i + 1}", f"C{i + 1}", comp[i], detector, retrieval, "flag")
        for i in range(3)
    )
    return BellSetup("w", state, stations, tag=f"w:{source}")


def product_setup(
    thetas: Sequence[float] = (0.0, 0.0, 0.0),
    phis: Sequence[float] = (0.0, 0.0, 0.0),
    detector: DetectorModel = IDEAL,
) -> BellSetup:
    """Separable fixture: qubit i is ``cos(theta_i)|0> + e^{i phi_i} sin(theta_i)|1>``.

    The default is |000>.
    """
    parts, stations = [], []
    for i in range(3):
        a, b = f"Q{i + 1}a", f"Q{i + 1}b"
        reg = ModeRegistry([a, b])
        parts.append(
            superpose([
                (math.cos(thetas[i]), basis_state(reg, {a: 1})),
                (math.sin(thetas[i]) * phase(phis[i]), basis_state(reg, {b: 1})),
            ])
        )
        stations.append(PartyStation(i + 1, a, b, None, 0.0, detector, z_readout="rail"))
    return BellSetup("product", tensor_all(parts), tuple(stations), tag="product")


def with_compensation_offsets(setup: BellSetup, offsets: Sequence[float]) -> BellSetup:
    stations = tuple(replace(s, compensation=s.compensation + float(d)) for s, d in zip(setup.stations, offsets))
    return replace(setup, stations=stations)


# --------------------------------------------------------------------------- stations


def _register_photons(state: StateVector, sources: Sequence[str]) -> StateVector:
    """Register retrieval targets roomy enough that mixing them never truncates."""
    room = sum(state.registry.n_max[state.registry.index(m)] for m in sources)
    return with_modes(state, [_photon(m) for m in sources], n_max=room)


def _pattern_value(pattern: tuple[bool, bool]) -> Optional[int]:
    return {(True, False): 1, (False, True): -1}.get(pattern)


def station_measure_xy(state: StateVector, station: PartyStation, setting: str) -> list[StationOutcome]:
    """Compensation and phase plate on ``mode_b``, a 50/50 mixer, then D_A and D_B.

    D_A alone gives +1, D_B alone -1, anything else discards the run.
    """
    plate = station.phase_plate(setting)
    pa, pb = _photon(station.mode_a), _photon(station.mode_b)
    s = _register_photons(state, [station.mode_a, station.mode_b])
    s = retrieve(s, station.mode_a, pa, station.retrieval)
    s = retrieve(s, station.mode_b, pb, station.retrieval)
    s = phase_shift(s, pb, station.compensation - math.pi / 2 - plate)
    s = beam_splitter(s, BeamSplitterSpec(pa, pb))
    outcomes, invalid = [], 0.0
    for out in click_pattern_distribution(s, [(pa, station.detector), (pb, station.detector)]):
        value = _pattern_value(out.pattern)
        if value is None or out.state is None:
            invalid += out.probability
        else:
            outcomes.append(StationOutcome(value, out.probability, out.state))
    if invalid > 0:
        outcomes.append(StationOutcome(None, invalid, state))
    return outcomes


def station_measure_z(state: StateVector, station: PartyStation, readout: Optional[str] = None) -> list[StationOutcome]:
    """Detect both rails for the coincidence, then read z.

    With the flag readout a click on the retrieved flag gives ``z = +1``
    and silence ``z = -1``; with the rail readout a ``mode_b`` click gives ``+1``.
    """
    readout = readout or station.z_readout
    if readout == "none":
        raise UsageError(f"party {station.party} has no flag ensemble: Z is not measurable")
    if readout == "flag" and station.flag is None:
        raise UsageError(f"party {station.party} has no flag ensemble")
    pa, pb = _photon(station.mode_a), _photon(station.mode_b)
    s = retrieve(state, station.mode_a, pa, station.retrieval)
    s = retrieve(s, station.mode_b, pb, station.retrieval)
    outcomes, invalid = [], 0.0
    for out in click_pattern_distribution(s, [(pa, station.detector), (pb, station.detector)]):
        rail = _pattern_value(out.pattern)
        if rail is None or out.state is None:
            invalid += out.probability
            continue
        if readout == "rail":
            outcomes.append(StationOutcome(-rail, out.probability, out.state))
            continue
        pc = _photon(station.flag)
        flagged = retrieve(out.state, station.flag, pc, station.retrieval)
        for f in click_pattern_distribution(flagged, [(pc, station.detector)]):
            if f.state is not None and f.probability > 0:
                outcomes.append(StationOutcome(1 if f.pattern[0] else -1, out.probability * f.probability, f.state))
    if invalid > 0:
        outcomes.append(StationOutcome(None, invalid, state))
    return outcomes


def erasure_station(
    state: StateVector,
    flag_modes: Sequence[str],
    detector: DetectorModel = IDEAL,
    retrieval: RetrievalParams = RetrievalParams(),
) -> list[ErasureOutcome]:
    """Retrieve the flags, mix them on a balanced multiport and detect every output.

    A single click at output m carries the correction table
    ``{flag_k: -arg U[m, k]}``: the phase that, applied to the rail
    correlated with flag k, removes the path-dependent phase the
    multiport imprinted.
    """
    photons = [_photon(f) for f in flag_modes]
    s = _register_photons(state, flag_modes)
    for f, p in zip(flag_modes, photons):
        s = retrieve(s, f, p, retrieval)
    if len(photons) >= 2:
        spec = MultiportSpec(tuple(photons))
        u = spec.matrix()
        s = multiport(s, spec)
    else:
        u = np.ones((1, 1))
    outcomes = []
    for out in click_pattern_distribution(s, [(p, detector) for p in photons]):
        if out.state is None or out.probability <= 0:
            continue
        fired = [m for m, c in enumerate(out.pattern) if c]
        if len(fired) == 1:
            m = fired[0]
            table = {f: -float(np.angle(u[m, k])) for k, f in enumerate(flag_modes)}
            outcomes.append(ErasureOutcome(m, out.probability, table, out.state))
        else:
            outcomes.append(ErasureOutcome(None if not fired else "multi", out.probability, {}, out.state))
    return outcomes


# --------------------------------------------------------------------------- trees


def _check_settings(settings: Sequence[str]) -> tuple[str, str, str]:
    settings = tuple(settings)
    if len(settings) != 3 or any(s not in SETTINGS for s in settings):
        raise UsageError(f"settings must be three of {SETTINGS}, got {settings!r}")
    return settings


def _default_flag(engine: str, flag: Optional[str]) -> str:
    if flag is None:
        return "abstract" if engine == "abstract" else "trace"
    if flag not in FLAG_TREATMENTS:
        raise UsageError(f"unknown flag treatment {flag!r}")
    return flag


def _treated(setup: BellSetup, flag: str) -> BellSetup:
    """Apply the abstract flag treatment.

    Keep the branch with exactly one flag excitation (the count the erase
    treatment measures), remove the flag modes coherently and read Z from
    the rails.
    """
    if flag != "abstract" or setup.protocol != "w":
        return setup
    flags = [f for f in setup.flags if f]
    idx = [setup.state.registry.index(f) for f in flags]
    kept = {occ: a for occ, a in setup.state.items() if sum(occ[i] for i in idx) == 1}
    if not kept:
        raise NumericalError("no branch holds exactly one flag excitation")
    state = forget_modes(StateVector(setup.state.registry, kept, setup.state.leakage), flags)
    stations = tuple(replace(s, flag=None, z_readout="rail") for s in setup.stations)
    return replace(setup, state=state, stations=stations)


def _live(stations: Sequence[PartyStation], flags: bool = True) -> list[str]:
    """Modes that later steps still read."""
    out = []
    for st in stations:
        out += [st.mode_a, st.mode_b] + ([st.flag] if st.flag and flags else [])
    return out


def _station_step(station: PartyStation, setting: str, live: Sequence[str]):
    def step(state, path):
        if setting == "Z":
            outs = station_measure_z(state, station)
        else:
            outs = station_measure_xy(state, station, setting)
        return [
            Branch(o.value, o.probability, o.state if o.value is None else compress_environment(o.state, live), terminal=o.value is None)
            for o in outs
        ]

    return step


def _erasure_step(setup: BellSetup, parties: Sequence[int]):
    stations = [setup.stations[i] for i in parties]
    rail = {s.flag: s.mode_b for s in stations}
    erased = set(rail)
    live = [m for m in _live(setup.stations) if m not in erased]

    def step(state, path):
        branches = []
        for out in erasure_station(state, [s.flag for s in stations], stations[0].detector, stations[0].retrieval):
            s = out.state
            for f, angle in out.corrections.items():
                s = phase_shift(s, rail[f], angle)
            branches.append(Branch(("erase", out.label), out.probability, compress_environment(s, live)))
        return branches

    return step


def measurement_tree(setup: BellSetup, settings: Sequence[str], flag: str = "trace") -> OutcomeTree:
    """Sequential tree: an optional erasure step, then stations 1, 2, 3."""
    settings = _check_settings(settings)
    for st, s in zip(setup.stations, settings):
        if s == "Z" and st.z_readout == "none":
            raise UsageError(f"party {st.party} has no flag ensemble: Z is not measurable")
    setup = _treated(setup, flag)
    steps = []
    if flag == "erase" and setup.protocol == "w":
        xy = [i for i, s in enumerate(settings) if s != "Z" and setup.stations[i].flag]
        if xy:
            steps.append(_erasure_step(setup, xy))
    # Heralds, lost photons and measured stations leave modes nothing reads
    # again; folding them into one Schmidt register keeps the trees small.
    st = setup.stations
    steps += [_station_step(st[k], s, _live(st[k + 1 :])) for k, s in enumerate(settings)]
    return OutcomeTree(compress_environment(setup.state, _live(st)), steps)


def _records(path: tuple, flag_parties: Sequence[int] = (), count_flags: bool = False) -> Optional[Records]:
    """Station records of a leaf path, or ``None`` for a discarded run.

    With ``count_flags`` the run also needs exactly one flag click in
    total: erasure outputs plus the flag readouts of ``flag_parties``.
    Without it, two photons bunching into one detector of a station can
    pass as that station's single click.
    """
    erased = [v[1] for v in path if isinstance(v, tuple) and v and v[0] == "erase"]
    values = tuple(v for v in path if not (isinstance(v, tuple) and v and v[0] == "erase"))
    if len(values) != 3 or any(v is None for v in values):
        return None
    if count_flags:
        clicks = sum(values[i] == 1 for i in flag_parties)
        for e in erased:
            clicks += 0 if e is None else (2 if e == "multi" else 1)
        if clicks != 1:
            return None
    return values


def _record_reader(setup: BellSetup, settings: Sequence[str], flag: str) -> Callable[[tuple], Optional[Records]]:
    if flag != "erase" or setup.protocol != "w":
        return _records
    parties = [i for i, s in enumerate(settings) if s == "Z" and setup.stations[i].z_readout == "flag"]
    return lambda path: _records(path, parties, True)


# --------------------------------------------------------------------------- tallies


@dataclass(frozen=True)
class Tally:
    """Distribution over records (``None`` = discarded run), as probabilities or shot counts."""

    entries: tuple[tuple[Optional[Records], float], ...]
    shots: int  # 0 for exact distributions
    engine: str

    @property
    def valid_fraction(self) -> float:
        total = math.fsum(w for _, w in self.entries)
        return math.fsum(w for r, w in self.entries if r is not None) / total

    def expect(self, fn: Callable[[Records], Optional[float]], what: str = "estimate") -> tuple[float, float, int]:
        """Mean of ``fn`` over valid records where it is not ``None``.

        Returns (value, stderr, shots used); stderr is zero for exact tallies.
        """
        vals = [(fn(r), w) for r, w in self.entries if r is not None]
        vals = [(v, w) for v, w in vals if v is not None]
        weight = math.fsum(w for _, w in vals)
        if weight <= 0:
            raise NumericalError(f"{what}: conditioning event has zero probability")
        mean = math.fsum(v * w for v, w in vals) / weight
        if not self.shots:
            return mean, 0.0, 0
        n = int(round(weight))
        if n < 2:
            return mean, 0.0, n
        var = math.fsum(w * (v - mean) ** 2 for v, w in vals) / (n - 1)
        return mean, math.sqrt(var / n), n


def exact_tally(setup: BellSetup, settings: Sequence[str], flag: str = "trace") -> Tally:
    tree = measurement_tree(setup, settings, flag)
    read = _record_reader(setup, tuple(settings), flag)
    acc: dict = {}
    for path, p in tree.enumerate():
        r = read(path)
        acc[r] = acc.get(r, 0.0) + p
    return Tally(_sorted_entries(acc), 0, "exact")


def _sorted_entries(acc: dict) -> tuple:
    return tuple(sorted(acc.items(), key=lambda kv: (kv[0] is None, kv[0] or ())))


def sample_records(
    setup: BellSetup,
    settings: Sequence[str],
    shots: int,
    seed: int,
    flag: str = "trace",
    workers: int = 1,
    phase_jitter: float = 0.0,
) -> np.ndarray:
    """Per-shot records, shape ``(shots, 3)``, with 0 marking a discarded run.

    Shot k always consumes uniforms block k of the stream keyed by
    ``(seed, setup tag, settings, flag)``, so the result does not depend
    on ``workers``.  A nonzero ``phase_jitter`` adds a uniform offset of
    that full width to each station's compensation, redrawn per shot.
    """
    if shots < 1:
        raise UsageError("shots must be >= 1")
    settings = _check_settings(settings)
    key = stream_key(seed, setup.tag, "".join(settings), flag)
    shared = None if phase_jitter else measurement_tree(setup, settings, flag)
    read = _record_reader(setup, settings, flag)

    def run(start: int, count: int) -> np.ndarray:
        u = shot_uniforms(key, start, count)
        out = np.zeros((count, 3), dtype=np.int8)
        if shared is not None:
            leaves = shared.sample(u)
            cache: dict = {}
            for k, leaf in enumerate(leaves):
                leaf = int(leaf)
                if leaf not in cache:
                    cache[leaf] = read(shared.path(leaf))
                if cache[leaf] is not None:
                    out[k] = cache[leaf]
            return out
        for k in range(count):
            offsets = phase_jitter * (u[k, list(JITTER_COLUMNS)] - 0.5)
            tree = measurement_tree(with_compensation_offsets(setup, offsets), settings, flag)
            r = read(tree.path(int(tree.sample(u[k : k + 1])[0])))
            if r is not None:
                out[k] = r
        return out

    return np.concatenate(parallel_map(run, chunked(shots, workers), workers))


def montecarlo_tally(setup: BellSetup, settings, shots: int, seed: int, flag: str = "trace", workers: int = 1, phase_jitter: float = 0.0) -> Tally:
    rec = sample_records(setup, settings, shots, seed, flag, workers, phase_jitter)
    rows, counts = np.unique(rec, axis=0, return_counts=True)
    acc = {}
    for row, c in zip(rows, counts):
        key = None if not row.all() else tuple(int(v) for v in row)
        acc[key] = acc.get(key, 0) + float(c)
    return Tally(_sorted_entries(acc), shots, "montecarlo")


# --------------------------------------------------------------------------- abstract engine

_PAULI = {
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]]),
    "Z": np.diag([1.0 + 0j, -1.0]),
}


def qubit_density(setup: BellSetup, flag: str = "abstract") -> tuple[np.ndarray, float]:
    """Coincidence-subspace density matrix over the three dual-rail qubits, and its weight.

    Terms with exactly one excitation per station are kept; every other
    mode is environment and is traced out.  Compensation phases are
    applied to the |1> rails.
    """
    if flag == "erase":
        raise UsageError("the abstract engine has no erasure station; use flag 'abstract' or 'trace'")
    total = setup.state.norm_squared()
    setup = _treated(setup, flag)
    state = setup.state
    reg = state.registry
    rails = [(reg.index(s.mode_a), reg.index(s.mode_b)) for s in setup.stations]
    used = {i for pair in rails for i in pair}
    env_idx = [i for i in range(len(reg)) if i not in used]
    comp = [phase(s.compensation) for s in setup.stations]
    vectors: dict = {}
    for occ, amp in state.items():
        bits = []
        for ia, ib in rails:
            if occ[ia] + occ[ib] != 1:
                break
            bits.append(occ[ib])
        else:
            index = bits[0] * 4 + bits[1] * 2 + bits[2]
            a = amp
            for b, c in zip(bits, comp):
                if b:
                    a *= c
            vec = vectors.setdefault(tuple(occ[i] for i in env_idx), np.zeros(8, dtype=complex))
            vec[index] += a
    rho = sum((np.outer(v, v.conj()) for v in vectors.values()), np.zeros((8, 8), dtype=complex))
    weight = float(np.real(np.trace(rho))) / total
    if weight <= 1e-14:
        raise NumericalError("state has no weight in the coincidence subspace")
    return rho / np.trace(rho).real, weight


def reference_qubits(protocol: str, phi_r: float = 0.0) -> np.ndarray:
    """Ideal three-qubit GHZ ``(|000> + e^{i phi_r}|111>)/sqrt(2)`` or W ``(|001>+|010>+|100>)/sqrt(3)``."""
    v = np.zeros(8, dtype=complex)
    if protocol == "ghz":
        v[0] = 1 / math.sqrt(2)
        v[7] = phase(phi_r) / math.sqrt(2)
    elif protocol == "w":
        v[[1, 2, 4]] = 1 / math.sqrt(3)
    else:
        raise UsageError(f"no reference state for {protocol!r}")
    return v


def _record_sign(setting: str, eigen: int) -> int:
    return -eigen if setting == "Z" else eigen


def density_tally(rho: np.ndarray, settings: Sequence[str], weight: float = 1.0) -> Tally:
    """Record distribution of local Pauli measurements on a three-qubit density matrix."""
    settings = _check_settings(settings)
    acc = {}
    for eig in itertools.product((1, -1), repeat=3):
        proj = np.array([[1.0 + 0j]])
        for s, e in zip(settings, eig):
            proj = np.kron(proj, (np.eye(2) + e * _PAULI[s]) / 2)
        p = max(0.0, float(np.real(np.trace(rho @ proj))))
        rec = tuple(_record_sign(s, e) for s, e in zip(settings, eig))
        acc[rec] = acc.get(rec, 0.0) + p * weight
    if weight < 1.0:
        acc[None] = 1.0 - weight
    return Tally(_sorted_entries(acc), 0, "abstract")


def abstract_tally(setup: BellSetup, settings: Sequence[str], flag: str = "abstract") -> Tally:
    _check_settings(settings)
    for st, s in zip(setup.stations, settings):
        if s == "Z" and st.z_readout == "none":
            raise UsageError(f"party {st.party} has no flag ensemble: Z is not measurable")
    rho, weight = qubit_density(setup, flag)
    return density_tally(rho, settings, weight)


# --------------------------------------------------------------------------- estimators


def tally(
    setup: BellSetup,
    settings: Sequence[str],
    engine: str = "exact",
    flag: Optional[str] = None,
    shots: int = 0,
    seed: int = 0,
    workers: int = 1,
    phase_jitter: float = 0.0,
) -> Tally:
    flag = _default_flag(engine, flag)
    if engine == "exact":
        return exact_tally(setup, settings, flag)
    if engine == "abstract":
        return abstract_tally(setup, settings, flag)
    if engine == "montecarlo":
        return montecarlo_tally(setup, settings, shots, seed, flag, workers, phase_jitter)
    raise UsageError(f"unknown engine {engine!r}")


def pauli_product(settings: Sequence[str]) -> Callable[[Records], float]:
    signs = [-1 if s == "Z" else 1 for s in settings]
    return lambda r: float(np.prod([g * v for g, v in zip(signs, r)]))


def correlation_from(t: Tally, settings: Sequence[str]) -> CorrelationEstimate:
    settings = tuple(settings)
    value, stderr, n = t.expect(pauli_product(settings), "correlation")
    return CorrelationEstimate(settings, value, stderr, t.shots, t.valid_fraction, t.engine)


def exact_correlation(setup: BellSetup, settings: Sequence[str], flag: Optional[str] = None) -> CorrelationEstimate:
    """E(a1 a2 a3) conditioned on a coincidence at every station, by enumeration."""
    return correlation_from(tally(setup, settings, "exact", flag), settings)


def abstract_correlation(setup: BellSetup, settings: Sequence[str], flag: Optional[str] = None) -> CorrelationEstimate:
    return correlation_from(tally(setup, settings, "abstract", flag), settings)


def sample_correlation(
    setup: BellSetup,
    settings: Sequence[str],
    shots: int,
    seed: int,
    flag: Optional[str] = None,
    workers: int = 1,
    phase_jitter: float = 0.0,
) -> CorrelationEstimate:
    return correlation_from(tally(setup, settings, "montecarlo", flag, shots, seed, workers, phase_jitter), settings)


def correlation(
    setup: BellSetup, settings, engine: str = "exact", flag=None, shots: int = 0, seed: int = 0, workers: int = 1, phase_jitter: float = 0.0
) -> CorrelationEstimate:
    return correlation_from(tally(setup, settings, engine, flag, shots, seed, workers, phase_jitter), settings)


GHZ_BATTERY = (("Y", "Y", "X"), ("Y", "X", "Y"), ("X", "Y", "Y"), ("X", "X", "X"))


def ghz_battery(
    setup: BellSetup, engine: str = "exact", shots: int = 0, seed: int = 0, workers: int = 1, phase_jitter: float = 0.0
) -> GhzBattery:
    """The four GHZ experiments and the local-realist forecast for XXX.

    Under local realism ``(y1 y2 x3)(y1 x2 y3)(x1 y2 y3) = x1 x2 x3``, so the
    forecast is the product of the first three measured correlations.
    """
    if setup.protocol != "ghz":
        raise UsageError("ghz_battery needs a GHZ setup")
    est = tuple(correlation(setup, s, engine, None, shots, seed, workers, phase_jitter) for s in GHZ_BATTERY)
    lhv = est[0].value * est[1].value * est[2].value
    return GhzBattery(est, lhv, est[3].value)


def _probability(t: Tally, name: str, fn) -> ProbabilityEstimate:
    value, stderr, n = t.expect(fn, name)
    return ProbabilityEstimate(name, value, stderr, n if t.shots else 0, t.valid_fraction, t.engine)


def _mean_estimates(name: str, parts: Sequence[ProbabilityEstimate]) -> ProbabilityEstimate:
    k = len(parts)
    return ProbabilityEstimate(
        name,
        math.fsum(p.value for p in parts) / k,
        math.sqrt(math.fsum(p.stderr ** 2 for p in parts)) / k,
        sum(p.shots for p in parts),
        math.fsum(p.valid_fraction for p in parts) / k,
        parts[0].engine,
    )


def _need_w(setup: BellSetup) -> None:
    if setup.protocol != "w":
        raise UsageError("W-state properties need a W setup")


def w_property_probabilities(
    setup: BellSetup,
    engine: str = "exact",
    flag: Optional[str] = None,
    shots: int = 0,
    seed: int = 0,
    workers: int = 1,
    phase_jitter: float = 0.0,
) -> WProperties:
    """P(exactly two z = -1 under ZZZ) and the symmetrized P(x_j = x_k | z_i = -1).

    The conditional is measured with Z on party i and X on the other two
    and averaged over the three choices of i; the two conditional entries
    are the same average listed under both labellings.
    """
    _need_w(setup)
    flag = _default_flag(engine, flag)
    zzz = tally(setup, "ZZZ", engine, flag, shots, seed, workers, phase_jitter)
    two = _probability(zzz, "P(two z=-1)", lambda r: float(sum(v == -1 for v in r) == 2))
    parts = []
    for i in range(3):
        settings = ["X"] * 3
        settings[i] = "Z"
        j, k = [m for m in range(3) if m != i]
        t = tally(setup, settings, engine, flag, shots, seed, workers, phase_jitter)
        parts.append(_probability(t, f"P(x{j + 1}=x{k + 1}|z{i + 1}=-1)", lambda r, i=i, j=j, k=k: None if r[i] != -1 else float(r[j] == r[k])))
    cond = _mean_estimates("P(x_j=x_k|z_i=-1)", parts)
    notes = ()
    if flag == "trace":
        notes = ("flag ensembles left unmeasured carry which-path information: the conditionals fall from 1 to 1/2",)
    return WProperties(two, cond, replace(cond, name="P(x_i=x_k|z_j=-1)"), notes)


def w_all_equal_probability(
    setup: BellSetup,
    engine: str = "exact",
    flag: Optional[str] = None,
    shots: int = 0,
    seed: int = 0,
    workers: int = 1,
    phase_jitter: float = 0.0,
) -> ProbabilityEstimate:
    """P(x1 = x2 = x3) under XXX, conditioned on coincidence."""
    _need_w(setup)
    t = tally(setup, "XXX", engine, flag, shots, seed, workers, phase_jitter)
    return _probability(t, "P(x1=x2=x3)", lambda r: float(r[0] == r[1] == r[2]))


def mermin_value(
    setup: BellSetup,
    a: str,
    b: str,
    engine: str = "exact",
    flag: Optional[str] = None,
    shots: int = 0,
    seed: int = 0,
    workers: int = 1,
    phase_jitter: float = 0.0,
) -> MerminResult:
    """<a a a> - <a b b> - <b a b> - <b b a>; local realism bounds it by 2 in magnitude."""
    terms = tuple(correlation(setup, s, engine, flag, shots, seed, workers, phase_jitter) for s in ((a, a, a), (a, b, b), (b, a, b), (b, b, a)))
    value = terms[0].value - terms[1].value - terms[2].value - terms[3].value
    stderr = math.sqrt(math.fsum(t.stderr ** 2 for t in terms))
    return MerminResult(a, b, terms, value, stderr)


# --------------------------------------------------------------------------- attempts


@dataclass
class AttemptTrial:
    """One post-selection round: success means a coincidence at every station."""

    tree: OutcomeTree
    tag: str
    reader: Callable[[tuple], Optional[Records]] = _records
    depth: int = field(init=False)

    def __post_init__(self):
        self.depth = len(self.tree.steps)

    def succeeded(self, path: tuple) -> bool:
        return self.reader(path) is not None

    def enumerate(self):
        return self.tree.enumerate()


def attempt_trial(setup: BellSetup, settings: Sequence[str] = ("X", "X", "X"), flag: str = "trace") -> AttemptTrial:
    settings = _check_settings(settings)
    return AttemptTrial(
        measurement_tree(setup, settings, flag), f"{setup.tag}:{''.join(settings)}:{flag}", _record_reader(setup, settings, flag)
    )

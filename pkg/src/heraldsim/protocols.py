"""Preparation procedures for pair, GHZ and W entanglement between ensembles.

Ensemble collective modes and their forward-scattered Stokes modes are
bosonic modes of one :class:`~heraldsim.fock.StateVector`.  A weak Raman
pulse is kept to second order in ``sqrt(p_c)`` so the double-excitation
contamination that the weak-pulse condition suppresses stays visible.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, NumericalError, UsageError
from .fock import (
    ModeRegistry,
    StateVector,
    ZERO_NORM_THRESHOLD,
    apply_create,
    basis_state,
    normalize,
    phase,
    superpose,
    tensor_all,
    vacuum,
    with_modes,
)
from .optics import (
    BeamSplitterSpec,
    DetectorModel,
    IDEAL,
    apply_loss,
    beam_splitter,
    click_pattern_distribution,
    click_probabilities,
    phase_shift,
)
from .sampling import shot_generator, stream_key

DEFAULT_ATTEMPT_CAP = 10**6
ATTEMPT_BATCH = 64  # rounds drawn at once from a shot's stream


@dataclass(frozen=True)
class ExcitationParams:
    p_c: float = 1e-3
    phase: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p_c <= 0.2:
            raise ConfigurationError(f"emission probability p_c={self.p_c} outside [0, 0.2]")
        if self.p_c > 0.1:
            warnings.warn(f"p_c={self.p_c} is not small; double excitations are significant", stacklevel=3)


@dataclass(frozen=True)
class ChannelPhases:
    """Unknown channel phases: one per pair, plus the two shared-channel W phases."""

    pair: tuple[float, float, float] = (0.0, 0.0, 0.0)
    a2: float = 0.0
    a3: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "pair", tuple(float(p) for p in self.pair))
        if len(self.pair) != 3:
            raise ConfigurationError("ChannelPhases.pair needs three phases")

    @property
    def phi_r(self) -> float:
        return sum(self.pair)


@dataclass(frozen=True)
class TimingParams:
    t0: float = 1.0
    t1: float = 1.0

    def __post_init__(self):
        if self.t0 <= 0 or self.t1 <= 0:
            raise ConfigurationError("preparation times must be positive")


@dataclass(frozen=True)
class RetrievalParams:
    efficiency: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ConfigurationError(f"retrieval efficiency {self.efficiency} outside [0, 1]")


@dataclass(frozen=True)
class HeraldResult:
    """Outcome of one heralded preparation.

    ``state`` is the conditional state for ``click_pattern`` (it still
    contains the Stokes modes and any detector ancillas).
    ``effective_phase`` is the relative phase of the second ensemble's
    excitation in that state, fixed by the channel phase and by which
    detector fired.  ``branches`` lists every heralding pattern.
    """

    success: bool
    state: Optional[StateVector]
    probability: float
    click_pattern: tuple[bool, ...]
    attempts: int = 1
    effective_phase: float = 0.0
    branches: tuple = field(default=(), repr=False)


def _stokes(label: str) -> str:
    return f"{label}:stokes"


def raman_excite(
    state: StateVector, ensemble_mode: str, photon_mode: str, params: ExcitationParams, *, shared: bool = False
) -> StateVector:
    """Apply ``1 + x S^dag b^dag + (x^2/2)(S^dag b^dag)^2`` with ``x = sqrt(p_c) e^{i phase}``, then normalize.

    ``shared=True`` lifts the vacuum requirement on the photon mode, for
    several ensembles scattering into one Stokes mode.
    """
    if not shared and any(occ[state.registry.index(photon_mode)] for occ, _ in state.items()):
        raise UsageError(f"photon mode {photon_mode!r} is not in vacuum")
    x = math.sqrt(params.p_c) * phase(params.phase)
    once = apply_create(apply_create(state, ensemble_mode), photon_mode)
    twice = apply_create(apply_create(once, ensemble_mode), photon_mode)
    return normalize(superpose([(1.0, state), (x, once), (x * x / 2, twice)]))


def ideal_pair(labels: tuple[str, str], phi: float = 0.0) -> StateVector:
    """(S_1^dag + e^{i phi} S_2^dag)|vac>/sqrt(2) over the two ensemble modes."""
    reg = ModeRegistry(labels)
    s = 1 / math.sqrt(2)
    return superpose([(s, basis_state(reg, {labels[0]: 1})), (s * phase(phi), basis_state(reg, {labels[1]: 1}))])


def prepare_pair(
    phi: float = 0.0,
    params: ExcitationParams = ExcitationParams(),
    detector: DetectorModel = IDEAL,
    labels: tuple[str, str] = ("L", "R"),
    rng: Optional[np.random.Generator] = None,
    n_max: int = 2,
) -> HeraldResult:
    """Excite both ensembles, mix the Stokes light 50/50, herald on exactly one click.

    Without ``rng`` the first detector's branch is returned (the two are
    mirror images up to a known phase); with ``rng`` one is drawn.
    """
    left, right = labels
    sl, sr = _stokes(left), _stokes(right)
    state = vacuum(ModeRegistry([left, right, sl, sr], n_max=n_max))
    state = raman_excite(state, left, sl, params)
    state = raman_excite(state, right, sr, params)
    state = phase_shift(state, sr, phi)
    state = beam_splitter(state, BeamSplitterSpec(sl, sr))
    detectors = [(sl, detector), (sr, detector)]
    herald = {(True, False): phi + math.pi / 2, (False, True): phi - math.pi / 2}
    povm = click_probabilities(state, detectors)
    total = sum(povm[p] for p in herald)
    outcomes = {o.pattern: o for o in click_pattern_distribution(state, detectors)}
    branches = tuple((p, outcomes[p].probability, outcomes[p].state, eff) for p, eff in herald.items())
    return _choose(branches, total, rng)


def _choose(branches, total, rng) -> HeraldResult:
    live = [b for b in branches if b[1] > ZERO_NORM_THRESHOLD and b[2] is not None]
    if total <= ZERO_NORM_THRESHOLD or not live:
        return HeraldResult(False, None, 0.0, (), branches=branches)
    if rng is None:
        pick = live[0]
    else:
        weights = np.array([b[1] for b in live])
        pick = live[int(np.searchsorted(np.cumsum(weights) / weights.sum(), rng.random(), side="right"))]
    pattern, _, state, eff = pick
    return HeraldResult(True, state, total, pattern, effective_phase=eff, branches=branches)


def prepare_ghz_raw(pairs: Sequence[Union[StateVector, HeraldResult]]) -> StateVector:
    """Product of three pair states (six ensembles, plus any heralding modes they carry)."""
    states = [p.state if isinstance(p, HeraldResult) else p for p in pairs]
    if len(states) != 3 or any(s is None for s in states):
        raise UsageError("prepare_ghz_raw needs three prepared pair states")
    return tensor_all(states)


def ghz_labels(i: int) -> tuple[str, str]:
    return f"L{i}", f"R{i}"


def ideal_ghz_raw(phases: ChannelPhases = ChannelPhases()) -> StateVector:
    return prepare_ghz_raw([ideal_pair(ghz_labels(i + 1), phases.pair[i]) for i in range(3)])


def extract_coincidence_component(state: StateVector, pairs: Sequence[tuple[str, str]]) -> tuple[float, StateVector]:
    """Project onto one excitation in each listed mode pair.

    Returns the subspace weight and the normalized component.
    """
    flat = [m for p in pairs for m in p]
    if len(set(flat)) != len(flat):
        raise UsageError("coincidence pairs must be disjoint")
    idx = [(state.registry.index(a), state.registry.index(b)) for a, b in pairs]
    kept = {occ: amp for occ, amp in state.items() if all(occ[i] + occ[j] == 1 for i, j in idx)}
    comp = StateVector(state.registry, kept)
    weight = comp.norm_squared() / state.norm_squared()
    if weight < ZERO_NORM_THRESHOLD:
        raise NumericalError("coincidence component has zero weight")
    return weight, normalize(comp)


def ghz_target(phi_r: float = 0.0) -> StateVector:
    """(prod S_L^dag + e^{i phi_r} prod S_R^dag)|vac>/sqrt(2) over L1, R1, L2, R2, L3, R3."""
    labels = [m for i in range(1, 4) for m in ghz_labels(i)]
    reg = ModeRegistry(labels)
    s = 1 / math.sqrt(2)
    return superpose([
        (s, basis_state(reg, {"L1": 1, "L2": 1, "L3": 1})),
        (s * phase(phi_r), basis_state(reg, {"R1": 1, "R2": 1, "R3": 1})),
    ])


W_FOCK_LABELS = ("A1", "A2", "A3")
W_STOKES = "A:stokes"


def prepare_w_fock(
    params: ExcitationParams = ExcitationParams(),
    phi_a2: float = 0.0,
    phi_a3: float = 0.0,
    detector: DetectorModel = IDEAL,
    labels: tuple[str, str, str] = W_FOCK_LABELS,
    rng: Optional[np.random.Generator] = None,
    n_max: int = 2,
) -> HeraldResult:
    """Three ensembles in a line scatter into one shared Stokes mode; herald on its click."""
    stokes = W_STOKES
    state = vacuum(ModeRegistry(list(labels) + [stokes], n_max=n_max))
    for label, phi in zip(labels, (0.0, phi_a2, phi_a3)):
        p = ExcitationParams(params.p_c, params.phase + phi)
        state = raman_excite(state, label, stokes, p, shared=True)
    povm = click_probabilities(state, [(stokes, detector)])
    branches = tuple(
        (o.pattern, o.probability, o.state, 0.0)
        for o in click_pattern_distribution(state, [(stokes, detector)])
        if o.pattern == (True,)
    )
    return _choose(branches, povm[(True,)], rng)


def ideal_w_fock(phi_a2: float = 0.0, phi_a3: float = 0.0, labels=W_FOCK_LABELS) -> StateVector:
    reg = ModeRegistry(labels)
    s = 1 / math.sqrt(3)
    return superpose([
        (s, basis_state(reg, {labels[0]: 1})),
        (s * phase(phi_a2), basis_state(reg, {labels[1]: 1})),
        (s * phase(phi_a3), basis_state(reg, {labels[2]: 1})),
    ])


def w_pair_labels(i: int) -> tuple[str, str]:
    return f"B{i}", f"C{i}"


def prepare_w_raw(pairs: Sequence[Union[StateVector, HeraldResult]], w_fock: Union[StateVector, HeraldResult]) -> StateVector:
    """|Psi_1>|Psi_2>|Psi_3>|Psi_A> over the nine ensembles (plus heralding modes)."""
    states = [p.state if isinstance(p, HeraldResult) else p for p in pairs]
    fock = w_fock.state if isinstance(w_fock, HeraldResult) else w_fock
    if len(states) != 3 or fock is None or any(s is None for s in states):
        raise UsageError("prepare_w_raw needs three pair states and one W Fock state")
    return tensor_all(states + [fock])


def ideal_w_raw(phases: ChannelPhases = ChannelPhases()) -> StateVector:
    pairs = [ideal_pair(w_pair_labels(i + 1), phases.pair[i]) for i in range(3)]
    return prepare_w_raw(pairs, ideal_w_fock(phases.a2, phases.a3))


def w_target(phases: ChannelPhases = ChannelPhases()) -> StateVector:
    """The one-excitation-per-(A_i, B_i) component of the nine-ensemble state."""
    labels = [*(m for i in range(1, 4) for m in w_pair_labels(i)), *W_FOCK_LABELS]
    reg = ModeRegistry(labels)
    p1, p2, p3 = phases.pair
    s = 1 / math.sqrt(3)
    return superpose([
        (s * phase(p1), basis_state(reg, {"A1": 1, "B2": 1, "B3": 1, "C1": 1})),
        (s * phase(phases.a2 + p2), basis_state(reg, {"A2": 1, "B1": 1, "B3": 1, "C2": 1})),
        (s * phase(phases.a3 + p3), basis_state(reg, {"A3": 1, "B1": 1, "B2": 1, "C3": 1})),
    ])


def retrieve(state: StateVector, ensemble_mode: str, photon_mode: str, params: RetrievalParams = RetrievalParams()) -> StateVector:
    """Map the stored excitation of ``ensemble_mode`` onto ``photon_mode``.

    The photon mode is registered on demand and must be empty.  With
    efficiency below one, a loss channel follows the transfer.
    """
    state = with_modes(state, [photon_mode], n_max=state.registry.n_max[state.registry.index(ensemble_mode)])
    i, j = state.registry.index(ensemble_mode), state.registry.index(photon_mode)
    if any(occ[j] for occ, _ in state.items()):
        raise UsageError(f"retrieval target {photon_mode!r} is not in vacuum")
    if state.registry.n_max[j] < state.registry.n_max[i]:
        raise UsageError("retrieval target truncation is smaller than the ensemble's")
    moved = {}
    for occ, amp in state.items():
        new = list(occ)
        new[i], new[j] = 0, occ[i]
        moved[tuple(new)] = amp
    state = StateVector(state.registry, moved, state.leakage)
    if params.efficiency < 1.0:
        loss_label = state.registry.fresh_label(f"{photon_mode}~retrieval")
        state = with_modes(state, [loss_label], n_max=state.registry.n_max[j])
        state = apply_loss(state, photon_mode, 1.0 - params.efficiency, loss_label)
    return state


def expected_time(protocol: str, timing: TimingParams, eta: float) -> float:
    """Closed-form registration times: ``t0`` for a pair, ``4 t0/(1-eta)^3`` (GHZ), ``4 max(t0,t1)/(1-eta)^3`` (W)."""
    if not 0.0 <= eta < 1.0:
        raise UsageError(f"loss eta={eta} must lie in [0, 1): the expected time diverges")
    if protocol == "pair":
        return timing.t0
    if protocol == "ghz":
        return 4 * timing.t0 / (1 - eta) ** 3
    if protocol == "w":
        return 4 * max(timing.t0, timing.t1) / (1 - eta) ** 3
    raise UsageError(f"unknown protocol {protocol!r}")


@dataclass(frozen=True)
class AttemptSamples:
    samples: np.ndarray
    mean: float
    stderr: float
    success_probability: float

    @property
    def shots(self) -> int:
        return len(self.samples)


def attempt_distribution(trial) -> float:
    """Exact success probability of one attempt, by enumerating its outcome tree."""
    return math.fsum(p for path, p in trial.enumerate() if trial.succeeded(path))


def simulate_attempts(trial, shots: int, seed: int, attempt_cap: int = DEFAULT_ATTEMPT_CAP) -> AttemptSamples:
    """Repeat ``trial`` with fresh per-shot randomness until it succeeds.

    ``trial`` is an :class:`~heraldsim.belltest.AttemptTrial` (or anything
    with ``tree``, ``succeeded(path)`` and ``depth``).  Each shot draws
    from its own counter-based stream, so samples do not depend on order.
    """
    if shots < 1:
        raise UsageError("shots must be >= 1")
    p = attempt_distribution(trial)
    if p <= 0:
        raise NumericalError("attempt success probability is zero")
    key = stream_key(seed, "attempts", trial.tag)
    depth = trial.depth
    success_cache: dict[int, bool] = {}
    samples = np.empty(shots, dtype=np.int64)
    for shot in range(shots):
        gen = shot_generator(key, shot)
        done = 0
        while True:
            if done >= attempt_cap:
                raise NumericalError(f"attempt cap {attempt_cap} reached without success")
            leaves = trial.tree.sample(gen.random((ATTEMPT_BATCH, depth)))
            hits = []
            for k, leaf in enumerate(leaves):
                leaf = int(leaf)
                ok = success_cache.get(leaf)
                if ok is None:
                    ok = success_cache[leaf] = trial.succeeded(trial.tree.path(leaf))
                if ok:
                    hits.append(k)
                    break
            if hits and done + hits[0] < attempt_cap:
                samples[shot] = done + hits[0] + 1
                break
            done += ATTEMPT_BATCH
    mean = float(samples.mean())
    stderr = float(samples.std(ddof=1) / math.sqrt(shots)) if shots > 1 else 0.0
    return AttemptSamples(samples, mean, stderr, p)

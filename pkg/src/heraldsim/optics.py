"""Linear optics and threshold photodetection on sparse Fock states.

Beam-splitter convention (symmetric, ``i`` on the cross terms)::

    a1^dag -> cos(theta) a1^dag + i sin(theta) a2^dag
    a2^dag -> i sin(theta) a1^dag + cos(theta) a2^dag

Every sign convention downstream (station outcome maps in
:mod:`heraldsim.belltest`) is defined relative to this choice.

Detectors are threshold (click / no click).  Loss is a beam splitter to
a fresh vacuum ancilla placed in front of an ideal detector, and dark
counts are a second ancilla prepared in ``sqrt(1-d)|0> + sqrt(d)|1>``
that feeds the same detector.  Both ancillas stay in the state, so each
measurement trajectory is a pure state.  Detection is non-destructive:
the detected mode is projected, not emptied.
"""

from __future__ import annotations

import cmath
import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, UsageError
from .fock import (
    ModeLike,
    ModeRegistry,
    StateVector,
    ZERO_NORM_THRESHOLD,
    compound_leakage,
    normalize,
    tensor,
    with_modes,
)


@dataclass(frozen=True)
class BeamSplitterSpec:
    """Two-mode mixer.  ``theta`` in [-pi/2, pi/2]; negative angles give the inverse element."""

    mode1: str
    mode2: str
    theta: float = math.pi / 4

    def __post_init__(self):
        if self.mode1 == self.mode2:
            raise UsageError("beam splitter needs two distinct modes")
        if not -math.pi / 2 - 1e-12 <= self.theta <= math.pi / 2 + 1e-12:
            raise ConfigurationError(f"mixing angle {self.theta} outside [-pi/2, pi/2]")

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, 1j * s], [1j * s, c]])


@dataclass(frozen=True)
class MultiportSpec:
    """Balanced m-port with the discrete-Fourier unitary U_jk = exp(2 pi i jk/m)/sqrt(m)."""

    modes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        if len(self.modes) < 2:
            raise ConfigurationError("multiport needs m >= 2 modes")
        if len(set(self.modes)) != len(self.modes):
            raise UsageError("multiport modes must be distinct")

    def matrix(self) -> np.ndarray:
        m = len(self.modes)
        j, k = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
        return np.exp(2j * np.pi * j * k / m) / math.sqrt(m)


@dataclass(frozen=True)
class DetectorModel:
    """Threshold detector with lumped loss probability and dark-click probability."""

    loss: float = 0.0
    dark: float = 0.0

    def __post_init__(self):
        for name in ("loss", "dark"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"detector {name} probability {v} outside [0, 1]")

    def no_click_weight(self, n: int) -> float:
        """Probability of no click given n photons arrive."""
        return (1.0 - self.dark) * self.loss ** n


IDEAL = DetectorModel()


@dataclass(frozen=True)
class DetectionOutcome:
    click: bool
    probability: float
    state: Optional[StateVector]


@dataclass(frozen=True)
class PatternOutcome:
    pattern: tuple[bool, ...]
    probability: float
    state: Optional[StateVector]


def linear_transform(state: StateVector, modes: Sequence[ModeLike], unitary: np.ndarray) -> StateVector:
    """Apply a passive linear transform acting on creation operators.

    ``a_j^dag -> sum_k unitary[k, j] a_k^dag`` for the listed modes.  Terms
    pushed beyond a mode's truncation are dropped and their weight added
    to the state's leakage.
    """
    reg = state.registry
    idx = [reg.index(m) for m in modes]
    if len(set(idx)) != len(idx):
        raise UsageError("linear transform modes must be distinct")
    m = len(idx)
    u = np.asarray(unitary, dtype=complex)
    if u.shape != (m, m):
        raise UsageError(f"unitary shape {u.shape} does not match {m} modes")
    caps = [reg.n_max[i] for i in idx]
    cache: dict[tuple[int, ...], list[tuple[tuple[int, ...], complex]]] = {}
    out: dict[tuple[int, ...], complex] = {}
    for occ, amp in state.items():
        local = tuple(occ[i] for i in idx)
        expansion = cache.get(local)
        if expansion is None:
            expansion = cache[local] = _expand(local, u)
        for new_local, coeff in expansion:
            new = list(occ)
            for i, c in zip(idx, new_local):
                new[i] = c
            key = tuple(new)
            out[key] = out.get(key, 0j) + amp * coeff
    kept = {}
    leaked = retained = 0.0
    for occ, amp in out.items():
        if any(occ[i] > c for i, c in zip(idx, caps)):
            leaked += abs(amp) ** 2
        else:
            kept[occ] = amp
            retained += abs(amp) ** 2
    return StateVector(reg, kept, compound_leakage(state.leakage, leaked, retained))


def _expand(local: tuple[int, ...], u: np.ndarray) -> list[tuple[tuple[int, ...], complex]]:
    # polynomial in creation operators: exponent tuple -> coefficient
    m = len(local)
    poly = {(0,) * m: 1.0 + 0j}
    for j, n in enumerate(local):
        for _ in range(n):
            nxt: dict[tuple[int, ...], complex] = {}
            for expo, c in poly.items():
                for k in range(m):
                    if u[k, j] == 0:
                        continue
                    e = expo[:k] + (expo[k] + 1,) + expo[k + 1:]
                    nxt[e] = nxt.get(e, 0j) + c * u[k, j]
            poly = nxt
        poly = {e: c / math.sqrt(math.factorial(n)) for e, c in poly.items()}
    result = []
    for expo, c in poly.items():
        c *= math.sqrt(math.prod(math.factorial(e) for e in expo))
        if abs(c) > 1e-16:
            result.append((expo, complex(c)))
    return result


def phase_shift(state: StateVector, mode: ModeLike, phi: float) -> StateVector:
    i = state.registry.index(mode)
    if phi == 0:
        return state
    return StateVector(
        state.registry,
        {occ: amp * cmath.exp(1j * phi * occ[i]) for occ, amp in state.items()},
        state.leakage,
    )


def beam_splitter(state: StateVector, spec: BeamSplitterSpec) -> StateVector:
    if spec.theta == 0:
        state.registry.index(spec.mode1), state.registry.index(spec.mode2)
        return state
    return linear_transform(state, [spec.mode1, spec.mode2], spec.matrix())


def multiport(state: StateVector, spec: MultiportSpec) -> StateVector:
    return linear_transform(state, spec.modes, spec.matrix())


def apply_loss(state: StateVector, mode: ModeLike, eta: float, loss_mode: ModeLike) -> StateVector:
    """Couple ``mode`` to a vacuum ancilla with transmission ``1 - eta``."""
    if not 0.0 <= eta <= 1.0:
        raise ConfigurationError(f"loss probability {eta} outside [0, 1]")
    j = state.registry.index(loss_mode)
    if any(occ[j] for occ, _ in state.items()):
        raise UsageError(f"loss mode {state.registry.labels[j]!r} is not in vacuum")
    if eta == 0:
        return state
    label = mode.label if not isinstance(mode, str) else mode
    lossy = loss_mode.label if not isinstance(loss_mode, str) else loss_mode
    theta = math.asin(math.sqrt(eta))
    return beam_splitter(state, BeamSplitterSpec(label, lossy, theta))


def _dressed(state: StateVector, mode: str, detector: DetectorModel) -> tuple[StateVector, list[str]]:
    """Attach loss and dark-count ancillas; return state and the modes the ideal detector sees."""
    seen = [mode]
    if detector.loss > 0:
        loss_label = state.registry.fresh_label(f"{mode}~loss")
        state = with_modes(state, [loss_label], n_max=max(state.registry.n_max[state.registry.index(mode)], 1))
        state = apply_loss(state, mode, detector.loss, loss_label)
    if detector.dark > 0:
        dark_label = state.registry.fresh_label(f"{mode}~dark")
        d = detector.dark
        anc = StateVector(ModeRegistry([dark_label], 1), {(0,): math.sqrt(1 - d), (1,): math.sqrt(d)})
        state = tensor(state, anc)
        seen.append(dark_label)
    return state, seen


def detect_threshold(state: StateVector, mode: ModeLike, detector: DetectorModel = IDEAL) -> list[DetectionOutcome]:
    """Exact click / no-click distribution with pure collapsed states.

    Returns ``[no-click, click]``.  A branch with zero probability carries
    ``state=None``.
    """
    label = mode.label if not isinstance(mode, str) else mode
    state.registry.index(label)
    total = state.norm_squared()
    dressed, seen = _dressed(state, label, detector)
    idx = [dressed.registry.index(l) for l in seen]
    quiet, fired = {}, {}
    for occ, amp in dressed.items():
        (fired if any(occ[i] for i in idx) else quiet)[occ] = amp
    outcomes = []
    for click, amps in ((False, quiet), (True, fired)):
        branch = StateVector(dressed.registry, amps, dressed.leakage)
        p = branch.norm_squared() / total
        outcomes.append(DetectionOutcome(click, p, normalize(branch) if p > ZERO_NORM_THRESHOLD else None))
    return outcomes


def click_probability(state: StateVector, mode: ModeLike, detector: DetectorModel = IDEAL) -> float:
    return click_probabilities(state, [(mode, detector)])[(True,)]


def click_pattern_distribution(
    state: StateVector, detectors: Sequence[tuple[ModeLike, DetectorModel]]
) -> list[PatternOutcome]:
    """Joint distribution over all 2^k click patterns, by sequential projection."""
    labels = [m.label if not isinstance(m, str) else m for m, _ in detectors]
    if len(set(labels)) != len(labels):
        raise UsageError("click_pattern_distribution: duplicate detector modes")
    branches = [((), 1.0, state)]
    for label, (_, det) in zip(labels, detectors):
        nxt = []
        for pattern, p, s in branches:
            if s is None:
                nxt.extend(((pattern + (c,)), 0.0, None) for c in (False, True))
                continue
            for out in detect_threshold(s, label, det):
                nxt.append((pattern + (out.click,), p * out.probability, out.state))
        branches = nxt
    return [PatternOutcome(pattern, p, s) for pattern, p, s in branches]


def click_probabilities(
    state: StateVector, detectors: Sequence[tuple[ModeLike, DetectorModel]]
) -> dict[tuple[bool, ...], float]:
    """Pattern probabilities from the diagonal no-click POVM, by inclusion-exclusion.

    The no-click element of a lossy, dark-counting threshold detector is
    ``(1-d) sum_n eta^n |n><n|``, diagonal in the Fock basis, so the
    probability that a subset of detectors stays silent is a weighted sum
    of basis-term weights.  This path shares nothing with
    :func:`click_pattern_distribution` beyond the state itself.
    """
    reg = state.registry
    idx = [reg.index(m) for m, _ in detectors]
    if len(set(idx)) != len(idx):
        raise UsageError("click_probabilities: duplicate detector modes")
    dets = [d for _, d in detectors]
    k = len(idx)
    total = state.norm_squared()
    weights = [(occ, abs(a) ** 2) for occ, a in state.items()]
    silent = {}
    for subset in itertools.product((False, True), repeat=k):
        acc = 0.0
        for occ, w in weights:
            f = w
            for j, s in enumerate(subset):
                if s:
                    f *= dets[j].no_click_weight(occ[idx[j]])
            acc += f
        silent[subset] = acc / total
    result = {}
    for pattern in itertools.product((False, True), repeat=k):
        # P(clicks exactly on C) = sum_{T subset C} (-1)^|T| P(silent on complement(C) and T)
        clicking = [j for j in range(k) if pattern[j]]
        p = 0.0
        for r in range(len(clicking) + 1):
            for extra in itertools.combinations(clicking, r):
                mask = tuple((not pattern[j]) or (j in extra) for j in range(k))
                p += (-1) ** r * silent[mask]
        result[pattern] = max(0.0, p)
    return result

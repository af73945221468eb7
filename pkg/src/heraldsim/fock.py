"""Sparse state vectors over a truncated multimode Fock space.

A :class:`StateVector` maps occupation tuples (one count per registered
mode) to complex amplitudes.  Only non-negligible amplitudes are stored,
so states of many modes with few excitations stay small.  States are
immutable; every operation returns a new state.

Collective atomic excitations are treated as ideal bosonic modes, so the
same algebra carries ensemble modes, photonic path modes and the loss /
dark-count ancillas introduced by the detector model.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import ConfigurationError, NumericalError, UsageError

PRUNE_THRESHOLD = 1e-15
ZERO_NORM_THRESHOLD = 1e-14
DEFAULT_NMAX = 2

Occupation = tuple[int, ...]


@dataclass(frozen=True)
class ModeId:
    index: int
    label: str


class ModeRegistry:
    """Ordered, immutable collection of named bosonic modes.

    Each mode carries its own truncation ``n_max``; ``n_max`` may be
    given once for all modes or as one value per label.
    """

    __slots__ = ("labels", "n_max", "_index")

    def __init__(self, labels: Iterable[str], n_max: Union[int, Sequence[int]] = DEFAULT_NMAX):
        labels = tuple(labels)
        if isinstance(n_max, int):
            n_max = (n_max,) * len(labels)
        n_max = tuple(int(n) for n in n_max)
        if len(n_max) != len(labels):
            raise ConfigurationError("n_max must give one truncation per mode")
        if len(set(labels)) != len(labels):
            raise ConfigurationError(f"duplicate mode labels in {labels}")
        if any(n < 1 for n in n_max):
            raise ConfigurationError("truncation n_max must be >= 1")
        self.labels = labels
        self.n_max = n_max
        self._index = {label: i for i, label in enumerate(labels)}

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[ModeId]:
        return (ModeId(i, label) for i, label in enumerate(self.labels))

    def __contains__(self, item) -> bool:
        label = item.label if isinstance(item, ModeId) else item
        return label in self._index

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModeRegistry):
            return NotImplemented
        return self.labels == other.labels and self.n_max == other.n_max

    def __hash__(self) -> int:
        return hash((self.labels, self.n_max))

    def __repr__(self) -> str:
        return f"ModeRegistry({list(self.labels)!r}, n_max={list(self.n_max)!r})"

    def mode(self, label: str) -> ModeId:
        return ModeId(self.index(label), label)

    def index(self, mode: Union[str, ModeId]) -> int:
        label = mode.label if isinstance(mode, ModeId) else mode
        try:
            i = self._index[label]
        except KeyError:
            raise UsageError(f"mode {label!r} is not registered") from None
        if isinstance(mode, ModeId) and mode.index != i:
            raise UsageError(f"mode {label!r} has index {i}, not {mode.index}")
        return i

    def extended(self, labels: Iterable[str], n_max: Union[int, Sequence[int]] = DEFAULT_NMAX) -> "ModeRegistry":
        labels = tuple(labels)
        if isinstance(n_max, int):
            n_max = (n_max,) * len(labels)
        return ModeRegistry(self.labels + labels, self.n_max + tuple(n_max))

    def fresh_label(self, stem: str) -> str:
        """First label of the form ``stem``, ``stem#1``, ... not yet registered."""
        if stem not in self._index:
            return stem
        k = 1
        while f"{stem}#{k}" in self._index:
            k += 1
        return f"{stem}#{k}"


ModeLike = Union[str, ModeId]


class StateVector:
    """Immutable sparse ket over a :class:`ModeRegistry`.

    ``leakage`` is the fraction of (would-be) squared norm lost to
    terms that exceeded a mode's truncation, compounded over every
    operation that produced the state.
    """

    __slots__ = ("registry", "_amps", "leakage", "_norm2")

    def __init__(self, registry: ModeRegistry, amplitudes: Mapping[Occupation, complex], leakage: float = 0.0):
        amps = {}
        n = len(registry)
        for occ, amp in amplitudes.items():
            amp = complex(amp)
            if not (math.isfinite(amp.real) and math.isfinite(amp.imag)):
                raise NumericalError(f"non-finite amplitude {amp} for {occ}")
            if abs(amp) < PRUNE_THRESHOLD:
                continue
            occ = tuple(occ)
            if len(occ) != n:
                raise UsageError(f"occupation {occ} does not match {n} registered modes")
            if any(c < 0 or c > m for c, m in zip(occ, registry.n_max)):
                raise UsageError(f"occupation {occ} outside truncation {registry.n_max}")
            amps[occ] = amp
        self.registry = registry
        self._amps = amps
        self.leakage = float(leakage)
        self._norm2 = None

    @property
    def amplitudes(self) -> Mapping[Occupation, complex]:
        return MappingProxyType(self._amps)

    def items(self):
        return self._amps.items()

    def __len__(self) -> int:
        return len(self._amps)

    def __repr__(self) -> str:
        terms = ", ".join(f"{occ}: {amp:.6g}" for occ, amp in sorted(self._amps.items()))
        return f"StateVector({list(self.registry.labels)}, {{{terms}}})"

    def amplitude(self, occupation: Union[Occupation, Mapping[str, int]]) -> complex:
        if isinstance(occupation, Mapping):
            occupation = occupation_tuple(self.registry, occupation)
        return self._amps.get(tuple(occupation), 0j)

    def norm_squared(self) -> float:
        if self._norm2 is None:
            self._norm2 = math.fsum(abs(a) ** 2 for a in self._amps.values())
        return self._norm2

    def norm(self) -> float:
        return math.sqrt(self.norm_squared())

    def scaled(self, factor: complex) -> "StateVector":
        return StateVector(self.registry, {o: a * factor for o, a in self._amps.items()}, self.leakage)

    def occupation(self, occ: Occupation, mode: ModeLike) -> int:
        return occ[self.registry.index(mode)]

    # thin method aliases over the module functions
    def create(self, mode: ModeLike) -> "StateVector":
        return apply_create(self, mode)

    def normalized(self) -> "StateVector":
        return normalize(self)

    def inner(self, other: "StateVector") -> complex:
        return inner(self, other)


def compound_leakage(previous: float, dropped: float, kept: float) -> float:
    """Leakage after an operation that dropped ``dropped`` of ``dropped + kept`` weight."""
    total = dropped + kept
    step = dropped / total if total > 0 else 0.0
    return 1.0 - (1.0 - previous) * (1.0 - step)


def occupation_tuple(registry: ModeRegistry, counts: Mapping[str, int]) -> Occupation:
    occ = [0] * len(registry)
    for label, c in counts.items():
        occ[registry.index(label)] = int(c)
    return tuple(occ)


def vacuum(registry: ModeRegistry) -> StateVector:
    if len(registry) == 0:
        raise ConfigurationError("vacuum needs at least one registered mode")
    return StateVector(registry, {(0,) * len(registry): 1.0})


def basis_state(registry: ModeRegistry, counts: Mapping[str, int], amplitude: complex = 1.0) -> StateVector:
    """Single Fock ket with the given per-label occupations (others 0)."""
    return StateVector(registry, {occupation_tuple(registry, counts): amplitude})


def apply_create(state: StateVector, mode: ModeLike) -> StateVector:
    """Bosonic creation operator on one mode; overflow goes to ``leakage``."""
    i = state.registry.index(mode)
    cap = state.registry.n_max[i]
    out = {}
    leaked = kept = 0.0
    for occ, amp in state.items():
        n = occ[i]
        new_amp = amp * math.sqrt(n + 1)
        if n + 1 > cap:
            leaked += abs(new_amp) ** 2
            continue
        kept += abs(new_amp) ** 2
        out[occ[:i] + (n + 1,) + occ[i + 1:]] = new_amp
    return StateVector(state.registry, out, compound_leakage(state.leakage, leaked, kept))


def apply_annihilate(state: StateVector, mode: ModeLike) -> StateVector:
    i = state.registry.index(mode)
    out = {}
    for occ, amp in state.items():
        n = occ[i]
        if n:
            out[occ[:i] + (n - 1,) + occ[i + 1:]] = amp * math.sqrt(n)
    return StateVector(state.registry, out, state.leakage)


def _check_shared(a: StateVector, b: StateVector) -> None:
    if a.registry != b.registry:
        raise UsageError("states live on different mode registries")


def superpose(terms: Iterable[tuple[complex, StateVector]]) -> StateVector:
    """Linear combination of states on one registry.  Not normalized."""
    terms = list(terms)
    if not terms:
        raise UsageError("superpose needs at least one term")
    registry = terms[0][1].registry
    out: dict[Occupation, complex] = {}
    weights = []
    for coeff, state in terms:
        if state.registry != registry:
            raise UsageError("superpose: states live on different mode registries")
        weights.append((abs(coeff) ** 2 * state.norm_squared(), state.leakage))
        for occ, amp in state.items():
            out[occ] = out.get(occ, 0j) + coeff * amp
    # weight-averaged: leakage is a reporting figure, not part of the algebra
    total = sum(w for w, _ in weights)
    leakage = sum(w * l for w, l in weights) / total if total > 0 else 0.0
    return StateVector(registry, out, leakage)


def inner(a: StateVector, b: StateVector) -> complex:
    """<a|b>, conjugate-linear in ``a``."""
    _check_shared(a, b)
    small, large, conj_small = (a, b, True) if len(a) <= len(b) else (b, a, False)
    acc = 0j
    lookup = large.amplitudes
    for occ, amp in small.items():
        other = lookup.get(occ)
        if other is not None:
            acc += amp.conjugate() * other if conj_small else other.conjugate() * amp
    return acc


def normalize(state: StateVector) -> StateVector:
    nrm = state.norm()
    if nrm < ZERO_NORM_THRESHOLD:
        raise NumericalError("cannot normalize a state of (near) zero norm")
    return state.scaled(1.0 / nrm)


def project_number(state: StateVector, mode: ModeLike, n: int) -> tuple[float, StateVector]:
    """Project ``mode`` onto occupation ``n``.

    Returns the outcome probability and the normalized post-measurement
    state.  Raises :class:`NumericalError` if the outcome is impossible.
    """
    i = state.registry.index(mode)
    if not 0 <= n <= state.registry.n_max[i]:
        raise UsageError(f"occupation {n} outside [0, {state.registry.n_max[i]}]")
    kept = {occ: amp for occ, amp in state.items() if occ[i] == n}
    collapsed = StateVector(state.registry, kept)
    p = collapsed.norm_squared() / state.norm_squared()
    if p < ZERO_NORM_THRESHOLD:
        raise NumericalError(f"outcome n={n} on mode {state.registry.labels[i]!r} has zero probability")
    return p, normalize(collapsed)


def number_distribution(state: StateVector, mode: ModeLike) -> list[float]:
    """Unnormalized photon-number weights of one mode, indexed by n."""
    i = state.registry.index(mode)
    weights = [0.0] * (state.registry.n_max[i] + 1)
    for occ, amp in state.items():
        weights[occ[i]] += abs(amp) ** 2
    return weights


def project(state: StateVector, keep) -> StateVector:
    """Unnormalized projection onto the basis terms for which ``keep(occ)`` holds."""
    return StateVector(state.registry, {o: a for o, a in state.items() if keep(o)}, state.leakage)


def tensor(a: StateVector, b: StateVector) -> StateVector:
    clash = set(a.registry.labels) & set(b.registry.labels)
    if clash:
        raise UsageError(f"tensor: overlapping mode labels {sorted(clash)}")
    registry = ModeRegistry(a.registry.labels + b.registry.labels, a.registry.n_max + b.registry.n_max)
    out = {oa + ob: xa * xb for oa, xa in a.items() for ob, xb in b.items()}
    return StateVector(registry, out, 1.0 - (1.0 - a.leakage) * (1.0 - b.leakage))


def tensor_all(states: Iterable[StateVector]) -> StateVector:
    states = list(states)
    out = states[0]
    for s in states[1:]:
        out = tensor(out, s)
    return out


def with_modes(state: StateVector, labels: Iterable[str], n_max: Union[int, Sequence[int]] = DEFAULT_NMAX) -> StateVector:
    """Append vacuum modes to the registry (no-op for labels already present)."""
    new = [l for l in labels if l not in state.registry]
    if not new:
        return state
    registry = state.registry.extended(new, n_max)
    pad = (0,) * len(new)
    return StateVector(registry, {o + pad: a for o, a in state.items()}, state.leakage)


def permute_modes(state: StateVector, registry: ModeRegistry) -> StateVector:
    """Re-express ``state`` over a registry holding the same labels in another order."""
    if sorted(registry.labels) != sorted(state.registry.labels):
        raise UsageError("permute_modes: label sets differ")
    order = [state.registry.index(l) for l in registry.labels]
    return StateVector(registry, {tuple(o[i] for i in order): a for o, a in state.items()}, state.leakage)


def forget_modes(state: StateVector, labels: Iterable[str]) -> StateVector:
    """Remove modes by summing amplitudes coherently over their occupations.

    This is the idealised disentangling map used by the abstract flag
    treatment: when the removed modes are a function of the remaining
    ones it is an isometry inverse; otherwise the result is unnormalized.
    """
    drop = {state.registry.index(l) for l in labels}
    keep = [i for i in range(len(state.registry)) if i not in drop]
    registry = ModeRegistry([state.registry.labels[i] for i in keep], [state.registry.n_max[i] for i in keep])
    out: dict[Occupation, complex] = {}
    for occ, amp in state.items():
        key = tuple(occ[i] for i in keep)
        out[key] = out.get(key, 0j) + amp
    return StateVector(registry, out)


def compress_environment(state: StateVector, live: Iterable[str], label: str = "env", tol: float = 1e-12) -> StateVector:
    """Fold every mode outside ``live`` into one Schmidt register ``label``.

    The discarded modes are never acted on again, so only the reduced
    state on ``live`` matters.  An SVD of the amplitude matrix (live
    configuration x environment configuration) gives an equivalent
    purification with one environment level per kept singular value;
    the occupation of ``label`` indexes that level.
    """
    live = [l for l in state.registry.labels if l in set(live)]
    idx = [state.registry.index(l) for l in live]
    rest = [i for i in range(len(state.registry)) if i not in set(idx)]
    if not rest:
        return state
    rows: dict[Occupation, int] = {}
    cols: dict[Occupation, int] = {}
    entries = []
    for occ, amp in state.items():
        r = rows.setdefault(tuple(occ[i] for i in idx), len(rows))
        c = cols.setdefault(tuple(occ[i] for i in rest), len(cols))
        entries.append((r, c, amp))
    if label in live:
        raise UsageError(f"environment label {label!r} is a live mode")
    n_max = [state.registry.n_max[i] for i in idx]
    if len(cols) <= 1:
        registry = ModeRegistry(live + [label], n_max + [1])
        return StateVector(registry, {tuple(occ[i] for i in idx) + (0,): amp for occ, amp in state.items()}, state.leakage)
    matrix = np.zeros((len(rows), len(cols)), dtype=complex)
    for r, c, amp in entries:
        matrix[r, c] = amp
    u, s, _ = np.linalg.svd(matrix, full_matrices=False)
    kept = int(np.count_nonzero(s > tol * s[0]))
    weights = u[:, :kept] * s[:kept]
    registry = ModeRegistry(live + [label], n_max + [max(kept - 1, 1)])
    amps = {}
    for occ, r in rows.items():
        for k in range(kept):
            amps[occ + (k,)] = weights[r, k]
    return StateVector(registry, amps, state.leakage)


def fidelity(a: StateVector, b: StateVector) -> float:
    """|<a|b>|^2 for normalized states on a shared registry."""
    return min(1.0, abs(inner(a, b)) ** 2)


def reduced_fidelity(target: StateVector, state: StateVector) -> float:
    """<t| rho |t> where rho is ``state`` reduced onto the modes of ``target``.

    ``target`` must be normalized and its labels a subset of the state's;
    the remaining modes are traced out.  With identical label sets this
    equals :func:`fidelity`.
    """
    labels = target.registry.labels
    missing = [l for l in labels if l not in state.registry]
    if missing:
        raise UsageError(f"target modes {missing} absent from state")
    idx = [state.registry.index(l) for l in labels]
    rest = [i for i in range(len(state.registry)) if i not in set(idx)]
    overlaps: dict[Occupation, complex] = {}
    lookup = target.amplitudes
    for occ, amp in state.items():
        t = lookup.get(tuple(occ[i] for i in idx))
        if t is None:
            continue
        env = tuple(occ[i] for i in rest)
        overlaps[env] = overlaps.get(env, 0j) + t.conjugate() * amp
    f = math.fsum(abs(v) ** 2 for v in overlaps.values()) / state.norm_squared()
    return min(1.0, f)


def excitation_number(occ: Occupation, indices: Iterable[int]) -> int:
    return sum(occ[i] for i in indices)


def phase(angle: float) -> complex:
    return cmath.exp(1j * angle)

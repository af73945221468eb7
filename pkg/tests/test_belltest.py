import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heraldsim.belltest import (
    GHZ_BATTERY,
    PartyStation,
    abstract_correlation,
    density_tally,
    erasure_station,
    exact_correlation,
    exact_tally,
    ghz_battery,
    ghz_setup,
    mermin_value,
    product_setup,
    qubit_density,
    reference_qubits,
    sample_correlation,
    sample_records,
    station_measure_xy,
    station_measure_z,
    w_all_equal_probability,
    w_property_probabilities,
    w_setup,
)
from heraldsim.errors import NumericalError, UsageError
from heraldsim.fock import ModeRegistry, basis_state, phase, superpose, vacuum
from heraldsim.optics import DetectorModel, MultiportSpec
from heraldsim.protocols import ChannelPhases, ExcitationParams

from .oracles import ghz_qubits, linear_optics_amplitude, pauli_expectation, qubit_outcomes, w_qubits

PHASES = ChannelPhases((0.4, 1.1, -0.7), 0.9, 2.3)
XY_SETTINGS = ["".join(s) for s in itertools.product("XY", repeat=3)]


def qubit(theta=0.0, phi=0.0):
    reg = ModeRegistry(["a", "b"])
    return superpose([
        (math.cos(theta), basis_state(reg, {"a": 1})),
        (math.sin(theta) * phase(phi), basis_state(reg, {"b": 1})),
    ])


STATION = PartyStation(1, "a", "b")


def outcome_probs(outcomes):
    acc = {}
    for o in outcomes:
        acc[o.value] = acc.get(o.value, 0.0) + o.probability
    return acc


# ---------------------------------------------------------------- stations


def test_x_eigenstate_reads_plus_one():
    probs = outcome_probs(station_measure_xy(qubit(math.pi / 4), STATION, "X"))
    assert probs[1] == pytest.approx(1.0, abs=1e-12)


def test_y_on_x_eigenstate_is_fair():
    probs = outcome_probs(station_measure_xy(qubit(math.pi / 4), STATION, "Y"))
    assert probs[1] == pytest.approx(0.5, abs=1e-12)
    assert probs[-1] == pytest.approx(0.5, abs=1e-12)


def test_vacuum_station_is_invalid():
    probs = outcome_probs(station_measure_xy(vacuum(ModeRegistry(["a", "b"])), STATION, "X"))
    assert probs == {None: pytest.approx(1.0)}


@given(st.floats(0, math.pi), st.floats(-math.pi, math.pi), st.sampled_from("XY"))
@settings(max_examples=40, deadline=None)
def test_station_matches_pauli_projectors(theta, phi, setting):
    probs = outcome_probs(station_measure_xy(qubit(theta, phi), STATION, setting))
    psi = np.array([math.cos(theta), math.sin(theta) * np.exp(1j * phi)])
    oracle = qubit_outcomes(psi, setting)
    for v in (1, -1):
        assert probs.get(v, 0.0) == pytest.approx(oracle[(v,)], abs=1e-10)


def test_compensation_rotates_the_phase():
    st_comp = replace(STATION, compensation=-0.8)
    probs = outcome_probs(station_measure_xy(qubit(math.pi / 4, 0.8), st_comp, "X"))
    assert probs[1] == pytest.approx(1.0, abs=1e-12)


def test_z_is_not_an_interferometric_setting():
    with pytest.raises(UsageError):
        station_measure_xy(qubit(), STATION, "Z")


def _flagged(flag_excited: bool):
    reg = ModeRegistry(["B", "A", "C"])
    counts = {"A": 1, "C": 1} if flag_excited else {"B": 1}
    return basis_state(reg, counts)


W_STATION = PartyStation(1, "B", "A", "C", z_readout="flag")


def test_z_flag_readout():
    assert outcome_probs(station_measure_z(_flagged(True), W_STATION)) == {1: pytest.approx(1.0)}
    assert outcome_probs(station_measure_z(_flagged(False), W_STATION)) == {-1: pytest.approx(1.0)}
    lossy = replace(W_STATION, detector=DetectorModel(loss=0.2))
    probs = outcome_probs(station_measure_z(_flagged(True), lossy))
    # the rail photon is lost with the same probability; only its survivors are valid
    assert probs[1] / (probs[1] + probs[-1]) == pytest.approx(0.8, abs=1e-12)


def test_z_needs_a_flag():
    with pytest.raises(UsageError):
        station_measure_z(qubit(), STATION)
    with pytest.raises(UsageError):
        exact_correlation(ghz_setup(), "ZXX")


# ---------------------------------------------------------------- erasure


def test_erasure_of_two_flags():
    reg = ModeRegistry(["C1", "C2"])
    s = superpose([(1 / math.sqrt(2), basis_state(reg, {"C1": 1})), (1 / math.sqrt(2), basis_state(reg, {"C2": 1}))])
    outs = erasure_station(s, ["C1", "C2"])
    assert sorted(o.label for o in outs) == [0]
    assert outs[0].probability == pytest.approx(1.0)


def test_erasure_vacuum_is_silent():
    outs = erasure_station(vacuum(ModeRegistry(["C1", "C2"])), ["C1", "C2"])
    assert [(o.label, round(o.probability, 12)) for o in outs] == [(None, 1.0)]


def test_erasure_corrections_match_permanents():
    flags = ["C1", "C2", "C3"]
    reg = ModeRegistry(flags)
    s = superpose([(1 / math.sqrt(3), basis_state(reg, {f: 1})) for f in flags])
    u = MultiportSpec(tuple(flags)).matrix()
    for out in erasure_station(s, flags):
        for k, f in enumerate(flags):
            n_in = [0, 0, 0]
            n_in[k] = 1
            n_out = [0, 0, 0]
            n_out[out.label] = 1
            amp = linear_optics_amplitude(u, n_in, n_out)
            assert out.corrections[f] == pytest.approx(-np.angle(amp), abs=1e-12)


# ---------------------------------------------------------------- GHZ


@pytest.mark.parametrize("settings", XY_SETTINGS)
def test_ghz_correlations_match_qubit_oracle(settings):
    setup = ghz_setup(PHASES)
    assert exact_correlation(setup, settings).value == pytest.approx(pauli_expectation(ghz_qubits(), settings), abs=1e-10)


def test_ghz_battery_exact():
    b = ghz_battery(ghz_setup(PHASES))
    assert [e.value for e in b.estimates] == pytest.approx([-1, -1, -1, 1], abs=1e-10)
    assert b.lhv_xxx_prediction == pytest.approx(-1, abs=1e-10)
    assert b.contradiction
    assert all(e.stderr == 0 and e.valid_fraction == pytest.approx(0.25) for e in b.estimates)


@given(st.floats(-math.pi, math.pi))
@settings(max_examples=15, deadline=None)
def test_uncompensated_ghz_tracks_phase(phi_r):
    setup = ghz_setup(ChannelPhases((phi_r, 0.0, 0.0)), compensate=False)
    assert exact_correlation(setup, "XXX").value == pytest.approx(math.cos(phi_r), abs=1e-10)
    assert exact_correlation(setup, "YYX").value == pytest.approx(pauli_expectation(ghz_qubits(phi_r), "YYX"), abs=1e-10)


def test_ghz_setting_exchange_symmetry():
    setup = ghz_setup()
    vals = [exact_correlation(setup, s).value for s in ("YYX", "YXY", "XYY")]
    assert vals[0] == vals[1] == vals[2]


def test_direct_wiring_gives_no_contradiction():
    b = ghz_battery(ghz_setup(wiring="direct"))
    assert b.estimates[0].valid_fraction == pytest.approx(1.0)
    assert b.estimates[3].value == pytest.approx(1.0)
    assert b.estimates[0].value == pytest.approx(0.0, abs=1e-12)
    assert not b.contradiction


def test_ghz_monte_carlo_convergence():
    setup = ghz_setup(PHASES)
    for s in GHZ_BATTERY:
        mc = sample_correlation(setup, s, 20000, seed=3)
        assert mc.value == pytest.approx(exact_correlation(setup, s).value, abs=max(5 * mc.stderr, 1e-12))
        assert abs(mc.valid_fraction - 0.25) < 5 * math.sqrt(0.25 * 0.75 / 20000)


def test_ghz_monte_carlo_with_noise():
    setup = ghz_setup(detector=DetectorModel(loss=0.1, dark=0.02))
    exact = exact_correlation(setup, "XXX")
    mc = sample_correlation(setup, "XXX", 20000, seed=8)
    assert 0 < exact.value < 1
    assert abs(mc.value - exact.value) < 5 * mc.stderr


def test_sampling_is_independent_of_workers():
    setup = ghz_setup(PHASES)
    a = sample_records(setup, "YXY", 5000, seed=12, workers=1)
    b = sample_records(setup, "YXY", 5000, seed=12, workers=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_records(setup, "YXY", 5000, seed=13))


def test_phase_jitter_blurs_correlations():
    setup = ghz_setup()
    sharp = sample_correlation(setup, "XXX", 300, seed=1, phase_jitter=0.0)
    blurred = sample_correlation(setup, "XXX", 300, seed=1, phase_jitter=2 * math.pi)
    assert sharp.value == 1.0
    assert blurred.value < 0.5


# ---------------------------------------------------------------- W


def test_w_reference_state():
    assert np.allclose(reference_qubits("w"), w_qubits())
    assert np.allclose(reference_qubits("ghz", 0.3), ghz_qubits(0.3))


def test_w_abstract_density_is_the_w_state():
    rho, weight = qubit_density(w_setup(PHASES), "abstract")
    psi = w_qubits()
    assert weight == pytest.approx(0.125, abs=1e-12)
    assert np.real(psi.conj() @ rho @ psi) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("engine,flag", [("abstract", "abstract"), ("exact", "abstract"), ("exact", "erase")])
def test_w_properties_coherent(engine, flag):
    setup = w_setup(PHASES)
    props = w_property_probabilities(setup, engine, flag)
    assert props.two_minus.value == pytest.approx(1.0, abs=1e-10)
    assert props.conditional_jk.value == pytest.approx(1.0, abs=1e-10)
    assert props.conditional_ik.value == pytest.approx(1.0, abs=1e-10)
    oracle = qubit_outcomes(w_qubits(), "XXX")
    equal = oracle[(1, 1, 1)] + oracle[(-1, -1, -1)]
    assert equal == pytest.approx(0.75)
    assert w_all_equal_probability(setup, engine, flag).value == pytest.approx(equal, abs=1e-10)


def test_w_properties_traced():
    setup = w_setup(PHASES)
    props = w_property_probabilities(setup, "exact", "trace")
    assert props.two_minus.value == pytest.approx(1.0, abs=1e-10)
    assert props.conditional_jk.value == pytest.approx(0.5, abs=1e-10)
    assert props.notes
    # flags traced out: an even mixture of the three single-excitation kets
    rho = sum(np.outer(v, v) for v in np.eye(8)[[1, 2, 4]]) / 3
    oracle = qubit_outcomes(rho, "XXX")
    assert w_all_equal_probability(setup, "exact", "trace").value == pytest.approx(
        oracle[(1, 1, 1)] + oracle[(-1, -1, -1)], abs=1e-10
    )
    assert w_property_probabilities(setup, "abstract", "trace").conditional_jk.value == pytest.approx(0.5, abs=1e-10)


def test_w_zzz_every_shot_has_two_minus_ones():
    rec = sample_records(w_setup(PHASES), "ZZZ", 4000, seed=5, flag="erase")
    valid = rec[rec.all(axis=1)]
    assert len(valid) > 0
    assert np.all((valid == -1).sum(axis=1) == 2)
    assert sample_correlation(w_setup(PHASES), "ZZZ", 4000, seed=5, flag="erase").value == -1.0


def test_w_monte_carlo_all_equal():
    setup = w_setup(PHASES)
    mc = w_all_equal_probability(setup, "montecarlo", "erase", shots=20000, seed=2)
    assert abs(mc.value - 0.75) < 5 * mc.stderr


def test_w_property_needs_w_setup():
    with pytest.raises(UsageError):
        w_all_equal_probability(ghz_setup())


def test_abstract_engine_has_no_erasure():
    with pytest.raises(UsageError):
        abstract_correlation(w_setup(), "XXX", "erase")


# ---------------------------------------------------------------- Mermin


def test_mermin_w():
    for engine, flag in (("abstract", "abstract"), ("exact", "erase")):
        m = mermin_value(w_setup(PHASES), "Z", "X", engine, flag)
        assert m.terms[0].value == pytest.approx(-1, abs=1e-10)
        assert [t.value for t in m.terms[1:]] == pytest.approx([2 / 3] * 3, abs=1e-10)
        assert m.value == pytest.approx(-3, abs=1e-9)
        assert m.violated


def test_mermin_w_matches_qubit_oracle():
    psi = w_qubits()
    expected = pauli_expectation(psi, "ZZZ") - 3 * pauli_expectation(psi, "ZXX")
    assert mermin_value(w_setup(), "Z", "X", "abstract").value == pytest.approx(expected, abs=1e-10)


def test_mermin_ghz():
    m = mermin_value(ghz_setup(PHASES), "X", "Y")
    assert m.value == pytest.approx(4, abs=1e-9)
    assert m.violated


@given(
    st.lists(st.floats(0, math.pi), min_size=3, max_size=3),
    st.lists(st.floats(-math.pi, math.pi), min_size=3, max_size=3),
    st.sampled_from("XYZ"),
    st.sampled_from("XYZ"),
)
@settings(max_examples=30, deadline=None)
def test_product_states_respect_local_bound(thetas, phis, a, b):
    m = mermin_value(product_setup(thetas, phis), a, b)
    assert abs(m.value) <= 2 + 1e-9
    assert -4 <= m.value <= 4


def test_product_fixture_default():
    m = mermin_value(product_setup(), "Z", "X")
    assert not m.violated
    assert abs(m.value) <= 2 + 1e-9


# ---------------------------------------------------------------- engine agreement


def test_engines_agree_on_heralded_sources():
    ghz = ghz_setup(PHASES, source="heralded", params=ExcitationParams(5e-3))
    for s in GHZ_BATTERY:
        assert abs(exact_correlation(ghz, s).value - abstract_correlation(ghz, s).value) <= 0.02
    w = w_setup(PHASES, source="heralded", params=ExcitationParams(5e-3))
    for s in ("ZZZ", "ZXX", "XXX"):
        assert abs(exact_correlation(w, s, "abstract").value - abstract_correlation(w, s).value) <= 0.02


def test_engines_agree_in_weak_limit():
    ghz = ghz_setup(PHASES, source="heralded", params=ExcitationParams(1e-8))
    for s in GHZ_BATTERY:
        assert abs(exact_correlation(ghz, s).value - abstract_correlation(ghz, s).value) <= 1e-6


def test_exact_tally_without_coincidence_is_an_error():
    setup = replace(ghz_setup(), state=vacuum(ghz_setup().state.registry))
    with pytest.raises(NumericalError):
        exact_correlation(setup, "XXX")


def test_density_tally_is_normalized():
    rho = np.outer(ghz_qubits(), ghz_qubits().conj())
    t = density_tally(rho, "XYZ")
    assert math.fsum(w for _, w in t.entries) == pytest.approx(1.0)


def test_unknown_engine():
    from heraldsim.belltest import correlation

    with pytest.raises(UsageError):
        correlation(ghz_setup(), "XXX", engine="quantum")

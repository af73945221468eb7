import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heraldsim.errors import UsageError
from heraldsim.fock import ModeRegistry, basis_state
from heraldsim.optics import BeamSplitterSpec, beam_splitter, detect_threshold
from heraldsim.sampling import (
    SHOT_WIDTH,
    Branch,
    OutcomeTree,
    chunked,
    parallel_map,
    shot_generator,
    shot_uniforms,
    stream_key,
)


def test_stream_key_depends_on_seed_and_tags():
    assert stream_key(1, "a") == stream_key(1, "a")
    assert stream_key(1, "a") != stream_key(2, "a")
    assert stream_key(1, "a") != stream_key(1, "b")
    assert 0 <= stream_key(7) < 2**128


@given(st.integers(1, 200), st.integers(1, 9))
@settings(max_examples=30, deadline=None)
def test_chunks_reproduce_single_block(shots, workers):
    key = stream_key(3, "chunks")
    whole = shot_uniforms(key, 0, shots)
    parts = [shot_uniforms(key, s, c) for s, c in chunked(shots, workers)]
    assert np.array_equal(np.concatenate(parts), whole)
    assert whole.shape == (shots, SHOT_WIDTH)


def test_chunked_covers_every_shot_once():
    spans = chunked(10, 3)
    covered = [s + k for s, c in spans for k in range(c)]
    assert covered == list(range(10))


def test_parallel_map_matches_serial():
    key = stream_key(5)
    fn = lambda s, c: shot_uniforms(key, s, c).sum(axis=1)
    chunks = chunked(1000, 4)
    assert np.array_equal(np.concatenate(parallel_map(fn, chunks, 4)), np.concatenate(parallel_map(fn, chunks, 1)))


def test_shot_generators_are_independent_of_order():
    key = stream_key(9, "attempts")
    first = shot_generator(key, 4).random(5)
    shot_generator(key, 3).random(100)
    assert np.array_equal(shot_generator(key, 4).random(5), first)
    assert not np.array_equal(shot_generator(key, 5).random(5), first)


def _hom_tree():
    reg = ModeRegistry(["a", "b"])
    state = beam_splitter(basis_state(reg, {"a": 1}), BeamSplitterSpec("a", "b", math.pi / 6))

    def detect(mode):
        def step(s, path):
            return [Branch(o.click, o.probability, o.state) for o in detect_threshold(s, mode)]

        return step

    return OutcomeTree(state, [detect("a"), detect("b")])


def test_tree_enumeration_is_exact():
    dist = dict(_hom_tree().enumerate())
    assert dist[(True, False)] == pytest.approx(0.75, abs=1e-12)
    assert dist[(False, True)] == pytest.approx(0.25, abs=1e-12)
    assert math.fsum(dist.values()) == pytest.approx(1.0, abs=1e-12)


def test_tree_sampling_frequencies_match_enumeration():
    tree = _hom_tree()
    n = 40000
    leaves = tree.sample(shot_uniforms(stream_key(11), 0, n))
    freq = np.mean([tree.path(int(l)) == (True, False) for l in leaves])
    assert abs(freq - 0.75) < 5 * math.sqrt(0.75 * 0.25 / n)


def test_terminal_branches_stop_the_walk():
    reg = ModeRegistry(["a"])
    s = basis_state(reg, {"a": 1})
    calls = []

    def first(state, path):
        return [Branch("stop", 0.5, state, terminal=True), Branch("go", 0.5, state)]

    def second(state, path):
        calls.append(path)
        return [Branch("end", 1.0, state)]

    tree = OutcomeTree(s, [first, second])
    assert sorted(tree.enumerate()) == [(("go", "end"), 0.5), (("stop",), 0.5)]
    assert calls == [("go",)]


def test_step_without_outcomes_is_an_error():
    s = basis_state(ModeRegistry(["a"]), {"a": 1})
    tree = OutcomeTree(s, [lambda state, path: [Branch("x", 0.0, state)]])
    with pytest.raises(UsageError):
        tree.enumerate()

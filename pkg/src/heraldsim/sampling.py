"""Counter-based shot streams and the sequential-measurement outcome tree.

Every shot owns a fixed block of the Philox stream for its experiment
key, so the uniforms a shot sees depend only on ``(seed, tag, shot)``
and never on how shots are split between workers.
"""

from __future__ import annotations

import hashlib
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Hashable, Optional, Sequence

import numpy as np

from .errors import UsageError
from .fock import StateVector

SHOT_WIDTH = 8  # uniforms per shot; a multiple of the 4-word Philox block
_BLOCKS_PER_SHOT = SHOT_WIDTH // 4


def stream_key(seed: int, *tags) -> int:
    """128-bit Philox key from a user seed and experiment tags."""
    payload = repr((int(seed),) + tuple(str(t) for t in tags)).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:16], "little")


def shot_uniforms(key: int, start: int, count: int) -> np.ndarray:
    """Uniforms for shots ``start .. start+count-1``, shape ``(count, SHOT_WIDTH)``."""
    bitgen = np.random.Philox(key=key)
    bitgen.advance(start * _BLOCKS_PER_SHOT)
    return np.random.Generator(bitgen).random(count * SHOT_WIDTH).reshape(count, SHOT_WIDTH)


def shot_generator(key: int, shot: int) -> np.random.Generator:
    """Unbounded private stream for one shot (high counter word = shot index)."""
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, int(shot)]))


def chunked(shots: int, workers: int) -> list[tuple[int, int]]:
    workers = max(1, int(workers))
    size = -(-shots // workers)
    return [(s, min(size, shots - s)) for s in range(0, shots, size)]


def parallel_map(fn, chunks, workers: int):
    if workers <= 1 or len(chunks) <= 1:
        return [fn(*c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: fn(*c), chunks))


@dataclass(frozen=True)
class Branch:
    label: Hashable
    probability: float
    state: Optional[StateVector]
    terminal: bool = False


# a step maps (state, labels so far) to its conditional outcome branches
Step = Callable[[StateVector, tuple], Sequence[Branch]]


class OutcomeTree:
    """Lazily expanded tree of sequential measurement steps.

    Node 0 is the root.  Children are conditional branches of the next
    step; a terminal branch (e.g. a failed coincidence) ends the path.
    The exact engine enumerates the tree, the Monte-Carlo engine walks
    it once per shot; expansion is memoised and thread-safe.
    """

    def __init__(self, state: StateVector, steps: Sequence[Step]):
        self.steps = list(steps)
        self._paths: list[tuple] = [()]
        self._states: list[Optional[StateVector]] = [state]
        self._depth: list[int] = [0]
        self._terminal: list[bool] = [False]
        self._children: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._lock = threading.Lock()

    def path(self, node: int) -> tuple:
        return self._paths[node]

    def is_leaf(self, node: int) -> bool:
        return self._terminal[node] or self._depth[node] == len(self.steps)

    def children(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        """(child ids, conditional probabilities) of an internal node."""
        cached = self._children.get(node)
        if cached is not None:
            return cached
        with self._lock:
            cached = self._children.get(node)
            if cached is not None:
                return cached
            depth = self._depth[node]
            branches = self.steps[depth](self._states[node], self._paths[node])
            ids, probs = [], []
            for br in branches:
                if br.probability <= 0 or br.state is None:
                    continue
                self._paths.append(self._paths[node] + (br.label,))
                self._states.append(br.state)
                self._depth.append(depth + 1)
                self._terminal.append(br.terminal)
                ids.append(len(self._paths) - 1)
                probs.append(br.probability)
            if not ids:
                raise UsageError(f"measurement step {depth} produced no possible outcome")
            result = (np.array(ids, dtype=np.int64), np.array(probs))
            self._children[node] = result
            return result

    def enumerate(self) -> list[tuple[tuple, float]]:
        """Exact distribution over leaf paths."""
        out = []
        stack = [(0, 1.0)]
        while stack:
            node, p = stack.pop()
            if self.is_leaf(node):
                out.append((self._paths[node], p))
                continue
            ids, probs = self.children(node)
            for i, q in zip(ids, probs):
                stack.append((int(i), p * q))
        return out

    def sample(self, uniforms: np.ndarray) -> np.ndarray:
        """Leaf node per shot; column ``d`` of ``uniforms`` drives step ``d``."""
        n = len(uniforms)
        node = np.zeros(n, dtype=np.int64)
        active = np.ones(n, dtype=bool)
        for level in range(len(self.steps)):
            if not active.any():
                break
            for nid in np.unique(node[active]):
                nid = int(nid)
                mask = active & (node == nid)
                if self.is_leaf(nid):
                    active[mask] = False
                    continue
                ids, probs = self.children(nid)
                cum = np.cumsum(probs)
                cum /= cum[-1]
                pick = np.searchsorted(cum, uniforms[mask, level], side="right")
                node[mask] = ids[np.minimum(pick, len(ids) - 1)]
        return node

"""Counter-based pseudorandom streams for reproducible, replayable walks.

Every random walk owns an independent stream addressed by a
:class:`PathSeed` ``(experiment_seed, walk_index)``.  The generator is a
pure function of ``(seed, call index)``: draw ``i`` of a stream is the
splitmix64 output ``mix64(key + (i+1) * GOLDEN)`` where ``key`` is a
scrambled combination of the two seed words.  Reconstructing a
:class:`Sampler` from the same :class:`PathSeed` therefore replays the
exact draw sequence of the original walk, with no stored state, which is
what the gradient-replay passes rely on.

No global RNG state is touched anywhere in this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = 0xFFFFFFFFFFFFFFFF

# 2^-53: top 53 bits of the hash become a float64 in [0, 1)
_INV_2_53 = 2.0 ** -53
_SHIFT_11 = np.uint64(11)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer (Steele et al.); bijective on uint64."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _stream_keys(experiment_seed: int, walk_indices: np.ndarray) -> np.ndarray:
    """Derive one scrambled stream key per walk index."""
    base = _mix64(np.uint64(experiment_seed & _U64_MASK))
    return _mix64(base ^ walk_indices.astype(np.uint64))


@dataclass(frozen=True)
class PathSeed:
    """Address of one walk's random stream.

    ``walk_index`` must be unique per (query point, sample index) pair so
    that distinct walks get statistically independent streams.
    """

    experiment_seed: int
    walk_index: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "experiment_seed", self.experiment_seed & _U64_MASK)
        object.__setattr__(self, "walk_index", self.walk_index & _U64_MASK)


class Sampler:
    """Deterministic uniform sampler for a single walk.

    Consecutive :meth:`next_uniform` calls advance an internal counter by
    one; the emitted value depends only on (PathSeed, call index).
    """

    __slots__ = ("seed", "_key", "_counter")

    def __init__(self, seed: PathSeed):
        self.seed = seed
        self._key = _stream_keys(seed.experiment_seed, np.asarray([seed.walk_index]))[0]
        self._counter = np.uint64(0)

    def next_uniform(self) -> float:
        """Next uniform draw in [0, 1); advances the counter by 1."""
        with np.errstate(over="ignore"):
            self._counter = self._counter + np.uint64(1)
            h = _mix64(self._key + self._counter * _GOLDEN)
        return float(h >> _SHIFT_11) * _INV_2_53

    @property
    def counter(self) -> int:
        return int(self._counter)


def sampler_new(seed: PathSeed) -> Sampler:
    return Sampler(seed)


def next_uniform(s: Sampler) -> float:
    return s.next_uniform()


class SamplerBatch:
    """Vectorized bundle of per-walk samplers sharing one experiment seed.

    Each lane owns its own counter, so lanes may consume different numbers
    of draws (branching walks) while each lane's stream stays a pure
    function of its own PathSeed.  ``draw(idx)`` advances only the listed
    lanes.  A batch of one lane is bit-identical to :class:`Sampler`.
    """

    __slots__ = ("keys", "counters")

    def __init__(self, experiment_seed: int, walk_indices: np.ndarray):
        walk_indices = np.asarray(walk_indices, dtype=np.uint64)
        self.keys = _stream_keys(experiment_seed, walk_indices)
        self.counters = np.zeros(walk_indices.shape, dtype=np.uint64)

    def draw(self, idx: np.ndarray | None = None) -> np.ndarray:
        """Uniform draws in [0, 1) for lanes ``idx`` (all lanes if None)."""
        with np.errstate(over="ignore"):
            if idx is None:
                self.counters += np.uint64(1)
                h = _mix64(self.keys + self.counters * _GOLDEN)
            else:
                c = self.counters[idx] + np.uint64(1)
                self.counters[idx] = c
                h = _mix64(self.keys[idx] + c * _GOLDEN)
        return (h >> _SHIFT_11).astype(np.float64) * _INV_2_53

"""Counter-based random streams.

All randomness in the package flows through :class:`RngStream`, a value type
over (master_seed, stream_id, counter) backed by the Philox counter-based
generator.  The same triple always reproduces the same draws, there is no
global state, and parallel work takes distinct stream ids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_U64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    """One round of splitmix64; used to derive well-separated stream ids."""
    x = (x + _GOLDEN) & _U64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _U64
    return (x ^ (x >> 31)) & _U64


@dataclass
class RngStream:
    """A reproducible random stream.

    Every draw method materializes a fresh Philox generator at the current
    (master_seed, stream_id, counter) and ticks the counter by one, so a
    single tick may be a scalar or a whole batch of values.  ``generator()``
    exposes the same one-tick contract for callers that need many dependent
    draws at once.
    """

    master_seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id", "counter"):
            v = getattr(self, name)
            if not (0 <= int(v) <= _U64):
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {v!r}")
            setattr(self, name, int(v))

    def child(self, index: int) -> "RngStream":
        """Derive an independent stream; (stream_id, index) -> new stream_id."""
        mixed = _splitmix64(self.stream_id ^ _splitmix64(index & _U64))
        return RngStream(self.master_seed, mixed, 0)

    def generator(self) -> np.random.Generator:
        """Materialize a numpy Generator at the current state and tick once."""
        bitgen = np.random.Philox(key=0)
        # install the stream state directly; cheaper than re-seeding and
        # equivalent to Philox(counter=[0,0,counter,0], key=[seed, stream])
        state = bitgen.state
        state["state"]["counter"][:] = (0, 0, self.counter, 0)
        state["state"]["key"][:] = (self.master_seed, self.stream_id)
        state["buffer_pos"] = 4  # force a fresh block on first draw
        bitgen.state = state
        self.counter += 1
        return np.random.Generator(bitgen)

    # Convenience draws; each call is exactly one counter tick.

    def integers(self, high, size=None) -> np.ndarray:
        """Uniform integers in [0, high); high may be a scalar or an array."""
        return self.generator().integers(0, high, size=size)

    def random(self, size=None):
        return self.generator().random(size=size)

    def normal(self, size=None):
        return self.generator().standard_normal(size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)

"""Deterministic random-stream management.

Every stochastic choice in the library draws from one of four named streams
derived from a single user seed. Streams are mutually independent: consuming
numbers from one never advances another, so e.g. turning dropout on or off
cannot change which negatives get sampled.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

# Stream ids are part of the reproducibility contract; never renumber.
STREAMS = {
    "dropout": 0,
    "negatives": 1,
    "init": 2,
    "shuffle": 3,
}


class RngState:
    """Holds one lazily-created PCG64 generator per named stream.

    The generator for stream ``k`` under seed ``s`` is seeded from
    ``SeedSequence(entropy=s, spawn_key=(k,))``, which is stable across
    processes and platforms. Repeated calls to :meth:`stream` return the
    same (stateful) generator object.
    """

    def __init__(self, seed: int):
        if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
            raise ContractViolation(f"seed must be an integer, got {seed!r}")
        if seed < 0:
            raise ContractViolation(f"seed must be nonnegative, got {seed}")
        self.seed = int(seed)
        self._generators: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        if name not in STREAMS:
            raise ContractViolation(
                f"unknown rng stream {name!r}; expected one of {sorted(STREAMS)}"
            )
        gen = self._generators.get(name)
        if gen is None:
            seq = np.random.SeedSequence(
                entropy=self.seed, spawn_key=(STREAMS[name],)
            )
            gen = np.random.Generator(np.random.PCG64(seq))
            self._generators[name] = gen
        return gen

    def fork(self) -> "RngState":
        """Fresh RngState with the same seed and all streams rewound."""
        return RngState(self.seed)

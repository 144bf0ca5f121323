"""Seeded random streams.

Every consumer draws from its own ``Generator(Philox)`` child of
``SeedSequence(seed)``, so adding draws to one purpose never shifts another.
"""

import numpy as np

from errors import ContractViolation

PURPOSES = (
    "csbm-graph",
    "csbm-features",
    "weights",
    "labels",
    "mlp-data",
)


def stream(seed: int, purpose: str) -> np.random.Generator:
    if purpose not in PURPOSES:
        raise ContractViolation(f"unknown random stream {purpose!r}; expected one of {PURPOSES}")
    if seed < 0:
        raise ContractViolation(f"seed must be nonnegative, got {seed}")
    child = np.random.SeedSequence(seed).spawn(len(PURPOSES))[PURPOSES.index(purpose)]
    return np.random.Generator(np.random.Philox(child))

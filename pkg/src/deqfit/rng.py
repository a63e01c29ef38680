"""Reproducible random streams.

Every stochastic task in the package draws from a counter-based Philox
generator keyed by a 64-bit user seed plus a tuple of stream labels, so
independent tasks (sweep cells, Monte Carlo replicates, per-sample solver
perturbations) get independent streams that do not depend on scheduling.
"""
from __future__ import annotations

import numpy as np


def stream(seed: int, *labels: int | str) -> np.random.Generator:
    """Return the generator for (seed, labels).

    Labels may be ints or short strings; strings are hashed into the seed
    sequence entropy in a platform-independent way.
    """
    entropy: list[int] = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for label in labels:
        if isinstance(label, str):
            entropy.extend(label.encode("utf-8"))
        else:
            entropy.append(int(label) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

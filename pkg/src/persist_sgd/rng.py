"""Seeded random streams.

Every random draw in the package goes through :func:`make_rng`, which builds
a numpy ``Generator`` on the PCG64 bit generator (PCG XSL-RR 128/64) seeded
via ``SeedSequence``. Independent streams are addressed by extra integer keys,
e.g. ``make_rng(seed, EPOCH_STREAM, epoch)``, so the shuffle of epoch 7 never
depends on how many numbers the weight initializer consumed.
"""

import numpy as np

_U64 = (1 << 64) - 1

# Stream keys. Values are part of the reproducibility contract.
INIT_STREAM = 0
EPOCH_STREAM = 1
FIXED_ORDER_STREAM = 2
BLOBS_STREAM = 3
SPLIT_STREAM = 4


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed`` and optional stream ``keys``.

    Any Python integer is accepted; negative or oversized seeds are reduced
    modulo 2**64 so that all 64-bit signed and unsigned values are valid.
    """
    entropy = [int(seed) & _U64, *(int(k) & _U64 for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

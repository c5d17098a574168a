"""Counter-based reproducible random number streams.

All randomness in the package flows from a single 64-bit seed through
``split64``: stream i of seed s is an independent Philox stream keyed by a
64-bit mix of (s, i).  The mix is the SplitMix64 finalizer, so nearby
(seed, index) pairs land far apart in key space.
"""

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def split64(base_seed: int, index: int) -> int:
    """Derive the 64-bit key of stream `index` from `base_seed`."""
    z = (int(base_seed) + _GOLDEN * (int(index) + 1)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def make_generator(seed: int) -> np.random.Generator:
    """Philox generator keyed directly by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & _MASK64))


def stream(base_seed: int, index: int) -> np.random.Generator:
    """Generator for independent stream `index` of `base_seed`."""
    return make_generator(split64(base_seed, index))


# Fixed stream tags for non-path randomness, so module draws never collide
# with path streams (paths use non-negative indices).
TAG_ELLIPTICITY = -101
TAG_UNIT_VECTORS = -102

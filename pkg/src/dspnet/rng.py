"""Counter-based random streams.

Every source of randomness in a run is a Philox generator keyed by
(seed, stream id) with the stream position encoded in the counter. A draw
therefore depends only on its coordinates (epoch, sample index, step, ...)
and never on execution order or worker count.
"""

import numpy as np

# Stream ids. Keep stable: they are part of run reproducibility.
INIT = 0
SHUFFLE = 1
AUGMENT = 2
SAMPLE = 3
SYNTH = 4
SPLIT = 5
PROBE = 6

_MASK64 = (1 << 64) - 1


def stream_rng(seed: int, stream: int, *coords: int) -> np.random.Generator:
    """Generator for one (seed, stream, coords) cell; at most 3 coords."""
    if len(coords) > 3:
        raise ValueError("at most 3 stream coordinates supported")
    counter = np.array([c & _MASK64 for c in coords] + [0] * (4 - len(coords)),
                       dtype=np.uint64)
    key = np.array([seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))

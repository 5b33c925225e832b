"""Deterministic counter-based random streams.

Every random draw in the toolkit comes from a Philox stream addressed by
(seed, tag, a, b): the seed keys the generator and the coordinates select a
disjoint counter block.  Any stream is therefore replayable on its own --
the crop for (epoch, segment) can be regenerated without replaying the run
that produced it.  Counter word 0 is left free for the generator's own
advancement, so streams never collide for fewer than 2**64 draws.
"""

import numpy as np

_MASK64 = (1 << 64) - 1
_KEY_PAD = 0x9E3779B97F4A7C15  # fixed second key word

TAG_INIT = 1
TAG_SHUFFLE = 2
TAG_CROP = 3
TAG_DROPOUT = 4
TAG_SYNTH = 5
TAG_FOLDS = 6


def stream(seed, tag, a=0, b=0):
    """Return a fresh Generator for the (seed, tag, a, b) stream."""
    counter = np.array([0, int(a) & _MASK64, int(b) & _MASK64, tag & _MASK64],
                       dtype=np.uint64)
    key = np.array([int(seed) & _MASK64, _KEY_PAD], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))

"""Counter-derived random streams.

A stream is a pure function of ``(seed, tag, *counters)``; nothing shares a
mutable generator, so draws do not depend on evaluation order or on how work
is split across workers.
"""

import zlib

import numpy as np


def tag_id(tag):
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed, tag, *counters):
    key = [int(seed) & 0xFFFFFFFF, tag_id(tag)] + [int(c) for c in counters]
    return np.random.default_rng(np.random.SeedSequence(key))

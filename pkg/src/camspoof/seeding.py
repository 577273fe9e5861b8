"""Named sub-seeds: every random stream is derived from one master seed."""
import zlib

import numpy as np


def name_key(name):
    return zlib.crc32(str(name).encode("utf-8"))


def sub_seed(master, *names):
    """Deterministic 63-bit seed for the stream identified by ``names``."""
    parts = [int(master) & 0xFFFFFFFFFFFFFFFF]
    parts += [n if isinstance(n, int) else name_key(n) for n in names]
    state = np.random.SeedSequence(parts).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def rng_for(master, *names):
    return np.random.default_rng(sub_seed(master, *names))

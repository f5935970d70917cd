"""Named, independent random streams derived from a single 64-bit seed."""

import numpy as np

STREAMS = {"data": 0, "init": 1, "folds": 2, "signal": 3}


def stream(seed, name, *keys):
    """Generator for stream ``name``; extra integer ``keys`` index sub-streams
    (start number, replication number, ...)."""
    if name not in STREAMS:
        raise KeyError(f"unknown stream {name!r}")
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence(seed, spawn_key=(STREAMS[name],) + tuple(int(k) for k in keys))
    return np.random.default_rng(ss)

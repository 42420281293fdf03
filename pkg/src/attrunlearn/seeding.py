"""Labeled sub-seeds so each stochastic component draws from its own stream."""

import hashlib

import numpy as np


def sub_seed(seed: int, *labels) -> int:
    h = hashlib.sha256(str(int(seed)).encode())
    for label in labels:
        h.update(b"/" + str(label).encode())
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(sub_seed(seed, *labels))

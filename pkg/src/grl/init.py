"""Weight initializers."""

import numpy as np


def trunc_normal(rng, shape, std, dtype=np.float32, bound=2.0):
    """Normal(0, std) truncated to ``[-bound*std, bound*std]`` by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)


def kaiming_uniform(rng, shape, dtype=np.float32):
    """U(-b, b) with b = sqrt(6 / fan_in); fan_in = prod(shape[1:])."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)

"""Parameter initialization helpers shared by the model modules."""

import numpy as np

from .tensor import Parameter


def rng_from_seed(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    """Fan-in scaled uniform init, U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def conv_param(rng, name, shape, dtype=np.float32):
    fan_in = int(np.prod(shape[1:]))
    return Parameter(name, kaiming_uniform(rng, shape, fan_in, dtype))


def zeros_param(name, shape, dtype=np.float32):
    return Parameter(name, np.zeros(shape, dtype=dtype))


def ones_param(name, shape, dtype=np.float32):
    return Parameter(name, np.ones(shape, dtype=dtype))

"""Signal constructions shared by the Hinich unit and acceptance tests."""

import numpy as np
from scipy.signal import firwin

FS = 16000


def qpc(seed, n=8000, f1=1111.0, f2=2333.0, noise=0.1):
    """Three tones whose phases are quadratically coupled, plus white noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(n) / FS
    p1, p2 = rng.uniform(0, 2 * np.pi, 2)
    return (np.cos(2 * np.pi * f1 * t + p1) + np.cos(2 * np.pi * f2 * t + p2)
            + np.cos(2 * np.pi * (f1 + f2) * t + p1 + p2) + noise * rng.standard_normal(n))


FIR = np.array([1.0, 0.6, -0.3, 0.2])
LOWPASS = firwin(63, 0.3)


def linear_process(seed, n=16384):
    """Centred exponential innovations through a fixed FIR filter."""
    rng = np.random.default_rng(seed)
    e = rng.exponential(1.0, n + 100) - 1.0
    return np.convolve(e, FIR, "valid")[:n]


def squared_lowpass(seed, n=16384):
    """Memoryless squaring of low-passed Gaussian noise."""
    rng = np.random.default_rng(seed)
    g = np.convolve(rng.standard_normal(n + 100), LOWPASS, "valid")[:n]
    return g ** 2

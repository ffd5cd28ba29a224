"""Shared test oracles."""

import math

import numpy as np

from kamres.potential import AnalyticPotential, example_potential, genericity_threshold


def symmetric_counterexample(delta=0.1, s=1.0):
    """Example potential whose (1, 0) profile is replaced by c cos 2t."""
    K = genericity_threshold(s, delta)
    f = example_potential(2, s, delta, int(math.floor(K)) + 5)
    coeffs = {k: c for k, c in f.coeffs.items() if k not in ((1, 0), (-1, 0))}
    coeffs[(2, 0)] = coeffs[(-2, 0)] = delta * math.exp(-2 * s)
    return AnalyticPotential(2, s, coeffs, support_radius=f.support_radius)


def random_test_function(rng):
    """A random trigonometric polynomial on [0, 2 pi] or polynomial on [-1, 1]."""
    if rng.random() < 0.5:
        a = rng.normal(size=4)
        ph = rng.uniform(0, 2 * np.pi, 4)
        c = rng.normal() * 0.5
        return (lambda x: c + sum(a[j] * np.cos((j + 1) * x + ph[j]) for j in range(4)),
                (0.0, 2 * math.pi))
    coef = rng.normal(size=int(rng.integers(2, 6)))
    return (lambda x: np.polyval(coef, x)), (-1.0, 1.0)

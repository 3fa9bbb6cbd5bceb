"""Independent reference implementations used by the tests.

Everything here is written as plain loops over the definitions, with no
shared code from the package, so agreement is evidence rather than echo.
"""
import math

import numpy as np
from scipy import stats


def l1(p, q):
    return sum(abs(float(a) - float(b)) for a, b in zip(p, q))


def kl(p, q):
    total = 0.0
    for a, b in zip(p, q):
        if a > 0:
            total += a * math.log(a / b)
    return total


def js(p, q):
    m = [(a + b) / 2 for a, b in zip(p, q)]
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def entropy(p):
    return -sum(a * math.log(a) for a in p if a > 0)


def brier(probs, labels):
    total = 0.0
    for row, y in zip(probs, labels):
        total += sum((float(p) - (1.0 if k == y else 0.0)) ** 2 for k, p in enumerate(row))
    return total / len(labels)


def t_interval(values, level=0.95):
    """(mean, half_width) from the textbook formula."""
    n = len(values)
    mean = sum(values) / n
    s = math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1))
    return mean, stats.t.ppf(1 - (1 - level) / 2, n - 1) * s / math.sqrt(n)


def random_histogram(rng, k, zero_prob=0.2):
    w = rng.random(k)
    w[rng.random(k) < zero_prob] = 0.0
    if w.sum() == 0:
        w[rng.integers(k)] = 1.0
    return w / w.sum()


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at flat vector ``x``."""
    g = np.zeros_like(x)
    for i in range(len(x)):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def relative_error(analytic, numeric):
    """Max abs elementwise error scaled by the gradient's magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def pacing_gap(spent_fraction_rows):
    out = []
    for row in spent_fraction_rows:
        T = len(row)
        out.append(sum(abs(row[t - 1] - t / T) for t in range(1, T + 1)) / T)
    return sum(out) / len(out)

"""Shared fixtures and brute-force oracles.

The oracles are deliberately naive (scalar loops, textbook formulas) so they
share no code path with the vectorised implementations they check.
"""

import math

import numpy as np
import pytest

from vstain.ingest import CoreImage


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def core_of(pixels, mpp=0.5, core_id="core"):
    return CoreImage(np.asarray(pixels, dtype=np.uint8), mpp=mpp, core_id=core_id)


def constant_core(value, shape=(16, 16), mpp=0.5):
    px = np.empty(shape + (3,), dtype=np.uint8)
    px[...] = value
    return core_of(px, mpp)


# --------------------------------------------------------------------------- #
# Oracles
# --------------------------------------------------------------------------- #

def point_in_polygon(x, y, rings):
    """Even-odd ray cast to +x, one point at a time."""
    inside = False
    for ring in rings:
        n = len(ring)
        for k in range(n):
            a0, b0 = ring[k]
            a1, b1 = ring[(k + 1) % n]
            if (b0 > y) != (b1 > y):
                xc = a0 + (y - b0) * (a1 - a0) / (b1 - b0)
                if xc > x:
                    inside = not inside
    return inside


def brute_mask(rings, height, width):
    m = np.zeros((height, width), dtype=bool)
    for r in range(height):
        for c in range(width):
            m[r, c] = point_in_polygon(c + 0.5, r + 0.5, rings)
    return m


def brute_mse(a, b):
    a = a.astype(np.float64) / 255.0
    b = b.astype(np.float64) / 255.0
    total = 0.0
    count = 0
    for v, w in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (v - w) ** 2
        count += 1
    return total / count


def brute_pcc(a, b):
    x = (a.astype(np.float64) / 255.0).ravel().tolist()
    y = (b.astype(np.float64) / 255.0).ravel().tolist()
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((p - mx) * (q - my) for p, q in zip(x, y))
    sxx = sum((p - mx) ** 2 for p in x)
    syy = sum((q - my) ** 2 for q in y)
    return sxy / math.sqrt(sxx * syy)


def brute_ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Direct per-window SSIM over every valid window position."""
    lum = np.array([0.299, 0.587, 0.114])
    x = (a.astype(np.float64) / 255.0) @ lum
    y = (b.astype(np.float64) / 255.0) @ lum
    r = (window - 1) / 2.0
    g1 = [math.exp(-((i - r) ** 2) / (2 * sigma * sigma)) for i in range(window)]
    s = sum(g1)
    g1 = [v / s for v in g1]
    c1, c2 = k1 ** 2, k2 ** 2
    h, w = x.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            mx = my = sxx = syy = sxy = 0.0
            for u in range(window):
                for v in range(window):
                    wt = g1[u] * g1[v]
                    p, q = x[i + u, j + v], y[i + u, j + v]
                    mx += wt * p
                    my += wt * q
                    sxx += wt * p * p
                    syy += wt * q * q
                    sxy += wt * p * q
            vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return min(1.0, sum(vals) / len(vals))


def anova_oracle(groups):
    """Textbook sums of squares: returns (F, df_between, df_within)."""
    allv = [v for g in groups for v in g]
    n, k = len(allv), len(groups)
    grand = sum(allv) / n
    ssb = sum(len(g) * (sum(g) / len(g) - grand) ** 2 for g in groups)
    ssw = sum(sum((v - sum(g) / len(g)) ** 2 for v in g) for g in groups)
    dfb, dfw = k - 1, n - k
    return (ssb / dfb) / (ssw / dfw), dfb, dfw


def cdf_of(values):
    """Empirical 256-bin CDF of a flat uint8 sequence."""
    hist = np.bincount(np.asarray(values, dtype=np.int64), minlength=256).astype(np.float64)
    return np.cumsum(hist) / hist.sum()


def textured(shape, seed, sigma=3.0):
    from vstain.synthetic import texture
    return texture(shape, np.random.default_rng(seed), sigma)

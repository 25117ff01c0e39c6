"""Closed-form generalization errors, transferability and phase regions.

The pole of the scratch error at gamma = 1 is returned as ``math.inf``;
region classification labels it "singular" instead of picking a sign.
"""
import math
from dataclasses import dataclass

import numpy as np

ZERO_BAND = 1e-12


@dataclass(frozen=True)
class RegionLabel:
    method: str
    label: str  # positive | negative | zero | singular


def scratch_ge(gamma, sigma):
    """Expected error of the min-norm interpolator at sample ratio gamma."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    s2 = sigma * sigma
    if gamma < 1:
        return ((1 - gamma) ** 2 + gamma * s2) / (1 - gamma)
    if gamma > 1:
        return s2 / (gamma - 1)
    return math.inf


def linear_transfer_ge(theta, sigma, n):
    """Finite-n error of last-layer retraining on sparsified features."""
    if n <= 2:
        raise ValueError(f"need n > 2, got {n}")
    s = math.sin(theta) ** 2
    return s + (sigma * sigma + s) / (n - 2)


def linear_transferability(gamma, theta, sigma):
    """Large-n transferability of linear transfer: scratch error minus sin^2(theta)."""
    sc = scratch_ge(gamma, sigma)
    if math.isinf(sc):
        return math.inf
    return sc - math.sin(theta) ** 2


def ridge_transfer_ge(theta, lam):
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    c2 = math.cos(theta) ** 2
    return 1.0 - (1.0 + 2.0 * lam) * c2 / (1.0 + lam) ** 2


def ridge_transferability(gamma, theta, sigma, lam):
    sc = scratch_ge(gamma, sigma)
    if math.isinf(sc):
        return math.inf
    return sc - ridge_transfer_ge(theta, lam)


def _one_minus_two_cos(theta):
    # 2 (cos(pi/3) - cos theta) as a product of sines, exactly zero at theta = pi/3
    return -4.0 * math.sin((math.pi / 3 + theta) / 2) * math.sin((math.pi / 3 - theta) / 2)


def finetune_transferability(gamma, theta):
    if gamma > 1:
        return 0.0
    return (gamma - 1.0) * _one_minus_two_cos(theta)


def finetune_ge(gamma, theta, sigma):
    sc = scratch_ge(gamma, sigma)
    if gamma > 1 or math.isinf(sc):
        return sc
    return sc + (1.0 - gamma) * _one_minus_two_cos(theta)


def transferability(method, gamma, theta, sigma, lam=0.0):
    if method == "linear":
        return linear_transferability(gamma, theta, sigma)
    if method == "ridge":
        return ridge_transferability(gamma, theta, sigma, lam)
    if method == "finetune":
        return finetune_transferability(gamma, theta)
    raise ValueError(f"unknown method {method!r}")


def transfer_ge(method, gamma, theta, sigma, lam=0.0, n=None):
    """Theoretical error of the transferred model; finite-n form for linear when n is given."""
    if method == "linear":
        if n is not None and n > 2:
            return linear_transfer_ge(theta, sigma, n)
        return math.sin(theta) ** 2
    if method == "ridge":
        return ridge_transfer_ge(theta, lam)
    if method == "finetune":
        return finetune_ge(gamma, theta, sigma)
    if method == "scratch":
        return scratch_ge(gamma, sigma)
    raise ValueError(f"unknown method {method!r}")


def negative_transfer_region(theta, sigma):
    """Gamma intervals where linear transfer hurts, as a list of (lo, hi) pairs.

    The overparameterized interval sits between the two roots of
    g^2 - g(1 + cos^2 - s^2) + cos^2 = 0; the underparameterized part is the
    ray gamma > 1 + s^2 / sin^2.
    """
    c2 = math.cos(theta) ** 2
    s2 = math.sin(theta) ** 2
    v = sigma * sigma
    out = []
    b = 1.0 + c2 - v
    disc = b * b - 4.0 * c2
    if sigma < 1 and disc > 0 and b > 0:
        r = math.sqrt(disc)
        lo, hi = 0.5 * (b - r), 0.5 * (b + r)
        if hi > lo:
            out.append((max(lo, 0.0), min(hi, 1.0)))
    if s2 > ZERO_BAND:
        out.append((1.0 + v / s2, math.inf))
    return out


def in_region(gamma, intervals):
    return any(lo < gamma < hi for lo, hi in intervals)


def classify(gamma, theta, sigma, method, lam=0.0):
    if method == "finetune":
        t = finetune_transferability(gamma, theta)
    elif gamma == 1:
        return RegionLabel(method, "singular")
    else:
        t = transferability(method, gamma, theta, sigma, lam)
    if t > ZERO_BAND:
        label = "positive"
    elif t < -ZERO_BAND:
        label = "negative"
    else:
        label = "zero"
    return RegionLabel(method, label)


def surface(method, gammas, thetas, sigma, lam=0.0):
    """Transferability on a (theta, gamma) mesh, NaN at the pole."""
    T = np.empty((len(thetas), len(gammas)))
    for i, th in enumerate(thetas):
        for j, g in enumerate(gammas):
            v = transferability(method, g, th, sigma, lam)
            T[i, j] = np.nan if math.isinf(v) else v
    return T

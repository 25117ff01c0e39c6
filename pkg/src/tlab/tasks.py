"""Source/target task pairs, finite datasets and distribution discrepancies.

Tasks are linear functions of isotropic Gaussian inputs. A pair is two unit
coefficient vectors at a fixed angle. Datasets carry Gaussian label noise.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

MAX_W1_SAMPLES = 2000


@dataclass(frozen=True)
class TaskPair:
    d: int
    beta_src: np.ndarray
    beta_tgt: np.ndarray
    theta: float


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    sigma: float
    n: int
    d: int
    seed: int
    beta: np.ndarray = None  # ground truth used to draw y, kept for error evaluation


@dataclass(frozen=True)
class FunctionInSpan:
    """Function written as coefficients over a fixed orthonormal basis."""

    coeffs: np.ndarray
    norm_sq: float

    @classmethod
    def from_coeffs(cls, coeffs):
        c = np.asarray(coeffs, dtype=float).copy()
        return cls(coeffs=c, norm_sq=float(c @ c))


def _rng(seed):
    return np.random.default_rng(seed)


def make_task_pair(d, theta, seed):
    """Unit source vector uniform on the sphere plus a target at angle theta."""
    if d < 2:
        raise ValueError(f"need d >= 2 to place two vectors at an angle, got d={d}")
    if not (0.0 <= theta <= math.pi):
        raise ValueError(f"theta must lie in [0, pi], got {theta}")
    bs = _rng(seed).standard_normal(d)
    bs /= np.linalg.norm(bs)
    # complement direction from its own stream so beta_src does not depend on it
    nu = _rng(seed + 1).standard_normal(d)
    nu -= (nu @ bs) * bs
    nu -= (nu @ bs) * bs
    nu /= np.linalg.norm(nu)
    if theta == 0.0:
        bt = bs.copy()
    elif theta == math.pi:
        bt = -bs
    else:
        bt = math.cos(theta) * bs + math.sin(theta) * nu
        bt /= np.linalg.norm(bt)
    return TaskPair(d=d, beta_src=bs, beta_tgt=bt, theta=float(theta))


def sample_dataset(beta, n, sigma, seed):
    """Draw X with N(0,1) entries and y = X beta + N(0, sigma^2) noise."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    beta = np.asarray(beta, dtype=float)
    d = beta.shape[0]
    rng = _rng(seed)
    X = rng.standard_normal((n, d))
    eps = rng.standard_normal(n)
    y = X @ beta
    if sigma > 0:
        y = y + sigma * eps
    return Dataset(X=X, y=y, sigma=float(sigma), n=int(n), d=int(d), seed=int(seed), beta=beta.copy())


def kl_divergence(pair, sigma):
    """KL between the joint (x, y) laws of the two tasks: |bs - bt|^2 / (2 sigma^2)."""
    if sigma <= 0:
        raise ValueError("KL between noiseless tasks is undefined; sigma must be > 0")
    diff = pair.beta_src - pair.beta_tgt
    return float(diff @ diff) / (2.0 * sigma * sigma)


def _as_points(samples):
    a = np.asarray(samples, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return a


def joint_samples(data):
    """Stack a Dataset into (x, y) points in R^(d+1)."""
    return np.hstack([data.X, data.y[:, None]])


def empirical_w1(samples_a, samples_b):
    """Exact W1 between two equal-size empirical measures (Euclidean ground cost).

    With uniform weights and equal counts the optimal plan is a permutation,
    so the transport LP reduces to a linear assignment problem.
    """
    a = _as_points(samples_a)
    b = _as_points(samples_b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empirical_w1 needs non-empty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"ambient dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"sample counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] > MAX_W1_SAMPLES:
        raise ValueError(f"at most {MAX_W1_SAMPLES} samples supported, got {a.shape[0]}")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def dudley_lower_bound(f, g, sigma):
    """Lower bound on the Dudley distance used by the far-apart construction."""
    return 0.5 * math.exp(-sigma * sigma / 2.0) * (f.norm_sq + g.norm_sq)


def far_apart_dudley(f, delta, sigma):
    """Same-feature function g whose Dudley lower bound against f reaches delta."""
    a = f.norm_sq
    if a <= 0:
        raise ValueError("f must be non-zero")
    if delta <= 0:
        raise ValueError("delta must be positive")
    scale = math.sqrt(abs(2.0 * delta * math.exp(sigma * sigma / 2.0) - a) / a)
    g = FunctionInSpan.from_coeffs(scale * f.coeffs)
    bound = dudley_lower_bound(f, g, sigma)
    assert bound >= delta * (1 - 1e-12), (bound, delta)
    return g


def kl_between(f, g, sigma):
    """KL between label distributions of two functions under N(0, sigma^2) noise."""
    diff = f.coeffs - g.coeffs
    return float(diff @ diff) / (2.0 * sigma * sigma)


def far_apart_kl(f, delta, sigma):
    """g = -alpha f with alpha large enough that KL(p_f || p_g) >= delta.

    alpha takes the larger of the two candidate bounds; the smaller one alone
    only guarantees delta / 2.
    """
    if f.norm_sq <= 0:
        raise ValueError("f must be non-zero")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if delta <= 0:
        raise ValueError("delta must be positive")
    nf = math.sqrt(f.norm_sq)
    alpha = max(sigma * math.sqrt(delta) / nf, math.sqrt(2.0 * delta * sigma * sigma) / nf)
    g = FunctionInSpan.from_coeffs(-alpha * f.coeffs)
    kl = (1 + alpha) ** 2 * f.norm_sq / (2 * sigma * sigma)
    assert abs(kl - kl_between(f, g, sigma)) <= 1e-9 * max(1.0, kl)
    assert kl >= delta, (kl, delta)
    return g

"""Transfer protocols on deep linear nets: linear probe, ridge probe, fine-tuning, scratch.

Generalization error for a linear predictor on isotropic Gaussian inputs is
|beta_hat - beta_t|^2, so every outcome stores that directly.
"""
import functools
import math
from dataclasses import dataclass

import numpy as np

from . import deep_linear as dl
from .tasks import make_task_pair, sample_dataset

# Relative singular-value cutoff for the ridgeless probe. Pretrained features
# are rank one up to O(alpha^2) residue; an eps-level cutoff would fit the
# noise through those residual directions.
PROBE_RCOND = 1e-2

PRETRAIN_CFG = dl.FlowConfig(eta=1e-3, max_steps=200_000, loss_tol=1e-14)


@dataclass
class TransferOutcome:
    beta_hat: np.ndarray
    ge: float
    method: str
    seed: int
    n: int
    d: int
    theta: float = float("nan")
    sigma: float = float("nan")
    lam: float = 0.0
    steps: int = 0
    drift: float = 0.0


def _outcome(beta_hat, data, method, theta=float("nan"), lam=0.0, steps=0, drift=0.0):
    e = beta_hat - data.beta
    return TransferOutcome(beta_hat=beta_hat, ge=float(e @ e), method=method, seed=data.seed,
                           n=data.n, d=data.d, theta=theta, sigma=data.sigma, lam=lam,
                           steps=steps, drift=drift)


def pretrain(beta_src, L=2, alpha=1e-5, init_mode="gaussian", seed=0, cfg=PRETRAIN_CFG, margin=1.0):
    """Population gradient flow on the source task from a small init."""
    d = len(beta_src)
    net = dl.init_balanced(L, d, alpha, margin=margin, mode=init_mode, seed=seed)
    return dl.run_gradient_flow(net, dl.Population(beta_src), cfg)


@functools.lru_cache(maxsize=64)
def _cached_pretrain(task_seed, d, L, alpha, init_mode, init_seed, cfg):
    pair = make_task_pair(d, 0.0, task_seed)
    return pretrain(pair.beta_src, L, alpha, init_mode, init_seed, cfg)


def pretrained_for_task(task_seed, d, L=2, alpha=1e-5, init_mode="gaussian", init_seed=None, cfg=PRETRAIN_CFG):
    """Pretrained net for the source vector of ``make_task_pair(d, ., task_seed)``.

    The source vector does not depend on theta, so one pretraining serves
    every target angle drawn from the same task seed.
    """
    if init_seed is None:
        init_seed = task_seed + 2
    return _cached_pretrain(task_seed, d, L, alpha, init_mode, init_seed, cfg)


def linear_transfer(pretrained, data, lam=0.0, rcond=PROBE_RCOND, theta=float("nan")):
    """Retrain only W_L on frozen features Phi = X W_1 ... W_{L-1}."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    Phi = dl.feature_map(pretrained)
    F = data.X @ Phi
    if lam == 0:
        w = dl.pinv_apply(F, data.y, rcond=rcond)
    else:
        A = F.T @ F + data.n * lam * np.eye(F.shape[1])
        w = np.linalg.solve(A, F.T @ data.y)
    beta_hat = Phi @ w
    return _outcome(beta_hat, data, "linear" if lam == 0 else "ridge", theta, lam)


def probe_closed_form(beta_src, data):
    """b beta_s with b = beta_s^T X^T y / beta_s^T X^T X beta_s (exactly sparsified features)."""
    z = data.X @ beta_src
    return (z @ data.y) / (z @ z) * beta_src


def fine_tune(pretrained, data, cfg=dl.FlowConfig(eta=5e-3), theta=float("nan")):
    """Train every layer on the target sample, starting from the pretrained weights."""
    res = dl.run_gradient_flow(pretrained, dl.Empirical(data), cfg)
    return _outcome(dl.end_to_end_beta(res.net), data, "finetune", theta,
                    steps=res.steps, drift=res.max_drift)


def finetune_closed_form(beta_src, data, corrected=False):
    """beta_sc + (I - P_row(X)) beta_s, optionally with the balanced-weight scale s.

    With W_1 = beta_s v^T and balanced weights, the null-space part of the
    fine-tuned predictor is carried by W_1 while W_2 stretches to fit the
    row-space part, which rescales it by s with
    s^2 = (a + sqrt(a^2 + 4 |beta_sc|^2)) / 2, a = |(I - P) beta_s|^2.
    """
    X = data.X
    _, sv, Vt = np.linalg.svd(X, full_matrices=False)
    Vt = Vt[sv > max(X.shape) * np.finfo(float).eps * sv[0]]
    bsc = dl.min_norm_solution(X, data.y)
    null = beta_src - Vt.T @ (Vt @ beta_src)
    if not corrected:
        return bsc + null
    a = float(null @ null)
    s = math.sqrt((a + math.sqrt(a * a + 4.0 * float(bsc @ bsc))) / 2.0)
    return bsc + s * null


def scratch_train(d, data, cfg=dl.FlowConfig(), mode="oracle", L=2, alpha=1e-5, seed=0, init_mode="gaussian"):
    """Target-only training: the min-norm interpolator, or gradient flow from a small init."""
    if mode == "oracle":
        return _outcome(dl.min_norm_solution(data.X, data.y), data, "scratch")
    if mode == "flow":
        net = dl.init_balanced(L, d, alpha, mode=init_mode, seed=seed)
        res = dl.run_gradient_flow(net, dl.Empirical(data), cfg)
        return _outcome(dl.end_to_end_beta(res.net), data, "scratch", steps=res.steps, drift=res.max_drift)
    raise ValueError(f"unknown scratch mode {mode!r}")


def paired_replicate(method, d, n, theta, sigma, task_seed, data_seed, lam=0.0, L=2, alpha=1e-5,
                     init_mode="gaussian", ft_cfg=dl.FlowConfig(eta=5e-3)):
    """One replicate: scratch and transfer evaluated on the very same Dataset."""
    pair = make_task_pair(d, theta, task_seed)
    data = sample_dataset(pair.beta_tgt, n, sigma, data_seed)
    sc = scratch_train(d, data)
    pre = pretrained_for_task(task_seed, d, L, alpha, init_mode).net
    if method in ("linear", "ridge"):
        tx = linear_transfer(pre, data, lam if method == "ridge" else 0.0, theta=theta)
    elif method == "finetune":
        tx = fine_tune(pre, data, ft_cfg, theta=theta)
    else:
        raise ValueError(f"unknown method {method!r}")
    return sc, tx


def transferability_estimate(config, n_seeds, base_seed=0):
    """Mean and standard error of ge_scratch - ge_transfer over paired replicates."""
    if n_seeds < 2:
        raise ValueError("need at least 2 seeds for a standard error")
    diffs = np.empty(n_seeds)
    for k in range(n_seeds):
        sc, tx = paired_replicate(
            config.get("method", "linear"), config["d"], config["n"], config["theta"], config["sigma"],
            task_seed=base_seed + 1000 * k, data_seed=base_seed + 1000 * k + 500,
            lam=config.get("lambda", 0.0), L=config.get("L", 2), alpha=config.get("alpha", 1e-5),
        )
        diffs[k] = sc.ge - tx.ge
    return float(diffs.mean()), float(diffs.std(ddof=1) / math.sqrt(n_seeds))

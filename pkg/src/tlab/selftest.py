"""Fast property checks behind ``tlab selftest`` (a few seconds, no long training)."""
import math
import time

import numpy as np
from scipy import integrate, stats

from . import deep_linear as dl
from . import tasks, theory
from .relu import _pykernels
from .relu import kernels as rk
from .relu import model as rm

CHECKS = []


def check(fn):
    CHECKS.append(fn)
    return fn


def _close(a, b, tol):
    return abs(a - b) <= tol


@check
def closed_forms():
    ok = _close(theory.scratch_ge(0.5, 0.2), 0.54, 1e-12) and _close(theory.scratch_ge(2, 0.2), 0.04, 1e-12)
    ok &= math.isinf(theory.scratch_ge(1.0, 0.2))
    ok &= _close(theory.linear_transfer_ge(0, 0.2, 100), 0.04 / 98, 1e-15)
    ok &= _close(theory.linear_transfer_ge(math.pi / 2, 0, 4), 1.5, 1e-12)
    ok &= _close(theory.linear_transferability(2, math.pi / 6, 0.2), -0.21, 1e-12)
    ok &= _close(theory.ridge_transfer_ge(0, 1), 0.25, 1e-15)
    ok &= abs(theory.finetune_transferability(0.5, math.pi / 3)) < 1e-15
    ok &= theory.classify(2, 0.3, 0.2, "finetune").label == "zero"
    return ok


@check
def region_matches_sign_scan():
    rng = np.random.default_rng(0)
    gs = np.arange(1e-3, 3.0, 1e-3)
    gs = gs[np.abs(gs - 1) > 1e-9]
    for _ in range(20):
        th, sg = rng.uniform(0, math.pi / 2), rng.uniform(0, 0.9)
        iv = theory.negative_transfer_region(th, sg)
        for g in gs:
            T = theory.linear_transferability(g, th, sg)
            near = any(min(abs(g - lo), abs(g - hi)) < 2e-3 for lo, hi in iv)
            if not near and abs(T) > 1e-9 and (T < 0) != theory.in_region(g, iv):
                return False
    return True


@check
def task_pair_invariants():
    for d, th, s in [(2, 0.3, 1), (5, math.pi, 2), (500, math.pi / 3, 1), (17, 0.0, 9)]:
        p = tasks.make_task_pair(d, th, s)
        if abs(np.linalg.norm(p.beta_src) - 1) > 1e-12 or abs(np.linalg.norm(p.beta_tgt) - 1) > 1e-12:
            return False
        if abs(p.beta_src @ p.beta_tgt - math.cos(th)) > 1e-12:
            return False
    return True


@check
def kl_quadrature():
    # one-dimensional tasks y = b x + noise, KL of the joint laws by 2-D quadrature
    bs, bt, sg = 1.0, -0.3, 0.7
    pair = tasks.TaskPair(d=1, beta_src=np.array([bs]), beta_tgt=np.array([bt]), theta=math.pi)

    def integrand(y, x):
        p = stats.norm.pdf(x) * stats.norm.pdf(y, bs * x, sg)
        q = stats.norm.pdf(x) * stats.norm.pdf(y, bt * x, sg)
        return p * math.log(p / q) if p > 0 else 0.0

    val, _ = integrate.dblquad(integrand, -9, 9, lambda x: bs * x - 9 * sg, lambda x: bs * x + 9 * sg,
                               epsabs=1e-12, epsrel=1e-10)
    return abs(val - tasks.kl_divergence(pair, sg)) <= 1e-6 * val


@check
def w1_properties():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((80, 3)), rng.standard_normal((80, 3))
    ok = tasks.empirical_w1(a, a) == 0.0
    ok &= _close(tasks.empirical_w1(2.5 * a, 2.5 * b), 2.5 * tasks.empirical_w1(a, b), 1e-10)
    x, y = rng.standard_normal(300), rng.standard_normal(300) + 0.4
    ok &= _close(tasks.empirical_w1(x, y), stats.wasserstein_distance(x, y), 1e-10)
    return ok


@check
def far_apart_bounds():
    rng = np.random.default_rng(4)
    for _ in range(50):
        f = tasks.FunctionInSpan.from_coeffs(rng.standard_normal(6) * rng.uniform(0.1, 3))
        delta, sg = rng.uniform(1e-3, 20), rng.uniform(0.05, 2)
        g = tasks.far_apart_dudley(f, delta, sg)
        h = tasks.far_apart_kl(f, delta, sg)
        if tasks.dudley_lower_bound(f, g, sg) < delta * (1 - 1e-12) or tasks.kl_between(f, h, sg) < delta:
            return False
    return True


@check
def linear_gradients_fd():
    rng = np.random.default_rng(5)
    net = dl.init_balanced(3, 4, 0.7, mode="gaussian", seed=1)
    b = rng.standard_normal(4)
    obj = dl.Population(b)
    g = dl.population_gradients(net, b)
    h = 1e-6
    for l, W in enumerate(net.layers):
        num = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            W[idx] += h
            lp = dl.loss_value(net, obj)
            W[idx] -= 2 * h
            lm = dl.loss_value(net, obj)
            W[idx] += h
            num[idx] = (lp - lm) / (2 * h)
        if np.linalg.norm(num - g[l]) > 1e-5 * max(np.linalg.norm(g[l]), 1e-12):
            return False
    return True


@check
def init_condition():
    net = dl.init_balanced(2, 3, 1e-5, margin=1.0, mode="scaled_orthogonal", seed=0)
    eig = net.init_record["bar_min_eig"][0]
    return abs(eig - 1.0) < 1e-10 and dl.balance_defect(net) == 0.0


@check
def min_norm_examples():
    ok = np.allclose(dl.min_norm_solution(np.eye(3), np.array([1.0, 2, 3])), [1, 2, 3])
    ok &= np.allclose(dl.min_norm_solution(np.array([[1.0, 0.0]]), np.array([2.0])), [2, 0])
    return bool(ok)


@check
def arccos_kernel_values():
    e = np.eye(3)
    return (rm.arccos_kernel(e[0], e[0]) == 0.5 and abs(rm.arccos_kernel(e[0], e[1]) - 1 / (2 * math.pi)) < 1e-15
            and abs(rm.arccos_kernel(e[0], -e[0])) < 1e-15)


@check
def kernel_backends_agree():
    rng = np.random.default_rng(6)
    W = rm.random_directions(60, 8, rng)
    U = W @ W.T
    K1, P1 = rk.arccos_kernel_matrix(U, True)
    K2, P2 = _pykernels.arccos_kernel_matrix(U, True)
    return np.abs(K1 - K2).max() < 1e-14 and np.abs(P1 - P2).max() < 1e-14


@check
def relu_inner_product_mc():
    rng = np.random.default_rng(7)
    a = rm.ReluNet(rm.random_directions(5, 4, rng), rng.standard_normal(5))
    b = rm.ReluNet(rm.random_directions(3, 4, rng), rng.standard_normal(3))
    X = rng.standard_normal((200_000, 4))
    v = a(X) * b(X)
    return abs(v.mean() - rm.l2_inner_product(a, b)) <= 3 * v.std() / math.sqrt(v.size)


@check
def power_law_exact():
    ns = np.array([10, 30, 100, 300, 1000.0])
    A, nu = rm.power_law_fit(ns, 2 * ns ** -1.2)
    return abs(A - 2) < 1e-10 and abs(nu - 1.2) < 1e-10 and abs(rm.phase_boundary_predict(0.02, 2, 1) - 100) < 1e-9


def main(verbose=True):
    t0 = time.time()
    failed = 0
    for fn in CHECKS:
        try:
            ok = bool(fn())
        except Exception as exc:  # report and keep going
            ok = False
            if verbose:
                print(f"  {fn.__name__} raised {exc!r}")
        failed += not ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {fn.__name__}")
    if verbose:
        print(f"{len(CHECKS) - failed}/{len(CHECKS)} checks passed in {time.time() - t0:.1f} s (kernels: {rk.BACKEND})")
    return 0 if failed == 0 else 1

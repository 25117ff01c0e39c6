import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tlab.deep_linear import DivergenceError
from tlab.relu import _pykernels
from tlab.relu import kernels as rk
from tlab.relu import model as rm


def rand_net(m, d, rng, scale=1.0):
    return rm.ReluNet(rm.random_directions(m, d, rng), scale * rng.standard_normal(m))


def mc_mean(v):
    return v.mean(), v.std(ddof=1) / math.sqrt(v.size)


def test_arccos_kernel_values():
    e = np.eye(4)
    assert rm.arccos_kernel(e[0], e[0]) == 0.5
    assert abs(rm.arccos_kernel(e[0], e[1]) - 1 / (2 * math.pi)) <= 1e-15
    assert abs(rm.arccos_kernel(e[0], -e[0])) <= 1e-15
    # rounding past |u| = 1 is clamped
    assert rm.arccos_kernel(e[0] * (1 + 1e-15), e[0]) == 0.5


@pytest.mark.parametrize("impl", [rk, _pykernels])
def test_kernel_matrix_matches_scalar(impl):
    rng = np.random.default_rng(0)
    W = rm.random_directions(12, 5, rng)
    K, Kp = impl.arccos_kernel_matrix(W @ W.T, True)
    ref = np.array([[rm.arccos_kernel(a, b) for b in W] for a in W])
    assert np.abs(K - ref).max() <= 1e-14
    assert np.all(np.diag(K) == 0.5)
    # derivative of the kernel in u: (pi - arccos u) / (2 pi)
    U = np.clip(W @ W.T, -1, 1)
    np.fill_diagonal(U, 1.0)
    assert np.abs(Kp - (math.pi - np.arccos(U)) / (2 * math.pi)).max() <= 1e-14


def test_backends_agree():
    rng = np.random.default_rng(1)
    W = rm.random_directions(80, 6, rng)
    V = rm.random_directions(30, 6, rng)
    for U, sym in ((W @ W.T, True), (W @ V.T, False)):
        a, b = rk.arccos_kernel_matrix(U, sym), _pykernels.arccos_kernel_matrix(U, sym)
        assert np.abs(a[0] - b[0]).max() <= 1e-14 and np.abs(a[1] - b[1]).max() <= 1e-14


@settings(max_examples=100, deadline=None)
@given(m=st.integers(1, 40), d=st.integers(1, 8), seed=st.integers(0, 10**6))
def test_gram_psd(m, d, seed):
    rng = np.random.default_rng(seed)
    a, b = rand_net(m, d, rng), rand_net(m + 3, d, rng)
    g = rm.gram_matrices(a, b)
    for M in (g.K, g.K_star):
        assert np.allclose(M, M.T)
        assert np.linalg.eigvalsh(M)[0] >= -1e-10 * np.trace(M)
    assert np.allclose(np.diag(g.K), 1 / (2 * m))


def test_net_validation():
    with pytest.raises(ValueError):
        rm.ReluNet(np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(ValueError):
        rm.ReluNet(np.ones((2, 3)), np.ones(2))
    with pytest.raises(ValueError):
        rm.ReluNet(np.eye(3), np.ones(2))
    with pytest.raises(ValueError):
        rm.init_student(0, 3, 0)


def test_teacher_pair_examples():
    p = rm.make_teacher_pair(20, 5, 0.0, 1)
    assert np.array_equal(p.source.W, p.target.W) and np.array_equal(p.source.c, p.target.c)
    assert p.source.scaling == p.target.scaling
    p = rm.make_teacher_pair(100, 10, 0.5, 2)
    assert p.source.m == 50 and p.source.scaling == 1 / 50 and len(p.ablated_set) == 50
    keep = np.setdiff1d(np.arange(100), p.ablated_set)
    assert np.array_equal(p.source.W, p.target.W[keep]) and np.array_equal(p.source.c, p.target.c[keep])
    q = rm.make_teacher_pair(100, 10, 0.5, 2)
    assert np.array_equal(p.target.W, q.target.W) and np.array_equal(p.ablated_set, q.ablated_set)


@pytest.mark.parametrize("mu,m_star", [(1.0, 10), (0.25, 10), (-0.1, 10)])
def test_teacher_pair_errors(mu, m_star):
    with pytest.raises(ValueError):
        rm.make_teacher_pair(m_star, 4, mu, 0)


def test_nested_pairs_are_nested():
    pairs = rm.nested_teacher_pairs(20, 5, [0.0, 0.2, 0.5, 0.8], 3)
    for a, b in zip(pairs[:-1], pairs[1:]):
        assert set(a.ablated_set) <= set(b.ablated_set)
        assert np.array_equal(a.target.W, b.target.W)


def test_inner_product_examples():
    w = np.array([[0.6, 0.8]])
    f = rm.ReluNet(w, [1.0])
    assert abs(rm.l2_inner_product(f, f) - 0.5) <= 1e-15
    p = rm.make_teacher_pair(10, 4, 0.0, 0)
    assert abs(rm.l2_inner_product(p.source, p.target) - rm.l2_inner_product(p.target, p.target)) <= 1e-15


def test_inner_product_and_loss_vs_monte_carlo():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rand_net(rng.integers(1, 8), 5, rng), rand_net(rng.integers(1, 8), 5, rng)
        X = rng.standard_normal((1_000_000, 5))
        fa, fb = a(X), b(X)
        m, se = mc_mean(fa * fb)
        assert abs(m - rm.l2_inner_product(a, b)) <= 3 * se
        m, se = mc_mean(0.5 * (fa - fb) ** 2)
        assert abs(m - rm.population_loss_relu(a, b)) <= 3 * se


def test_population_loss_examples():
    rng = np.random.default_rng(3)
    t = rand_net(6, 4, rng)
    assert abs(rm.population_loss_relu(t, t)) <= 1e-15
    z = rm.ReluNet(rm.random_directions(5, 4, rng), np.zeros(5))
    assert abs(rm.population_loss_relu(z, t) - 0.5 * rm.l2_inner_product(t, t)) <= 1e-15
    assert rm.generalization_error(z, t) == 2 * rm.population_loss_relu(z, t)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), m=st.integers(1, 6), ms=st.integers(1, 6), d=st.integers(2, 5))
def test_population_gradients_fd(seed, m, ms, d):
    rng = np.random.default_rng(seed)
    s, t = rand_net(m, d, rng), rand_net(ms, d, rng)
    W, c = s.W.copy(), s.c.copy()
    _, gc, gW = rm.population_gradients_relu(W, c, t)
    h = 1e-6

    def loss(W_, c_):
        return rm.population_gradients_relu(W_, c_, t)[0]

    num_c = np.array([(loss(W, c + h * e) - loss(W, c - h * e)) / (2 * h) for e in np.eye(m)])
    num_W = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        E = np.zeros_like(W)
        E[idx] = h
        num_W[idx] = (loss(W + E, c) - loss(W - E, c)) / (2 * h)
    assert np.linalg.norm(num_c - gc) <= 1e-4 * max(np.linalg.norm(gc), 1e-8)
    assert np.linalg.norm(num_W - gW) <= 1e-4 * max(np.linalg.norm(gW), 1e-8)


def test_empirical_gradients_fd():
    rng = np.random.default_rng(4)
    s = rand_net(5, 3, rng)
    X, y = rng.standard_normal((40, 3)), rng.standard_normal(40)
    _, gc, gW = rm.empirical_loss_grads(s.W, s.c, X, y)
    h = 1e-6
    f = lambda W, c: rm.empirical_loss_grads(W, c, X, y)[0]
    num_c = np.array([(f(s.W, s.c + h * e) - f(s.W, s.c - h * e)) / (2 * h) for e in np.eye(5)])
    num_W = np.zeros_like(s.W)
    for idx in np.ndindex(s.W.shape):
        E = np.zeros_like(s.W)
        E[idx] = h
        num_W[idx] = (f(s.W + E, s.c) - f(s.W - E, s.c)) / (2 * h)
    assert np.linalg.norm(num_c - gc) <= 1e-6 * np.linalg.norm(gc)
    assert np.linalg.norm(num_W - gW) <= 1e-6 * np.linalg.norm(gW)


def test_train_population_keeps_sphere_and_descends():
    pair = rm.make_teacher_pair(10, 8, 0.0, 5)
    st_ = rm.init_student(40, 8, 6)
    res = rm.train_relu(st_, rm.PopulationObjective(pair.target), rm.ReluTrainConfig(lr_per_width=5, max_steps=3000))
    assert np.abs(np.linalg.norm(res.net.W, axis=1) - 1).max() <= 1e-10
    tv = rm.target_variance(pair.target)
    assert res.final_loss < 0.05 * 0.5 * tv
    assert np.array_equal(st_.c, np.full(40, 1e-7))


def test_train_empirical_stops_at_tolerance_or_cap():
    pair = rm.make_teacher_pair(5, 4, 0.0, 1)
    data = rm.sample_relu_dataset(pair.target, 20, 0.0, 2)
    cfg = rm.ReluTrainConfig(lr_per_width=10, max_steps=2000, loss_tol=1e-6)
    res = rm.train_relu(rm.init_student(30, 4, 3), rm.EmpiricalObjective(data.X, data.y), cfg)
    assert res.final_loss <= 1e-6 or res.steps == cfg.max_steps
    assert np.abs(np.linalg.norm(res.net.W, axis=1) - 1).max() <= 1e-10


def test_train_divergence():
    pair = rm.make_teacher_pair(5, 4, 0.0, 1)
    data = rm.sample_relu_dataset(pair.target, 20, 0.0, 2)
    st_ = rm.ReluNet(rm.random_directions(30, 4, np.random.default_rng(0)), np.ones(30))
    with pytest.raises(DivergenceError):
        rm.train_relu(st_, rm.EmpiricalObjective(data.X, data.y), rm.ReluTrainConfig(lr_per_width=1e4, max_steps=500))


def test_sample_dataset_noiseless():
    pair = rm.make_teacher_pair(5, 4, 0.0, 1)
    data = rm.sample_relu_dataset(pair.target, 30, 0.0, 2)
    assert np.array_equal(data.y, pair.target(data.X))
    with pytest.raises(ValueError):
        rm.sample_relu_dataset(pair.target, 0, 0.0, 2)


def test_gram_self_consistency():
    t = rand_net(7, 4, np.random.default_rng(5))
    g = rm.gram_matrices(t, t)
    assert np.abs(g.K - g.K_star).max() <= 1e-12 and np.abs(g.K - g.K_tilde).max() <= 1e-12


def test_projection_target_in_span():
    rng = np.random.default_rng(6)
    t = rand_net(5, 6, rng)
    extra = rm.random_directions(15, 6, rng)
    s = rm.ReluNet(np.vstack([t.W, extra]), np.zeros(20))
    p = rm.projection_norms(s, t)
    assert p.perp <= 1e-8
    assert abs(p.par + p.perp_raw - p.total) <= 1e-8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), m=st.integers(1, 30), ms=st.integers(1, 10))
def test_projection_decomposition(seed, m, ms):
    rng = np.random.default_rng(seed)
    s, t = rand_net(m, 5, rng), rand_net(ms, 5, rng)
    p = rm.projection_norms(s, t)
    assert abs(p.par + p.perp_raw - p.total) <= 1e-8
    assert p.perp >= 0 and abs(p.total - rm.l2_inner_product(t, t)) <= 1e-12


def test_projection_errors():
    t = rand_net(3, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        rm.projection_norms(t, t, eig_cutoff=0)


def test_perp_monotone_in_mu_source_features():
    # students equal to the source teacher: span shrinks as neurons are ablated
    mus = np.round(np.arange(10) * 0.1, 10)
    perp = np.zeros(len(mus))
    for draw in range(10):
        for i, p in enumerate(rm.nested_teacher_pairs(20, 8, mus, 100 + draw)):
            perp[i] += rm.projection_norms(p.source, p.target).perp / 10
    assert perp[0] <= 1e-8
    assert np.all(np.diff(perp) >= 0)


def test_power_law_examples():
    ns = np.array([50, 100, 200, 400, 800.0])
    A, nu = rm.power_law_fit(ns, 2 * ns ** -1.2)
    assert abs(A - 2) <= 1e-10 and abs(nu - 1.2) <= 1e-10
    with pytest.raises(ValueError):
        rm.power_law_fit([1, 2], [1, 1])
    with pytest.raises(ValueError):
        rm.power_law_fit([1, 2, 3], [1, 0, 1])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.floats(1e-3, 1e3))
def test_power_law_scale(seed, c):
    rng = np.random.default_rng(seed)
    ns = np.sort(rng.uniform(10, 5000, 6))
    ges = rng.uniform(0.01, 1, 6)
    A, nu = rm.power_law_fit(ns, ges)
    A2, nu2 = rm.power_law_fit(ns, c * ges)
    assert abs(nu2 - nu) <= 1e-10 and abs(A2 / (c * A) - 1) <= 1e-10


def test_phase_boundary_examples():
    assert abs(rm.phase_boundary_predict(0.3, 0.3, 1.7) - 1) <= 1e-12
    n = rm.phase_boundary_predict(0.02, 2, 1)
    assert abs(n - 100) <= 1e-9 and abs(2 * n ** -1 - 0.02) <= 1e-15
    assert math.isinf(rm.phase_boundary_predict(0.0, 2, 1))
    assert rm.phase_boundary_predict(1e-300, 2, 1) > 1e200


def test_probe_transfer_recovers_in_span_target():
    t = rand_net(4, 6, np.random.default_rng(7))
    data = rm.sample_relu_dataset(t, 200, 0.0, 1)
    s = rm.ReluNet(t.W, np.zeros(4))
    assert rm.generalization_error(rm.probe_transfer(s, data), t) <= 1e-20


SMALL = rm.ReluExperiment(m=100, m_star=20, d=20, teacher_seed=3,
                          pretrain=rm.ReluTrainConfig(lr_per_width=5.0, max_steps=8000, loss_tol=1e-8),
                          train=rm.ReluTrainConfig(lr_per_width=10.0, max_steps=4000, loss_tol=1e-6))


@pytest.fixture(scope="module")
def small_pretrained():
    out = {}
    for mu in (0.0, 0.5):
        pair = rm.make_teacher_pair(20, 20, mu, 3)
        out[mu] = (pair, rm.pretrain_on_source(SMALL, pair, seed=4).net)
    return out


def test_pretrained_student_span_mu_zero(small_pretrained):
    pair, net = small_pretrained[0.0]
    p = rm.projection_norms(net, pair.target)
    assert p.perp / rm.target_variance(pair.target) <= 0.02
    assert np.abs(np.linalg.norm(net.W, axis=1) - 1).max() <= 1e-10


def test_relu_transferability_signs(small_pretrained):
    T0, se0, _ = rm.relu_transferability(0.0, 400, [0, 1], SMALL, pretrained=small_pretrained[0.0][1])
    assert T0 >= -3 * se0
    T5, se5, rows = rm.relu_transferability(0.5, 1600, [0, 1], SMALL, pretrained=small_pretrained[0.5][1])
    assert T5 < 0 and rows.shape == (2, 2)

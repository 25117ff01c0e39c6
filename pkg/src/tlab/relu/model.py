"""Two-layer mean-field ReLU students and teachers.

f(x) = (1/m) sum_i c_i relu(w_i . x) with each w_i on the unit sphere. All
population quantities are exact through the arc-cosine kernel; nothing is
sampled unless an empirical objective is requested.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from ..deep_linear import DivergenceError, pinv_apply
from ..tasks import Dataset
from .kernels import arccos_kernel_matrix, relu_backprop

ROW_TOL = 1e-10
# relative singular-value cutoff for the output-layer refit in probe_transfer
PROBE_RCOND = 1e-3


@dataclass
class ReluNet:
    W: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        if self.W.ndim != 2 or self.W.shape[0] != self.c.shape[0]:
            raise ValueError(f"W rows ({self.W.shape}) and c ({self.c.shape}) disagree")
        if self.m == 0:
            raise ValueError("a ReLU net needs at least one neuron")
        dev = np.abs(np.linalg.norm(self.W, axis=1) - 1.0).max()
        if dev > ROW_TOL:
            raise ValueError(f"hidden directions must be unit vectors (max deviation {dev:.2e})")

    @property
    def m(self):
        return self.W.shape[0]

    @property
    def d(self):
        return self.W.shape[1]

    @property
    def scaling(self):
        return 1.0 / self.m

    def __call__(self, X):
        return np.maximum(X @ self.W.T, 0.0) @ self.c / self.m

    def copy(self):
        return ReluNet(self.W.copy(), self.c.copy())


@dataclass
class TeacherPair:
    target: ReluNet
    source: ReluNet
    ablated_set: np.ndarray
    mu: float
    seed: int


@dataclass
class KernelGrams:
    K: np.ndarray
    K_star: np.ndarray
    K_tilde: np.ndarray


@dataclass(frozen=True)
class ReluTrainConfig:
    # step size is lr_per_width * m under the mean-field scaling
    lr_per_width: float = 10.0
    max_steps: int = 100_000
    loss_tol: float = 1e-6
    c_init: float = 1e-7


@dataclass
class ReluTrainResult:
    net: ReluNet
    final_loss: float
    steps: int
    converged: bool
    losses: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class Projection:
    par: float
    perp: float
    total: float
    perp_raw: float


def unit_rows(A):
    return A / np.linalg.norm(A, axis=1, keepdims=True)


def random_directions(m, d, rng):
    return unit_rows(rng.standard_normal((m, d)))


def arccos_kernel(w_i, w_j):
    """Gaussian average of relu(w_i . x) relu(w_j . x) for unit w_i, w_j."""
    u = float(np.clip(np.dot(w_i, w_j), -1.0, 1.0))
    return (math.sqrt(max(0.0, 1.0 - u * u)) + u * (math.pi - math.acos(u))) / (2.0 * math.pi)


def make_teacher_pair(m_star, d, mu, seed):
    """Target teacher plus a source that drops a random mu-fraction of its neurons."""
    if not (0.0 <= mu < 1.0):
        raise ValueError(f"mu must lie in [0, 1), got {mu}")
    k = mu * m_star
    if abs(k - round(k)) > 1e-9:
        raise ValueError(f"mu * m_star must be an integer, got {k}")
    k = int(round(k))
    rng = np.random.default_rng(seed)
    W = random_directions(m_star, d, rng)
    c = rng.standard_normal(m_star)
    order = rng.permutation(m_star)
    return _pair_from(W, c, order, k, mu, seed)


def _pair_from(W, c, order, k, mu, seed):
    A = np.sort(order[:k])
    keep = np.sort(order[k:])
    return TeacherPair(target=ReluNet(W, c), source=ReluNet(W[keep], c[keep]), ablated_set=A, mu=mu, seed=seed)


def nested_teacher_pairs(m_star, d, mus, seed):
    """Pairs sharing one teacher and one random order, so ablated sets are nested in mu."""
    rng = np.random.default_rng(seed)
    W = random_directions(m_star, d, rng)
    c = rng.standard_normal(m_star)
    order = rng.permutation(m_star)
    out = []
    for mu in mus:
        k = mu * m_star
        if abs(k - round(k)) > 1e-9:
            raise ValueError(f"mu * m_star must be an integer, got {k}")
        out.append(_pair_from(W, c, order, int(round(k)), mu, seed))
    return out


def _gram(Wa, Wb, symmetric=False):
    return arccos_kernel_matrix(Wa @ Wb.T, symmetric)


def l2_inner_product(net_a, net_b):
    """Exact E_x[f_a(x) f_b(x)] for x ~ N(0, I)."""
    K, _ = _gram(net_a.W, net_b.W, net_a is net_b)
    return float(net_a.c @ K @ net_b.c) / (net_a.m * net_b.m)


def target_variance(teacher, sigma=0.0):
    return l2_inner_product(teacher, teacher) + sigma * sigma


def _pop_terms(W, c, Wt, ct, tt=None):
    """Population loss and gradients for raw (possibly non-unit) W.

    Uses the degree-1 homogeneous extension |a||b|kappa(a.b/|a||b|), which is
    what relu(w . x) computes for any w.
    """
    m, ms = W.shape[0], Wt.shape[0]
    a = np.linalg.norm(W, axis=1)
    Wh = W / a[:, None]
    at = np.linalg.norm(Wt, axis=1)
    Wth = Wt / at[:, None]
    e = c * a
    et = ct * at
    U = Wh @ Wh.T
    K, Kp = arccos_kernel_matrix(U, True)
    V = Wh @ Wth.T
    Kt, Ktp = arccos_kernel_matrix(V, False)
    Ke = K @ e
    Kte = Kt @ et
    ff = float(e @ Ke) / (m * m)
    ft = float(e @ Kte) / (m * ms)
    if tt is None:
        Ks, _ = arccos_kernel_matrix(Wth @ Wth.T, True)
        tt = float(et @ Ks @ et) / (ms * ms)
    loss = 0.5 * (ff - 2.0 * ft + tt)
    gff = (Ke - (Kp * U) @ e)[:, None] * Wh + Kp @ (e[:, None] * Wh)
    gft = (Kte - (Ktp * V) @ et)[:, None] * Wh + Ktp @ (et[:, None] * Wth)
    gW = c[:, None] * (gff / (m * m) - gft / (m * ms))
    gc = a * (Ke / (m * m) - Kte / (m * ms))
    return loss, gc, gW


def population_loss_relu(student, teacher):
    """1/2 E(f - f*)^2, exact."""
    return max(0.0, _pop_terms(student.W, student.c, teacher.W, teacher.c)[0])


def population_gradients_relu(W, c, teacher):
    """(loss, dL/dc, dL/dW) at unconstrained (W, c)."""
    return _pop_terms(np.asarray(W, float), np.asarray(c, float), teacher.W, teacher.c)


def generalization_error(student, teacher):
    """E(f - f*)^2 without the label-noise floor."""
    return 2.0 * population_loss_relu(student, teacher)


def empirical_loss_grads(W, c, X, y):
    n, m = X.shape[0], W.shape[0]
    Z = X @ W.T
    A = np.maximum(Z, 0.0)
    r = A @ c / m - y
    loss = 0.5 * float(r @ r) / n
    gc = A.T @ r / (n * m)
    gW = relu_backprop(Z, r, c).T @ X / (n * m)
    return loss, gc, gW


class PopulationObjective:
    def __init__(self, teacher):
        self.teacher = teacher
        self.tt = l2_inner_product(teacher, teacher)

    def __call__(self, W, c):
        return _pop_terms(W, c, self.teacher.W, self.teacher.c, self.tt)


class EmpiricalObjective:
    def __init__(self, X, y):
        self.X = np.asarray(X, float)
        self.y = np.asarray(y, float)

    def __call__(self, W, c):
        return empirical_loss_grads(W, c, self.X, self.y)


def init_student(m, d, seed, c_init=1e-7):
    if m < 1:
        raise ValueError("student width must be >= 1")
    rng = np.random.default_rng(seed)
    return ReluNet(random_directions(m, d, rng), np.full(m, c_init))


def train_relu(student, objective, cfg=ReluTrainConfig()):
    """Full-batch projected gradient descent on (c, W).

    The W gradient is projected onto the tangent space of each sphere and
    every row is renormalized after the step.
    """
    W = student.W.copy()
    c = student.c.copy()
    m = W.shape[0]
    lr = cfg.lr_per_width * m
    losses = np.empty(cfg.max_steps + 1)
    loss, gc, gW = objective(W, c)
    loss0 = loss
    step = 0
    converged = False
    while True:
        losses[step] = loss
        if loss <= cfg.loss_tol:
            converged = True
            break
        if step >= cfg.max_steps:
            break
        gW -= np.sum(gW * W, axis=1, keepdims=True) * W
        c -= lr * gc
        W -= lr * gW
        W /= np.linalg.norm(W, axis=1, keepdims=True)
        step += 1
        loss, gc, gW = objective(W, c)
        if not math.isfinite(loss) or loss > 1e6 * max(loss0, 1e-300):
            raise DivergenceError(f"ReLU training diverged at step {step} (loss {loss:.3e}, lr {lr:.3g})")
    return ReluTrainResult(ReluNet(W, c), float(loss), step, converged, losses[: step + 1].copy())


def sample_relu_dataset(teacher, n, sigma, seed):
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, teacher.d))
    y = teacher(X)
    if sigma > 0:
        y = y + sigma * rng.standard_normal(n)
    return Dataset(X=X, y=y, sigma=float(sigma), n=int(n), d=teacher.d, seed=int(seed))


def gram_matrices(student, target):
    m, ms = student.m, target.m
    K, _ = _gram(student.W, student.W, True)
    Ks, _ = _gram(target.W, target.W, True)
    Kt, _ = _gram(student.W, target.W)
    return KernelGrams(K=K / m, K_star=Ks / ms, K_tilde=Kt / math.sqrt(m * ms))


def projection_norms(student, target, eig_cutoff=1e-10):
    """Squared norms of f* inside and outside the span of the student's features.

    K^{-1} acts only on eigenvalues above eig_cutoff * lambda_max.
    """
    if eig_cutoff <= 0:
        raise ValueError("eig_cutoff must be positive")
    g = gram_matrices(student, target)
    lam, Q = np.linalg.eigh(g.K)
    if lam[-1] <= 0:
        raise ValueError("student Gram matrix is zero")
    keep = lam > eig_cutoff * lam[-1]
    cs = target.c
    v = Q[:, keep].T @ (g.K_tilde @ cs)
    par = float(v @ (v / lam[keep])) / target.m
    total = float(cs @ g.K_star @ cs) / target.m
    raw = total - par
    return Projection(par=par, perp=max(raw, 0.0), total=total, perp_raw=raw)


def power_law_fit(ns, ges):
    """Least-squares line through (log n, log ge); returns (A, nu) for ge ~ A n^-nu."""
    ns = np.asarray(ns, float)
    ges = np.asarray(ges, float)
    if ns.size < 3:
        raise ValueError("need at least 3 points for a power-law fit")
    if np.any(ns <= 0) or np.any(ges <= 0):
        raise ValueError("power-law fit needs positive n and ge")
    slope, intercept = np.polyfit(np.log(ns), np.log(ges), 1)
    return float(math.exp(intercept)), float(-slope)


def phase_boundary_predict(perp, A, nu):
    """n* where A n^-nu falls to the irreducible transfer error perp."""
    if A <= 0 or nu <= 0 or perp < 0:
        raise ValueError("A, nu must be positive and perp non-negative")
    if perp == 0:
        return math.inf
    return (A / perp) ** (1.0 / nu)


def probe_transfer(pretrained, data, rcond=None):
    """Refit output weights on frozen hidden directions (min-norm least squares).

    Trained students carry many near-duplicate neurons, so the feature matrix
    has a cluster of singular values near zero; those below rcond * s_1 are
    dropped (default PROBE_RCOND).
    """
    F = np.maximum(data.X @ pretrained.W.T, 0.0) / pretrained.m
    c = pinv_apply(F, data.y, rcond=PROBE_RCOND if rcond is None else rcond)
    return ReluNet(pretrained.W, c)


@dataclass(frozen=True)
class ReluExperiment:
    m: int = 400
    m_star: int = 50
    d: int = 50
    sigma: float = 0.0
    teacher_seed: int = 7
    pretrain: ReluTrainConfig = ReluTrainConfig(lr_per_width=5.0, max_steps=20_000, loss_tol=1e-8)
    train: ReluTrainConfig = ReluTrainConfig(lr_per_width=10.0, max_steps=8_000, loss_tol=1e-6)


def pretrain_on_source(exp, pair, seed=0):
    student = init_student(exp.m, exp.d, seed, exp.pretrain.c_init)
    return train_relu(student, PopulationObjective(pair.source), exp.pretrain)


def scratch_relu(exp, data, seed=0):
    student = init_student(exp.m, exp.d, seed, exp.train.c_init)
    return train_relu(student, EmpiricalObjective(data.X, data.y), exp.train)


def relu_transferability(mu, n, seeds, exp=ReluExperiment(), pretrained=None):
    """Normalized T = mean_seed(ge_scratch - ge_transfer) / (|f*|^2 + sigma^2).

    Returns (T, standard error, per-seed (ge_scratch, ge_transfer)).
    """
    pair = make_teacher_pair(exp.m_star, exp.d, mu, exp.teacher_seed)
    if pretrained is None:
        pretrained = pretrain_on_source(exp, pair, seed=exp.teacher_seed + 1).net
    var = target_variance(pair.target, exp.sigma)
    rows = []
    for s in seeds:
        data = sample_relu_dataset(pair.target, n, exp.sigma, seed=s)
        sc = scratch_relu(exp, data, seed=s + 1).net
        tx = probe_transfer(pretrained, data)
        rows.append((generalization_error(sc, pair.target), generalization_error(tx, pair.target)))
    rows = np.array(rows)
    diff = (rows[:, 0] - rows[:, 1]) / var
    se = float(diff.std(ddof=1) / math.sqrt(len(diff))) if len(diff) > 1 else float("nan")
    return float(diff.mean()), se, rows

"""Depth-L linear network f(x) = x^T W_1 ... W_L trained by explicit Euler gradient descent.

Layers W_1..W_{L-1} are d x d and W_L is d x 1. Gradients use the residual
form, so a step costs O(L d^2) plus the data product for empirical losses.
"""
import math
from dataclasses import dataclass, field

import numpy as np


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    eta: float = 1e-3
    max_steps: int = 100_000
    loss_tol: float = 1e-6
    # early exit at a stationary point once the loss has moved off its
    # starting value (guards against stopping on the init saddle); 0 disables
    grad_tol: float = 1e-10
    check_every: int = 1000

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.loss_tol < 0:
            raise ValueError(f"loss_tol must be >= 0, got {self.loss_tol}")


@dataclass
class LinearNet:
    layers: list
    alpha: float
    init_record: dict = field(default_factory=dict)

    @property
    def L(self):
        return len(self.layers)

    @property
    def d(self):
        return self.layers[0].shape[0]

    def copy(self):
        return LinearNet([W.copy() for W in self.layers], self.alpha, self.init_record)


@dataclass(frozen=True)
class SparsificationReport:
    top_energy_ratio: float
    alignment: float


@dataclass
class FlowResult:
    net: LinearNet
    final_loss: float
    steps: int
    max_drift: float
    losses: np.ndarray
    converged: bool


class Population:
    """Population loss 1/2 |beta(net) - beta_src|^2 under isotropic inputs."""

    def __init__(self, beta_src):
        self.beta = np.asarray(beta_src, dtype=float).reshape(-1)

    def residual(self, beta):
        r = beta - self.beta
        return r, 0.5 * float(r @ r)


class Empirical:
    """Empirical loss (1/2n) |X beta - y|^2; the residual is pulled back by X^T / n."""

    def __init__(self, data):
        self.X = data.X
        self.y = data.y
        self.n = data.X.shape[0]

    def residual(self, beta):
        e = self.X @ beta - self.y
        return self.X.T @ e / self.n, 0.5 * float(e @ e) / self.n


def _frozen(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def balance_matrices(layers):
    return [layers[l].T @ layers[l] - layers[l + 1] @ layers[l + 1].T for l in range(len(layers) - 1)]


def _min_eigs(mats):
    return [float(np.linalg.eigvalsh(D)[0]) for D in mats]


def _orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def init_balanced(L, d, alpha, margin=1.0, mode="gaussian", seed=0):
    """Initialize W_l = alpha * Wbar_l.

    scaled_orthogonal: Wbar_l = s_l O_l with s_l^2 = 1 + (L - l) margin, so
    every Wbar_l^T Wbar_l - Wbar_{l+1} Wbar_{l+1}^T has smallest eigenvalue
    exactly ``margin``. gaussian: i.i.d. N(0, 1) entries, no guarantee; the
    smallest eigenvalues are recorded for logging.
    """
    if L < 2 or d < 2:
        raise ValueError(f"need L >= 2 and d >= 2, got L={L}, d={d}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    rng = np.random.default_rng(seed)
    if mode == "scaled_orthogonal":
        if margin <= 0:
            raise ValueError(f"margin must be positive, got {margin}")
        bar = []
        for l in range(1, L + 1):
            s = math.sqrt(1.0 + (L - l) * margin)
            O = _orthogonal(rng, d)
            bar.append(s * (O if l < L else O[:, :1]))
    elif mode == "gaussian":
        bar = [rng.standard_normal((d, d)) for _ in range(L - 1)] + [rng.standard_normal((d, 1))]
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    layers = [alpha * B for B in bar]
    record = {
        "mode": mode,
        "seed": seed,
        "bar": tuple(_frozen(B) for B in bar),
        "layers": tuple(_frozen(W) for W in layers),
        "D0": tuple(_frozen(D) for D in balance_matrices(layers)),
        "bar_min_eig": tuple(_min_eigs(balance_matrices(bar))),
    }
    return LinearNet(layers=layers, alpha=float(alpha), init_record=record)


def from_layers(layers, alpha=1.0):
    layers = [np.array(W, dtype=float) for W in layers]
    for a, b in zip(layers[:-1], layers[1:]):
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"shape chain broken: {a.shape} then {b.shape}")
    rec = {"layers": tuple(_frozen(W) for W in layers), "D0": tuple(_frozen(D) for D in balance_matrices(layers))}
    return LinearNet(layers=layers, alpha=alpha, init_record=rec)


def end_to_end_beta(net):
    v = net.layers[-1][:, 0]
    for W in reversed(net.layers[:-1]):
        v = W @ v
    return v


def feature_map(net):
    """Phi = W_1 ... W_{L-1}, the frozen hidden map used by linear transfer."""
    P = net.layers[0]
    for W in net.layers[1:-1]:
        P = P @ W
    return P


def _right_vectors(layers):
    # q[l] = W_{l+1} ... W_L as a length-d vector, q[L-1] = [1]
    L = len(layers)
    q = [None] * L
    q[L - 1] = np.ones(1)
    v = layers[-1][:, 0]
    for l in range(L - 2, -1, -1):
        q[l] = v
        if l > 0:
            v = layers[l] @ v
    return q, (layers[0] @ v if L > 1 else v)


def _grads_from_residual(layers, r, q):
    grads = []
    a = r
    for l, W in enumerate(layers):
        grads.append(np.outer(a, q[l]))
        if l < len(layers) - 1:
            a = W.T @ a
    return grads


def _gradients(net, objective):
    q, beta = _right_vectors(net.layers)
    r, loss = objective.residual(beta)
    return _grads_from_residual(net.layers, r, q), loss


def population_gradients(net, beta_src):
    return _gradients(net, Population(beta_src))[0]


def empirical_gradients(net, data):
    return _gradients(net, Empirical(data))[0]


def loss_value(net, objective):
    return objective.residual(end_to_end_beta(net))[1]


def balance_defect(net, reference=None):
    """max_l |D_l(now) - D_l(reference)|_F, reference defaults to the init record."""
    ref = reference if reference is not None else net.init_record["D0"]
    now = balance_matrices(net.layers)
    return max(float(np.linalg.norm(a - b)) for a, b in zip(now, ref))


def run_gradient_flow(net, objective, cfg=FlowConfig()):
    """Explicit Euler steps W <- W - eta grad until loss <= loss_tol or max_steps.

    The input net is left untouched. Balance drift is measured against the
    starting point of this run every ``check_every`` steps.
    """
    net = net.copy()
    layers = net.layers
    ref = balance_matrices(layers)
    losses = np.empty(cfg.max_steps + 1)
    grads, loss = _gradients(net, objective)
    loss0 = loss
    if not math.isfinite(loss0):
        raise DivergenceError("initial loss is not finite")
    max_drift = 0.0
    step = 0
    converged = False
    while True:
        losses[step] = loss
        if loss <= cfg.loss_tol:
            converged = True
            break
        if cfg.grad_tol > 0 and loss < 0.99 * loss0:
            gn = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
            if gn <= cfg.grad_tol:
                converged = True
                break
        if step >= cfg.max_steps:
            break
        for W, g in zip(layers, grads):
            W -= cfg.eta * g
        step += 1
        grads, loss = _gradients(net, objective)
        if not math.isfinite(loss) or loss > 1e6 * max(loss0, 1e-300):
            raise DivergenceError(
                f"loss {loss:.3e} at step {step} exceeds 1e6 x initial {loss0:.3e} (eta={cfg.eta})"
            )
        if step % cfg.check_every == 0:
            max_drift = max(max_drift, balance_defect(net, ref))
    max_drift = max(max_drift, balance_defect(net, ref))
    return FlowResult(net=net, final_loss=loss, steps=step, max_drift=max_drift,
                      losses=losses[: step + 1].copy(), converged=converged)


def sparsification_report(net, beta_src):
    """Energy share and source alignment of the top singular direction of Phi."""
    U, s, _ = np.linalg.svd(feature_map(net))
    tot = float(s @ s)
    ratio = float(s[0] ** 2 / tot) if tot > 0 else 0.0
    b = np.asarray(beta_src, dtype=float)
    align = abs(float(U[:, 0] @ b)) / float(np.linalg.norm(b))
    return SparsificationReport(top_energy_ratio=min(ratio, 1.0), alignment=min(align, 1.0))


def pinv_apply(A, y, rcond=None):
    """A^+ y via SVD; singular values below rcond * s_1 count as zero.

    Default cutoff is max(shape) * machine eps.
    """
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if rcond is None:
        rcond = max(A.shape) * np.finfo(float).eps
    keep = s > rcond * s[0] if s.size else s.astype(bool)
    return Vt[keep].T @ ((U[:, keep].T @ y) / s[keep])


def min_norm_solution(X, y):
    return pinv_apply(np.asarray(X, dtype=float), np.asarray(y, dtype=float))


def random_projection_checks(n, d, trials, seed=0):
    """Monte-Carlo E|P_row(X) beta|^2 and E tr((X^+)^T X^+) with standard errors.

    Also returns the large-d limits and the exact finite-size Wishart means.
    """
    rng = np.random.default_rng(seed)
    proj = np.empty(trials)
    trace = np.empty(trials)
    for t in range(trials):
        X = rng.standard_normal((n, d))
        b = rng.standard_normal(d)
        b /= np.linalg.norm(b)
        _, s, Vt = np.linalg.svd(X, full_matrices=False)
        k = s > max(n, d) * np.finfo(float).eps * s[0]
        proj[t] = float(np.sum((Vt[k] @ b) ** 2))
        trace[t] = float(np.sum(1.0 / s[k] ** 2))
    g = n / d
    if g < 1:
        trace_limit = g / (1 - g)
        trace_exact = n / (d - n - 1) if d - n - 1 > 0 else math.inf
    elif g > 1:
        trace_limit = 1 / (g - 1)
        trace_exact = d / (n - d - 1) if n - d - 1 > 0 else math.inf
    else:
        trace_limit = trace_exact = math.inf
    se = lambda a: float(a.std(ddof=1) / math.sqrt(len(a)))
    return {
        "gamma": g,
        "proj_mean": float(proj.mean()), "proj_se": se(proj), "proj_limit": min(g, 1.0),
        "trace_mean": float(trace.mean()), "trace_se": se(trace),
        "trace_limit": trace_limit, "trace_exact": trace_exact,
    }

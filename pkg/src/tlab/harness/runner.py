"""Grid sweeps over seeds with deterministic seeding, resumable CSV output and summaries.

Seeds: every random stream is drawn from
``SeedSequence(entropy=[base, *indices], spawn_key=(tag,))`` reduced to one
uint64 word, so results depend only on (base seed, cell, replicate) and never
on how work is scheduled across processes.
"""
import csv
import io
import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from threadpoolctl import threadpool_limits

from .. import deep_linear as dl
from .. import theory
from ..relu import model as rm
from ..tasks import empirical_w1, kl_divergence, make_task_pair, sample_dataset
from ..transfer import linear_transfer, fine_tune, pretrain, scratch_train

COLUMNS = ["method", "L", "d", "n", "gamma", "theta", "sigma", "lambda", "mu", "seed",
           "ge_transfer", "ge_scratch", "transferability", "theory_transfer", "theory_scratch", "status"]
KEY_COLUMNS = COLUMNS[:10]

TAG_TASK, TAG_DATA, TAG_INIT, TAG_W1, TAG_STUDENT = 1, 2, 3, 4, 5


def mix_seed(base, *idx, tag=0):
    ss = np.random.SeedSequence(entropy=[int(base), *map(int, idx)], spawn_key=(int(tag),))
    return int(ss.generate_state(1, np.uint64)[0])


def worker_count():
    v = os.environ.get("TLAB_THREADS")
    if v is None or v == "":
        return os.cpu_count() or 1
    k = int(v)
    if k < 1:
        raise ValueError(f"TLAB_THREADS must be a positive integer, got {v!r}")
    return k


def fmt(x):
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _row(**kw):
    return {c: fmt(kw.get(c)) for c in COLUMNS}


def _limit_threads():
    # keep BLAS single-threaded inside workers so reductions are reproducible
    threadpool_limits(limits=1)


# --- linear-network kinds -------------------------------------------------

def linear_cells(cfg):
    """(cell_index, data_index, gamma, theta, sigma, lambda); lambda varies fastest and shares data."""
    g = cfg.grid
    cells = []
    data_axes = list(itertools.product(g["gamma"], g["theta"], g["sigma"]))
    lams = g["lambda"] if cfg.kind == "ridge_sweep" else [0.0]
    for di, (gam, th, sg) in enumerate(data_axes):
        for lam in lams:
            cells.append((len(cells), di, gam, th, sg, lam))
    return cells


def _method(kind):
    return {"linear_sweep": "linear", "ridge_sweep": "ridge", "finetune_sweep": "finetune",
            "metrics_scatter": "linear", "theory_surface": "linear"}[kind]


def _theory_cols(method, gamma, theta, sigma, lam, n):
    try:
        tt = theory.transfer_ge(method, gamma, theta, sigma, lam, n)
    except ValueError:
        tt = float("nan")
    return tt, theory.scratch_ge(gamma, sigma)


def _linear_unit(args):
    cfg, rep, cell_ids = args
    mdl, tr = cfg.model, cfg.train
    d, L = mdl["d"], mdl["L"]
    method = _method(cfg.kind)
    base = cfg.base_seed
    task_seed = mix_seed(base, rep, tag=TAG_TASK)
    pre_cfg = dl.FlowConfig(eta=tr["eta"], max_steps=200_000, loss_tol=1e-10)
    ft_cfg = dl.FlowConfig(eta=tr["ft_eta"], max_steps=int(tr["max_steps"]), loss_tol=tr["loss_tol"])
    src = make_task_pair(d, 0.0, task_seed).beta_src
    pre = pretrain(src, L, mdl["alpha"], mdl["init_mode"], mix_seed(base, rep, tag=TAG_INIT), pre_cfg).net
    wanted = set(cell_ids)
    out, extra = [], []
    cache = {}
    for ci, di, gam, th, sg, lam in linear_cells(cfg):
        if ci not in wanted:
            continue
        n = max(1, int(round(gam * d)))
        gamma = n / d
        pair = make_task_pair(d, th, task_seed)
        if di not in cache:
            data = sample_dataset(pair.beta_tgt, n, sg, mix_seed(base, di, rep, tag=TAG_DATA))
            cache[di] = (data, scratch_train(d, data))
        data, sc = cache[di]
        status = "ok"
        try:
            if method == "finetune":
                tx = fine_tune(pre, data, ft_cfg, theta=th)
            else:
                tx = linear_transfer(pre, data, lam, theta=th)
            ge_t = tx.ge
        except dl.DivergenceError:
            ge_t, status = float("nan"), "failed"
        tt, ts = _theory_cols(method, gamma, th, sg, lam, n)
        out.append((ci, rep, _row(method=method, L=L, d=d, n=n, gamma=gamma, theta=th, sigma=sg, mu=0.0,
                                  seed=rep, ge_transfer=ge_t, ge_scratch=sc.ge, transferability=sc.ge - ge_t, theory_transfer=tt, theory_scratch=ts,
                                  status=status, **{"lambda": lam})))
        if cfg.kind == "metrics_scatter":
            kl = kl_divergence(pair, sg) if sg > 0 else float("inf")
            m = mdl["w1_samples"]
            rng = np.random.default_rng(mix_seed(base, di, rep, tag=TAG_W1))
            X = rng.standard_normal((m, d))
            ys = X @ pair.beta_src + sg * rng.standard_normal(m)
            yt = X @ pair.beta_tgt + sg * rng.standard_normal(m)
            w1 = empirical_w1(np.hstack([X, ys[:, None]]), np.hstack([X, yt[:, None]]))
            extra.append((ci, rep, {"seed": rep, "gamma": gamma, "theta": th, "sigma": sg,
                                    "kl": kl, "w1": w1, "transferability": sc.ge - ge_t}))
    return out, extra


# --- ReLU heat map ----------------------------------------------------------

def _relu_exp(cfg):
    mdl, tr = cfg.model, cfg.train
    sig = cfg.grid["sigma"][0]
    return rm.ReluExperiment(
        m=mdl["m"], m_star=mdl["m_star"], d=mdl["d"], sigma=sig, teacher_seed=mix_seed(cfg.base_seed, tag=TAG_TASK),
        pretrain=rm.ReluTrainConfig(lr_per_width=tr["pretrain_lr_per_width"], max_steps=int(tr["pretrain_steps"]),
                                    loss_tol=1e-9),
        train=rm.ReluTrainConfig(lr_per_width=tr["lr_per_width"], max_steps=int(tr["relu_max_steps"]),
                                 loss_tol=tr["loss_tol"]),
    )


def _relu_pretrain_unit(args):
    cfg, mi = args
    exp = _relu_exp(cfg)
    pair = rm.nested_teacher_pairs(exp.m_star, exp.d, cfg.grid["mu"], exp.teacher_seed)[mi]
    net = rm.pretrain_on_source(exp, pair, seed=mix_seed(cfg.base_seed, mi, tag=TAG_INIT)).net
    proj = rm.projection_norms(net, pair.target)
    return mi, net, proj.perp


def _relu_scratch_unit(args):
    cfg, ni, rep, pretrained, wanted_mu = args
    exp = _relu_exp(cfg)
    target = rm.nested_teacher_pairs(exp.m_star, exp.d, [0.0], exp.teacher_seed)[0].target
    n = int(cfg.grid["n"][ni])
    data = rm.sample_relu_dataset(target, n, exp.sigma, mix_seed(cfg.base_seed, ni, rep, tag=TAG_DATA))
    status = "ok"
    try:
        sc = rm.scratch_relu(exp, data, seed=mix_seed(cfg.base_seed, ni, rep, tag=TAG_STUDENT)).net
        ge_s = rm.generalization_error(sc, target)
    except dl.DivergenceError:
        ge_s, status = float("nan"), "failed"
    res = {}
    for mi in wanted_mu:
        tx = rm.probe_transfer(pretrained[mi], data)
        res[mi] = (rm.generalization_error(tx, target), ge_s, status)
    return ni, rep, res


def _relu_rows(cfg, needed, pool_map, journal):
    mus, ns = cfg.grid["mu"], cfg.grid["n"]
    exp = _relu_exp(cfg)
    d = exp.d
    pre = {mi: (net, perp) for mi, net, perp in pool_map(_relu_pretrain_unit, [(cfg, mi) for mi in range(len(mus))])}
    nets = {mi: v[0] for mi, v in pre.items()}
    jobs = {}
    for (ci, rep) in needed:
        mi, ni = divmod(ci, len(ns))
        jobs.setdefault((ni, rep), []).append(mi)
    args = [(cfg, ni, rep, nets, sorted(mis)) for (ni, rep), mis in sorted(jobs.items())]
    for ni, rep, res in pool_map(_relu_scratch_unit, args):
        out = []
        for mi, (ge_t, ge_s, status) in res.items():
            n = int(ns[ni])
            out.append((mi * len(ns) + ni, rep, _row(
                method="relu_linear", L=2, d=d, n=n, gamma=n / d, theta=float("nan"), sigma=exp.sigma,
                mu=mus[mi], seed=rep, ge_transfer=ge_t, ge_scratch=ge_s, transferability=ge_s - ge_t,
                theory_transfer=pre[mi][1], theory_scratch=float("nan"), status=status, **{"lambda": 0.0})))
        journal.append(out)
    return {"perp": {mi: pre[mi][1] for mi in pre}}


# --- driver ---------------------------------------------------------------------

def expected_keys(cfg):
    if cfg.kind == "theory_surface":
        return []
    if cfg.kind == "relu_heatmap":
        ncell = len(cfg.grid["mu"]) * len(cfg.grid["n"])
    else:
        ncell = len(linear_cells(cfg))
    return [(c, r) for c in range(ncell) for r in range(cfg.seeds)]


def _pool_map(workers):
    """Ordered lazy map over work units; inline when a single worker is requested."""
    if workers <= 1:
        def run(fn, items):
            for x in items:
                with threadpool_limits(limits=1):
                    yield fn(x)
        return run, None
    ex = ProcessPoolExecutor(max_workers=workers, initializer=_limit_threads)

    def run(fn, items):
        yield from ex.map(fn, items)
    return run, ex


JOURNAL = "rows.journal.csv"
METRICS_JOURNAL = "metrics.journal.csv"


class Journal:
    """Append-only record of finished rows keyed by (cell, rep), used by --resume."""

    def __init__(self, path, columns):
        self.path = path
        self.columns = ["cell", "rep"] + columns

    def load(self):
        if not os.path.exists(self.path):
            return {}
        with open(self.path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        out = {}
        for r in rows:
            try:
                key = (int(r.pop("cell")), int(r.pop("rep")))
            except (KeyError, TypeError, ValueError):
                continue  # torn last line of an interrupted run
            if None in r.values():
                continue
            out[key] = r
        return out

    def reset(self):
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(self.columns)

    def append(self, items):
        with open(self.path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns, lineterminator="\n")
            for ci, rep, row in items:
                w.writerow({"cell": ci, "rep": rep, **{k: fmt(v) for k, v in row.items()}})
            fh.flush()


def theory_rows(method, gammas, thetas, sigma, lam=0.0):
    rows = []
    for th in thetas:
        for g in gammas:
            T = theory.transferability(method, g, th, sigma, lam)
            tt, ts = _theory_cols(method, g, th, sigma, lam, None)
            label = theory.classify(g, th, sigma, method, lam).label
            rows.append(_row(method=method, gamma=g, theta=th, sigma=sigma, mu=float("nan"), transferability=T,
                             theory_transfer=tt, theory_scratch=ts, status=label, **{"lambda": lam}))
    return rows


def write_csv(path, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(cfg, out_dir=None, resume=False, plots=True, log=print):
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.time()
    csv_path = os.path.join(out_dir, "results.csv")
    workers = worker_count()
    info = {}
    if cfg.kind == "theory_surface":
        method = cfg.extra.get("method", "linear")
        rows = []
        for sg in cfg.grid["sigma"]:
            for lam in cfg.grid["lambda"]:
                rows += theory_rows(method, cfg.grid["gamma"], cfg.grid["theta"], sg, lam)
        write_csv(csv_path, rows)
    else:
        journal = Journal(os.path.join(out_dir, JOURNAL), COLUMNS)
        mjournal = Journal(os.path.join(out_dir, METRICS_JOURNAL), METRIC_COLUMNS)
        stamp = os.path.join(out_dir, "journal.hash")
        same_cfg = os.path.exists(stamp) and open(stamp).read().strip() == cfg.config_hash
        done = {}
        if resume and same_cfg:
            done = {k: r for k, r in journal.load().items() if r.get("status") == "ok"}
        keys = expected_keys(cfg)
        done = {k: v for k, v in done.items() if k in set(keys)}
        needed = [k for k in keys if k not in done]
        if not (resume and same_cfg and os.path.exists(journal.path)):
            journal.reset()
            if cfg.kind == "metrics_scatter":
                mjournal.reset()
            with open(stamp, "w") as fh:
                fh.write(cfg.config_hash + "\n")
        log(f"[{cfg.name}] {len(keys)} rows, {len(needed)} to compute, {workers} worker(s)")
        pmap, ex = _pool_map(workers)
        try:
            if cfg.kind == "relu_heatmap":
                if needed:
                    info = _relu_rows(cfg, needed, pmap, journal)
                else:
                    info = {}
            else:
                per_rep = {}
                for ci, rep in needed:
                    per_rep.setdefault(rep, []).append(ci)
                units = [(cfg, rep, cells) for rep, cells in sorted(per_rep.items())]
                for rows_new, extra in pmap(_linear_unit, units):
                    journal.append(rows_new)
                    if extra:
                        mjournal.append(extra)
        finally:
            if ex is not None:
                ex.shutdown()
        table = journal.load()
        missing = [k for k in keys if k not in table]
        if missing:
            raise RuntimeError(f"{len(missing)} rows missing after the run, e.g. {missing[:3]}")
        write_csv(csv_path, [{c: table[k][c] for c in COLUMNS} for k in keys])
        if cfg.kind == "metrics_scatter":
            mt = mjournal.load()
            write_metrics(os.path.join(out_dir, "metrics.csv"), [mt[k] for k in sorted(mt) if k in table])
    summary = summarize(cfg, read_csv(csv_path), info)
    summary["wallclock_s"] = round(time.time() - t0, 3)
    summary["workers"] = workers
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
    if plots:
        from .plot import panels_for, render_panel
        for panel in panels_for(cfg.kind):
            render_panel(csv_path, panel, os.path.join(out_dir, f"{cfg.name}_{panel}.svg"))
    log(f"[{cfg.name}] wrote {csv_path} in {summary['wallclock_s']} s")
    return summary


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


METRIC_COLUMNS = ["seed", "gamma", "theta", "sigma", "kl", "w1", "transferability"]


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRIC_COLUMNS})


def _f(s):
    return float(s) if s not in ("", None) else float("nan")


def summarize(cfg, rows, info=None):
    """Per-cell means, standard errors, theory values and region labels."""
    info = info or {}
    out = {"name": cfg.name, "kind": cfg.kind, "config_hash": cfg.config_hash,
           "seed_mixing": "SeedSequence(entropy=[base, *indices], spawn_key=(tag,)).generate_state(1, uint64)",
           "base_seed": cfg.base_seed, "replicates": cfg.seeds, "cells": [], "failed_cells": []}
    groups = {}
    for r in rows:
        key = tuple(r[c] for c in ("method", "n", "gamma", "theta", "sigma", "lambda", "mu"))
        groups.setdefault(key, []).append(r)
    for key, rs in groups.items():
        ok = [r for r in rs if r["status"] in ("ok",)]
        cell = dict(zip(("method", "n", "gamma", "theta", "sigma", "lambda", "mu"), key))
        for c in ("n",):
            cell[c] = int(cell[c]) if cell[c] else None
        for c in ("gamma", "theta", "sigma", "lambda", "mu"):
            cell[c] = _f(cell[c])
        if cfg.kind == "theory_surface":
            r = rs[0]
            cell.update(T=_f(r["transferability"]), label=r["status"])
            out["cells"].append(cell)
            continue
        if len(ok) < len(rs):
            out["failed_cells"].append({k: cell[k] for k in ("gamma", "theta", "sigma", "lambda", "mu")})
        for col in ("ge_transfer", "ge_scratch", "transferability"):
            v = np.array([_f(r[col]) for r in ok])
            cell[col + "_mean"] = float(v.mean()) if v.size else float("nan")
            cell[col + "_std"] = float(v.std(ddof=1)) if v.size > 1 else float("nan")
            cell[col + "_se"] = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
        cell["theory_transfer"] = _f(rs[0]["theory_transfer"])
        cell["theory_scratch"] = _f(rs[0]["theory_scratch"])
        if cfg.kind != "relu_heatmap":
            g, th, sg, lam = cell["gamma"], cell["theta"], cell["sigma"], cell["lambda"]
            meth = cell["method"]
            cell["theory_T"] = theory.transferability(meth, g, th, sg, lam)
            cell["region"] = theory.classify(g, th, sg, meth, lam).label
        out["cells"].append(cell)
    if cfg.kind == "relu_heatmap":
        out["relu"] = relu_summary(cfg, out["cells"], info)
    out["cells"] = [_clean(c) for c in out["cells"]]
    return out


def _clean(d):
    return {k: (None if isinstance(v, float) and (math.isnan(v) or math.isinf(v)) else v) for k, v in d.items()}


def crossing_n(ns, T):
    """n beyond which mean T stays negative, log-interpolated.

    The probe's variance bump at small n can make T dip and recover, so the
    last sign change is used. None if T is still non-negative at the largest n;
    ns[0] if T is negative everywhere.
    """
    if T[-1] >= 0:
        return None
    last = max((i for i in range(len(T)) if T[i] >= 0), default=None)
    if last is None:
        return float(ns[0])
    a, b = math.log(ns[last]), math.log(ns[last + 1])
    w = T[last] / (T[last] - T[last + 1])
    return float(math.exp(a + w * (b - a)))


def relu_summary(cfg, cells, info):
    exp = _relu_exp(cfg)
    target = rm.nested_teacher_pairs(exp.m_star, exp.d, [0.0], exp.teacher_seed)[0].target
    var = rm.target_variance(target, exp.sigma)
    ns = sorted({c["n"] for c in cells})
    mus = sorted({c["mu"] for c in cells})
    scratch = []
    for n in ns:
        v = [c["ge_scratch_mean"] for c in cells if c["n"] == n]
        scratch.append(float(np.mean(v)) / var)
    fit_min = cfg.extra.get("fit_min_n", 0)
    fit_ns = [n for n in ns if n >= fit_min]
    fit_ge = [s for n, s in zip(ns, scratch) if n >= fit_min]
    A, nu = rm.power_law_fit(fit_ns, fit_ge) if len(fit_ns) >= 3 else (float("nan"), float("nan"))
    per_mu = []
    for mu in mus:
        cs = sorted((c for c in cells if c["mu"] == mu), key=lambda c: c["n"])
        T = [c["transferability_mean"] / var for c in cs]
        perp = cs[0]["theory_transfer"] / var
        n_star = rm.phase_boundary_predict(perp, A, nu) if math.isfinite(A) else float("nan")
        per_mu.append({"mu": mu, "perp_normalized": perp, "T_normalized": T,
                       "T_se": [c["transferability_se"] / var for c in cs],
                       "n_star_predicted": n_star, "n_cross_observed": crossing_n([c["n"] for c in cs], T)})
    return {"target_variance": var, "ns": ns, "scratch_normalized": scratch, "fit_A": A, "fit_nu": nu,
            "fit_ns": fit_ns, "per_mu": per_mu}

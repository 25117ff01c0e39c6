"""SVG figure panels rendered from results.csv (plus sidecar files in the same directory).

Output bytes are reproducible: fixed SVG hash salt and no timestamp metadata.
"""
import csv
import json
import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .. import theory  # noqa: E402

PANELS = {
    "theory_surface": ["surface", "topview"],
    "linear_sweep": ["slices", "surface", "topview"],
    "ridge_sweep": ["ridge"],
    "finetune_sweep": ["slices", "surface", "topview"],
    "relu_heatmap": ["heatmap"],
    "metrics_scatter": ["kl", "w1"],
}
ALL_PANELS = ("surface", "topview", "slices", "ridge", "heatmap", "kl", "w1")


def panels_for(kind):
    return list(PANELS[kind])


def _style():
    plt.rcParams.update({"svg.hashsalt": "tlab", "svg.fonttype": "none", "font.size": 9})


def _save(fig, out):
    fig.savefig(out, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _f(s):
    return float(s) if s not in ("", None) else float("nan")


def _sidecar(csv_path, name):
    p = os.path.join(os.path.dirname(os.path.abspath(csv_path)), name)
    return p if os.path.exists(p) else None


def _cell_stats(rows, keys, col):
    groups = {}
    for r in rows:
        if r["status"] not in ("ok",):
            continue
        groups.setdefault(tuple(_f(r[k]) for k in keys), []).append(_f(r[col]))
    out = {}
    for k, v in groups.items():
        v = np.array(v)
        out[k] = (v.mean(), v.std(ddof=1) if v.size > 1 else 0.0)
    return out


def _method_sigma(rows):
    method = rows[0]["method"]
    sigma = _f(rows[0]["sigma"])
    lam = _f(rows[0]["lambda"]) if rows[0]["lambda"] else 0.0
    return method, sigma, lam


def _theory_mesh(method, sigma, lam, gmax=3.0):
    gs = np.linspace(0.02, gmax, 300)
    gs = gs[np.abs(gs - 1) > 0.01]
    ths = np.linspace(0, math.pi / 2, 120)
    return gs, ths, theory.surface(method, gs, ths, sigma, lam)


def panel_surface(rows, out):
    method, sigma, lam = _method_sigma(rows)
    gs, ths, T = _theory_mesh(method, sigma, lam)
    G, TH = np.meshgrid(gs, ths)
    fig = plt.figure(figsize=(5.5, 4.2))
    ax = fig.add_subplot(projection="3d")
    ax.plot_surface(G, TH, np.clip(T, -1.5, 1.5), cmap="coolwarm_r", linewidth=0, antialiased=False, alpha=0.8)
    if rows[0]["seed"] != "":
        st = _cell_stats(rows, ("gamma", "theta"), "transferability")
        pts = np.array([(g, th, m) for (g, th), (m, _) in st.items()])
        ax.scatter(pts[:, 0], pts[:, 1], np.clip(pts[:, 2], -1.5, 1.5), color="k", s=6)
    ax.set_xlabel("gamma")
    ax.set_ylabel("theta")
    ax.set_zlabel("T")
    ax.set_title(f"{method} transferability, sigma={sigma:g}")
    _save(fig, out)


def panel_topview(rows, out):
    method, sigma, lam = _method_sigma(rows)
    gs, ths, T = _theory_mesh(method, sigma, lam)
    fig, ax = plt.subplots(figsize=(5, 3.6))
    S = np.sign(np.where(np.abs(T) < 1e-12, 0, T))
    ax.pcolormesh(gs, ths, S, cmap="RdBu", vmin=-1.5, vmax=1.5, shading="auto")
    ax.contour(gs, ths, np.nan_to_num(T, nan=1.0), levels=[0.0], colors="k", linewidths=0.8)
    if method == "linear":
        for th in ths[::10]:
            for lo, hi in theory.negative_transfer_region(th, sigma):
                ax.plot([lo, min(hi, gs[-1])], [th, th], color="0.2", lw=0.6, ls=":")
    if rows[0]["seed"] != "":
        st = _cell_stats(rows, ("gamma", "theta"), "transferability")
        for (g, th), (m, _) in st.items():
            ax.plot(g, th, marker="o" if m > 0 else "x", color="k", ms=3)
    ax.set_xlabel("gamma = n/d")
    ax.set_ylabel("theta")
    ax.set_title("negative transfer (red) vs positive (blue)")
    _save(fig, out)


def panel_slices(rows, out):
    method, sigma, lam = _method_sigma(rows)
    st = _cell_stats(rows, ("theta", "gamma"), "transferability")
    thetas = sorted({k[0] for k in st})
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    gs = np.linspace(0.02, max(k[1] for k in st) * 1.02, 400)
    gs = gs[np.abs(gs - 1) > 0.01]
    for i, th in enumerate(thetas):
        col = f"C{i % 10}"
        pts = sorted((k[1], v) for k, v in st.items() if k[0] == th)
        g = [p[0] for p in pts]
        ax.errorbar(g, [p[1][0] for p in pts], yerr=[p[1][1] for p in pts], fmt="o", ms=3, color=col,
                    capsize=2, label=f"theta={th:.3g}")
        T = [theory.transferability(method, x, th, sigma, lam) for x in gs]
        ax.plot(gs, np.clip(T, -2, 2), color=col, lw=0.8)
    ax.axhline(0, color="k", lw=0.5)
    ax.set_ylim(-1.2, 1.2)
    ax.set_xlabel("gamma = n/d")
    ax.set_ylabel("T")
    ax.legend(fontsize=7)
    ax.set_title(f"{method} transfer slices (mean +- std over seeds)")
    _save(fig, out)


def panel_ridge(rows, out):
    st = _cell_stats(rows, ("theta", "lambda"), "ge_transfer")
    thetas = sorted({k[0] for k in st})
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i, th in enumerate(thetas):
        col = f"C{i % 10}"
        pts = sorted((k[1], v) for k, v in st.items() if k[0] == th)
        lam = [p[0] for p in pts]
        ax.errorbar(lam, [p[1][0] for p in pts], yerr=[p[1][1] for p in pts], fmt="o", color=col, ms=3, capsize=2,
                    label=f"theta={th:.3g}")
        ll = np.linspace(0, max(lam), 200)
        ax.plot(ll, [theory.ridge_transfer_ge(th, x) for x in ll], color=col, lw=0.8)
    ax.set_xlabel("lambda")
    ax.set_ylabel("generalization error")
    ax.legend(fontsize=7)
    ax.set_title("ridge linear transfer")
    _save(fig, out)


def panel_heatmap(rows, out, summary=None):
    st = _cell_stats(rows, ("mu", "n"), "transferability")
    mus = sorted({k[0] for k in st})
    ns = sorted({k[1] for k in st})
    var = summary["relu"]["target_variance"] if summary else 1.0
    M = np.full((len(mus), len(ns)), np.nan)
    for (mu, n), (m, _) in st.items():
        M[mus.index(mu), ns.index(n)] = m / var
    fig, ax = plt.subplots(figsize=(5, 3.6))
    lim = np.nanmax(np.abs(M)) or 1.0
    im = ax.pcolormesh(np.arange(len(ns) + 1) - 0.5, np.arange(len(mus) + 1) - 0.5, M, cmap="RdBu",
                       vmin=-lim, vmax=lim, shading="flat")
    fig.colorbar(im, ax=ax, label="normalized T")
    if summary:
        logn = np.log(ns)
        for pm in summary["relu"]["per_mu"]:
            ns_star = pm["n_star_predicted"]
            if ns_star and math.isfinite(ns_star):
                x = np.interp(math.log(ns_star), logn, np.arange(len(ns)), left=-0.5, right=len(ns) - 0.5)
                ax.plot(x, mus.index(pm["mu"]), "o", mfc="0.6", mec="0.3", ms=7)
    ax.set_xticks(range(len(ns)), [str(int(n)) for n in ns])
    ax.set_yticks(range(len(mus)), [f"{m:g}" for m in mus])
    ax.set_xlabel("n")
    ax.set_ylabel("mu")
    ax.set_title("ReLU linear transfer (gray: predicted boundary)")
    _save(fig, out)


def panel_metric(csv_path, metric, out):
    side = _sidecar(csv_path, "metrics.csv")
    if side is None:
        raise FileNotFoundError("metrics.csv sidecar not found next to results.csv")
    rows = _read(side)
    x = np.array([_f(r[metric]) for r in rows])
    T = np.array([_f(r["transferability"]) for r in rows])
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    ax.scatter(x, T, c=np.where(T > 0, "C0", "C3"), s=8)
    ax.axhline(0, color="k", lw=0.5)
    ax.set_xlabel({"kl": "KL divergence", "w1": "empirical W1"}[metric])
    ax.set_ylabel("measured T")
    ax.set_title(f"transferability vs {metric.upper()}")
    _save(fig, out)


def render_panel(csv_path, panel, out):
    if panel not in ALL_PANELS:
        raise ValueError(f"unknown panel {panel!r}; choose from {', '.join(ALL_PANELS)}")
    _style()
    if panel in ("kl", "w1"):
        return panel_metric(csv_path, panel, out)
    rows = _read(csv_path)
    if not rows:
        raise ValueError(f"{csv_path} has no rows")
    if panel == "heatmap":
        sp = _sidecar(csv_path, "summary.json")
        summary = json.load(open(sp)) if sp else None
        return panel_heatmap(rows, out, summary)
    {"surface": panel_surface, "topview": panel_topview, "slices": panel_slices, "ridge": panel_ridge}[panel](rows, out)


def gram_panel(student_gram, source_gram, out):
    """Side-by-side Gram matrices of a trained student and its source teacher."""
    _style()
    fig, axs = plt.subplots(1, 2, figsize=(7, 3.2))
    for ax, G, t in zip(axs, (student_gram, source_gram), ("student", "source teacher")):
        ax.imshow(G, cmap="viridis")
        ax.set_title(t)
        ax.set_xticks([])
        ax.set_yticks([])
    _save(fig, out)

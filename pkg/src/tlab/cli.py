"""Command-line entry point: ``tlab run | theory | plot | selftest``."""
import argparse
import os
import sys
import tempfile

from .harness.config import ConfigError, load_config, parse_number, parse_range


def _bundled(path):
    if os.path.exists(path):
        return path
    here = os.path.join(os.path.dirname(__file__), "configs", path)
    for p in (here, here + ".toml"):
        if os.path.exists(p):
            return p
    return path


def cmd_run(a):
    from .harness.runner import run

    try:
        cfg = load_config(_bundled(a.config), full=a.full)
    except FileNotFoundError:
        print(f"error: config file not found: {a.config}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    summary = run(cfg, out_dir=a.out, resume=a.resume, log=lambda s: print(s, file=sys.stderr))
    if summary.get("failed_cells"):
        print(f"warning: {len(summary['failed_cells'])} cell(s) had failed replicates", file=sys.stderr)
    return 0


def cmd_theory(a):
    from .harness.plot import render_panel
    from .harness.runner import theory_rows, write_csv

    try:
        gammas = [g for g in parse_range(a.gamma) if g > 0]
        thetas = parse_range(a.theta)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rows = theory_rows(a.method, gammas, thetas, a.sigma, a.lam)
    if a.out.endswith(".svg"):
        with tempfile.TemporaryDirectory() as td:
            p = os.path.join(td, "theory.csv")
            write_csv(p, rows)
            render_panel(p, a.panel, a.out)
    else:
        write_csv(a.out, rows)
    return 0


def cmd_plot(a):
    from .harness.plot import render_panel

    try:
        render_panel(a.results, a.panel, a.out)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def cmd_selftest(a):
    from .selftest import main as selftest_main

    return selftest_main(verbose=not a.quiet)


def build_parser():
    p = argparse.ArgumentParser(prog="tlab", description="Transfer-learning theory lab")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config", help="TOML config file, or a bundled config name (fig1 ... fig7)")
    r.add_argument("--out", default=None, help="output directory (default: output_dir from the config)")
    r.add_argument("--resume", action="store_true", help="recompute only failed or missing rows")
    r.add_argument("--full", action="store_true", help="full-scale settings (d=500, m=1000)")
    r.set_defaults(fn=cmd_run)

    t = sub.add_parser("theory", help="evaluate closed-form transferability on a grid")
    t.add_argument("--method", choices=["linear", "finetune", "ridge"], required=True)
    t.add_argument("--gamma", required=True, help="A:B:STEP")
    t.add_argument("--theta", required=True, help="A:B:STEP, accepts pi, pi/2, ...")
    t.add_argument("--sigma", type=parse_number, required=True)
    t.add_argument("--lambda", dest="lam", type=parse_number, default=0.0)
    t.add_argument("--panel", default="topview", help="panel drawn when --out ends in .svg")
    t.add_argument("--out", required=True, help="CSV file, or an .svg to draw the surface directly")
    t.set_defaults(fn=cmd_theory)

    pl = sub.add_parser("plot", help="render one figure panel from results.csv")
    pl.add_argument("results")
    pl.add_argument("--panel", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_plot)

    s = sub.add_parser("selftest", help="fast property checks")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None):
    a = build_parser().parse_args(argv)
    return a.fn(a)


if __name__ == "__main__":
    sys.exit(main())

"""Experiment configuration: TOML parsing, validation and range expressions."""
import copy
import hashlib
import math
import re
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

KINDS = ("theory_surface", "linear_sweep", "ridge_sweep", "finetune_sweep", "relu_heatmap", "metrics_scatter")
SIM_KINDS = ("linear_sweep", "ridge_sweep", "finetune_sweep", "metrics_scatter")
GAMMA_BAND = 0.02

_PI = re.compile(r"^\s*([-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?\d+)?)?\s*\*?\s*pi\s*(?:/\s*([0-9]*\.?[0-9]+))?\s*$")


class ConfigError(ValueError):
    def __init__(self, msg, line=None, path=None):
        self.line = line
        self.path = path
        where = f"{path}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(where + msg)


def parse_number(tok):
    """Float from a number or a multiple/fraction of pi ("pi/3", "2pi/3", "0.5*pi")."""
    if isinstance(tok, (int, float)):
        return float(tok)
    s = str(tok).strip()
    m = _PI.match(s)
    if m:
        k = float(m.group(1)) if m.group(1) else 1.0
        den = float(m.group(2)) if m.group(2) else 1.0
        return k * math.pi / den
    return float(s)


def parse_range(text):
    """Inclusive grid from "A:B:STEP"; the endpoint is kept when it lands on the grid."""
    parts = str(text).split(":")
    if len(parts) != 3:
        raise ValueError(f"range must look like A:B:STEP, got {text!r}")
    a, b, step = (parse_number(p) for p in parts)
    if step <= 0:
        raise ValueError(f"range step must be positive, got {step}")
    if b < a:
        raise ValueError(f"range end {b} is below start {a}")
    k = int(math.floor((b - a) / step + 1e-9))
    return [a + i * step for i in range(k + 1)]


def parse_axis(v):
    if isinstance(v, str):
        return parse_range(v) if ":" in v else [parse_number(v)]
    if isinstance(v, (list, tuple)):
        return [parse_number(x) for x in v]
    return [parse_number(v)]


@dataclass
class ExperimentConfig:
    name: str
    kind: str
    model: dict
    train: dict
    grid: dict
    seeds: int
    base_seed: int
    output_dir: str
    extra: dict = field(default_factory=dict)
    config_hash: str = ""
    source_text: str = ""


def _line_of(text, key):
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for i, ln in enumerate(text.splitlines(), 1):
        if pat.match(ln):
            return i
    return None


def _deep_merge(a, b):
    out = copy.deepcopy(a)
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


MODEL_DEFAULTS = {"L": 2, "d": 200, "alpha": 1e-5, "init_mode": "gaussian", "m": 400, "m_star": 50, "w1_samples": 200}
TRAIN_DEFAULTS = {"eta": 1e-3, "max_steps": 100_000, "loss_tol": 1e-6, "ft_eta": 5e-3,
                  "lr_per_width": 10.0, "pretrain_lr_per_width": 5.0, "pretrain_steps": 16_000,
                  "relu_max_steps": 8_000}
GRID_DEFAULTS = {"sigma": [0.2], "lambda": [0.0], "theta": [0.0], "mu": [0.0]}


def load_config(path, full=False, text=None):
    if text is None:
        with open(path, "rb") as fh:
            raw = fh.read()
        text = raw.decode("utf-8")
    else:
        raw = text.encode("utf-8")
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        if line is None:
            m = re.search(r"line (\d+)", str(exc))
            line = int(m.group(1)) if m else None
        raise ConfigError(f"cannot parse config: {exc}", line, path) from None
    return build_config(doc, text, path, full, raw)


def build_config(doc, text="", path=None, full=False, raw=b""):
    def err(msg, key=None):
        raise ConfigError(msg, _line_of(text, key) if key else None, path)

    if full and "full" in doc:
        doc = _deep_merge(doc, doc["full"])
    kind = doc.get("kind")
    if kind not in KINDS:
        err(f"kind must be one of {', '.join(KINDS)}, got {kind!r}", "kind")
    name = str(doc.get("name", kind))
    model = dict(MODEL_DEFAULTS, **doc.get("model", {}))
    train = dict(TRAIN_DEFAULTS, **doc.get("train", {}))
    for k in ("L", "d", "m", "m_star", "w1_samples"):
        if not isinstance(model[k], int) or model[k] < 1:
            err(f"model.{k} must be a positive integer", k)
    if model["L"] < 2:
        err("model.L must be >= 2", "L")
    if model["init_mode"] not in ("gaussian", "scaled_orthogonal"):
        err("model.init_mode must be gaussian or scaled_orthogonal", "init_mode")
    if train["eta"] <= 0 or train["ft_eta"] <= 0:
        err("learning rates must be positive", "eta")
    raw_grid = doc.get("grid", {})
    grid = {}
    for axis in ("gamma", "theta", "sigma", "lambda", "mu", "n"):
        if axis in raw_grid:
            try:
                vals = parse_axis(raw_grid[axis])
            except ValueError as exc:
                err(f"grid.{axis}: {exc}", axis)
            if not vals:
                err(f"grid axis {axis!r} is empty", axis)
            grid[axis] = vals
        elif axis in GRID_DEFAULTS:
            grid[axis] = list(GRID_DEFAULTS[axis])
    need = {"relu_heatmap": ("mu", "n")}.get(kind, ("gamma", "theta"))
    for axis in need:
        if axis not in grid:
            err(f"grid axis {axis!r} is required for kind {kind}")
    if kind in SIM_KINDS:
        bad = [g for g in grid["gamma"] if abs(g - 1.0) < GAMMA_BAND]
        if bad and not doc.get("allow_singular_band", False):
            err(f"gamma values {bad} fall in the excluded band |gamma - 1| < {GAMMA_BAND}", "gamma")
        if any(g <= 0 for g in grid["gamma"]):
            err("gamma values must be positive", "gamma")
    if any(not 0 <= t <= math.pi for t in grid.get("theta", [])):
        err("theta values must lie in [0, pi]", "theta")
    if any(s < 0 for s in grid.get("sigma", [])):
        err("sigma values must be non-negative", "sigma")
    if any(v < 0 for v in grid.get("lambda", [])):
        err("lambda values must be non-negative", "lambda")
    seeds = doc.get("seeds", {})
    count = seeds.get("count", 20) if isinstance(seeds, dict) else seeds
    base = seeds.get("base", 0) if isinstance(seeds, dict) else 0
    if not isinstance(count, int) or count < 1:
        err("seeds.count must be a positive integer", "count")
    h = hashlib.sha256(raw + (b"|full" if full else b"")).hexdigest()[:16]
    extra = {k: v for k, v in doc.items() if k not in ("name", "kind", "model", "train", "grid", "seeds", "full", "output_dir")}
    return ExperimentConfig(name=name, kind=kind, model=model, train=train, grid=grid, seeds=count,
                            base_seed=int(base), output_dir=str(doc.get("output_dir", f"runs/{name}")),
                            extra=extra, config_hash=h, source_text=text)

"""Run configuration, CLI, caching of tables and run manifests.

A run is described by one YAML (or JSON) file.  Outputs go to
``<out_dir>/<experiment>-<config hash>/``: one CSV per table, ``verdict.json``,
``manifest.json`` and ``timing.json``.  Everything except the timing file is
a deterministic function of the configuration.  The environment variable
``BPRELAB_OUT`` overrides the output directory.
"""

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .condsim import HKernelGrid, h_grid
from .envmodel import LINEAR_FRACTIONAL, POISSON, check_B2
from .limits import (ConstantsReport, D_constant, asym_exp_min, asym_stay_low, constant_Gleft,
                     constant_Gright, left_two_sided, meander_proportionality,
                     survival_ratio_theta, survival_scaling, theorem1_law, theorem2_constancy)
from .renewal import RenewalTable, check_harmonicity, default_grid, estimate_U, estimate_V
from .stablecore import IncrementModel
from .streams import Lanes, lane_rng, stream_key

__all__ = ["RunConfig", "RunManifest", "CacheError", "run", "cache", "load", "main",
           "table_key", "write_csv", "read_csv", "EXPERIMENTS"]

log = logging.getLogger("bprelab")

OUT_ENV = "BPRELAB_OUT"

EXPERIMENTS = ("renewal", "survival", "constants", "theorem1", "theorem2", "asymptotics",
               "meander", "check-b2")

DEFAULT_SAMPLES = {
    "main": 1_000_000, "renewal": 400_000, "harmonicity": 1_000_000, "plus": 400_000,
    "left": 1_000_000, "right": 400_000, "h_plus": 50_000, "h_minus": 200_000,
    "h_replicates": 4, "two_sided": 0, "resample": 4000, "stay_low": 10_000_000,
}


class CacheError(RuntimeError):
    pass


@dataclass
class RunConfig:
    experiment: str
    seed: int
    model: dict = field(default_factory=lambda: {"family": "gaussian", "sigma": 1.0})
    family: str = "linear-fractional"
    K: float = 0.0
    n_list: list = field(default_factory=lambda: [128, 256, 512])
    samples: dict = field(default_factory=dict)
    J: int = 400
    N_max: int = 32768
    N_cut: float = 40.0
    Q_cut: int = 50
    m_max: int = 256
    x_max: float = 80.0
    params: dict = field(default_factory=dict)
    out_dir: str = "runs"
    lanes: int = 1
    workers: int = 1
    figures: bool = False

    def __post_init__(self):
        if self.seed is None or isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ValueError("a master seed (integer) is mandatory")
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.family not in ("linear-fractional", "poisson"):
            raise ValueError(f"unknown offspring family {self.family!r}")
        budgets = dict(DEFAULT_SAMPLES)
        budgets.update(self.samples or {})
        if any((not isinstance(v, (int, np.integer))) or v < 0 for v in budgets.values()):
            raise ValueError("sample budgets must be nonnegative integers")
        if budgets["main"] <= 0:
            raise ValueError("the main sample budget must be positive")
        self.samples = {k: int(v) for k, v in budgets.items()}
        self.n_list = [int(n) for n in self.n_list]
        if not self.n_list or min(self.n_list) < 1:
            raise ValueError("n_list must hold positive integers")
        for name in ("J", "N_max", "Q_cut", "m_max", "lanes", "workers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "seed" not in d:
            raise ValueError("a master seed is mandatory")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def to_dict(self):
        return dataclasses.asdict(self)

    def content(self):
        """Fields that determine results (output location and worker count excluded)."""
        d = self.to_dict()
        for k in ("out_dir", "workers", "figures"):
            d.pop(k)
        return d

    def hash(self):
        blob = json.dumps(self.content(), sort_keys=True, default=_jsonable).encode()
        return hashlib.sha256(blob).hexdigest()

    def increment_model(self):
        return IncrementModel.from_config(self.model)

    def offspring(self):
        return LINEAR_FRACTIONAL if self.family == "linear-fractional" else POISSON

    def lanes_for(self, *tags):
        return Lanes(self.seed, (self.experiment,) + tags, self.lanes, self.workers)


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    code_version: str
    lane_keys: list
    cache_keys: list
    outputs: dict

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=_jsonable)


# ------------------------------------------------------------------ files

def _jsonable(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"cannot serialise {type(o)}")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_csv(path, rows):
    """Rows of dicts to CSV; floats with 17 significant digits."""
    if not rows:
        raise ValueError("nothing to write")
    cols = list(rows[0].keys())
    for r in rows[1:]:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in cols])
    Path(path).write_text(buf.getvalue())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def code_version():
    src = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(src.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


# ------------------------------------------------------------------ cache

def table_key(kind, model, grid, horizon, samples, seed):
    """Cache key from (model, grid, horizon, sample size, seed)."""
    g = np.ascontiguousarray(np.asarray(grid, dtype=float))
    blob = json.dumps({"kind": kind, "model": model.to_config(), "horizon": horizon,
                       "samples": samples, "seed": seed,
                       "grid": hashlib.sha256(g.tobytes()).hexdigest()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def cache(obj, directory, key):
    """Store a RenewalTable or HKernelGrid as CSV plus a JSON sidecar with checksum."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    csv_path = d / f"{key}.csv"
    if isinstance(obj, RenewalTable):
        rows = [{"x": x, "value": v, "se": s, "partial": p, "tail": t, "N_max": obj.n_max}
                for x, v, s, p, t in zip(obj.grid, obj.values, obj.std_error, obj.partial, obj.tail)]
        meta = {"type": "renewal", "kind": obj.kind, "n_max": obj.n_max,
                "last_term_rel": obj.last_term_rel, "notes": list(obj.notes), "meta": obj.meta}
    elif isinstance(obj, HKernelGrid):
        rows = [{"u": u, "w": w, "value": obj.values[i, j], "se": obj.std_error[i, j]}
                for i, u in enumerate(obj.u_grid) for j, w in enumerate(obj.w_grid)]
        meta = {"type": "hkernel", "n_u": int(obj.u_grid.size), "n_w": int(obj.w_grid.size),
                "meta": obj.meta}
    else:
        raise TypeError("only renewal tables and h grids are cached")
    write_csv(csv_path, rows)
    meta["sha256"] = _sha256(csv_path)
    (d / f"{key}.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable))
    return key


def load(key, directory):
    d = Path(directory)
    csv_path, meta_path = d / f"{key}.csv", d / f"{key}.json"
    if not csv_path.exists() or not meta_path.exists():
        raise FileNotFoundError(key)
    meta = json.loads(meta_path.read_text())
    if _sha256(csv_path) != meta.get("sha256"):
        raise CacheError(f"checksum mismatch for cached table {key}")
    rows = read_csv(csv_path)
    col = lambda name: np.array([float(r[name]) for r in rows])
    if meta["type"] == "renewal":
        return RenewalTable(meta["kind"], col("x"), col("value"), col("se"), meta["n_max"],
                            col("partial"), col("tail"), meta["last_term_rel"],
                            meta["notes"], meta["meta"])
    nu, nw = meta["n_u"], meta["n_w"]
    u = col("u").reshape(nu, nw)[:, 0]
    w = col("w").reshape(nu, nw)[0]
    return HKernelGrid(u, w, col("value").reshape(nu, nw), col("se").reshape(nu, nw), meta["meta"])


class _Context:
    """Per-run helpers: cached tables and bookkeeping of cache keys."""

    def __init__(self, cfg, cache_dir):
        self.cfg = cfg
        self.model = cfg.increment_model()
        self.family = cfg.offspring()
        self.cache_dir = Path(cache_dir)
        self.cache_keys = []

    def _cached(self, key, build):
        self.cache_keys.append(key)
        try:
            return load(key, self.cache_dir)
        except FileNotFoundError:
            pass
        except CacheError as e:
            log.warning("%s; recomputing", e)
        obj = build()
        cache(obj, self.cache_dir, key)
        return load(key, self.cache_dir)

    def tables(self):
        cfg, m = self.cfg, self.model
        grid = default_grid(m, x_max=cfg.x_max)
        n = cfg.samples["renewal"]
        ku = table_key("U", m, grid, cfg.N_max, n, cfg.seed)
        kv = table_key("V", m, -grid[::-1], cfg.N_max, n, cfg.seed)
        U = self._cached(ku, lambda: estimate_U(m, grid, cfg.N_max, n, lane_rng(cfg.seed, "renewal", "U")))
        V = self._cached(kv, lambda: estimate_V(m, -grid[::-1], cfg.N_max, n,
                                                lane_rng(cfg.seed, "renewal", "V")))
        return U, V

    def hgrid(self, U, V):
        cfg = self.cfg
        p = cfg.params
        c = np.exp(np.linspace(0.0, math.log(p.get("h_c_max", 1e5)), p.get("h_n_c", 41)))
        ug = 1.0 - 1.0 / c
        wg = np.linspace(p.get("h_w_min", -40.0), 0.0, p.get("h_n_w", 161))
        s = cfg.samples
        hz = int(p.get("h_horizon", 300))
        key = table_key("h", self.model, np.concatenate([ug, wg]), cfg.N_max,
                        [s["h_plus"], s["h_minus"], s["h_replicates"], self.family.kind, hz,
                         "extrapolated"], cfg.seed)
        return self._cached(key, lambda: h_grid(self.model, self.family, ug, wg, U, V,
                                                lane_rng(cfg.seed, "hgrid"), horizons=(hz, hz),
                                                plus_samples=s["h_plus"], minus_samples=s["h_minus"],
                                                replicates=s["h_replicates"]))


# -------------------------------------------------------------- experiments

def _z_grid(cfg):
    return np.asarray(cfg.params.get("z_grid", list(np.linspace(0, 1, 21))), dtype=float)


def _exp_renewal(ctx):
    cfg = ctx.cfg
    U, V = ctx.tables()
    xs = cfg.params.get("harmonic_x", list(np.linspace(0.5, 20.0, 10)))
    steps = cfg.params.get("harmonic_steps", 50)
    rows, ok = [], True
    for side, table, pts in (("plus", U, xs), ("minus", V, [-x for x in xs])):
        for i, x in enumerate(pts):
            e = check_harmonicity(ctx.model, table, side, x, cfg.samples["harmonicity"],
                                  lane_rng(cfg.seed, "harmonic", side, i), steps=steps)
            passed = abs(e.value) < 3 * e.std_error
            ok &= passed
            rows.append({"side": side, "x": x, "residual": e.value, "se": e.std_error, "pass": passed})
    tab_u = [{"x": x, "U": v, "se": s} for x, v, s in zip(U.grid, U.values, U.std_error)]
    tab_v = [{"x": x, "V": v, "se": s} for x, v, s in zip(V.grid, V.values, V.std_error)]
    return {"harmonicity": rows, "U": tab_u, "V": tab_v}, {"harmonicity": bool(ok)}, {}


def _exp_survival(ctx):
    cfg = ctx.cfg
    r = survival_scaling(ctx.model, ctx.family, cfg.K, cfg.n_list, cfg.samples["main"],
                         cfg.lanes_for(), J=cfg.params.get("J_split", 20))
    return {"survival": r.rows}, r.verdicts, {}


def _constants(ctx, z_grid=None):
    cfg = ctx.cfg
    U, V = ctx.tables()
    H = ctx.hgrid(U, V)
    s = cfg.samples
    L = constant_Gleft(ctx.model, ctx.family, cfg.K, cfg.J, cfg.N_cut, cfg.Q_cut, V, U,
                       s["left"], lane_rng(cfg.seed, "constants", "left"), m_max=cfg.m_max,
                       plus_samples=s["plus"], z_grid=z_grid)
    R = constant_Gright(ctx.model, ctx.family, cfg.K, cfg.J, H, U, s["right"],
                        lane_rng(cfg.seed, "constants", "right"), z_grid=z_grid)
    rep = ConstantsReport(L, R)
    two = None
    if s["two_sided"] > 0 and ctx.family.is_lf:
        two = left_two_sided(ctx.model, cfg.K, cfg.params.get("J_two_sided", 40), V, U,
                             s["two_sided"], lane_rng(cfg.seed, "constants", "two_sided"),
                             m_max=cfg.m_max)
    return rep, two


def _exp_constants(ctx):
    rep, two = _constants(ctx)
    L, R = rep.left, rep.right
    rows = []
    for j in range(max(L.terms.size, R.terms.size)):
        rows.append({"index": j,
                     "left_term": float(L.terms[j]) if j < L.terms.size else 0.0,
                     "left_se": float(L.term_se[j]) if j < L.terms.size else 0.0,
                     "right_term": float(R.terms[j]) if j < R.terms.size else 0.0,
                     "right_se": float(R.term_se[j]) if j < R.terms.size else 0.0})
    ver = {"G_left": L.value.value, "G_left_se": L.value.std_error,
           "G_right": R.value.value, "G_right_se": R.value.std_error,
           "total": rep.total.value, "total_se": rep.total.std_error,
           "positive_finite": bool(0 < L.value.value < math.inf and 0 < R.value.value < math.inf),
           "left_diagnostics": L.diagnostics, "right_diagnostics": R.diagnostics}
    if two is not None:
        ver["left_two_sided"] = two.value.value
        ver["left_two_sided_se"] = two.value.std_error
    return {"terms": rows}, ver, {}


def _exp_theorem1(ctx):
    cfg = ctx.cfg
    zs = _z_grid(cfg)
    rep, _ = _constants(ctx, z_grid=zs)
    r, curves = theorem1_law(ctx.model, ctx.family, cfg.K, cfg.n_list, zs, cfg.samples["main"],
                             cfg.lanes_for(), constants=rep)
    lim = r.diagnostics["limit_curve"]
    limit_rows = [{"z": z, "value": v, "se": e} for z, v, e in zip(lim["z"], lim["value"], lim["se"])]
    return {"law": r.rows, "limit": limit_rows}, r.verdicts, {"curves": curves, "limit": limit_rows}


def _exp_theorem2(ctx):
    cfg = ctx.cfg
    r, _ = theorem2_constancy(ctx.model, ctx.family, cfg.K, cfg.params.get("theta_frac", 0.25),
                              cfg.n_list, cfg.samples["main"], cfg.lanes_for(),
                              resample=cfg.samples["resample"])
    return {"constancy": r.rows}, r.verdicts, {}


def _exp_asymptotics(ctx):
    cfg = ctx.cfg
    U, V = ctx.tables()
    y = cfg.params.get("y", 1.0)
    a = asym_stay_low(ctx.model, cfg.n_list, y, V, cfg.samples["stay_low"], cfg.lanes_for("low"))
    b = asym_exp_min(ctx.model, cfg.n_list, U, cfg.samples["main"], cfg.lanes_for("expmin"))
    d = D_constant(ctx.model, ctx.family, cfg.params.get("phi", ["a_n/log n", "a_n n^-0.1"]),
                   cfg.n_list, V, cfg.samples["main"], cfg.lanes_for("D"))
    t = survival_ratio_theta(ctx.model, ctx.family, cfg.n_list, cfg.samples["main"],
                             cfg.lanes_for("theta"))
    tables = {"stay_low": a.rows, "exp_min": b.rows, "D": d.rows, "theta": t.rows}
    ver = {"stay_low": a.verdicts, "exp_min": b.verdicts, "D": d.verdicts, "theta": t.verdicts}
    return tables, ver, {}


def _exp_meander(ctx):
    cfg = ctx.cfg
    xs = cfg.params.get("x_grid", [0.125, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0])
    r = meander_proportionality(ctx.model, ctx.family, xs, cfg.n_list, cfg.samples["main"],
                                cfg.lanes_for())
    return {"meander": r.rows}, r.verdicts, {}


def _exp_check_b2(ctx):
    cfg = ctx.cfg
    rows = []
    for b in cfg.params.get("b_list", [1, 2, 3, 5]):
        e = check_B2(ctx.model, ctx.family, b, cfg.params.get("epsilon", 0.1), cfg.samples["main"],
                     lane_rng(cfg.seed, "check-b2", b))
        rows.append({"b": b, "value": e.value, "se": e.std_error, **e.extra})
    return {"b2": rows}, {"finite_for_some_b": any(r["finite"] for r in rows)}, {}


_RUNNERS = {"renewal": _exp_renewal, "survival": _exp_survival, "constants": _exp_constants,
            "theorem1": _exp_theorem1, "theorem2": _exp_theorem2, "asymptotics": _exp_asymptotics,
            "meander": _exp_meander, "check-b2": _exp_check_b2}


def _figures(name, tables, out):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not available; skipping figures")
        return []
    made = []
    for tname, rows in tables.items():
        if not rows:
            continue
        keys = list(rows[0])
        num = [k for k in keys if isinstance(rows[0][k], (int, float, np.number))
               and not isinstance(rows[0][k], bool)]
        if len(num) < 2:
            continue
        xk = "z" if "z" in num else "x" if "x" in num else num[0]
        yk = next((k for k in ("value", "ratio", "median_D", "residual", "U", "V", "D",
                               "left_term") if k in num and k != xk), None)
        if yk is None:
            continue
        group = "n" if "n" in keys and xk != "n" else None
        fig, ax = plt.subplots(figsize=(5, 3.5))
        if group:
            for g in sorted({r[group] for r in rows}):
                sub = [r for r in rows if r[group] == g]
                ax.plot([r[xk] for r in sub], [r[yk] for r in sub], marker=".", label=f"n={g}")
            ax.legend(fontsize=7)
        else:
            ax.plot([r[xk] for r in rows], [r[yk] for r in rows], marker=".")
        ax.set_xlabel(xk)
        ax.set_ylabel(yk)
        ax.set_title(f"{name}: {tname}")
        fig.tight_layout()
        p = Path(out) / f"{tname}.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        made.append(p.name)
    return made


def run(cfg):
    """Execute one experiment; returns (exit status, output directory)."""
    t0 = time.perf_counter()
    out_root = Path(os.environ.get(OUT_ENV, cfg.out_dir))
    h = cfg.hash()
    out = out_root / f"{cfg.experiment}-{h[:12]}"
    out.mkdir(parents=True, exist_ok=True)
    ctx = _Context(cfg, out_root / "cache")
    tables, verdicts, _ = _RUNNERS[cfg.experiment](ctx)
    outputs = {}
    for name, rows in tables.items():
        p = out / f"{name}.csv"
        write_csv(p, rows)
        outputs[p.name] = _sha256(p)
    vpath = out / "verdict.json"
    vpath.write_text(json.dumps({"experiment": cfg.experiment, "verdicts": verdicts},
                                indent=2, sort_keys=True, default=_jsonable))
    outputs[vpath.name] = _sha256(vpath)
    lane_keys = [stream_key(cfg.seed, cfg.experiment, i).tolist() for i in range(cfg.lanes)]
    man = RunManifest(cfg.content(), h, code_version(), lane_keys, ctx.cache_keys, outputs)
    (out / "manifest.json").write_text(man.to_json())
    if cfg.figures:
        figs = _figures(cfg.experiment, tables, out)
        log.info("figures: %s", ", ".join(figs) or "none")
    (out / "timing.json").write_text(json.dumps({"wall_seconds": time.perf_counter() - t0}))
    return 0, out


# ------------------------------------------------------------------- CLI

def _parser():
    p = argparse.ArgumentParser(prog="bprelab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML or JSON run configuration")
        s.add_argument("--seed", type=int)
        s.add_argument("--model", help="increment model as JSON, e.g. '{\"family\": \"gaussian\"}'")
        s.add_argument("--family", choices=["linear-fractional", "poisson"])
        s.add_argument("--K", type=float)
        s.add_argument("--n-list", type=int, nargs="+", dest="n_list")
        s.add_argument("--samples", help="budgets as JSON, e.g. '{\"main\": 100000}'")
        for flag in ("J", "N_max", "Q_cut", "m_max"):
            s.add_argument(f"--{flag.replace('_', '-')}", type=int, dest=flag)
        s.add_argument("--N-cut", type=float, dest="N_cut")
        s.add_argument("--x-max", type=float, dest="x_max")
        s.add_argument("--params", help="experiment parameters as JSON")
        s.add_argument("--out-dir", dest="out_dir")
        s.add_argument("--lanes", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--figures", action="store_true", default=None)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = _parser().parse_args(argv)
    d = {}
    if args.config:
        with open(args.config) as fh:
            d = yaml.safe_load(fh) or {}
        if "config_hash" in d and "config" in d:
            # a run manifest: replay its config
            d = dict(d["config"])
    d["experiment"] = args.experiment
    for k in ("seed", "family", "K", "n_list", "J", "N_max", "N_cut", "Q_cut", "m_max", "x_max",
              "out_dir", "lanes", "workers", "figures"):
        v = getattr(args, k)
        if v is not None:
            d[k] = v
    for k in ("model", "samples", "params"):
        v = getattr(args, k)
        if v is not None:
            d[k] = json.loads(v)
    try:
        cfg = RunConfig.from_dict(d)
    except (ValueError, TypeError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    status, out = run(cfg)
    print(out)
    return status


if __name__ == "__main__":
    sys.exit(main())

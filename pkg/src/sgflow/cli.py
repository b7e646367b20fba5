"""Experiment runner: ``sgflow run | validate | dump-kernels``.

Configs are flat ``key = value`` text with dotted namespaces, ``#`` comments
and an optional ``pi`` suffix on numbers (``beta2 = 2pi``).  Every emitted
number is a function of (config, seed) alone.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .fbsde import FBSDESolver, SmearedTanh, sample_w_increment
from .flow import CouplingParams, ForceTables, beta2_threshold
from .kernels import KernelMultipliers, g_hat, gdot_hat, make_scale_grid, q_hat
from .lattice import LatticeSpec, make_rho, plateau_bump, write_sgf1
from .observables import (centred_bump, correlation_decay, free_decay_benchmark, mollified_diag,
                          singularity_stat, spearman_trend, wick_trig)
from .rng import normals
from .sampling import (EstimatorResult, append_results_csv, fbsde_evaluate, free_field_sample,
                       free_mode_check, gibbs_oracle_sample, law_observables, law_triangle)
from .variational import laplace_transform_W, semiclassical_sweep, write_sweep_csv

log = logging.getLogger("sgflow")

# scale index reserved for the direct free-field draws of the decay and singularity runs
FREE_STREAM = 1 << 21

KINDS = ("free-check", "fbsde-solve", "triangle", "decay", "singularity", "variational",
         "semiclassical", "kernel-dump")

# key -> (type, default); list-valued keys hold comma-separated floats
DEFAULTS: dict[str, tuple[type, Any]] = {
    "experiment.kind": (str, "free-check"),
    "lattice.N": (int, 32),
    "lattice.a": (float, 0.125),
    "mass.m": (float, 1.0),
    "coupling.lambda": (float, 0.2),
    "coupling.beta2": (float, 2 * math.pi),
    "truncation.ell_star": (int, 1),
    "cutoff.T": (float, 16.0),
    "cutoff.rho_radius": (float, 1.0),
    "cutoff.rho_edge": (float, 0.5),
    "grid.n_uniform": (int, 8),
    "grid.ratio": (float, 2 ** 0.25),
    "ensemble.M": (int, 1000),
    "ensemble.M_eval": (int, 4000),
    "ensemble.M_girsanov": (int, 8000),
    "ensemble.chains": (int, 16),
    "ensemble.samples": (int, 500),
    "ensemble.picard": (int, 4),
    "observable.radius": (float, 0.5),
    "observable.edge": (float, 0.5),
    "observable.scale": (float, 1.0),
    "decay.min_sep": (float, 2.0),
    "decay.max_sep": (float, 6.0),
    "singularity.eps": (list, [32.0, 16.0, 8.0, 4.0]),
    "semiclassical.hbars": (list, [0.5, 0.25, 0.125, 0.0625]),
    "semiclassical.amp": (float, 1.0),
    "output.snapshots": (int, 0),
    "seed": (int, 0),
}

_PI = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)?\s*\*?\s*pi$")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


def _number(text: str) -> float:
    s = text.strip().lower()
    m = _PI.match(s)
    if m:
        return float(m.group(1) or 1.0) * math.pi
    return float(s)


def parse_config(text: str) -> dict[str, str]:
    """Raw key/value pairs; later duplicates override earlier ones."""
    raw: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"line {n}: expected 'key = value'"])
        k, v = line.split("=", 1)
        raw[k.strip()] = v.strip()
    return raw


def validate(raw: dict[str, str]) -> dict[str, Any]:
    """Typed config with defaults filled in; raises ConfigError listing every violation."""
    errors = []
    cfg: dict[str, Any] = {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in DEFAULTS.items()}
    for k, v in raw.items():
        if k not in DEFAULTS:
            errors.append(f"{k}: unknown key")
            continue
        typ = DEFAULTS[k][0]
        try:
            if typ is str:
                cfg[k] = v
            elif typ is int:
                x = _number(v)
                if x != int(x):
                    raise ValueError
                cfg[k] = int(x)
            elif typ is list:
                cfg[k] = [_number(p) for p in v.split(",") if p.strip()]
            else:
                cfg[k] = _number(v)
        except ValueError:
            errors.append(f"{k}: cannot parse {v!r} as {typ.__name__}")
    if errors:
        raise ConfigError(errors)

    if cfg["experiment.kind"] not in KINDS:
        errors.append(f"experiment.kind: {cfg['experiment.kind']!r} not one of {', '.join(KINDS)}")
    N, a, m, T = cfg["lattice.N"], cfg["lattice.a"], cfg["mass.m"], cfg["cutoff.T"]
    if N < 4 or N % 2:
        errors.append("lattice.N: need an even N >= 4")
    if not a > 0:
        errors.append("lattice.a: need a > 0")
    if not m > 0:
        errors.append("mass.m: need m > 0")
    if not T > 0:
        errors.append("cutoff.T: need T > 0")
    elif a > 0 and T > 0.25 / a**2 * (1 + 1e-12):
        errors.append(f"cutoff.T: {T:g} exceeds the resolved window 0.25/a^2 = {0.25 / a**2:g}")
    ell, b2 = cfg["truncation.ell_star"], cfg["coupling.beta2"]
    if ell not in (1, 2, 3):
        errors.append("truncation.ell_star: must be 1, 2 or 3")
    elif not 0 <= b2 < beta2_threshold(ell):
        errors.append(f"coupling.beta2: {b2 / math.pi:.4g}pi is above the "
                      f"{beta2_threshold(ell) / math.pi:.4g}pi threshold for ell_star = {ell}")
    if not math.isfinite(cfg["coupling.lambda"]) or cfg["coupling.lambda"] < 0:
        errors.append("coupling.lambda: need a finite lambda >= 0")
    L = N * a
    reach = cfg["cutoff.rho_radius"] + cfg["cutoff.rho_edge"]
    if cfg["cutoff.rho_radius"] < 0 or cfg["cutoff.rho_edge"] <= 0:
        errors.append("cutoff.rho_edge: need radius >= 0 and edge > 0")
    elif reach > L / 2 - L / 8 + 1e-12:
        errors.append(f"cutoff.rho_radius: support radius {reach:g} leaves less than L/8 = {L / 8:g} "
                      f"margin to the torus boundary")
    for k in ("ensemble.M", "ensemble.M_eval", "ensemble.M_girsanov", "ensemble.chains",
              "ensemble.samples", "ensemble.picard", "grid.n_uniform"):
        if cfg[k] < 1:
            errors.append(f"{k}: must be positive")
    if cfg["grid.ratio"] <= 1:
        errors.append("grid.ratio: must exceed 1")
    if cfg["output.snapshots"] < 0:
        errors.append("output.snapshots: must be >= 0")
    if cfg["seed"] < 0:
        errors.append("seed: must be >= 0")
    if any(h <= 0 for h in cfg["semiclassical.hbars"]):
        errors.append("semiclassical.hbars: values must be positive")
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path: str | Path) -> dict[str, Any]:
    return validate(parse_config(Path(path).read_text()))


def canonical(cfg: dict[str, Any]) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def code_hash() -> str:
    """Git blob hash of the version string."""
    body = __version__.encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


# -- experiment plumbing --------------------------------------------------------------

@dataclass
class Outcome:
    results: dict[str, EstimatorResult] = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)
    artifacts: list[Path] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


class Setup:
    """Lattice objects shared by every experiment."""

    def __init__(self, cfg: dict[str, Any]):
        self.cfg = cfg
        self.spec = LatticeSpec(cfg["lattice.N"], cfg["lattice.a"])
        self.kernels = KernelMultipliers(self.spec, cfg["mass.m"])
        self.T = cfg["cutoff.T"]
        self.grid = make_scale_grid(self.T, cfg["grid.n_uniform"], cfg["grid.ratio"])
        self.rho = make_rho(self.spec, cfg["cutoff.rho_radius"], cfg["cutoff.rho_edge"]).values
        self.params = CouplingParams(cfg["coupling.lambda"], cfg["coupling.beta2"], cfg["truncation.ell_star"])
        self.chi = plateau_bump(self.spec, cfg["observable.radius"], cfg["observable.edge"])

    def tables(self, params: CouplingParams | None = None) -> ForceTables:
        return ForceTables(params or self.params, self.kernels, self.rho, self.T, grid=self.grid)


def _scalar(x: float, se: float, method: str, ess: float = float("nan")) -> EstimatorResult:
    return EstimatorResult(float(x), float(se), float(ess), method, False)


def _snapshots(fields: np.ndarray, out: Path, n: int, prefix: str, a: float, m: float,
               scale_index: int) -> list[Path]:
    paths = []
    for i in range(min(n, len(fields))):
        p = out / f"{prefix}_{i:04d}.sgf1"
        write_sgf1(p, fields[i], a, m, scale_index)
        paths.append(p)
    return paths


def run_free_check(s: Setup, seed: int, out: Path) -> Outcome:
    cfg = s.cfg
    M = cfg["ensemble.M"]
    W = free_field_sample(s.kernels, s.grid.knots, M, seed)
    mc = free_mode_check(s.kernels, s.T, M, seed, samples=W)
    wick = wick_trig(W, s.T, "cos", s.kernels, s.params.beta).values.mean(axis=(-2, -1))
    wm, wse = float(wick.mean()), float(wick.std(ddof=1) / np.sqrt(M))
    o = Outcome()
    o.results["max_abs_mode_z"] = _scalar(mc["max_abs_z"], 0.0, "free", M)
    o.results["wick_cos_mean"] = _scalar(wm, wse, "free", M)
    o.checks["mode_variances"] = mc["pass"]
    o.summary["modes_skipped_below_roundoff"] = mc["n_skipped"]
    o.checks["wick_mean"] = abs(wm - 1) < 5 * wse
    o.artifacts += _snapshots(W, out, cfg["output.snapshots"], "free", s.spec.a, s.kernels.m, s.grid.K)
    return o


def run_fbsde_solve(s: Setup, seed: int, out: Path) -> Outcome:
    cfg = s.cfg
    tb = s.tables()
    solver = FBSDESolver(tb)
    bundle = solver.solve(cfg["ensemble.M"], seed, n_max=cfg["ensemble.picard"])
    sample = fbsde_evaluate(solver, bundle, cfg["ensemble.M_eval"], seed + 1)
    o = Outcome()
    for name, fn in law_observables(s.chi, s.rho, tb.beta, s.spec.area).items():
        o.results[name] = sample.estimate(fn)
    res = list(bundle.residuals)
    o.summary["residuals"] = res
    o.checks["contraction"] = len(res) < 2 or all(b < a for a, b in zip(res, res[1:]))
    o.artifacts += _snapshots(sample.fields, out, cfg["output.snapshots"], "fbsde", s.spec.a, s.kernels.m,
                              s.grid.K)
    return o


def run_triangle(s: Setup, seed: int, out: Path) -> Outcome:
    cfg = s.cfg
    tri = law_triangle(s.tables(), s.chi, seed, n_gibbs=cfg["ensemble.samples"],
                       n_chains=cfg["ensemble.chains"], M_girsanov=cfg["ensemble.M_girsanov"],
                       M_fbsde=cfg["ensemble.M"], M_eval=cfg["ensemble.M_eval"],
                       n_picard=cfg["ensemble.picard"])
    o = Outcome()
    for method, est in tri["estimates"].items():
        for name, r in est.items():
            o.results[f"{method}:{name}"] = r
    for pair, rep in tri["pairs"].items():
        o.checks[pair] = rep["pass"]
        o.summary[pair] = [{k: v for k, v in row.items()} for row in rep["rows"]]
    o.summary["systematic"] = tri["systematic"]
    o.summary["residuals"] = tri["residuals"]
    return o


def decay_separations(spec: LatticeSpec, m: float, lo: float, hi: float) -> np.ndarray:
    """Lattice offsets covering [lo/m, hi/m] clipped to L/3."""
    a = spec.a
    first = int(math.ceil(lo / m / a - 1e-9))
    last = int(math.floor(min(hi / m, spec.L / 3) / a + 1e-9))
    if last <= first:
        raise ValueError("lattice too small for the requested separation window")
    step = max(1, (last - first) // 8)
    return np.arange(first, last + 1, step)


def run_decay(s: Setup, seed: int, out: Path) -> Outcome:
    cfg = s.cfg
    m = s.kernels.m
    chi = centred_bump(s.spec, cfg["observable.radius"], cfg["observable.edge"])
    seps = decay_separations(s.spec, m, cfg["decay.min_sep"], cfg["decay.max_sep"])
    region = s.rho >= 1 - 1e-12
    scale = cfg["observable.scale"]
    res = gibbs_oracle_sample(s.tables(), cfg["ensemble.samples"], seed, cfg["ensemble.chains"])
    fit = correlation_decay(res.flat(), chi, seps, s.kernels, scale, region, res.groups())
    n_free = cfg["ensemble.samples"] * cfg["ensemble.chains"]
    noise = normals(seed, range(n_free), FREE_STREAM, s.spec.shape)
    free = sample_w_increment(0.0, s.T, s.kernels, noise)
    free_fit = correlation_decay(free, chi, seps, s.kernels, scale, region)
    bench = free_decay_benchmark(s.kernels, chi, seps, t=s.T, scale=scale)
    o = Outcome()
    o.results["decay_rate"] = _scalar(fit.rate, (fit.rate_ci[1] - fit.rate_ci[0]) / 3.92, "gibbs")
    o.results["free_decay_rate"] = _scalar(free_fit.rate, (free_fit.rate_ci[1] - free_fit.rate_ci[0]) / 3.92, "free")
    o.results["free_decay_rate_exact"] = _scalar(bench.rate, 0.0, "free")
    o.checks["interacting_rate"] = bool(fit.resolved and fit.rate >= 0.5 * m)
    o.checks["free_control"] = bool(free_fit.resolved and abs(free_fit.rate / bench.rate - 1) <= 0.15)
    for name, f in (("decay_fit.json", fit), ("decay_free.json", free_fit), ("decay_exact.json", bench)):
        p = out / name
        p.write_text(f.to_json())
        o.artifacts.append(p)
    return o


def run_singularity(s: Setup, seed: int, out: Path, n_free: int | None = None) -> Outcome:
    cfg = s.cfg
    a = s.spec.a
    b2 = s.params.beta2
    if b2 < 4 * math.pi - 1e-12:
        raise ValueError("the singularity statistic needs beta2 >= 4pi")
    o = Outcome()
    eps_g = np.array([2, 4, 8, 16]) * a
    G = [mollified_diag(s.kernels, e) for e in eps_g]
    slope = float(np.polyfit(np.log(eps_g**-2.0), G, 1)[0])
    o.results["G_eps_slope"] = _scalar(slope, 0.0, "free")
    o.checks["G_eps_slope"] = abs(slope * 4 * math.pi - 1) <= 0.1

    eps = [e * a for e in cfg["singularity.eps"]]
    free_stats = [singularity_stat(s.kernels, e, b2, s.rho) for e in eps]
    n_free = n_free or cfg["ensemble.samples"] * cfg["ensemble.chains"]
    vals = [[] for _ in eps]
    for i in range(0, n_free, 100):
        k = min(100, n_free - i)
        noise = normals(seed, range(i, i + k), FREE_STREAM, s.spec.shape)
        W = sample_w_increment(0.0, np.inf, s.kernels, noise)
        for j, U in enumerate(free_stats):
            vals[j].append(U(W))
    vals = [np.concatenate(v) for v in vals]
    x = np.log(np.asarray(eps) ** -2.0)
    vr = np.array([v.var(ddof=1) / U.r**2 for v, U in zip(vals, free_stats)])
    coef = np.polyfit(x, vr, 1)
    r2 = 1 - np.sum((vr - np.polyval(coef, x)) ** 2) / np.sum((vr - vr.mean()) ** 2)
    free_abs = [float(np.abs(v).mean()) for v in vals]
    for e, v in zip(cfg["singularity.eps"], vals):
        o.results[f"free_U_mean@{e:g}a"] = _scalar(v.mean(), v.std(ddof=1) / np.sqrt(len(v)), "free", len(v))
    o.results["free_var_slope"] = _scalar(coef[0], 0.0, "free")
    o.results["free_var_r2"] = _scalar(r2, 0.0, "free")
    o.checks["free_var_affine"] = bool(coef[0] > 0 and r2 > 0.9)
    o.checks["free_trend_down"] = spearman_trend(free_abs) < 0
    o.checks["free_mean_zero"] = all(abs(v.mean()) < 5 * v.std(ddof=1) / np.sqrt(len(v)) for v in vals)

    res = gibbs_oracle_sample(s.tables(), cfg["ensemble.samples"], seed + 1, cfg["ensemble.chains"])
    int_stats = [singularity_stat(s.kernels, e, b2, s.rho, t=s.T) for e in eps]
    flat = res.flat()
    means = []
    for e, U in zip(cfg["singularity.eps"], int_stats):
        r = EstimatorResult(*_batch_mean(U(flat), res.groups()), "gibbs", False)
        o.results[f"gibbs_U_mean@{e:g}a"] = r
        means.append(abs(r.mean))
    o.checks["interacting_trend_up"] = spearman_trend(means) > 0
    o.summary["free_abs_mean"] = free_abs
    o.summary["interacting_abs_mean"] = means
    return o


def _batch_mean(v: np.ndarray, groups: np.ndarray) -> tuple[float, float, float]:
    labels = np.unique(groups)
    gm = np.array([v[groups == k].mean() for k in labels])
    return float(v.mean()), float(gm.std(ddof=1) / np.sqrt(len(gm))), float(len(v))


def run_variational(s: Setup, seed: int, out: Path) -> Outcome:
    cfg = s.cfg
    tb = s.tables()
    g = SmearedTanh(s.chi, s.spec.area, cfg["semiclassical.amp"], cfg["observable.scale"])
    gib = gibbs_oracle_sample(tb, cfg["ensemble.samples"], seed + 101, cfg["ensemble.chains"])
    rep = laplace_transform_W(g, tb, M_fbsde=cfg["ensemble.M"], M_eval=cfg["ensemble.M_eval"],
                              M_gir=cfg["ensemble.M_girsanov"], gibbs=gib, seed=seed,
                              n_picard=cfg["ensemble.picard"])
    o = Outcome()
    for route, (v, se) in rep["routes"].items():
        o.results[f"laplace:{route}"] = _scalar(v, se, {"control": "fbsde"}.get(route, route))
    o.checks["laplace_triangle"] = rep["pass"]
    o.summary["z"] = {f"{a}~{b}": z for (a, b), z in rep["z"].items()}
    return o


def run_semiclassical(s: Setup, seed: int, out: Path) -> Outcome:
    cfg = s.cfg
    hbars = cfg["semiclassical.hbars"]
    f = SmearedTanh(s.chi, s.spec.area, cfg["semiclassical.amp"], cfg["observable.scale"])
    sw = semiclassical_sweep(hbars, f, s.params, s.kernels, s.rho, s.T, seed,
                             n_samples=cfg["ensemble.samples"], M_fbsde=cfg["ensemble.M"],
                             M_eval=cfg["ensemble.M_eval"])
    rows = sw["rows"]
    p = out / "semiclassical.csv"
    write_sweep_csv(p, rows)
    o = Outcome(artifacts=[p])
    for r in rows:
        o.results[f"free_energy@hbar={r.hbar:g}"] = _scalar(r.estimate, r.stderr, "gibbs")
        o.results[f"control_energy@hbar={r.hbar:g}"] = _scalar(r.control_energy, r.control_energy_se, "fbsde")
    o.results["rate_function_inf"] = _scalar(sw["limit"], 0.0, "free")
    slope = semiclassical_slope(rows)
    o.results["control_energy_slope"] = _scalar(slope, 0.0, "fbsde")
    o.checks["control_energy_slope"] = abs(slope - 1) <= 0.3
    o.checks["monotone_approach"] = monotone_gap(rows)
    return o


def semiclassical_slope(rows) -> float:
    h = np.log([r.hbar for r in rows])
    e = np.log([r.control_energy for r in rows])
    return float(np.polyfit(h, e, 1)[0])


def monotone_gap(rows, n_se: float = 2.0) -> bool:
    """|estimate - limit| non-increasing as hbar decreases, up to n_se combined errors."""
    rows = sorted(rows, key=lambda r: -r.hbar)
    gaps = [abs(r.estimate - r.rate_function_inf) for r in rows]
    return all(g1 <= g0 + n_se * math.hypot(r0.stderr, r1.stderr)
               for g0, g1, r0, r1 in zip(gaps, gaps[1:], rows, rows[1:]))


def dump_kernels(s: Setup, out: Path) -> list[Path]:
    tb = s.tables()
    f2, lam = out / "f2_table.csv", out / "lambda_t.csv"
    tb.dump_f2_csv(f2)
    tb.dump_lambda_csv(lam)
    mult = out / "multipliers.csv"
    ws = np.unique(s.kernels.w)
    with open(mult, "w") as fh:
        fh.write("t,w,q_hat,gdot_hat,g_hat\n")
        for t in s.grid.knots[1:]:
            for row in zip(ws, q_hat(t, ws), gdot_hat(t, ws), g_hat(t, ws)):
                fh.write(f"{t:.17g}," + ",".join(f"{v:.17g}" for v in row) + "\n")
    return [f2, lam, mult]


def run_kernel_dump(s: Setup, seed: int, out: Path) -> Outcome:
    o = Outcome(artifacts=dump_kernels(s, out))
    o.checks["tables_written"] = all(p.stat().st_size > 0 for p in o.artifacts)
    return o


EXPERIMENTS: dict[str, Callable[[Setup, int, Path], Outcome]] = {
    "free-check": run_free_check,
    "fbsde-solve": run_fbsde_solve,
    "triangle": run_triangle,
    "decay": run_decay,
    "singularity": run_singularity,
    "variational": run_variational,
    "semiclassical": run_semiclassical,
    "kernel-dump": run_kernel_dump,
}


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def run(cfg: dict[str, Any], seed: int | None = None, out: str | Path = "sgflow-out") -> dict:
    """Run the configured experiment; returns the manifest (also written to ``out``)."""
    seed = cfg["seed"] if seed is None else int(seed)
    cfg = dict(cfg, seed=seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    chash = sha256_hex(canonical(cfg).encode())
    run_id = chash[:12]
    outcome = EXPERIMENTS[cfg["experiment.kind"]](Setup(cfg), seed, out)
    files = list(outcome.artifacts)
    if outcome.results:
        res = out / "results.csv"
        res.unlink(missing_ok=True)
        append_results_csv(res, run_id, seed, outcome.results)
        files.insert(0, res)
    summ = out / "summary.json"
    summ.write_text(json.dumps({"checks": outcome.checks, "summary": outcome.summary},
                               sort_keys=True, indent=1, default=_json_default))
    files.append(summ)
    artifacts = [{"path": p.name, "sha256": sha256_hex(p.read_bytes()), "bytes": p.stat().st_size}
                 for p in files]
    record = {"run_id": run_id, "config_hash": chash, "code_hash": code_hash(), "seed": seed,
              "artifacts": [(a["path"], a["sha256"]) for a in artifacts]}
    manifest = {
        "run_id": run_id,
        "kind": cfg["experiment.kind"],
        "seed": seed,
        "config": cfg,
        "config_hash": chash,
        "code_version": __version__,
        "code_hash": code_hash(),
        "checks": outcome.checks,
        "pass": outcome.passed,
        "artifacts": artifacts,
        "record_hash": sha256_hex(json.dumps(record, sort_keys=True).encode()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1,
                                                  default=_json_default))
    return manifest


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="sgflow", description="Stochastic gradient flow experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run the configured experiment")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default="sgflow-out")
    p_val = sub.add_parser("validate", help="check a config and echo it with defaults")
    p_val.add_argument("config")
    p_dump = sub.add_parser("dump-kernels", help="write multiplier, lambda_t and level-2 tables")
    p_dump.add_argument("config")
    p_dump.add_argument("--out", default="sgflow-kernels")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        for msg in e.errors:
            print(f"error: {msg}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if args.cmd == "validate":
        for k in sorted(cfg):
            v = cfg[k]
            txt = ",".join(f"{x:.17g}" for x in v) if isinstance(v, list) else (
                f"{v:.17g}" if isinstance(v, float) else str(v))
            print(f"{k} = {txt}")
        return 0
    try:
        if args.cmd == "dump-kernels":
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            for p in dump_kernels(Setup(cfg), out):
                print(p)
            return 0
        manifest = run(cfg, args.seed, args.out)
    except Exception as e:  # noqa: BLE001 - reported with context, exit 1
        log.debug("run failed", exc_info=True)
        print(f"error: {cfg['experiment.kind']} run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    status = "pass" if manifest["pass"] else "FAIL"
    for name, ok in manifest["checks"].items():
        print(f"{'pass' if ok else 'FAIL'}  {name}")
    print(f"{status}  {manifest['kind']}  run {manifest['run_id']}  record {manifest['record_hash'][:16]}")
    return 0 if manifest["pass"] else 2


if __name__ == "__main__":
    sys.exit(main())

"""Ensembles and the independent Gibbs oracle.

Three interacting routes to the same terminal law are provided:

* ``fbsde_terminal``: X_T from a converged forward-backward solve;
* ``girsanov_estimate``: decoupled forward runs reweighted by exp(-int H ds);
* ``gibbs_oracle_sample``: a Metropolis-adjusted Langevin chain targeting
  exp(-a^2 lambda_T sum rho cos(beta phi)) relative to the free field with
  covariance G_T.

The chain works in whitened coordinates ``z`` with ``phi = S z`` and ``S`` the
square root of G_T (the same operator that maps site noise to W_T).  The
proposal is a Crank-Nicolson discretisation of preconditioned Langevin
dynamics, so the Gaussian part is treated exactly and the acceptance rate at
zero coupling is one.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .fbsde import (FBSDESolver, decoupled_forward, field_shape, integrate_forward,
                    sample_w_increment, sample_w_paths)
from .flow import ForceTables
from .rng import normals, stream

log = logging.getLogger(__name__)

# scale-index offset reserving RNG streams for the MCMC chains
GIBBS_STREAM = 1 << 20
METHODS = ("fbsde", "girsanov", "gibbs", "free")
# h = 4 makes the Crank-Nicolson proposal independent of the current state;
# larger steps anti-correlate successive states
H_MAX = 4.0
# smallest per-mode variance, relative to the largest, that a float64 FFT resolves
RESOLVABLE = 1e-24


class SamplerError(RuntimeError):
    pass


@dataclass
class EstimatorResult:
    """Monte Carlo estimate with its standard error and effective sample size."""

    mean: float
    stderr: float
    ess: float
    method: str
    flagged: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method tag {self.method!r}")


# -- free field ------------------------------------------------------------------

def free_field_sample(kernels, knots, M: int, seed: int, traj_offset: int = 0) -> np.ndarray:
    """W_T on ``M`` trajectories, summed from exact increments on ``knots``.

    Uses the same streams as the FBSDE solver, so at zero coupling the two
    agree sample by sample.
    """
    trajs = np.arange(traj_offset, traj_offset + M)
    return sample_w_paths(kernels, knots, seed, trajs)[-1]


def mode_variances(samples: np.ndarray, area: float) -> np.ndarray:
    """Per-mode second moment E|a^2 fft2 W|^2 over the leading sample axis."""
    fh = np.fft.fft2(samples) * area
    return np.mean(np.abs(fh) ** 2, axis=0)


def free_mode_check(kernels, T: float, M: int, seed: int, knots=None, n_se: float = 5.0,
                    samples: np.ndarray | None = None) -> dict:
    """Per-mode variance of W_T against L^2 G_T(k), in units of standard errors.

    ``samples`` (shape (M, N, N)) skips the internal draw.
    """
    if samples is None:
        knots = np.asarray(knots if knots is not None else [0.0, T])
        W = free_field_sample(kernels, knots, M, seed)
    else:
        W = np.asarray(samples)
        M = len(W)
    area = kernels.area
    fh = np.fft.fft2(W) * area
    p = np.abs(fh) ** 2
    theory = kernels.g(T) * kernels.spec.L**2
    se = p.std(axis=0, ddof=1) / np.sqrt(M)
    z = (p.mean(axis=0) - theory) / se
    # modes whose variance sits below double-precision round-off of the transform are not testable
    ok = theory >= RESOLVABLE * theory.max()
    zr = np.where(ok, z, 0.0)
    return {"z": z, "resolvable": ok, "n_skipped": int(ok.size - ok.sum()),
            "max_abs_z": float(np.max(np.abs(zr))), "pass": bool(np.all(np.abs(zr) < n_se)),
            "ratio": p.mean(axis=0) / theory}


# -- statistics helpers ---------------------------------------------------------------

def integrated_autocorr(x: np.ndarray, c: float = 5.0) -> float:
    """Integrated autocorrelation time with Sokal's self-consistent window.

    ``x`` has shape (n,) or (n, chains); chains are averaged in the
    autocovariance.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 4:
        return 1.0
    y = x - x.mean(axis=0)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(y, n=nfft, axis=0)
    acov = np.fft.irfft(f * np.conj(f), n=nfft, axis=0)[:n].mean(axis=1)
    if acov[0] <= 0:
        return 1.0
    rho = acov / acov[0]
    tau = 2 * np.cumsum(rho) - 1
    for w in range(1, n):
        if w >= c * tau[w]:
            return float(max(tau[w], 1.0))
    return float(max(tau[-1], 1.0))


def weighted_estimate(values: np.ndarray, logw: Optional[np.ndarray] = None,
                      groups: Optional[np.ndarray] = None, method: str = "fbsde") -> EstimatorResult:
    """Mean, standard error and ESS of ``values``.

    With log-weights: self-normalised ratio estimate with delta-method error.
    With ``groups`` (e.g. chain x batch labels): batch-means error.
    """
    v = np.asarray(values, dtype=float).ravel()
    n = v.size
    if logw is not None:
        lw = np.asarray(logw, dtype=float).ravel()
        w = np.exp(lw - lw.max())
        sw = w.sum()
        mu = float(np.sum(w * v) / sw)
        se = float(np.sqrt(np.sum(w * w * (v - mu) ** 2)) / sw)
        ess = float(sw**2 / np.sum(w * w))
        return EstimatorResult(mu, se, ess, method, flagged=ess < 0.1 * n)
    mu = float(v.mean())
    if groups is not None:
        g = np.asarray(groups).ravel()
        labels = np.unique(g)
        gm = np.array([v[g == k].mean() for k in labels])
        se = float(gm.std(ddof=1) / np.sqrt(len(labels)))
        var = v.var(ddof=1)
        ess = float(var / se**2) if se > 0 else float(n)
        return EstimatorResult(mu, se, min(ess, float(n)), method)
    se = float(v.std(ddof=1) / np.sqrt(n))
    return EstimatorResult(mu, se, float(n), method)


# -- Gibbs oracle ----------------------------------------------------------------------

@dataclass
class GibbsChainState:
    """State of a batch of independent preconditioned Langevin chains.

    ``precond`` holds the spectral covariance G_T(k) used to whiten the field.
    """

    z: np.ndarray
    phi: np.ndarray
    step: float
    precond: np.ndarray
    n_prop: int = 0
    n_acc: int = 0
    acc_hist: list = field(default_factory=list)

    def __post_init__(self):
        if not np.all(self.precond > 0):
            raise ValueError("preconditioner must be positive")

    @property
    def acceptance(self) -> float:
        return self.n_acc / self.n_prop if self.n_prop else float("nan")


@dataclass
class GibbsResult:
    samples: np.ndarray          # (n_kept, chains, N, N)
    cos_trace: np.ndarray        # (n_steps_after_burn, chains) mean cos over supp rho
    acceptance: float
    step: float
    iat: float
    burn_in: int
    thin: int
    state: GibbsChainState

    def groups(self, n_batches: int = 4) -> np.ndarray:
        """chain x batch labels aligned with ``samples.reshape(-1, N, N)``."""
        n, c = self.samples.shape[:2]
        b = np.minimum(np.arange(n) * n_batches // max(n, 1), n_batches - 1)
        return (b[:, None] * c + np.arange(c)[None, :]).ravel()

    def flat(self) -> np.ndarray:
        return self.samples.reshape((-1,) + self.samples.shape[-2:])


class GibbsSampler:
    """Crank-Nicolson Langevin (MALA-type) sampler for the cut-off Gibbs measure.

    Parameters
    ----------
    tables : ForceTables
        Supplies lambda_T, beta, rho and the kernels.
    n_chains : int
    seed : int
    step : float
        Initial Langevin step ``h`` (tuned during warm-up).
    extra : callable, optional
        ``extra(phi) -> (value, grad)`` adds a potential to the target; ``grad``
        is the L^2 gradient (the site derivative divided by a^2).
    """

    def __init__(self, tables: ForceTables, n_chains: int = 16, seed: int = 0, step: float = 1.0,
                 extra: Callable | None = None):
        self.tables = tables
        self.extra = extra
        self.kernels = tables.kernels
        self.T = tables.T
        self.shape = field_shape(self.kernels)
        self.n_chains = int(n_chains)
        self.seed = int(seed)
        self.lam_T = tables.lam(self.T)
        self.area = self.kernels.area
        self.rngs = [stream(seed, c, GIBBS_STREAM) for c in range(self.n_chains)]
        z = np.stack([r.standard_normal(self.shape) for r in self.rngs])
        self.state = GibbsChainState(z, self.S(z), float(step), np.atleast_1d(self.kernels.g(self.T)))

    def S(self, z: np.ndarray) -> np.ndarray:
        """Square root of the covariance G_T (symmetric, maps white noise to W_T)."""
        return sample_w_increment(0.0, self.T, self.kernels, z)

    def U(self, phi: np.ndarray) -> np.ndarray:
        b = self.tables.beta
        u = self.lam_T * self.area * np.sum(self.tables.rho * np.cos(b * phi), axis=(-2, -1))
        if self.extra is not None:
            u = u + self.extra(phi)[0]
        return u

    def grad_z(self, phi: np.ndarray) -> np.ndarray:
        """Gradient of U(S z) with respect to z."""
        b = self.tables.beta
        dU = -self.lam_T * b * self.tables.rho * np.sin(b * phi)
        if self.extra is not None:
            dU = dU + self.extra(phi)[1]
        return self.S(self.area * dU)

    def _coeffs(self, h):
        r = (1 - h / 4) / (1 + h / 4)
        return r, np.sqrt(1 - r * r), (h / 2) / (1 + h / 4)

    def step(self) -> np.ndarray:
        """One proposal per chain; returns the boolean acceptance vector."""
        st = self.state
        r, s, gam = self._coeffs(st.step)
        z, phi = st.z, st.phi
        g = self.grad_z(phi)
        xi = np.stack([rg.standard_normal(self.shape) for rg in self.rngs])
        u = np.array([rg.random() for rg in self.rngs])
        zp = r * z - gam * g + s * xi
        phip = self.S(zp)
        gp = self.grad_z(phip)
        ax = (-2, -1)
        logq_fwd = -np.sum((zp - r * z + gam * g) ** 2, axis=ax) / (2 * s * s)
        logq_bwd = -np.sum((z - r * zp + gam * gp) ** 2, axis=ax) / (2 * s * s)
        logpi = -0.5 * np.sum(z * z, axis=ax) - self.U(phi)
        logpi_p = -0.5 * np.sum(zp * zp, axis=ax) - self.U(phip)
        log_a = logpi_p - logpi + logq_bwd - logq_fwd
        acc = np.log(np.maximum(u, 1e-300)) < log_a
        st.z = np.where(acc[:, None, None], zp, z)
        st.phi = np.where(acc[:, None, None], phip, phi)
        st.n_prop += len(acc)
        st.n_acc += int(acc.sum())
        return acc

    def tune(self, n_steps: int = 400, target: float = 0.6, window: int = 20) -> float:
        """Robbins-Monro adaptation of log h towards the target acceptance."""
        st = self.state
        logh = np.log(st.step)
        for k in range(n_steps // window):
            a = np.mean([self.step().mean() for _ in range(window)])
            st.acc_hist.append(float(a))
            logh += (a - target) * 2.0 / np.sqrt(k + 1)
            logh = min(logh, np.log(H_MAX))
            st.step = float(np.exp(max(logh, -12.0)))
        st.n_prop = st.n_acc = 0
        return st.step

    def cos_mean(self, phi: np.ndarray) -> np.ndarray:
        supp = self.tables.rho > 0
        return np.mean(np.cos(self.tables.beta * phi[..., supp]), axis=-1)


def gibbs_oracle_sample(tables: ForceTables, n_samples: int, seed: int = 0, n_chains: int = 16,
                        thin: int | None = None, tune_steps: int = 400, pilot_steps: int = 400,
                        acc_range: Sequence[float] = (0.5, 0.7),
                        extra: Callable | None = None) -> GibbsResult:
    """Tuned, burnt-in Gibbs oracle chains.

    ``n_samples`` kept fields per chain.  Burn-in is ten integrated
    autocorrelation times of the mean cosine over supp rho (pilot estimate);
    ``thin`` defaults to ceil(IAT).
    """
    smp = GibbsSampler(tables, n_chains, seed, extra=extra)
    target = 0.5 * (acc_range[0] + acc_range[1])
    interacting = tables.lam(tables.T) != 0 or extra is not None
    if interacting:
        smp.tune(tune_steps, target)
    pilot = np.empty((pilot_steps, n_chains))
    for i in range(pilot_steps):
        smp.step()
        pilot[i] = smp.cos_mean(smp.state.phi)
    acc = smp.state.acceptance
    if acc == 0:
        raise SamplerError("zero acceptance after tuning")
    capped = smp.state.step >= H_MAX * (1 - 1e-12)
    if interacting and (acc < acc_range[0] or (acc > acc_range[1] and not capped)):
        log.warning("acceptance %.3f outside %s after tuning", acc, tuple(acc_range))
    iat = integrated_autocorr(pilot)
    burn = int(np.ceil(10 * iat))
    for _ in range(max(0, burn - pilot_steps)):
        smp.step()
    thin = int(np.ceil(iat)) if thin is None else int(thin)
    out = np.empty((n_samples, n_chains) + smp.shape)
    trace = np.empty((n_samples * thin, n_chains))
    for i in range(n_samples * thin):
        smp.step()
        trace[i] = smp.cos_mean(smp.state.phi)
        if (i + 1) % thin == 0:
            out[(i + 1) // thin - 1] = smp.state.phi
    iat_full = integrated_autocorr(trace)
    return GibbsResult(out, trace, smp.state.acceptance, smp.state.step, iat_full, burn, thin, smp.state)


# -- observables for the law comparison ---------------------------------------------

def smeared(phi: np.ndarray, chi: np.ndarray, area: float) -> np.ndarray:
    """<chi, phi> = a^2 sum chi phi over the last two axes."""
    return area * np.sum(chi * phi, axis=(-2, -1))


def law_observables(chi: np.ndarray, rho: np.ndarray, beta: float, area: float) -> dict:
    """Smeared-field moments of order 1, 2, 4 and the mean cosine over supp rho."""
    supp = rho > 0
    return {
        "smeared_m1": lambda X: smeared(X, chi, area),
        "smeared_m2": lambda X: smeared(X, chi, area) ** 2,
        "smeared_m4": lambda X: smeared(X, chi, area) ** 4,
        "cos_supp": lambda X: np.mean(np.cos(beta * X[..., supp]), axis=-1),
    }


@dataclass
class LawSample:
    """Terminal-law sample: fields with optional log-weights or batch labels."""

    fields: np.ndarray
    method: str
    logw: Optional[np.ndarray] = None
    groups: Optional[np.ndarray] = None
    config: Optional[dict] = None

    def estimate(self, fn: Callable) -> EstimatorResult:
        return weighted_estimate(fn(self.fields), self.logw, self.groups, self.method)


def holm_adjust(p: np.ndarray) -> np.ndarray:
    """Holm step-down adjusted p-values."""
    p = np.asarray(p, dtype=float)
    order = np.argsort(p)
    n = len(p)
    adj = np.empty(n)
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, min(1.0, (n - rank) * p[i]))
        adj[i] = running
    return adj


def terminal_law_compare(a: LawSample, b: LawSample, observables: Mapping[str, Callable],
                         z_max: float = 3.0, systematic: Mapping[str, float] | None = None) -> dict:
    """Two-sample z-scores per observable with Holm adjustment across all of them.

    ``systematic[name]`` is a known model-error bound subtracted from
    |difference| before standardising (the tolerance widening).  The verdict
    passes iff every Holm-adjusted p-value exceeds the two-sided p of ``z_max``.
    """
    if a.config is not None and b.config is not None and a.config != b.config:
        raise ValueError("mismatched configurations")
    systematic = systematic or {}
    rows = []
    for name, fn in observables.items():
        ea, eb = a.estimate(fn), b.estimate(fn)
        se = float(np.hypot(ea.stderr, eb.stderr))
        diff = ea.mean - eb.mean
        excess = max(0.0, abs(diff) - systematic.get(name, 0.0))
        z = excess / se if se > 0 else (0.0 if excess == 0 else np.inf)
        rows.append({"observable": name, "mean_a": ea.mean, "se_a": ea.stderr, "ess_a": ea.ess,
                     "mean_b": eb.mean, "se_b": eb.stderr, "ess_b": eb.ess, "diff": diff,
                     "systematic": systematic.get(name, 0.0), "z": z})
    p = np.array([2 * stats.norm.sf(r["z"]) for r in rows])
    adj = holm_adjust(p)
    alpha = 2 * stats.norm.sf(z_max)
    for r, q in zip(rows, adj):
        r["p_holm"] = float(q)
    return {"methods": (a.method, b.method), "rows": rows,
            "pass": bool(np.all(adj > alpha)), "alpha": alpha}


# -- interacting estimators ------------------------------------------------------

def girsanov_sample(tables: ForceTables, M: int, seed: int, phi0=0.0, traj_offset: int = 0) -> LawSample:
    X, logw, _ = decoupled_forward(tables, M, seed, phi0, traj_offset)
    return LawSample(X, "girsanov", logw=logw)


def girsanov_estimate(tables: ForceTables, observable: Callable, M: int, seed: int = 0,
                      phi0=0.0, traj_offset: int = 0) -> EstimatorResult:
    """Self-normalised reweighted estimate of E[O(X_T)] under the Gibbs measure."""
    res = girsanov_sample(tables, M, seed, phi0, traj_offset).estimate(observable)
    if res.flagged:
        log.warning("effective sample size %.1f below 10%% of M = %d", res.ess, M)
    return res


def fbsde_terminal(bundle) -> LawSample:
    return LawSample(bundle.X[-1], "fbsde")


def gibbs_law_sample(res: GibbsResult, n_batches: int = 4) -> LawSample:
    return LawSample(res.flat(), "gibbs", groups=res.groups(n_batches))


def fbsde_evaluate(solver: FBSDESolver, bundle, M: int, seed: int, traj_offset: int = 0) -> LawSample:
    """Terminal law of the fitted feedback F + R on fresh noise.

    The training bundle's own terminal values reuse the regression sample,
    so the comparison draws new trajectories from a separate seed.
    """
    def fb(j, X):
        F, R = solver.feedback(bundle.models, j, X)
        return F + R
    out = integrate_forward(solver.tables, M, seed, traj_offset=traj_offset, feedback=fb, weight=False)
    return LawSample(out["X"], "fbsde")


def law_triangle(tables: ForceTables, chi: np.ndarray, seed: int = 0, n_gibbs: int = 500,
                 n_chains: int = 16, M_girsanov: int = 8000, M_fbsde: int = 1000,
                 M_eval: int = 4000, n_picard: int = 4, z_max: float = 3.0) -> dict:
    """FBSDE, Girsanov and Gibbs terminal laws compared pairwise.

    FBSDE comparisons are widened by half the gap between the fitted
    feedback and the remainder-free (R = 0) flow on common noise, an
    empirical envelope for the truncation error of the level-``ell_star``
    force.
    """
    obs = law_observables(chi, tables.rho, tables.beta, tables.kernels.area)
    gib = gibbs_law_sample(gibbs_oracle_sample(tables, n_gibbs, seed=seed + 1, n_chains=n_chains))
    gir = girsanov_sample(tables, M_girsanov, seed + 2)
    solver = FBSDESolver(tables)
    bundle = solver.solve(M_fbsde, seed + 3, n_max=n_picard)
    fbs = fbsde_evaluate(solver, bundle, M_eval, seed + 4)
    bare = LawSample(integrate_forward(tables, M_eval, seed + 4, weight=False)["X"], "fbsde")
    syst = {n: 0.5 * abs(fbs.estimate(f).mean - bare.estimate(f).mean) for n, f in obs.items()}
    pairs = {
        "gibbs~girsanov": terminal_law_compare(gib, gir, obs, z_max),
        "fbsde~gibbs": terminal_law_compare(fbs, gib, obs, z_max, systematic=syst),
        "fbsde~girsanov": terminal_law_compare(fbs, gir, obs, z_max, systematic=syst),
    }
    estimates = {m: {n: s.estimate(f) for n, f in obs.items()}
                 for m, s in (("gibbs", gib), ("girsanov", gir), ("fbsde", fbs))}
    return {"pairs": pairs, "estimates": estimates, "systematic": syst,
            "residuals": list(bundle.residuals), "pass": all(p["pass"] for p in pairs.values())}


# -- results CSV -----------------------------------------------------------------------

RESULT_FIELDS = ["run_id", "method", "observable", "mean", "stderr", "ess", "seed"]


def append_results_csv(path: str | os.PathLike, run_id: str, seed: int,
                       results: Mapping[str, EstimatorResult]) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        wr = csv.writer(fh)
        if new:
            wr.writerow(RESULT_FIELDS)
        for name, r in results.items():
            wr.writerow([run_id, r.method, name, f"{r.mean:.17g}", f"{r.stderr:.17g}",
                         f"{r.ess:.17g}", seed])

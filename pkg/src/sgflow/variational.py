"""Stochastic-control layer.

Costs are estimated with the forward integrator of :mod:`sgflow.fbsde`.  A
control enters in one of two forms:

* ``kind="q"``: u_s = -Q_s y(X) with y held on the Heun stencil, so the drift
  is -Gdot_s y and the energy 1/2 int <y, Gdot_s y> ds is integrated exactly
  per mode.  The optimal controls -Q(F + R) have this form.
* ``kind="direct"``: u piecewise constant on the scale grid; the drift is
  int Q_s ds u and the energy 1/2 sum dt ||u||^2.

Every estimator of an expected cost subtracts a fitted multiple of the Ito
sum sum_j <y_j, dW_j>, which has mean zero for adapted y.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

from .fbsde import FBSDESolver, Perturbation, integrate_forward, sample_w_paths
from .flow import CouplingParams, ForceTables
from .kernels import KernelMultipliers
from .sampling import (EstimatorResult, GibbsResult, LawSample, gibbs_oracle_sample,
                       girsanov_sample, weighted_estimate)

log = logging.getLogger(__name__)


# -- controls ---------------------------------------------------------------------

@dataclass
class ControlPath:
    """Control on the scale grid.

    ``fields[j]`` applies on [t_j, t_{j+1}); ``feedback`` (if set) overrides
    with a state-dependent field ``feedback(j, X)``.
    """

    knots: np.ndarray
    fields: Optional[np.ndarray] = None
    kind: str = "q"
    feedback: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in ("q", "direct"):
            raise ValueError("kind must be 'q' or 'direct'")
        if self.fields is None and self.feedback is None:
            raise ValueError("need fields or a feedback")
        if self.fields is not None and not np.all(np.isfinite(self.fields)):
            raise ValueError("control fields must be finite")

    def __call__(self, j: int, X: np.ndarray) -> np.ndarray:
        if self.feedback is not None:
            return self.feedback(j, X)
        jj = min(j, len(self.fields) - 1)
        return np.broadcast_to(self.fields[jj], X.shape)

    def energy(self, kernels) -> float:
        """Deterministic 1/2 int ||u||^2 (fields only)."""
        if self.fields is None:
            raise ValueError("energy of a feedback control is random; use a cost report")
        kn = self.knots
        area = kernels.area
        if self.kind == "direct":
            return float(sum(0.5 * (kn[j + 1] - kn[j]) * area * np.sum(self.fields[j] ** 2)
                             for j in range(len(kn) - 1)))
        # y is linear between knot values, as in the forward integrator
        K = len(self.fields)
        tot = 0.0
        for j in range(len(kn) - 1):
            f0 = np.fft.fft2(self.fields[min(j, K - 1)])
            f1 = np.fft.fft2(self.fields[min(j + 1, K - 1)])
            wts = kernels.interval_weights(kn[j], kn[j + 1])
            val = (wts["w00"] * np.abs(f0) ** 2 + wts["w01"] * (f0 * np.conj(f1)).real
                   + wts["w11"] * np.abs(f1) ** 2)
            tot += 0.5 * area * np.sum(val) / f0.size
        return float(tot)

    @staticmethod
    def zero(knots, shape, kind: str = "q") -> "ControlPath":
        return ControlPath(np.asarray(knots), np.zeros((len(knots) - 1,) + tuple(shape)), kind)

    def perturbed(self, nu: np.ndarray, eps: float) -> "ControlPath":
        """self + eps * nu with nu of shape (K, N, N)."""
        base = self

        def fb(j, X):
            return base(j, X) + eps * nu[min(j, len(nu) - 1)]
        return ControlPath(self.knots, None, self.kind, fb)


@dataclass
class CostReport:
    """Cost terms (means), Monte Carlo error of the total and per-sample totals."""

    terms: dict
    stderr: float
    M: int
    extra: dict = field(default_factory=dict)
    samples: np.ndarray = field(default=None, repr=False)

    @property
    def total(self) -> float:
        return float(sum(self.terms.values()))


def _cv_adjust(vals: np.ndarray, ito: np.ndarray) -> tuple[np.ndarray, float]:
    """vals - c * ito with the variance-minimising c."""
    v = np.asarray(vals, float)
    x = np.asarray(ito, float)
    vx = np.var(x)
    c = float(np.cov(v, x)[0, 1] / vx) if vx > 0 else 0.0
    return v - c * x, c


def paired_difference(a: "CostReport", b: "CostReport") -> tuple[float, float]:
    """(mean, stderr) of a - b from per-sample values on common random numbers."""
    d = a.samples - b.samples
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(len(d)))


def _terminal_cost(tables: ForceTables, g: Optional[Perturbation], X: np.ndarray,
                   with_V: bool = True) -> np.ndarray:
    out = np.zeros(X.shape[0])
    if with_V:
        out = out + tables.potential(tables.T, X, 1)
    if g is not None:
        out = out + g.value(X)
    return out


def _run(tables, u: ControlPath, M, seed, phi0, traj_offset, drift_F: bool, weight: bool,
         keep_path: bool = False):
    kn = tables.grid.knots
    if u.kind == "q":
        if drift_F:
            return integrate_forward(tables, M, seed, phi0, traj_offset, weight=weight,
                                     keep_path=keep_path, control_q=u)
        return integrate_forward(tables, M, seed, phi0, traj_offset, feedback=u, weight=weight,
                                 keep_path=keep_path)
    fb = (lambda j, X: tables.force(kn[j], X)) if drift_F else (lambda j, X: np.zeros_like(X))
    return integrate_forward(tables, M, seed, phi0, traj_offset, feedback=fb, control=lambda j, X: -u(j, X),
                             weight=weight, keep_path=keep_path)


def cost_J(u: ControlPath, g: Optional[Perturbation], tables: ForceTables, M: int, seed: int = 0,
           phi0=0.0, traj_offset: int = 0, with_V: bool = True) -> CostReport:
    """E[V^g(Z_T(u) + W_T) + 1/2 int ||u||^2] with V^g = V_T + g.

    Sign convention: for ``kind="q"`` the control is -Q y, for ``direct`` it
    is -u, so that y = DV gives the optimal feedback in both cases.
    """
    out = _run(tables, u, M, seed, phi0, traj_offset, drift_F=False, weight=False)
    term = _terminal_cost(tables, g, out["X"], with_V)
    if u.kind == "q":
        quad = 0.5 * out["quad_y"]
        ito = out["ito"]
    else:
        quad = out["quad_u"]
        # the Ito sum of -u against dW is the mean-zero partner for direct controls
        ito = out["ito_u"]
    adj, c = _cv_adjust(term + quad, ito)
    mean, se = float(adj.mean()), float(adj.std(ddof=1) / np.sqrt(M))
    qm = float(np.mean(quad))
    return CostReport({"terminal": mean - qm, "quadratic": qm}, se, M, {"cv_coef": c}, adj)


def cost_J_hat(r: ControlPath, g: Optional[Perturbation], tables: ForceTables, M: int, seed: int = 0,
               phi0=0.0, traj_offset: int = 0) -> CostReport:
    """Renormalised cost E[g(X_T) + V_0(X_0) + int H + 1/2 int ||r||^2].

    The state follows dX = -Gdot F dt + (control r) + dW.  The V_0 term is the
    deterministic truncated potential at scale 0 and is reported on its own.
    """
    out = _run(tables, r, M, seed, phi0, traj_offset, drift_F=True, weight=True)
    X = out["X"]
    gT = g.value(X) if g is not None else np.zeros(M)
    Hint = -out["logw"]
    if r.kind == "q":
        quad = 0.5 * out["quad_r"]
    else:
        quad = out["quad_u"]
    phi_init = np.zeros((1,) + X.shape[1:]) + phi0
    V0 = float(sum(tables.potential(0.0, phi_init, l)[0] for l in range(1, tables.params.ell_star + 1)))
    adj, c = _cv_adjust(gT + Hint + quad, out["ito"])
    mean, se = float(adj.mean()), float(adj.std(ddof=1) / np.sqrt(M))
    gm, hm, qm = float(gT.mean()), float(Hint.mean()), float(quad.mean())
    shift = mean - (gm + hm + qm)
    return CostReport({"g": gm + shift, "V0": V0, "H_integral": hm, "quadratic": qm}, se, M,
                      {"cv_coef": c}, adj + V0)


# -- free-energy routes ----------------------------------------------------------------

def log_mean_exp(x: np.ndarray, logw: np.ndarray | None = None, groups=None) -> tuple[float, float]:
    """-log E[e^{-x}] (weighted if logw given) with delta-method error."""
    x = np.asarray(x, float)
    shift = x.min()
    e = np.exp(-(x - shift))
    res = weighted_estimate(e, logw, groups, "free")
    return float(shift - np.log(res.mean)), float(res.stderr / res.mean)


def free_energy_mc(tables: ForceTables, g: Optional[Perturbation], M: int, seed: int,
                   with_V: bool = True) -> tuple[float, float]:
    """-log E exp(-V^g(W_T)) by plain free-field Monte Carlo."""
    W = sample_w_paths(tables.kernels, [0.0, tables.T], seed, np.arange(M))[-1]
    return log_mean_exp(_terminal_cost(tables, g, W, with_V))


def optimal_control(solver: FBSDESolver, bundle) -> ControlPath:
    """-Q (F + R) from a solved FBSDE, as a q-type feedback control."""
    def fb(j, X):
        F, R = solver.feedback(bundle.models, j, X)
        return F + R
    return ControlPath(solver.knots, None, "q", fb)


def _smooth_directions(tables: ForceTables, n: int, seed: int) -> list:
    """Unit-sup random fields, smoothed at scale 1 and held fixed across scales."""
    rng = np.random.default_rng([seed, 0x5A4D])
    kern = tables.kernels
    K = tables.grid.K
    out = []
    for _ in range(n):
        f = kern.convolve_q(rng.standard_normal(kern.spec.shape), 1.0)
        f /= np.abs(f).max()
        out.append(np.broadcast_to(f, (K,) + f.shape).copy())
    return out


def boue_dupuis_sandwich(tables: ForceTables, g: Optional[Perturbation] = None, M_fbsde: int = 600,
                         M_eval: int = 4000, M_direct: int = 40000, n_perturb: int = 20,
                         eps: float = 0.5, eps_hat: float = 0.1, seed: int = 0, n_picard: int = 4,
                         n_fits: int = 4, n_dirs: int = 3, n_se: float = 3.0) -> dict:
    """Variational checks around the FBSDE control.

    * ``gap``: J(u_bar) against -log E e^{-V^g(W_T)} from direct free-field draws.
    * ``perturb``: paired J(u_bar + eps nu) - J(u_bar) for random smooth nu on
      common random numbers; none may be below ``-n_se`` standard errors, and
      no perturbed cost may fall below the direct value by more than that.
    * ``jhat_perturb``: paired J_hat(r_bar + eps_hat nu) - J_hat(r_bar) over the
      same directions, none below ``-n_se`` standard errors.
    * ``jhat``: symmetric directional derivatives of the renormalised cost at
      r_bar = -Q R; each must vanish within ``n_se`` standard errors.  R comes
      from a finite regression, so its fitting error is part of the
      uncertainty: the derivative is averaged over ``n_fits`` independent
      solves and its error taken from their spread.
    """
    solver = FBSDESolver(tables, g)
    bundle = solver.solve(M_fbsde, seed + 1, n_max=n_picard)
    u = optimal_control(solver, bundle)
    J = cost_J(u, g, tables, M_eval, seed + 2)
    F, F_se = free_energy_mc(tables, g, M_direct, seed + 3)
    gap_se = float(np.hypot(J.stderr, F_se))
    dirs = _smooth_directions(tables, n_perturb, seed + 4)
    diffs, upper = [], []
    for nu in dirs:
        Jp = cost_J(u.perturbed(nu, eps), g, tables, M_eval, seed + 2)
        diffs.append(paired_difference(Jp, J))
        upper.append((Jp.total - F) / float(np.hypot(Jp.stderr, F_se)))
    def remainder_control(sv, bd):
        return ControlPath(sv.knots, None, "q", lambda j, X: sv.feedback(bd.models, j, X)[1])

    r_main = remainder_control(solver, bundle)
    Jh = cost_J_hat(r_main, g, tables, M_eval, seed + 5)
    hat_diffs = [paired_difference(cost_J_hat(r_main.perturbed(nu, eps_hat), g, tables, M_eval, seed + 5), Jh)
                 for nu in dirs]
    per_fit = np.empty((n_fits, n_dirs))
    for i in range(n_fits):
        if i == 0:
            sv, bd = solver, bundle
        else:
            sv = FBSDESolver(tables, g)
            bd = sv.solve(M_fbsde, seed + 100 + i, n_max=n_picard)
        r_bar = remainder_control(sv, bd)
        for k, nu in enumerate(dirs[:n_dirs]):
            up = cost_J_hat(r_bar.perturbed(nu, eps), g, tables, M_eval, seed + 200 + i)
            dn = cost_J_hat(r_bar.perturbed(nu, -eps), g, tables, M_eval, seed + 200 + i)
            per_fit[i, k] = paired_difference(up, dn)[0] / (2 * eps)
    derivs = [(float(c.mean()), float(c.std(ddof=1) / np.sqrt(n_fits))) for c in per_fit.T]
    gap_ok = abs(J.total - F) <= n_se * gap_se
    perturb_ok = all(m >= -n_se * se for m, se in diffs) and min(upper) >= -n_se
    jhat_ok = (all(abs(m) <= n_se * se for m, se in derivs)
               and all(m >= -n_se * se for m, se in hat_diffs))
    return {"J": (J.total, J.stderr), "direct": (F, F_se), "gap_z": abs(J.total - F) / gap_se,
            "perturb": diffs, "upper_z": upper, "jhat": (Jh.total, Jh.stderr),
            "jhat_perturb": hat_diffs, "jhat_derivs": derivs, "converged": bundle.converged,
            "gap_ok": bool(gap_ok), "perturb_ok": bool(perturb_ok), "jhat_ok": bool(jhat_ok),
            "pass": bool(gap_ok and perturb_ok and jhat_ok)}


def laplace_transform_W(g: Perturbation, tables: ForceTables, M_fbsde: int = 600, M_eval: int = 2000,
                        M_gir: int = 4000, gibbs: GibbsResult | None = None, n_gibbs: int = 1000,
                        seed: int = 0, n_picard: int = 4) -> dict:
    """-log nu(e^{-g}) by three routes.

    gibbs: direct average over oracle samples; control: difference of optimal
    costs with and without g; girsanov: reweighted average.
    """
    out = {}
    if gibbs is None:
        gibbs = gibbs_oracle_sample(tables, n_gibbs, seed=seed + 101)
    flat = gibbs.flat()
    out["gibbs"] = log_mean_exp(g.value(flat), groups=gibbs.groups())
    gs = girsanov_sample(tables, M_gir, seed + 202)
    out["girsanov"] = log_mean_exp(g.value(gs.fields), gs.logw)
    costs = []
    for gg in (g, None):
        solver = FBSDESolver(tables, gg)
        bundle = solver.solve(M_fbsde, seed + 303, n_max=n_picard)
        rep = cost_J(optimal_control(solver, bundle), gg, tables, M_eval, seed + 404)
        costs.append(rep)
    out["control"] = (costs[0].total - costs[1].total, float(np.hypot(costs[0].stderr, costs[1].stderr)))
    names = list(out)
    zs = {}
    for i in range(len(names)):
        for k in range(i + 1, len(names)):
            a, b = out[names[i]], out[names[k]]
            zs[(names[i], names[k])] = abs(a[0] - b[0]) / max(np.hypot(a[1], b[1]), 1e-300)
    return {"routes": out, "z": zs, "pass": bool(all(z < 3 for z in zs.values()))}


# -- rate function ----------------------------------------------------------------------

class RateFunctional:
    """I(phi) = lam a^2 sum rho (cos(beta phi) - 1) + 1/2 <phi, A phi>.

    ``A`` has multiplier (m^2 + k^2) by default, or the precision of G_T when
    ``T`` is finite so that I matches the cut-off Gaussian reference.
    """

    def __init__(self, kernels: KernelMultipliers, lam: float, beta2: float,
                 rho: np.ndarray | None = None, T: float = np.inf):
        self.kernels = kernels
        self.lam = float(lam)
        self.beta = float(np.sqrt(beta2))
        self.rho = np.ones(kernels.spec.shape) if rho is None else np.asarray(rho, float)
        self.T = T
        w = kernels.w
        self.A = w if np.isinf(T) else w * np.exp(w / T)
        self.root = np.sqrt(self.A)
        self.area = kernels.area

    def quad(self, phi):
        return 0.5 * self.area * np.sum(phi * self.kernels.apply(phi, self.A), axis=(-2, -1))

    def potential(self, phi):
        return self.lam * self.area * np.sum(self.rho * (np.cos(self.beta * phi) - 1), axis=(-2, -1))

    def potential_grad(self, phi):
        return -self.lam * self.beta * self.rho * np.sin(self.beta * phi)

    def value(self, phi):
        return self.potential(phi) + self.quad(phi)

    def grad(self, phi):
        """L^2 gradient (site derivative over a^2)."""
        return self.potential_grad(phi) + self.kernels.apply(phi, self.A)

    def precondition(self, g):
        return self.kernels.apply(g, 1.0 / self.A)

    # whitened coordinates y = A^{1/2} phi: the quadratic part is 1/2 |y|^2 exactly
    def to_phi(self, y):
        return self.kernels.apply(y, 1.0 / self.root)

    def to_y(self, phi):
        return self.kernels.apply(phi, self.root)


class LineSearchError(RuntimeError):
    pass


def _l2norm(f, area):
    return float(np.sqrt(area * np.sum(f * f)))


class _Whitened:
    """f + I as a function of y = A^{1/2} phi.

    Working in y keeps every quantity bounded even when A spans many decades
    (finite T), where forming A phi in floating point loses all precision.
    The returned gradient is the L^2 gradient in y, which equals the
    A^{-1}-preconditioned gradient in phi, measured in the energy norm.
    """

    def __init__(self, f, I):
        self.f, self.I = f, I

    def value(self, y):
        x = self.I.to_phi(y)
        v = 0.5 * self.I.area * float(np.sum(y * y)) + float(self.I.potential(x))
        if self.f is not None:
            v += float(self.f.value(x[None])[0])
        return v

    def grad(self, y):
        x = self.I.to_phi(y)
        g = self.I.potential_grad(x)
        if self.f is not None:
            g = g + self.f.grad(x[None])[0]
        return y + self.I.to_phi(g)


def _pgd(obj, grad, y0, area, tol, max_iter):
    y = y0.copy()
    fy = obj(y)
    step = 1.0
    for it in range(max_iter):
        g = grad(y)
        gn = _l2norm(g, area)
        if gn < tol:
            return y, fy, gn, it
        slope = -area * float(np.sum(g * g))
        step = min(1.0, 2 * step)
        while True:
            yn = y - step * g
            fn = obj(yn)
            if fn <= fy + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-14:
                # at round-off level: the polish phase takes over
                return y, fy, gn, it
        y, fy = yn, fn
    g = grad(y)
    return y, fy, _l2norm(g, area), max_iter


def minimize_rate_function(f: Optional[Perturbation], I: RateFunctional, n_random: int = 5,
                           seed: int = 0, tol: float = 1e-8, max_iter: int = 20000,
                           init_scale: float | None = None) -> tuple[np.ndarray, float, dict]:
    """Global minimiser of f + I by preconditioned gradient descent with multistart.

    The descent runs in y = A^{1/2} phi, which is gradient descent on phi
    preconditioned by A^{-1}, with Armijo backtracking.  Starts are zero
    plus ``n_random`` white fields in y.  An L-BFGS polish follows whenever
    the preconditioned gradient norm is still above ``tol``.
    """
    area = I.area
    shape = I.kernels.spec.shape
    W = _Whitened(f, I)
    rng = np.random.default_rng(seed)
    scale = init_scale if init_scale is not None else np.pi / I.beta
    starts = [np.zeros(shape)] + [scale * rng.standard_normal(shape) for _ in range(n_random)]
    best = None
    runs = []
    for y0 in starts:
        y, fy, gn, it = _pgd(W.value, W.grad, y0, area, tol, max_iter)
        if gn >= tol:
            y, fy, gn = _polish(W, y, tol)
        runs.append({"value": fy, "grad_norm": gn, "iterations": it})
        if best is None or fy < best[1]:
            best = (y, fy, gn)
    return I.to_phi(best[0]), best[1], {"runs": runs, "grad_norm": best[2]}


def _polish(W: _Whitened, y, tol):
    area = W.I.area

    def fun(v):
        yy = v.reshape(y.shape)
        return W.value(yy), area * W.grad(yy).ravel()
    res = optimize.minimize(fun, y.ravel(), jac=True, method="L-BFGS-B",
                            options={"gtol": 1e-14, "ftol": 1e-16, "maxiter": 5000, "maxcor": 30})
    yy = res.x.reshape(y.shape)
    return yy, W.value(yy), _l2norm(W.grad(yy), area)


def rate_gradient_check(I: RateFunctional, phi: np.ndarray, n_sites: int = 20, h: float = 1e-5,
                        seed: int = 0) -> float:
    """Max relative error of the analytic gradient against central differences."""
    rng = np.random.default_rng(seed)
    g = I.grad(phi) * I.area
    idx = rng.choice(phi.size, size=min(n_sites, phi.size), replace=False)
    worst = 0.0
    for i in idx:
        e = np.zeros(phi.size)
        e[i] = h
        e = e.reshape(phi.shape)
        fd = (I.value(phi + e) - I.value(phi - e)) / (2 * h)
        worst = max(worst, abs(fd - g.flat[i]) / max(abs(g.flat[i]), 1e-12))
    return worst


# -- semiclassical layer ----------------------------------------------------------------

def rescaled_params(params: CouplingParams, hbar: float) -> CouplingParams:
    """The hbar model on psi = phi / sqrt(hbar): coupling lam / hbar, beta^2 hbar."""
    return CouplingParams(params.lam / hbar, params.beta2 * hbar, params.ell_star)


def check_hbar_window(beta2: float, hbars: Sequence[float]) -> None:
    for h in hbars:
        if not (0 < h and beta2 * h < 4 * np.pi):
            raise ValueError(f"hbar = {h} outside the window beta^2 hbar < 4 pi")


class _ScaledFunctional:
    """f(sqrt(hbar) psi) / hbar and its L^2 gradient in psi, times a weight s."""

    def __init__(self, f: Perturbation, hbar: float, s: float):
        self.f, self.h, self.s = f, hbar, s
        self.r = np.sqrt(hbar)

    def __call__(self, psi):
        phi = self.r * psi
        return (self.s * self.f.value(phi) / self.h, self.s * self.f.grad(phi) * self.r / self.h)


def free_energy_ti(f: Perturbation, tables: ForceTables, hbar: float, n_nodes: int = 6,
                   n_samples: int = 400, n_chains: int = 16, seed: int = 0) -> tuple[float, float]:
    """-hbar log E_nu^hbar[e^{-f/hbar}] by thermodynamic integration in the strength s.

    ``tables`` must describe the rescaled model (see :func:`rescaled_params`).
    The integrand E_s[f] is sampled with the Gibbs oracle at each
    Gauss-Legendre node.
    """
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    s_nodes, s_w = 0.5 * (x + 1), 0.5 * w
    total, var = 0.0, 0.0
    r = np.sqrt(hbar)
    for i, (s, wt) in enumerate(zip(s_nodes, s_w)):
        res = gibbs_oracle_sample(tables, n_samples, seed=seed + 7919 * i, n_chains=n_chains,
                                  extra=_ScaledFunctional(f, hbar, s))
        est = weighted_estimate(f.value(r * res.flat()), groups=res.groups(), method="gibbs")
        total += wt * est.mean
        var += (wt * est.stderr) ** 2
    return total, float(np.sqrt(var))


def control_energy(tables: ForceTables, hbar: float, M_fbsde: int, M_eval: int, seed: int = 0,
                   n_picard: int = 4) -> tuple[float, float]:
    """E int ||u_bar^hbar||^2 for the rescaled model, in the units of phi."""
    solver = FBSDESolver(tables)
    bundle = solver.solve(M_fbsde, seed, n_max=n_picard)
    u = optimal_control(solver, bundle)
    out = integrate_forward(tables, M_eval, seed + 1, feedback=u, weight=False)
    e = hbar * out["quad_y"]
    return float(e.mean()), float(e.std(ddof=1) / np.sqrt(len(e)))


@dataclass
class SweepRow:
    hbar: float
    estimate: float
    stderr: float
    rate_function_inf: float
    control_energy: float
    control_energy_se: float


def semiclassical_sweep(hbars: Sequence[float], f: Perturbation, params: CouplingParams,
                        kernels: KernelMultipliers, rho: np.ndarray, T: float, seed: int = 0,
                        n_nodes: int = 6, n_samples: int = 400, M_fbsde: int = 300,
                        M_eval: int = 1000, with_control: bool = True) -> dict:
    """Per hbar: -hbar log int e^{-f/hbar} dnu^hbar, the limit inf(f + I) - inf I and
    the control energy."""
    check_hbar_window(params.beta2, hbars)
    I = RateFunctional(kernels, params.lam, params.beta2, rho, T)
    _, inf_fI, _ = minimize_rate_function(f, I, seed=seed)
    _, inf_I, _ = minimize_rate_function(None, I, seed=seed)
    limit = inf_fI - inf_I
    rows = []
    for k, h in enumerate(hbars):
        tb = ForceTables(rescaled_params(params, h), kernels, rho, T)
        est, se = free_energy_ti(f, tb, h, n_nodes, n_samples, seed=seed + 1000 * k)
        ce, ce_se = control_energy(tb, h, M_fbsde, M_eval, seed + 1000 * k + 17) if with_control else (np.nan, np.nan)
        rows.append(SweepRow(float(h), est, se, limit, ce, ce_se))
    return {"rows": rows, "limit": limit, "inf_fI": inf_fI, "inf_I": inf_I}


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["hbar", "estimate", "stderr", "rate_function_inf", "control_energy"])
        for r in rows:
            wr.writerow([f"{r.hbar:.17g}", f"{r.estimate:.17g}", f"{r.stderr:.17g}",
                         f"{r.rate_function_inf:.17g}", f"{r.control_energy:.17g}"])


# -- value-function gradient -------------------------------------------------------------

def value_gradient(tables: ForceTables, phi0: np.ndarray, M: int = 400, seed: int = 0,
                   n_picard: int = 4) -> np.ndarray:
    """grad V(phi0) = F_0(phi0) + R_0(phi0) from an FBSDE started at phi0."""
    solver = FBSDESolver(tables)
    bundle = solver.solve(M, seed, phi0=phi0, n_max=n_picard)
    return np.mean(bundle.R[0], axis=0) + tables.force(0.0, np.asarray(phi0)[None])[0]


def non_additivity_probe(tables: ForceTables, psi: np.ndarray, psi_t: np.ndarray, region: np.ndarray,
                         M: int = 400, seed: int = 0) -> float:
    """Mean over ``region`` of gradV(psi + psi_t) + gradV(psi - psi_t) - 2 gradV(psi)."""
    gp = value_gradient(tables, psi + psi_t, M, seed)
    gm = value_gradient(tables, psi - psi_t, M, seed)
    g0 = value_gradient(tables, psi, M, seed)
    return float(np.mean((gp + gm - 2 * g0)[region]))

"""Forward-backward SDE for the truncated flow.

    X_t = phi_0 + W_t - int_0^t Gdot_s (F_s(X_s) + R_s) ds
    R_t = E_t[ grad g(X_T) + int_t^T (H_s(X_s) - DF_s(X_s) Gdot_s R_s) ds ]

W is sampled exactly per Fourier mode.  The conditional expectation is a
per-site least-squares regression on trigonometric features of X_t.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .flow import CouplingParams, ForceTables, beta2_threshold
from .kernels import KernelMultipliers, ScalarKernels, ScaleGrid
from .lattice import LatticeSpec
from ._fft import apply_real, half, half_weights, irfft2, rfft2
from .rng import normals

log = logging.getLogger(__name__)


class FBSDEDivergence(RuntimeError):
    """Non-finite values during a solve."""


# -- perturbations g -------------------------------------------------------------

class Perturbation:
    """Functional g added to the potential; ``grad`` is the L^2 gradient."""

    def value(self, phi):
        raise NotImplementedError

    def grad(self, phi):
        raise NotImplementedError

    def support(self) -> Optional[np.ndarray]:
        return None


class LinearFunctional(Perturbation):
    """g(phi) = <psi, phi> = a^2 sum psi phi."""

    def __init__(self, psi: np.ndarray, area: float):
        self.psi = np.asarray(psi, dtype=float)
        self.area = area

    def value(self, phi):
        return self.area * np.sum(self.psi * phi, axis=(-2, -1))

    def grad(self, phi):
        return np.broadcast_to(self.psi, np.shape(phi)).copy()

    def support(self):
        return self.psi != 0


class SmearedTanh(Perturbation):
    """Bounded g(phi) = amp * tanh(<chi, phi> / scale)."""

    def __init__(self, chi: np.ndarray, area: float, amp: float = 1.0, scale: float = 1.0):
        self.chi = np.asarray(chi, dtype=float)
        self.area, self.amp, self.scale = area, amp, scale

    def _arg(self, phi):
        return self.area * np.sum(self.chi * phi, axis=(-2, -1)) / self.scale

    def value(self, phi):
        return self.amp * np.tanh(self._arg(phi))

    def grad(self, phi):
        c = self.amp / self.scale / np.cosh(self._arg(phi)) ** 2
        return np.asarray(c)[..., None, None] * self.chi

    def support(self):
        return self.chi != 0


# -- free field --------------------------------------------------------------------

def sample_w_increment(t1: float, t2: float, kernels, noise: np.ndarray) -> np.ndarray:
    """W_{t2} - W_{t1} from standard normal site noise of shape (..., N, N)."""
    if not t2 >= t1:
        raise ValueError("need t1 <= t2")
    if t1 == t2:
        return np.zeros_like(noise)
    var = kernels.increment(t1, t2)
    if isinstance(kernels, ScalarKernels):
        return np.sqrt(var) * noise
    return apply_real(noise, np.sqrt(var)) / kernels.spec.a


def field_shape(kernels) -> tuple:
    return (1, 1) if isinstance(kernels, ScalarKernels) else kernels.spec.shape


def sample_w_paths(kernels, knots, seed: int, trajs) -> np.ndarray:
    """Cumulative W at the knots, shape (K+1, M, N, N); stream (seed, traj, knot index)."""
    shape = field_shape(kernels)
    trajs = np.asarray(trajs)
    W = np.zeros((len(knots), len(trajs)) + shape)
    for j in range(1, len(knots)):
        z = normals(seed, trajs, j, shape)
        W[j] = W[j - 1] + sample_w_increment(knots[j - 1], knots[j], kernels, z)
    return W


# -- regression ----------------------------------------------------------------------

class FeatureMap:
    """Features at the regression sites.

    Pointwise {1, sin(j beta X), cos(j beta X)}_{j<=3}, their Gdot_t-smoothed
    versions (normalised to unit mass), the next-order flow force
    F^[l*+1]_t(X) when available, and grad g(X).
    """

    def __init__(self, tables: ForceTables, sites: np.ndarray, g: Optional[Perturbation] = None,
                 smoothed: bool = True, next_order: bool = True):
        self.tables = tables
        self.kernels = tables.kernels
        self.sites = sites
        self.g = g
        self.beta = tables.beta
        self.smoothed = smoothed and not isinstance(self.kernels, ScalarKernels)
        self.next_tables = None
        ls = tables.params.ell_star
        if next_order and ls < 3 and not isinstance(self.kernels, ScalarKernels):
            p = tables.params
            if p.beta2 < beta2_threshold(ls + 1):
                nxt = CouplingParams(p.lam, p.beta2, ls + 1)
                self.next_tables = ForceTables(nxt, self.kernels, tables.rho, tables.T, tables.grid,
                                               r_max=tables.r_max)
        self.names = ["1"] + [f"{f}{j}" for j in (1, 2, 3) for f in ("sin", "cos")]
        if self.smoothed:
            self.names += [f"S{f}{j}" for j in (1, 2, 3) for f in ("sin", "cos")]
        if self.next_tables is not None:
            self.names.append(f"F{ls + 1}")
        if g is not None:
            self.names.append("grad_g")

    @property
    def P(self) -> int:
        return len(self.names)

    def __call__(self, t: float, X: np.ndarray) -> np.ndarray:
        M = X.shape[0]
        cols = [np.ones((M, len(self.sites)))]
        s1, c1 = np.sin(self.beta * X), np.cos(self.beta * X)
        s2, c2 = 2 * s1 * c1, 2 * c1 * c1 - 1
        s3, c3 = s1 * (3 - 4 * s1 * s1), c1 * (4 * c1 * c1 - 3)
        trig = [s1, c1, s2, c2, s3, c3]
        cols += [f.reshape(M, -1)[:, self.sites] for f in trig]
        if self.smoothed:
            if t > 0:
                mult = self.kernels.gdot(t)
                sm = apply_real(np.stack(trig), mult / mult[0, 0])
                cols += [f.reshape(M, -1)[:, self.sites] for f in sm]
            else:
                cols += [np.zeros((M, len(self.sites)))] * len(trig)
        if self.next_tables is not None:
            fn = self.next_tables.force_apply(t, X, self.tables.params.ell_star + 1)
            cols.append(fn.reshape(M, -1)[:, self.sites])
        if self.g is not None:
            cols.append(self.g.grad(X).reshape(M, -1)[:, self.sites])
        out = np.empty((len(self.sites), M, len(cols)))
        for p, c in enumerate(cols):
            out[:, :, p] = c.T
        return out  # (S, M, P)


@dataclass
class RegressionModel:
    """Per-site coefficients on a :class:`FeatureMap`; ``coef`` has shape (S, P)."""

    t: float
    coef: np.ndarray
    r2_oos: float = float("nan")

    def predict(self, fmap: FeatureMap, X: np.ndarray) -> np.ndarray:
        Phi = fmap(self.t, X)
        vals = np.matmul(Phi, self.coef[:, :, None])[..., 0].T
        out = np.zeros((X.shape[0], X.shape[-2] * X.shape[-1]))
        out[:, fmap.sites] = vals
        return out.reshape(X.shape)


def _lstsq(Phi: np.ndarray, Y: np.ndarray, ridge: float) -> np.ndarray:
    # Phi (S, M, P), Y (S, M): per-site ridge-stabilised normal equations
    Pt = Phi.transpose(0, 2, 1)
    A = np.matmul(Pt, Phi)
    b = np.matmul(Pt, Y[:, :, None])[..., 0]
    scale = np.maximum(np.einsum("spp->sp", A), 1e-300)
    D = 1.0 / np.sqrt(scale)
    As = A * D[:, :, None] * D[:, None, :]
    As += ridge * np.eye(A.shape[-1])[None]
    sol = np.linalg.solve(As, (b * D)[..., None])[..., 0]
    return sol * D


def fit_regression(t: float, Phi: np.ndarray, Y: np.ndarray, ridge: float = 1e-10,
                   holdout: float = 0.2) -> RegressionModel:
    """Least-squares fit of targets Y (M, S) on features Phi (S, M, P)."""
    Yt = Y.T
    M = Phi.shape[1]
    r2 = float("nan")
    n_fit = int(round(M * (1 - holdout)))
    if 0 < holdout and 20 <= n_fit < M - 5:
        c = _lstsq(Phi[:, :n_fit], Yt[:, :n_fit], ridge)
        pred = np.matmul(Phi[:, n_fit:], c[:, :, None])[..., 0]
        res = Yt[:, n_fit:] - pred
        tot = Yt[:, n_fit:] - Yt[:, n_fit:].mean(axis=1, keepdims=True)
        denom = np.sum(tot**2)
        r2 = float(1 - np.sum(res**2) / denom) if denom > 0 else float("nan")
    coef = _lstsq(Phi, Yt, ridge)
    return RegressionModel(float(t), coef, r2)


# -- bundle and solver -----------------------------------------------------------------

@dataclass
class TrajectoryBundle:
    knots: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    R: np.ndarray
    trajs: np.ndarray
    seed: int
    residuals: list = field(default_factory=list)
    models: list = field(default_factory=list)
    converged: bool = False

    @property
    def X(self) -> np.ndarray:
        return self.Z + self.W

    @property
    def M(self) -> int:
        return self.W.shape[1]


@dataclass
class RegressionConfig:
    ridge: float = 1e-10
    holdout: float = 0.2
    smoothed: bool = True
    next_order: bool = True


def regression_sites(tables: ForceTables, g: Optional[Perturbation]) -> np.ndarray:
    supp = tables.rho > 0
    if g is not None and g.support() is not None:
        supp = supp | g.support()
    return np.flatnonzero(supp.ravel())


def _check_finite(arr, j, what):
    if not np.all(np.isfinite(arr)):
        raise FBSDEDivergence(f"non-finite {what} at scale index {j}; try a smaller coupling "
                              "or a finer scale grid")


class FBSDESolver:
    """Picard iteration for the FBSDE on a fixed set of W paths."""

    def __init__(self, tables: ForceTables, g: Optional[Perturbation] = None,
                 reg: RegressionConfig | None = None):
        self.tables = tables
        self.kernels = tables.kernels
        self.g = g
        self.reg = reg or RegressionConfig()
        self.knots = tables.grid.knots
        self.sites = regression_sites(tables, g)
        self.fmap = FeatureMap(tables, self.sites, g, self.reg.smoothed, self.reg.next_order)
        self._weights = [self.kernels.interval_weights(a, b) for a, b in tables.grid.intervals()]
        n = field_shape(self.kernels)[-1]
        self._half_weights = [{k: half(v, n) for k, v in w.items()} for w in self._weights]

    def init_bundle(self, M: int, seed: int, phi0=0.0, traj_offset: int = 0) -> TrajectoryBundle:
        trajs = np.arange(traj_offset, traj_offset + M)
        W = sample_w_paths(self.kernels, self.knots, seed, trajs)
        Z = np.zeros_like(W) + phi0
        return TrajectoryBundle(self.knots, W, Z, np.zeros_like(W), trajs, seed)

    def _drift_field(self, j, X):
        return self.tables.force(self.knots[j], X)

    def backward(self, bundle: TrajectoryBundle) -> list:
        """Regression pass; returns the fitted models (R updated in place)."""
        tb, kn = self.tables, self.knots
        K = len(kn) - 1
        X = bundle.X
        M = bundle.M
        gT = self.g.grad(X[K]) if self.g is not None else np.zeros_like(X[K])
        models: list = [None] * (K + 1)
        R_new = np.empty_like(bundle.R)
        R_new[K] = gT
        H = [tb.h_source(kn[j], X[j]) for j in range(K + 1)]

        def integrand(j, R):
            return H[j] - tb.df_gdot_apply(kn[j], X[j], R)

        h_next = integrand(K, R_new[K])
        acc = np.zeros_like(gT)
        for j in range(K - 1, -1, -1):
            h_j_old = integrand(j, bundle.R[j])
            acc = acc + 0.5 * (kn[j + 1] - kn[j]) * (h_next + h_j_old)
            Y = (gT + acc).reshape(M, -1)[:, self.sites]
            _check_finite(Y, j, "backward target")
            Phi = self.fmap(kn[j], X[j])
            mdl = fit_regression(kn[j], Phi, Y, self.reg.ridge, self.reg.holdout)
            models[j] = mdl
            R_new[j] = mdl.predict(self.fmap, X[j])
            h_next = integrand(j, R_new[j])
        bundle.R[...] = R_new
        bundle.models = models
        return models

    def feedback(self, models, j: int, X: np.ndarray) -> np.ndarray:
        """F_t(X) + R_t(X) with R from the regression models (exact grad g at T)."""
        K = len(self.knots) - 1
        F = self.tables.force(self.knots[j], X)
        if j == K:
            R = self.g.grad(X) if self.g is not None else np.zeros_like(X)
        else:
            R = models[j].predict(self.fmap, X)
        return F, R

    def forward(self, bundle: TrajectoryBundle, models, phi0=0.0) -> float:
        """Heun pass with the regression feedback; returns sup |Z_new - Z_old|."""
        kn = self.knots
        K = len(kn) - 1
        W = bundle.W
        n = W.shape[-1]
        Znew = np.empty_like(bundle.Z)
        Rnew = np.empty_like(bundle.R)
        X = W[0] + phi0
        Znew[0] = X - W[0]
        F, R = self.feedback(models, 0, X)
        Rnew[0] = R
        for j in range(K):
            wts = self._half_weights[j]
            Y = F + R
            dW = W[j + 1] - W[j]
            fY = rfft2(Y)
            Xp = X + dW - irfft2(fY * wts["I0"], n)
            Fp, Rp = self.feedback(models, j + 1, Xp)
            fYp = rfft2(Fp + Rp)
            X = X + dW - irfft2(fY * wts["wL"] + fYp * wts["wR"], n)
            _check_finite(X, j + 1, "forward state")
            F, R = self.feedback(models, j + 1, X)
            Znew[j + 1] = X - W[j + 1]
            Rnew[j + 1] = R
        res = float(np.max(np.abs(Znew - bundle.Z)))
        bundle.Z[...] = Znew
        bundle.R[...] = Rnew
        return res

    def picard_step(self, bundle: TrajectoryBundle, phi0=0.0) -> float:
        models = self.backward(bundle)
        res = self.forward(bundle, models, phi0)
        bundle.residuals.append(res)
        return res

    def solve(self, M: int, seed: int, phi0=0.0, n_max: int = 20, tol: float | None = None,
              traj_offset: int = 0) -> TrajectoryBundle:
        lam = abs(self.tables.params.lam)
        tol = 1e-6 * max(lam, 1e-12) if tol is None else tol
        bundle = self.init_bundle(M, seed, phi0, traj_offset)
        if lam == 0 and self.g is None:
            bundle.models = [RegressionModel(float(t), np.zeros((len(self.sites), self.fmap.P)))
                             for t in self.knots[:-1]] + [None]
            bundle.residuals.append(0.0)
            bundle.converged = True
            return bundle
        for it in range(n_max):
            res = self.picard_step(bundle, phi0)
            log.debug("picard %d residual %.3e", it, res)
            if res < tol:
                bundle.converged = True
                break
        if not bundle.converged:
            log.warning("FBSDE not converged after %d iterations (residual %.3e)", n_max,
                        bundle.residuals[-1])
        return bundle


def solve_fbsde(tables: ForceTables, M: int, seed: int, g: Optional[Perturbation] = None,
                phi0=0.0, n_max: int = 20, tol: float | None = None,
                reg: RegressionConfig | None = None) -> tuple[TrajectoryBundle, FBSDESolver]:
    solver = FBSDESolver(tables, g, reg)
    return solver.solve(M, seed, phi0, n_max, tol), solver


def picard_step(bundle: TrajectoryBundle, solver: FBSDESolver, phi0=0.0) -> float:
    return solver.picard_step(bundle, phi0)


# -- decoupled forward SDE with Girsanov weight -----------------------------------

def integrate_forward(tables: ForceTables, M: int, seed: int, phi0=0.0, traj_offset: int = 0,
                      feedback: Callable | None = None, control: Callable | None = None,
                      weight: bool = True, keep_path: bool = False, control_q: Callable | None = None):
    """Heun scheme for dX = -Gdot_t Y_t(X) dt + Q_t u_t dt + dW.

    ``feedback(j, X) -> Y`` defaults to the truncated force F; ``control(j, X) -> u``
    is held constant on [t_j, t_{j+1}).  ``control_q(j, X) -> y`` adds y to the
    feedback while its own energy int <y, Gdot y> is tracked as ``quad_r``.
    Returns a dict with the terminal state, the log-weight ``-int H_s(X_s) ds``
    (trapezoid), the Ito sums ``sum <Y_j, dW_j>`` and ``sum <u_j, dW_j>``, the
    quadratic costs and optionally the full path.
    """
    kern = tables.kernels
    kn = tables.grid.knots
    K = len(kn) - 1
    shape = field_shape(kern)
    area = kern.area
    trajs = np.arange(traj_offset, traj_offset + M)
    fb0 = feedback or (lambda j, X: tables.force(kn[j], X))
    if control_q is None:
        fb = fb0
    else:
        def fb(j, X):
            y = control_q(j, X)
            return fb0(j, X) + y, y
    X = np.zeros((M,) + shape) + phi0
    Y = fb(0, X)
    if control_q is not None:
        Y, y = Y
    logw = np.zeros(M)
    ito = np.zeros(M)
    ito_u = np.zeros(M)
    quad_r = np.zeros(M)
    quad_y = np.zeros(M)
    quad_u = np.zeros(M)
    cross = np.zeros(M)
    Hprev = tables.potential_remainder(kn[0], X) if weight else 0.0
    path = [X.copy()] if keep_path else None
    n = shape[-1]
    for j in range(K):
        wts = {k: half(v, n) for k, v in kern.interval_weights(kn[j], kn[j + 1]).items()}
        z = normals(seed, trajs, j + 1, shape)
        dW = sample_w_increment(kn[j], kn[j + 1], kern, z)
        fY = rfft2(Y)
        extra = 0.0
        if control is not None:
            u = control(j, X)
            qi = half(kern.q_integral(kn[j], kn[j + 1]), n)
            extra = irfft2(rfft2(u) * qi, n)
            quad_u += 0.5 * (kn[j + 1] - kn[j]) * area * np.sum(u * u, axis=(-2, -1))
            ito_u += area * np.sum(u * dW, axis=(-2, -1))
        Xp = X + dW + extra - irfft2(fY * wts["I0"], n)
        Yp = fb(j + 1, Xp)
        if control_q is not None:
            Yp = Yp[0]
        fYp = rfft2(Yp)
        Xn = X + dW + extra - irfft2(fY * wts["wL"] + fYp * wts["wR"], n)
        _check_finite(Xn, j + 1, "forward state")
        ito += area * np.sum(Y * dW, axis=(-2, -1))
        Yn = fb(j + 1, Xn)
        if control_q is not None:
            Yn, yn = Yn
            quad_r += _quad_form(rfft2(y), rfft2(yn), wts, area, n)
            y = yn
        fYn = rfft2(Yn)
        # int <Y, Gdot Y> ds with Y linear on the interval (exact per-mode weights)
        quad_y += _quad_form(fY, fYn, wts, area, n)
        if control is not None:
            qY = irfft2(0.5 * (fY + fYn) * qi, n)
            cross += area * np.sum(qY * u, axis=(-2, -1))
        X, Y = Xn, Yn
        if weight:
            Hn = tables.potential_remainder(kn[j + 1], X)
            logw -= 0.5 * (kn[j + 1] - kn[j]) * (Hprev + Hn)
            Hprev = Hn
        if keep_path:
            path.append(X.copy())
    out = {"X": X, "logw": logw, "ito": ito, "ito_u": ito_u, "quad_y": quad_y, "quad_u": quad_u,
           "quad_r": quad_r, "cross": cross}
    if keep_path:
        out["path"] = np.stack(path)
    return out


def _quad_form(f0, f1, wts, area, n):
    """int <Y_s, Gdot_s Y_s> ds for Y linear between half-spectrum endpoints f0, f1."""
    val = (wts["w00"] * np.abs(f0) ** 2 + wts["w01"] * (f0 * np.conj(f1)).real
           + wts["w11"] * np.abs(f1) ** 2)
    # Parseval: a^2 sum_x u(x) v(x) = a^2 / n^2 sum_k u_k conj(v_k)
    return area * np.sum(val * half_weights(n), axis=(-2, -1)) / (n * n)


def decoupled_forward(tables: ForceTables, M: int, seed: int, phi0=0.0, traj_offset: int = 0,
                      keep_path: bool = False):
    """Decoupled forward SDE (drift -Gdot F) and Girsanov log-weights -int H ds."""
    out = integrate_forward(tables, M, seed, phi0, traj_offset, keep_path=keep_path)
    return out["X"], out["logw"], out


# -- single-site model ---------------------------------------------------------------

class ZeroDimModel:
    """Single-site reduction with variance schedule g(t) = G_t^lat(0).

    Parameters
    ----------
    spec : LatticeSpec
        Lattice whose diagonal defines g(t).
    m : float
    params : CouplingParams
    T : float
    """

    def __init__(self, spec: LatticeSpec, m: float, params: CouplingParams, T: float,
                 grid: ScaleGrid | None = None, n_gh: int = 200):
        self.base = KernelMultipliers(spec, m)
        self.kernels = ScalarKernels(self.base)
        self.params = params
        self.T = float(T)
        self.tables = ForceTables(params, self.kernels, np.ones((1, 1)), T, grid)
        self.lam_T = self.tables.lam(self.T)
        self.gh_x, self.gh_w = np.polynomial.hermite.hermgauss(n_gh)

    def g(self, t: float) -> float:
        return self.base.diag(t)

    def gdot(self, t: float) -> float:
        return self.base.diag_dot(t)

    def V(self, phi):
        return self.lam_T * np.cos(self.params.beta * phi)

    def dV(self, phi):
        return -self.lam_T * self.params.beta * np.sin(self.params.beta * phi)

    def oracle(self, t: float, phi):
        return zero_dim_oracle(self, t, phi)

    def hjb_residual(self, t: float, phi: float, h_phi: float = 1e-2, h_t: float | None = None) -> float:
        """d_t v + gdot/2 v'' - gdot/2 (v')^2 by five-point differences of quadrature values."""
        h_t = h_t if h_t is not None else 1e-3 * max(t, 1e-2)

        def v(tt, pp):
            return self.oracle(tt, pp)[0]

        c = np.array([1, -8, 0, 8, -1]) / 12.0
        offs = np.array([-2, -1, 0, 1, 2])
        dt = sum(ci * v(t + o * h_t, phi) for ci, o in zip(c, offs)) / h_t
        vp = sum(ci * v(t, phi + o * h_phi) for ci, o in zip(c, offs)) / h_phi
        c2 = np.array([-1, 16, -30, 16, -1]) / 12.0
        vpp = sum(ci * v(t, phi + o * h_phi) for ci, o in zip(c2, offs)) / h_phi**2
        gd = self.gdot(t)
        return float(dt + 0.5 * gd * vpp - 0.5 * gd * vp * vp)


def zero_dim_oracle(model: ZeroDimModel, t: float, phi):
    """(v_t(phi), dv_t(phi)) by Gauss-Hermite quadrature over xi ~ N(0, g(T) - g(t))."""
    var = model.g(model.T) - model.g(t)
    if var < -1e-15:
        raise ValueError("need t <= T")
    phi = np.asarray(phi, dtype=float)
    sd = np.sqrt(max(var, 0.0))
    pts = phi[..., None] + np.sqrt(2.0) * sd * model.gh_x
    w = model.gh_w / np.sqrt(np.pi)
    Vp = model.V(pts)
    shift = Vp.min(axis=-1, keepdims=True)
    e = np.exp(-(Vp - shift))
    Z = np.sum(w * e, axis=-1)
    v = -np.log(Z) + shift[..., 0]
    dv = np.sum(w * e * model.dV(pts), axis=-1) / Z
    return v, dv

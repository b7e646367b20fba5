"""Truncated Polchinski flow for the cosine interaction.

The effective potential is expanded as V_t = sum_{l <= l*} V_t^[l] with

    V^[l](phi) = sum_sigma int rho(x_1)..rho(x_l) k^[l]_t(xi_1..xi_l) prod_j e^{i beta sigma_j phi(x_j)}

and forces F^[l] = D V^[l] (L^2 gradient, so ``(1/a^2) d/dphi(x)`` on the lattice).
Coefficients on a lattice:

* level 1: k1 = lambda_t / 2 with lambda_t = lambda exp(beta^2 G_t(0) / 2)
* level 2: k2_t(d; p) = (beta^2/8) int_t^T exp(-beta^2 [dG(0) + p dG(d)]) lambda_s^2 p Gdot_s(d) ds,
  which integrates to (lambda_t^2 / 8) (1 - exp(-p beta^2 (G_T - G_t)(d)))
* level 3: k3_t(xi) = (beta^2 lambda_t^3 / 48) int_t^T prod_{a<b} E_ab(s)
  sum_k D_ij(s) sigma_k (sigma_i Gdot_s(x_k - x_i) + sigma_j Gdot_s(x_k - x_j)) ds,
  with E_ab = exp(-beta^2 sigma_a sigma_b (G_s - G_t)(x_a - x_b)) and
  D_ij = 1 - exp(-sigma_i sigma_j beta^2 (G_T - G_s)(x_i - x_j)).

The constants follow from expanding 1/2 <DV, Gdot DV> with fully symmetric
coefficients; a single-site expansion of the flow gives the same numbers.
"""
from __future__ import annotations

import csv
import itertools
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .kernels import KernelMultipliers, ScalarKernels, ScaleGrid, make_scale_grid

EIGHT_PI = 8.0 * np.pi

# combinatorial prefactors of k2 and k3 (see module docstring)
C2 = 1.0 / 8.0     # times beta^2, potential level
C3 = 1.0 / 48.0    # times beta^2 lambda_t^3


def beta2_threshold(ell: int) -> float:
    """Largest beta^2 handled by truncation order ``ell``: ell/(ell+1) * 8 pi."""
    return ell / (ell + 1) * EIGHT_PI


@dataclass(frozen=True)
class CouplingParams:
    lam: float
    beta2: float
    ell_star: int = 1

    def __post_init__(self):
        if self.ell_star not in (1, 2, 3):
            raise ValueError("ell_star must be 1, 2 or 3")
        if self.beta2 < 0:
            raise ValueError("beta2 must be nonnegative")
        if self.beta2 >= beta2_threshold(self.ell_star):
            raise ValueError(f"beta2 = {self.beta2:.4g} not below the threshold "
                             f"{beta2_threshold(self.ell_star):.4g} for ell_star = {self.ell_star}")
        if not np.isfinite(self.lam):
            raise ValueError("lam must be finite")

    @property
    def beta(self) -> float:
        return float(np.sqrt(self.beta2))

    @property
    def delta(self) -> float:
        return 1.0 - self.beta2 / EIGHT_PI


@dataclass(frozen=True)
class ChargeVector:
    sigma: tuple

    def __post_init__(self):
        if any(s not in (-1, 1) for s in self.sigma):
            raise ValueError("charges must be +1 or -1")

    @property
    def q(self) -> int:
        return int(sum(self.sigma))

    @property
    def neutral(self) -> bool:
        return self.q == 0


def lambda_t(t: float, params: CouplingParams, kernels) -> float:
    """Wick-renormalised coupling lambda exp(beta^2 G_t^lat(0) / 2)."""
    return params.lam * float(np.exp(0.5 * params.beta2 * kernels.diag(t)))


def f1(t: float, sigma: int, params: CouplingParams, kernels) -> complex:
    """Force-level first-order coefficient -lambda_t beta / (2i)."""
    return -lambda_t(t, params, kernels) * params.beta / 2j


def _radius(kernels) -> np.ndarray:
    if isinstance(kernels, ScalarKernels):
        return np.zeros((1, 1))
    return kernels.spec.radius


def _shape(kernels) -> tuple:
    return (1, 1) if isinstance(kernels, ScalarKernels) else kernels.spec.shape


def pair_covariance(t: float, s: float, sigma: Sequence[int], sites: Sequence[Sequence[int]],
                    kernels, beta2: float) -> float:
    """W_{t,s}(xi) = -(beta^2/2) sum_{i,j} sigma_i sigma_j (G_s - G_t)(x_i - x_j).

    ``sites`` are integer lattice coordinates.
    """
    if s < t:
        raise ValueError("need t <= s")
    dG = kernels.G_field(s) - kernels.G_field(t)
    n = dG.shape[0]
    sites = np.asarray(sites, dtype=int)
    sig = np.asarray(sigma, dtype=float)
    dx = (sites[:, None, 0] - sites[None, :, 0]) % n
    dy = (sites[:, None, 1] - sites[None, :, 1]) % n
    return float(-0.5 * beta2 * np.sum(sig[:, None] * sig[None, :] * dG[dx, dy]))


def charged_bound_check(t: float, s: float, sigma: Sequence[int], sites, kernels, beta2: float):
    """Returns (W_{t,s}(xi), (beta^2/8pi)(G_t(0) - G_s(0))) for a charged configuration."""
    if ChargeVector(tuple(sigma)).neutral:
        raise ValueError("charged_bound_check needs a charged configuration (q != 0)")
    lhs = pair_covariance(t, s, sigma, sites, kernels, beta2)
    rhs = beta2 / EIGHT_PI * (kernels.diag(t) - kernels.diag(s))
    return lhs, rhs


def _gl_panels(edges: Sequence[float], n: int):
    """Gauss-Legendre nodes/weights on consecutive panels (log-spaced where possible)."""
    x, w = np.polynomial.legendre.leggauss(n)
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi <= lo:
            continue
        if lo > 0:
            a, b = np.log(lo), np.log(hi)
            u = 0.5 * (b - a) * x + 0.5 * (a + b)
            s = np.exp(u)
            nodes.append(s)
            weights.append(0.5 * (b - a) * w * s)
        else:
            nodes.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
            weights.append(0.5 * (hi - lo) * w)
    if not nodes:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(nodes), np.concatenate(weights)


class ForceTables:
    """Flow coefficients for a fixed (params, kernels, rho, T).

    Parameters
    ----------
    params : CouplingParams
    kernels : KernelMultipliers or ScalarKernels
    rho : ndarray
        Cutoff profile on the lattice (``(1, 1)`` ones for the single-site model).
    T : float
        UV cutoff scale; all coefficients beyond level 1 vanish at ``t = T``.
    grid : ScaleGrid, optional
        Knots on which level-2 kernels are tabulated (default ``make_scale_grid(T)``).
    r_max : float, optional
        Truncation radius of the level-2 and level-3 kernels, default ``min(L/3, 12/m)``.
    f2_method : {"closed", "quadrature"}
        Closed-form scale integral or explicit Gauss-Legendre quadrature.
    f3_nodes : int
        Gauss-Legendre nodes per scale panel for level-3 coefficients.
    """

    def __init__(self, params: CouplingParams, kernels, rho: np.ndarray, T: float,
                 grid: ScaleGrid | None = None, r_max: float | None = None,
                 f2_method: str = "closed", f3_nodes: int = 3, f3_cache: int = 6):
        if not isinstance(kernels, ScalarKernels):
            spec = kernels.spec
            if T > 0.25 / spec.a**2 * (1 + 1e-12):
                raise ValueError(f"T = {T} exceeds the resolved window 0.25/a^2 = {0.25 / spec.a**2}")
            if r_max is None:
                r_max = min(spec.L / 3.0, 12.0 / kernels.m)
        else:
            r_max = 0.0 if r_max is None else r_max
        self.params = params
        self.kernels = kernels
        self.rho = np.asarray(rho, dtype=float)
        self.T = float(T)
        self.grid = grid if grid is not None else make_scale_grid(T)
        if abs(self.grid.T - self.T) > 1e-12 * self.T:
            raise ValueError("scale grid must end at T")
        self.r_max = float(r_max)
        self.f2_method = f2_method
        self.f3_nodes = f3_nodes
        self.mask = _radius(kernels) <= self.r_max + 1e-12
        self.G_T = kernels.G_field(self.T)
        self._k2_cache: dict = {}
        self._k3_cache: OrderedDict = OrderedDict()
        self._k3_cache_size = f3_cache
        self._nbhd = None
        if params.ell_star >= 2:
            for t in self.grid.knots:
                for p in (1, -1):
                    self.k2_kernel(float(t), p)

    # -- level 1 ---------------------------------------------------------------
    @property
    def beta(self):
        return self.params.beta

    def lam(self, t: float) -> float:
        return lambda_t(t, self.params, self.kernels)

    # -- level 2 ---------------------------------------------------------------
    def k2_kernel(self, t: float, p: int) -> np.ndarray:
        """Translation-invariant level-2 kernel k2_t(d; p) on the lattice (rho excluded)."""
        key = (float(t), int(p))
        if key not in self._k2_cache:
            if len(self._k2_cache) > 4 * (self.grid.K + 1) + 64:
                self._k2_cache.clear()
            if self.f2_method == "closed":
                K = self._k2_closed(t, p)
            elif self.f2_method == "quadrature":
                K = self._k2_quadrature(t, p)
            else:
                raise ValueError(f"unknown f2_method {self.f2_method!r}")
            self._k2_cache[key] = K * self.mask
        return self._k2_cache[key]

    def _k2_closed(self, t, p):
        lt = self.lam(t)
        dG = self.G_T - self.kernels.G_field(t)
        return lt * lt / 8.0 * (-np.expm1(-p * self.params.beta2 * dG))

    def _k2_quadrature(self, t, p, n: int = 8):
        b2 = self.params.beta2
        edges = [t] + [float(k) for k in self.grid.knots if k > t * (1 + 1e-12)]
        # split each panel in two for accuracy
        fine = [edges[0]]
        for lo, hi in zip(edges[:-1], edges[1:]):
            fine += [0.5 * (lo + hi) if lo == 0 else float(np.sqrt(lo * hi)), hi]
        s_nodes, s_w = _gl_panels(fine, n)
        Gt = self.kernels.G_field(t)
        Gt0 = self.kernels.diag(t)
        out = np.zeros(_shape(self.kernels))
        for s, w in zip(s_nodes, s_w):
            dG = self.kernels.G_field(s) - Gt
            dG0 = self.kernels.diag(s) - Gt0
            ls = self.lam(s)
            out += w * np.exp(-b2 * (dG0 + p * dG)) * ls * ls * p * self.kernels.Gdot_field(s)
        return C2 * b2 * out

    def f2_radial(self, t: float, p: int):
        """(r, value) samples of k2_t along a lattice axis for r in {0, a, ..., r_max}."""
        K = self.k2_kernel(t, p)
        if isinstance(self.kernels, ScalarKernels):
            return np.zeros(1), K[0, :1].copy()
        a = self.kernels.spec.a
        nr = int(np.floor(self.r_max / a + 1e-9)) + 1
        return np.arange(nr) * a, K[0, :nr].copy()

    def f2_value(self, t: float, r: float, p: int) -> float:
        """Level-2 coefficient at radius r by linear interpolation of the radial table."""
        rr, vv = self.f2_radial(t, p)
        if r > self.r_max:
            return 0.0
        return float(np.interp(r, rr, vv))

    # -- level 3 ---------------------------------------------------------------
    def _neighbourhood(self):
        if self._nbhd is None:
            shape = _shape(self.kernels)
            n = shape[0]
            ii, jj = np.nonzero(self.mask)
            flat = np.arange(n * n).reshape(n, n)
            yi, yj = np.divmod(flat.ravel(), n)
            # shift[d, y] = flat index of (y - d) mod n
            shift = ((yi[None, :] - ii[:, None]) % n) * n + (yj[None, :] - jj[:, None]) % n
            self._nbhd = (ii * n + jj, shift)
        return self._nbhd

    def _s_nodes(self, t):
        edges = [t] + [float(k) for k in self.grid.knots if k > t * (1 + 1e-12)]
        return _gl_panels(edges, self.f3_nodes)

    def k3_kernels(self, t: float) -> dict:
        """Level-3 kernels K3[sigma][d2, d3] for sigma_1 = +1 (rho excluded).

        ``d2`` runs over the truncated neighbourhood, ``d3`` over all lattice
        displacements; entries with any pairwise distance beyond ``r_max`` are 0.
        """
        key = float(t)
        if key in self._k3_cache:
            self._k3_cache.move_to_end(key)
            return self._k3_cache[key]
        b2 = self.params.beta2
        dflat, shift = self._neighbourhood()
        shape = _shape(self.kernels)
        maskf = self.mask.ravel().astype(float)
        mask23 = maskf[shift]
        out = {sg: np.zeros(shift.shape) for sg in itertools.product((1, -1), repeat=2)}
        lt = self.lam(t)
        pref = C3 * b2 * lt**3
        Gt = self.kernels.G_field(t).ravel()
        GT = self.G_T.ravel()
        if pref != 0.0 and t < self.T:
            s_nodes, s_w = self._s_nodes(t)
            for s, w in zip(s_nodes, s_w):
                Gs = self.kernels.G_field(s).ravel()
                dts, dsT = Gs - Gt, GT - Gs
                gd = self.kernels.Gdot_field(s).ravel()
                g2, g3, g23 = gd[dflat][:, None], gd[None, :], gd[shift]
                for (s2, s3), acc in out.items():
                    e12 = np.exp(-b2 * s2 * dts[dflat])[:, None]
                    e13 = np.exp(-b2 * s3 * dts)[None, :]
                    e23 = np.exp(-b2 * s2 * s3 * dts[shift])
                    d12 = -np.expm1(-s2 * b2 * dsT[dflat])[:, None]
                    d13 = -np.expm1(-s3 * b2 * dsT)[None, :]
                    d23 = -np.expm1(-s2 * s3 * b2 * dsT[shift])
                    bracket = (d23 * (s2 * g2 + s3 * g3)
                               + d13 * s2 * (g2 + s3 * g23)
                               + d12 * s3 * (g3 + s2 * g23))
                    acc += w * e12 * e13 * e23 * bracket
        for sg in out:
            out[sg] *= pref * maskf[None, :] * mask23
        ffts = {sg: np.fft.fft2(v.reshape((-1,) + shape)) for sg, v in out.items()}
        entry = {"K3": out, "fft": ffts}
        self._k3_cache[key] = entry
        if len(self._k3_cache) > self._k3_cache_size:
            self._k3_cache.popitem(last=False)
        return entry

    def f3_evaluate(self, t: float, xis) -> float:
        """Level-3 coefficient rho(x1)rho(x2)rho(x3) k3_t(xi_1, xi_2, xi_3).

        ``xis`` is a sequence of three (sigma, (i, j)) pairs with integer sites.
        """
        sig = [int(s) for s, _ in xis]
        pts = np.asarray([p for _, p in xis], dtype=int)
        b2 = self.params.beta2
        shape = _shape(self.kernels)
        n = shape[0]
        if any(s not in (-1, 1) for s in sig):
            raise ValueError("charges must be +1 or -1")
        rad = _radius(self.kernels)

        def disp(i, j):
            d = (pts[i] - pts[j]) % n
            return int(d[0]), int(d[1])

        pairs = {(i, j): disp(i, j) for i in range(3) for j in range(3) if i != j}
        if any(rad[d] > self.r_max + 1e-12 for d in pairs.values()):
            return 0.0
        rho = float(np.prod([self.rho[tuple(p % n)] for p in pts]))
        lt = self.lam(t)
        if lt == 0 or t >= self.T or rho == 0:
            return 0.0
        Gt = self.kernels.G_field(t)
        total = 0.0
        for s, w in zip(*self._s_nodes(t)):
            Gs = self.kernels.G_field(s)
            gd = self.kernels.Gdot_field(s)
            dts = Gs - Gt
            dsT = self.G_T - Gs
            e = 1.0
            for i, j in ((0, 1), (0, 2), (1, 2)):
                e *= np.exp(-b2 * sig[i] * sig[j] * dts[pairs[i, j]])
            br = 0.0
            for k in range(3):
                i, j = [x for x in range(3) if x != k]
                d = -np.expm1(-sig[i] * sig[j] * b2 * dsT[pairs[i, j]])
                br += d * sig[k] * (sig[i] * gd[pairs[k, i]] + sig[j] * gd[pairs[k, j]])
            total += w * e * br
        return float(C3 * b2 * lt**3 * total * rho)

    def _level3_sums(self, t, phi, v=None):
        """S_sigma(y) for sigma_1 = +1 and optionally its derivative along v."""
        entry = self.k3_kernels(t)
        dflat, shift = self._neighbourhood()
        shape = _shape(self.kernels)
        area = self.kernels.area
        psi = {1: self.rho * np.exp(1j * self.beta * phi)}
        psi[-1] = np.conj(psi[1])
        fpsi = {s: np.fft.fft2(psi[s]) for s in (1, -1)}
        gather = {s: psi[s].ravel()[shift] for s in (1, -1)}
        S, Sv = {}, {}
        if v is not None:
            vpsi = {s: 1j * self.beta * s * v * psi[s] for s in (1, -1)}
            fvpsi = {s: np.fft.fft2(vpsi[s]) for s in (1, -1)}
            vgather = {s: vpsi[s].ravel()[shift] for s in (1, -1)}
        for (s2, s3), fk in entry["fft"].items():
            conv = np.fft.ifft2(fk * fpsi[s3]).reshape(len(dflat), -1)
            S[(s2, s3)] = area * area * np.sum(gather[s2] * conv, axis=0).reshape(shape)
            if v is not None:
                convv = np.fft.ifft2(fk * fvpsi[s3]).reshape(len(dflat), -1)
                Sv[(s2, s3)] = area * area * (np.sum(vgather[s2] * conv, axis=0)
                                              + np.sum(gather[s2] * convv, axis=0)).reshape(shape)
        return psi[1], S, Sv

    # -- assembled fields ------------------------------------------------------
    def _check_level(self, level):
        if level < 1 or level > self.params.ell_star:
            raise ValueError(f"level {level} not available with ell_star = {self.params.ell_star}")

    def _l2_parts(self, t, phi):
        psi = self.rho * np.exp(1j * self.beta * phi)
        Kp, Km = self.k2_kernel(t, 1), self.k2_kernel(t, -1)
        S = self.kernels.conv_kernel(psi, Kp) + self.kernels.conv_kernel(np.conj(psi), Km)
        return psi, Kp, Km, S

    def potential(self, t: float, phi: np.ndarray, level: int) -> np.ndarray:
        """V^[level]_t(phi) up to the additive constant of the expansion (per leading index)."""
        self._check_level(level)
        area = self.kernels.area
        b = self.beta
        if level == 1:
            return self.lam(t) * area * np.sum(self.rho * np.cos(b * phi), axis=(-2, -1))
        if level == 2:
            psi, Kp, Km, S = self._l2_parts(t, phi)
            return 2 * area * np.sum((psi * S).real, axis=(-2, -1))
        return self._batched(lambda p: 2 * area * sum(np.sum(psi1 * s).real
                                                      for psi1, SS, _ in [self._level3_sums(t, p)]
                                                      for s in SS.values()), phi, scalar=True)

    def force_apply(self, t: float, phi: np.ndarray, level: int) -> np.ndarray:
        """F^[level]_t(phi) = D V^[level]_t(phi)."""
        self._check_level(level)
        b = self.beta
        if level == 1:
            return -self.lam(t) * b * self.rho * np.sin(b * phi)
        if level == 2:
            psi, _, _, S = self._l2_parts(t, phi)
            return -4 * b * (psi * S).imag
        return self._batched(lambda p: self._f3_single(t, p), phi)

    def _f3_single(self, t, phi):
        psi1, S, _ = self._level3_sums(t, phi)
        return -6 * self.beta * sum(psi1 * s for s in S.values()).imag

    def force(self, t: float, phi: np.ndarray, levels: Iterable[int] | None = None) -> np.ndarray:
        """Truncated force sum_{l <= l*} F^[l]_t(phi)."""
        levels = range(1, self.params.ell_star + 1) if levels is None else levels
        return sum(self.force_apply(t, phi, l) for l in levels)

    def q_force_apply(self, t: float, phi: np.ndarray, level: int) -> np.ndarray:
        return self.kernels.convolve_q(self.force_apply(t, phi, level), t)

    def hessian_apply(self, t: float, phi: np.ndarray, v: np.ndarray, level: int) -> np.ndarray:
        """DF^[level]_t(phi) v (analytic derivative of the exponential ansatz)."""
        self._check_level(level)
        b = self.beta
        if level == 1:
            return -self.lam(t) * b * b * self.rho * np.cos(b * phi) * v
        if level == 2:
            psi, Kp, Km, S = self._l2_parts(t, phi)
            vp = v * psi
            inner = (self.kernels.conv_kernel(vp, Kp) - self.kernels.conv_kernel(np.conj(vp), Km))
            return -4 * b * b * (v * psi * S + psi * inner).real
        phi, v = np.broadcast_arrays(phi, v)
        return self._batched2(lambda p, w: self._h3_single(t, p, w), phi, v)

    def _h3_single(self, t, phi, v):
        psi1, S, Sv = self._level3_sums(t, phi, v)
        b = self.beta
        z = sum(1j * b * v * psi1 * S[k] + psi1 * Sv[k] for k in S)
        return -6 * b * z.imag

    def df_gdot_apply(self, t: float, phi: np.ndarray, R: np.ndarray) -> np.ndarray:
        """DF_t(phi) (Gdot_t R) summed over the active levels."""
        v = self.kernels.convolve_gdot(R, t)
        return sum(self.hessian_apply(t, phi, v, l) for l in range(1, self.params.ell_star + 1))

    def _orders(self):
        ls = self.params.ell_star
        return [(a, b) for a in range(1, ls + 1) for b in range(1, ls + 1) if a + b > ls]

    def h_source(self, t: float, phi: np.ndarray, forces: dict | None = None) -> np.ndarray:
        """H_t(phi) = -sum_{l'+l'' > l*} DF^[l'] Gdot_t F^[l''] (ordered pairs)."""
        ls = self.params.ell_star
        if forces is None:
            forces = {l: self.force_apply(t, phi, l) for l in range(1, ls + 1)}
        out = np.zeros(np.shape(phi))
        for a in range(1, ls + 1):
            tail = [forces[b] for b in range(1, ls + 1) if a + b > ls]
            if not tail:
                continue
            v = self.kernels.convolve_gdot(sum(tail), t)
            out -= self.hessian_apply(t, phi, v, a)
        return out

    def potential_remainder(self, t: float, phi: np.ndarray, forces: dict | None = None) -> np.ndarray:
        """Potential-level defect -1/2 sum_{l'+l'' > l*} <F^[l'], Gdot_t F^[l'']>."""
        ls = self.params.ell_star
        if forces is None:
            forces = {l: self.force_apply(t, phi, l) for l in range(1, ls + 1)}
        area = self.kernels.area
        total = 0.0
        for a in range(1, ls + 1):
            tail = [forces[b] for b in range(1, ls + 1) if a + b > ls]
            if tail:
                total = total + np.sum(forces[a] * self.kernels.convolve_gdot(sum(tail), t), axis=(-2, -1))
        return -0.5 * area * total

    # -- helpers -------------------------------------------------------------
    @staticmethod
    def _batched(fn, phi, scalar=False):
        if phi.ndim == 2:
            return fn(phi)
        flat = phi.reshape((-1,) + phi.shape[-2:])
        res = np.array([fn(p) for p in flat])
        return res.reshape(phi.shape[:-2] if scalar else phi.shape)

    @staticmethod
    def _batched2(fn, phi, v):
        if phi.ndim == 2:
            return fn(phi, v)
        fp = phi.reshape((-1,) + phi.shape[-2:])
        fv = v.reshape((-1,) + v.shape[-2:])
        return np.array([fn(p, w) for p, w in zip(fp, fv)]).reshape(phi.shape)

    # -- dumps -----------------------------------------------------------------
    def dump_f2_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "r", "sector", "value"])
            if self.params.ell_star < 2:
                return
            for t in self.grid.knots:
                for p, name in ((1, "charged"), (-1, "neutral")):
                    rr, vv = self.f2_radial(float(t), p)
                    for r, v in zip(rr, vv):
                        wr.writerow([f"{t:.17g}", f"{r:.17g}", name, f"{v:.17g}"])

    def dump_lambda_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "lambda_t"])
            for t in self.grid.knots:
                wr.writerow([f"{t:.17g}", f"{self.lam(float(t)):.17g}"])


def diagnostic_norm(tables: ForceTables, t: float, p: int = -1, alpha: float = 0.5,
                    c: float = 0.2, floor: float = 1e-12) -> float:
    """a^2 sum_d |k2_t(d; p)| t^alpha |d|^{2 alpha} exp(c t |d|^2), the weighted kernel norm.

    Entries below ``floor * max|k2|`` are FFT round-off; the growing weight would
    otherwise amplify them without bound, so they are dropped.
    """
    K = np.abs(tables.k2_kernel(t, p))
    keep = K >= floor * K.max() if K.max() > 0 else K > 0
    r = _radius(tables.kernels)[keep]
    w = t**alpha * r ** (2 * alpha) * np.exp(c * t * r * r)
    return float(tables.kernels.area * np.sum(K[keep] * w))

"""Diagnostics on field ensembles.

All functions take sample arrays of shape ``(n, N, N)`` (or a single field
``(N, N)`` where noted) and a :class:`~sgflow.kernels.KernelMultipliers`
describing the lattice and mass.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from ._fft import apply_real
from .kernels import KernelMultipliers
from .lattice import LatticeSpec, lp_block_multipliers


# -- Wick-ordered trigonometric fields ---------------------------------------------

@dataclass
class WickField:
    values: np.ndarray
    kind: str
    factor: float


def wick_factor(kernels: KernelMultipliers, t: float, beta: float) -> float:
    return float(np.exp(0.5 * beta * beta * kernels.diag(t)))


def wick_trig(phi: np.ndarray, t: float, kind: str, kernels: KernelMultipliers, beta: float) -> WickField:
    """e^{beta^2 G_t(0) / 2} cos(beta phi) or the sine analogue."""
    if kind not in ("cos", "sin"):
        raise ValueError("kind must be 'cos' or 'sin'")
    c = wick_factor(kernels, t, beta)
    trig = np.cos if kind == "cos" else np.sin
    return WickField(c * trig(beta * phi), kind, c)


def qv_block_variances(samples: np.ndarray, kernels: KernelMultipliers, t: float, beta: float) -> dict:
    """Variance of each Littlewood-Paley block of the Wick cosine at a point.

    Translation invariance of the free field lets every site count as a
    sample of the single-point variance.
    """
    spec = kernels.spec
    w = wick_trig(samples, t, "cos", kernels, beta).values
    fh = np.fft.fft2(w)
    out = {}
    for i, mult in lp_block_multipliers(spec):
        blk = np.fft.ifft2(fh * mult).real
        out[i] = float(np.mean(blk**2) - np.mean(blk) ** 2)
    return out


def qv_exponent(variances: dict, blocks: Sequence[int]) -> tuple[float, float]:
    """Fit log2 Var(Delta_i) = c + e * 2i; returns (e, standard error)."""
    i = np.asarray(blocks, dtype=float)
    y = np.log2([variances[int(k)] for k in blocks])
    fit = stats.linregress(2 * i, y)
    return float(fit.slope), float(fit.stderr)


# -- correlation decay -----------------------------------------------------------------

def smear(phi: np.ndarray, chi: np.ndarray, kernels: KernelMultipliers) -> np.ndarray:
    """(chi * phi)(x) = a^2 sum_y chi(x - y) phi(y), chi given as a kernel centred at site 0."""
    return kernels.conv_kernel(phi, chi)


def centred_bump(spec: LatticeSpec, radius: float, edge: float) -> np.ndarray:
    """Raised-cosine bump centred on site 0 (the convolution origin)."""
    r = spec.radius
    u = np.clip((r - radius) / edge, 0.0, 1.0)
    v = 0.5 * (1 + np.cos(np.pi * u))
    v[u >= 1] = 0.0
    return v


def clipped_observable(phi, chi, kernels, scale: float = 1.0):
    """tanh(smeared field / scale), bounded and Lipschitz."""
    return np.tanh(smear(phi, chi, kernels) / scale)


def _pair_mask(region: np.ndarray, d: int, axis: int) -> np.ndarray:
    return region & np.roll(region, -d, axis=axis)


def pair_covariances(O: np.ndarray, separations: Sequence[int], region: np.ndarray | None = None,
                     groups: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Cov(O(x), O(x + d e)) averaged over pairs in ``region`` and both axes.

    ``separations`` are in lattice units.  Standard errors come from the spread
    of per-sample pair averages (batch means over ``groups`` if given).
    """
    n = O.shape[0]
    region = np.ones(O.shape[-2:], bool) if region is None else region
    Oc = O - O.mean(axis=0)
    covs, ses = [], []
    for d in separations:
        per = np.zeros(n)
        for ax in (-2, -1):
            mk = _pair_mask(region, int(d), ax)
            if not mk.any():
                raise ValueError(f"no pairs at separation {d} inside the region")
            prod = Oc * np.roll(Oc, -int(d), axis=ax)
            per += 0.5 * prod[:, mk].mean(axis=1)
        per *= n / (n - 1)
        covs.append(per.mean())
        if groups is None:
            ses.append(per.std(ddof=1) / np.sqrt(n))
        else:
            labels = np.unique(groups)
            gm = np.array([per[groups == k].mean() for k in labels])
            ses.append(gm.std(ddof=1) / np.sqrt(len(labels)))
    return np.array(covs), np.array(ses)


@dataclass
class DecayFit:
    separations: np.ndarray
    covariances: np.ndarray
    stderrs: np.ndarray
    rate: float
    rate_ci: tuple
    resolved: bool

    def to_json(self) -> str:
        return json.dumps({
            "separations": self.separations.tolist(), "covariances": self.covariances.tolist(),
            "stderrs": self.stderrs.tolist(), "rate": self.rate, "rate_ci": list(self.rate_ci),
            "resolved": self.resolved}, indent=2)


def fit_decay(dist: np.ndarray, cov: np.ndarray, se: np.ndarray | None = None,
              min_snr: float = 2.0) -> DecayFit:
    """Weighted least squares of log cov against distance.

    Points with cov < min_snr * se are dropped.  With fewer than two usable
    points the fit is unresolved and the rate is the floor implied by the
    largest resolved separation (or nan).
    """
    dist = np.asarray(dist, float)
    cov = np.asarray(cov, float)
    se = np.zeros_like(cov) if se is None else np.asarray(se, float)
    ok = cov > min_snr * se
    ok &= cov > 0
    if ok.sum() < 2:
        return DecayFit(dist, cov, se, float("nan"), (float("nan"), float("nan")), False)
    x, y = dist[ok], np.log(cov[ok])
    sig = np.where(se[ok] > 0, se[ok] / cov[ok], 1.0)
    w = 1.0 / sig**2
    A = np.stack([np.ones_like(x), x], axis=1)
    cov_beta = np.linalg.inv(A.T @ (A * w[:, None]))
    beta = cov_beta @ (A.T @ (w * y))
    rate = -float(beta[1])
    if np.all(se[ok] > 0) and ok.sum() > 2:
        resid = y - A @ beta
        s2 = max(1.0, float(np.sum(w * resid**2)) / (ok.sum() - 2))
        err = float(np.sqrt(cov_beta[1, 1] * s2))
    elif np.all(se[ok] > 0):
        err = float(np.sqrt(cov_beta[1, 1]))
    else:
        err = 0.0
    return DecayFit(dist, cov, se, rate, (rate - 1.96 * err, rate + 1.96 * err), True)


def correlation_decay(samples: np.ndarray, chi: np.ndarray, separations: Sequence[int],
                      kernels: KernelMultipliers, scale: float = 1.0, region: np.ndarray | None = None,
                      groups: np.ndarray | None = None, chunk: int = 512) -> DecayFit:
    """Fitted exponential decay rate of Cov(O(x1), O(x2)) in |x1 - x2|.

    ``O`` is the tanh-clipped smeared field, ``separations`` are lattice
    offsets; a resolution floor is reported when nothing is significant.
    """
    m = kernels.m
    a = kernels.spec.a
    d = np.asarray(separations) * a
    if d.min() < 2.0 / m - 1e-12 or d.max() > kernels.spec.L / 3 + 1e-12:
        raise ValueError("separations must lie in [2/m, L/3]")
    O = np.concatenate([clipped_observable(samples[i:i + chunk], chi, kernels, scale)
                        for i in range(0, len(samples), chunk)])
    cov, se = pair_covariances(O, separations, region, groups)
    return fit_decay(d, cov, se)


def gaussian_tanh_covariance(var: float, cov: np.ndarray, scale: float = 1.0, n: int = 60) -> np.ndarray:
    """Cov(tanh(s1/c), tanh(s2/c)) for centred jointly Gaussian (s1, s2) with equal variance."""
    x, w = np.polynomial.hermite_e.hermegauss(n)
    w = w / w.sum()
    sd = np.sqrt(var)
    out = []
    for c in np.atleast_1d(cov):
        r = np.clip(c / var, -1, 1)
        s1 = sd * x[:, None]
        s2 = sd * (r * x[:, None] + np.sqrt(1 - r * r) * x[None, :])
        out.append(np.sum(w[:, None] * w[None, :] * np.tanh(s1 / scale) * np.tanh(s2 / scale)))
    return np.array(out)


def free_decay_benchmark(kernels: KernelMultipliers, chi: np.ndarray, separations: Sequence[int],
                         t: float = np.inf, scale: float = 1.0) -> DecayFit:
    """Exact free-field covariance of the clipped observables and its fitted rate."""
    spec = kernels.spec
    fchi = np.fft.fft2(chi)
    C = np.fft.ifft2(spec.area * np.abs(fchi) ** 2 * kernels.g(t)).real
    sep = np.asarray(separations, int)
    c_s = np.array([0.5 * (C[s, 0] + C[0, s]) for s in sep])
    cov = gaussian_tanh_covariance(C[0, 0], c_s, scale)
    return fit_decay(sep * spec.a, cov)


# -- singularity statistic ---------------------------------------------------------------

def spectral_profile(u: np.ndarray) -> np.ndarray:
    """Flat for u <= 1/2, raised-cosine to zero at u = 1; support in u < 1."""
    v = np.clip(2 * u - 1, 0.0, 1.0)
    return np.where(u < 1, 0.5 * (1 + np.cos(np.pi * v)), 0.0)


def default_gamma(delta: float) -> float:
    if abs(delta - 0.5) < 1e-12:
        return 0.75
    if delta < 0.5:
        lo = 2 * max(0.5 - delta, 1 - 3 * delta)
        hi = 2 * (1 - 2 * delta)
        return 0.5 * (lo + hi)
    raise ValueError("the singularity statistic needs beta^2 >= 4 pi (delta <= 1/2)")


def r_eps(eps: float, delta: float, gamma: float | None = None) -> float:
    """Normalisation r(eps): log(eps^-2 v 1)^-gamma at delta = 1/2, eps^gamma below."""
    gamma = default_gamma(delta) if gamma is None else gamma
    if abs(delta - 0.5) < 1e-12:
        L = np.log(max(eps**-2, 1.0))
        return float(L ** (-gamma)) if L > 0 else 1.0
    return float(eps**gamma)


@dataclass
class SingularityStat:
    eps: float
    r: float
    chi_hat: np.ndarray
    G_eps: float
    beta: float
    rho: np.ndarray
    area: float

    def __call__(self, phi: np.ndarray, chunk: int = 64) -> np.ndarray:
        phi = np.asarray(phi, float)
        lead = phi.shape[:-2]
        flat = phi.reshape((-1,) + phi.shape[-2:])
        wick = np.exp(0.5 * self.beta**2 * self.G_eps)
        out = np.empty(len(flat))
        for i in range(0, len(flat), chunk):
            smooth = apply_real(flat[i:i + chunk], self.chi_hat)
            out[i:i + chunk] = self.area * self.r * np.sum(
                (wick * np.cos(self.beta * smooth) - 1) * self.rho, axis=(-2, -1))
        return out.reshape(lead)


def mollified_diag(kernels: KernelMultipliers, eps: float, t: float = np.inf) -> float:
    """Lattice diagonal of the covariance of chi^eps * phi."""
    p = spectral_profile(eps * kernels.spec.kabs)
    return float(np.sum(p * p * kernels.g(t)) / kernels.spec.L**2)


def singularity_stat(kernels: KernelMultipliers, eps: float, beta2: float, rho: np.ndarray,
                     t: float = np.inf, gamma: float | None = None) -> SingularityStat:
    """Build U^eps; evaluate by calling it on fields."""
    a = kernels.spec.a
    if eps < 2 * a * (1 - 1e-12):
        raise ValueError(f"eps = {eps} below the resolvable width 2a = {2 * a}")
    delta = 1 - beta2 / (8 * np.pi)
    chi_hat = spectral_profile(eps * kernels.spec.kabs)
    return SingularityStat(eps, r_eps(eps, delta, gamma), chi_hat, mollified_diag(kernels, eps, t),
                           float(np.sqrt(beta2)), np.asarray(rho, float), kernels.area)


def spearman_trend(values: Sequence[float]) -> float:
    """Spearman correlation of values against their ladder index."""
    return float(stats.spearmanr(np.arange(len(values)), values)[0])


# -- cumulants ------------------------------------------------------------------------------

def connected_cumulants(x: np.ndarray, n_blocks: int = 50) -> dict:
    """k-statistics k2, k3, k4 with delete-a-block jackknife errors."""
    x = np.asarray(x, float).ravel()
    n = x.size
    if n < 1000:
        raise ValueError("need at least 1000 samples")
    est = {k: float(stats.kstat(x, k)) for k in (2, 3, 4)}
    blocks = np.array_split(np.arange(n), n_blocks)
    jk = {k: [] for k in est}
    for b in blocks:
        keep = np.ones(n, bool)
        keep[b] = False
        for k in est:
            jk[k].append(stats.kstat(x[keep], k))
    out = {}
    for k in est:
        v = np.asarray(jk[k])
        se = np.sqrt((n_blocks - 1) / n_blocks * np.sum((v - v.mean()) ** 2))
        out[f"k{k}"] = (est[k], float(se))
    return out


def write_cumulant_csv(path, rows: Iterable[tuple]) -> None:
    """rows of (label, order, value, stderr)."""
    with open(path, "w") as fh:
        fh.write("label,order,value,stderr\n")
        for lab, k, v, s in rows:
            fh.write(f"{lab},{k},{v:.17g},{s:.17g}\n")


# -- reflection positivity ---------------------------------------------------------------

def reflect(f: np.ndarray) -> np.ndarray:
    """Theta: row j -> N - 1 - j (plane between rows N/2 - 1 and N/2)."""
    return np.flip(f, axis=-2)


def reflection_positivity_gram(fs: np.ndarray, kernels: KernelMultipliers, t: float = np.inf) -> float:
    """Minimum eigenvalue of M_ij = <f_i, G Theta f_j> for fs supported on rows >= N/2."""
    fs = np.atleast_3d(np.asarray(fs, float)) if np.ndim(fs) == 2 else np.asarray(fs, float)
    if fs.ndim == 2:
        fs = fs[None]
    N = kernels.spec.N
    if np.any(fs[:, : N // 2, :] != 0):
        raise ValueError("functions must be supported in the half rows >= N/2")
    Gth = kernels.apply(reflect(fs), kernels.g(t))
    M = kernels.area * np.einsum("ixy,jxy->ij", fs, Gth)
    M = 0.5 * (M + M.T)
    return float(np.linalg.eigvalsh(M).min())

"""Heat-kernel scale decomposition of the massive free-field covariance.

With ``w(k) = m^2 + |k|^2`` the per-mode multipliers are

    Q_t(k)    = t^-1 exp(-w / 2t)
    Gdot_t(k) = t^-2 exp(-w / t)       = Q_t(k)^2
    G_t(k)    = exp(-w / t) / w        = int_0^t Gdot_s(k) ds

A multiplier ``M`` acts on a field by ``ifft2(M * fft2(f))``; the matching
real-space lattice kernel is ``K(x) = L^-2 sum_k M(k) e^{ikx} = ifft2(M) / a^2``
so that ``ifft2(M * fft2(f)) = a^2 sum_y K(x - y) f(y)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from ._fft import apply_real
from .lattice import LatticeSpec

FOUR_PI = 4.0 * np.pi


def _check_mass(m: float) -> float:
    if not m > 0:
        raise ValueError(f"mass must be positive, got {m}")
    return float(m)


def q_hat(t, w):
    """t^-1 exp(-w/2t); the t -> 0 limit is 0."""
    if np.ndim(t) == 0 and t == 0:
        return np.zeros_like(w)
    t = np.asarray(t, dtype=float)
    return np.exp(-w / (2 * t)) / t


def gdot_hat(t, w):
    """t^-2 exp(-w/t); the t -> 0 limit is 0."""
    if np.ndim(t) == 0 and t == 0:
        return np.zeros_like(w)
    t = np.asarray(t, dtype=float)
    return np.exp(-w / t) / t**2


def g_hat(t, w):
    """exp(-w/t)/w with the limits t = 0 (-> 0) and t = inf (-> 1/w)."""
    if t == 0:
        return np.zeros_like(w)
    if np.isinf(t):
        return 1.0 / w
    return np.exp(-w / t) / w


def g_increment_hat(t1, t2, w):
    """G_{t2}(k) - G_{t1}(k) computed without cancellation."""
    if t2 < t1:
        raise ValueError("need t1 <= t2")
    if t1 == t2:
        return np.zeros_like(w)
    if t1 == 0:
        return g_hat(t2, w)
    e2 = 0.0 if np.isinf(t2) else 1.0 / t2
    gap = 1.0 / t1 if np.isinf(t2) else (t2 - t1) / (t1 * t2)
    # exp(-w e2) (1 - exp(-w (1/t1 - e2))) / w
    return -np.exp(-w * e2) * np.expm1(-w * gap) / w


# -- closed forms in the continuum ---------------------------------------------

def gdot_realspace(t: float, x, m: float):
    """(1/4 pi t) e^{-m^2/t} e^{-t|x|^2/4}; ``x`` is a displacement or its norm."""
    if not t > 0:
        raise ValueError("t must be positive")
    return gdot_radial(t, _norm(x), m)


def gdot_radial(t: float, r, m: float):
    if not t > 0:
        raise ValueError("t must be positive")
    return np.exp(-m * m / t - t * np.square(r) / 4.0) / (FOUR_PI * t)


def q_realspace(t: float, x, m: float):
    """(1/2 pi) e^{-m^2/2t} e^{-t|x|^2/2}, the kernel of Q_t."""
    if not t > 0:
        raise ValueError("t must be positive")
    return q_radial(t, _norm(x), m)


def q_radial(t: float, r, m: float):
    if not t > 0:
        raise ValueError("t must be positive")
    return np.exp(-m * m / (2 * t) - t * np.square(r) / 2.0) / (2 * np.pi)


def _norm(x):
    # scalar -> |x|; otherwise displacement vectors along the last axis
    x = np.asarray(x, dtype=float)
    return np.abs(x) if x.ndim == 0 else np.sqrt(np.sum(x * x, axis=-1))


def green_diag_continuum(t: float, m: float, method: str = "quad") -> float:
    """Continuum G_t(0) = int_0^t (4 pi s)^-1 e^{-m^2/s} ds."""
    if t <= 0:
        return 0.0
    if method == "closed":
        return float(special.exp1(m * m / t) / FOUR_PI)
    # substitute u = 1/s: int_{1/t}^inf e^{-m^2 u} / (4 pi u) du
    val, _ = integrate.quad(lambda u: np.exp(-m * m * u) / (FOUR_PI * u), 1.0 / t, np.inf,
                            epsrel=1e-11, epsabs=0, limit=200)
    return float(val)


def green_diag(t: float, m: float, spec: LatticeSpec) -> float:
    """Lattice G_t(0) = L^-2 sum_k G_t(k)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    w = m * m + spec.k2
    return float(np.sum(g_hat(t, w)) / spec.L**2)


def kernel_moment(t: float, alpha: float, gamma: float, m: float, kernel: str = "gdot") -> float:
    """int |x|^{2 alpha} K_t(x) e^{gamma m |x|} dx for K = Gdot_t or Q_t (continuum)."""
    if alpha <= -1:
        raise ValueError("alpha <= -1 gives a divergent moment")
    if not -1 < gamma < 1:
        raise ValueError("gamma must lie in (-1, 1)")
    if not t > 0:
        raise ValueError("t must be positive")
    prof = {"gdot": gdot_radial, "q": q_radial}[kernel]
    width = 1.0 / np.sqrt(t)

    def f(r):
        return 2 * np.pi * r ** (1 + 2 * alpha) * prof(t, r, m) * np.exp(gamma * m * r)

    pts = [0.0, 4 * width, 16 * width]
    total = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        total += integrate.quad(f, lo, hi, epsrel=1e-10, epsabs=0, limit=200)[0]
    total += integrate.quad(f, pts[-1], np.inf, epsrel=1e-10, epsabs=0, limit=200)[0]
    return float(total)


# -- scale grid ------------------------------------------------------------------

@dataclass(frozen=True)
class ScaleGrid:
    """Knots 0 = t_0 < ... < t_K = T."""

    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if k.ndim != 1 or len(k) < 2 or k[0] != 0 or np.any(np.diff(k) <= 0) or not np.isfinite(k[-1]):
            raise ValueError("scale knots must be finite, strictly increasing and start at 0")
        object.__setattr__(self, "knots", k)

    @property
    def T(self) -> float:
        return float(self.knots[-1])

    @property
    def K(self) -> int:
        return len(self.knots) - 1

    def intervals(self):
        return list(zip(self.knots[:-1], self.knots[1:]))


def make_scale_grid(T: float, n_uniform: int = 8, ratio: float = 2 ** 0.25) -> ScaleGrid:
    """``n_uniform`` uniform knots on [0, min(T,1)], geometric (``ratio``) above 1."""
    if not (T > 0 and np.isfinite(T)):
        raise ValueError("T must be positive and finite")
    if T <= 1:
        return ScaleGrid(np.linspace(0.0, T, n_uniform))
    lo = list(np.linspace(0.0, 1.0, n_uniform))
    nmax = int(np.floor(np.log(T) / np.log(ratio) + 1e-9))
    geo = [float(np.exp(j * np.log(ratio))) for j in range(1, nmax + 1)]
    geo = [g for g in geo if g < T * (1 - 1e-12)]
    if geo and np.log(T / geo[-1]) < 0.3 * np.log(ratio):
        geo.pop()
    return ScaleGrid(np.array(lo + geo + [float(T)]))


# -- per-mode multiplier tables ------------------------------------------------

class KernelMultipliers:
    """Multiplier tables and convolution actions on a given lattice."""

    def __init__(self, spec: LatticeSpec, m: float):
        self.spec = spec
        self.m = _check_mass(m)
        self.w = m * m + spec.k2
        self.area = spec.area
        self._cache: dict = {}

    # multipliers
    def q(self, t):
        return q_hat(t, self.w)

    def gdot(self, t):
        return gdot_hat(t, self.w)

    def g(self, t):
        return g_hat(t, self.w)

    def increment(self, t1, t2):
        return g_increment_hat(t1, t2, self.w)

    # actions
    @staticmethod
    def apply(f: np.ndarray, mult: np.ndarray) -> np.ndarray:
        if np.iscomplexobj(f):
            return np.fft.ifft2(np.fft.fft2(f) * mult)
        return apply_real(f, mult)

    def convolve_gdot(self, f, t):
        return self.apply(f, self.gdot(t))

    def convolve_q(self, f, t):
        return self.apply(f, self.q(t))

    def conv_kernel(self, f, K):
        """a^2 sum_y K(x-y) f(y) for a real-space kernel ``K`` (complex f allowed)."""
        out = np.fft.ifft2(np.fft.fft2(f) * np.fft.fft2(K)) * self.area
        return out if np.iscomplexobj(f) else out.real

    def real_kernel(self, mult):
        return np.fft.ifft2(mult).real / self.spec.area

    # real-space lattice kernels and diagonals
    def _cached(self, key, fn):
        if key not in self._cache:
            if len(self._cache) > 512:
                self._cache.clear()
            self._cache[key] = fn()
        return self._cache[key]

    def G_field(self, t):
        return self._cached(("G", float(t)), lambda: self.real_kernel(self.g(t)))

    def Gdot_field(self, t):
        return self._cached(("Gd", float(t)), lambda: self.real_kernel(self.gdot(t)))

    def diag(self, t) -> float:
        return float(np.sum(self.g(t)) / self.spec.L**2)

    def diag_dot(self, t) -> float:
        return float(np.sum(self.gdot(t)) / self.spec.L**2)

    def interval_weights(self, t0: float, t1: float) -> dict:
        return interval_weights(t0, t1, self.w)

    def q_integral(self, t0: float, t1: float) -> np.ndarray:
        """Per-mode int_{t0}^{t1} Q_s(k) ds = E1(w/2t1) - E1(w/2t0)."""
        hi = special.exp1(self.w / (2 * t1))
        lo = 0.0 if t0 == 0 else special.exp1(self.w / (2 * t0))
        return hi - lo


def interval_weights(t0: float, t1: float, w: np.ndarray) -> dict:
    """Exact per-mode integrals of Gdot_s against linear interpolation on [t0, t1].

    With theta = (s - t0)/(t1 - t0) returns

    ``wL = int Gdot (1-theta)``, ``wR = int Gdot theta``,
    ``w00 = int Gdot (1-theta)^2``, ``w01 = int Gdot 2 theta (1-theta)``, ``w11 = int Gdot theta^2``.

    Uses u = 1/s, where Gdot_s ds = e^{-w u} du and the moments reduce to
    generalised exponential integrals.
    """
    if not 0 <= t0 < t1:
        raise ValueError("need 0 <= t0 < t1")
    w = np.asarray(w, dtype=float)
    u0 = 1.0 / t1
    dt = t1 - t0

    def tail(n, u):
        # int_u^inf e^{-w v} v^{-n} dv
        if np.isinf(u):
            return np.zeros_like(w)
        if n == 0:
            return np.exp(-w * u) / w
        return u ** (1 - n) * special.expn(n, w * u)

    u1 = np.inf if t0 == 0 else 1.0 / t0
    I0 = g_increment_hat(t0, t1, w)
    I1 = tail(1, u0) - tail(1, u1)
    I2 = tail(2, u0) - tail(2, u1)
    wR = (I1 - t0 * I0) / dt
    w11 = (I2 - 2 * t0 * I1 + t0 * t0 * I0) / dt**2
    wL = I0 - wR
    return {"I0": I0, "wL": wL, "wR": wR, "w11": w11, "w01": 2 * (wR - w11),
            "w00": I0 - 2 * wR + w11}


class ScalarKernels:
    """Single-site reduction of a lattice covariance: g(t) = G_t^lat(0).

    Exposes the subset of the :class:`KernelMultipliers` interface used by the
    flow and the FBSDE solver, acting on ``(..., 1, 1)`` arrays with unit cell.
    """

    def __init__(self, base: KernelMultipliers):
        self.base = base
        self.m = base.m
        self.spec = None
        self.area = 1.0

    def g(self, t):
        return np.full((1, 1), self.base.diag(t))

    def gdot(self, t):
        return np.full((1, 1), self.base.diag_dot(t))

    def q(self, t):
        return np.sqrt(self.gdot(t))

    def increment(self, t1, t2):
        return np.full((1, 1), np.sum(self.base.increment(t1, t2)) / self.base.spec.L**2)

    @staticmethod
    def apply(f, mult):
        return f * mult

    def convolve_gdot(self, f, t):
        return f * self.gdot(t)

    def convolve_q(self, f, t):
        return f * self.q(t)

    def conv_kernel(self, f, K):
        return f * K

    def G_field(self, t):
        return self.g(t)

    def Gdot_field(self, t):
        return self.gdot(t)

    def diag(self, t):
        return self.base.diag(t)

    def diag_dot(self, t):
        return self.base.diag_dot(t)

    def q_integral(self, t0, t1, n: int = 24):
        x, w = np.polynomial.legendre.leggauss(n)
        s = 0.5 * (t1 - t0) * x + 0.5 * (t1 + t0)
        val = 0.5 * (t1 - t0) * sum(wi * np.sqrt(self.base.diag_dot(si)) for wi, si in zip(w, s))
        return np.full((1, 1), val)

    def interval_weights(self, t0, t1):
        L2 = self.base.spec.L**2
        return {k: np.full((1, 1), np.sum(v) / L2) for k, v in self.base.interval_weights(t0, t1).items()}

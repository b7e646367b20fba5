"""Periodic 2D lattice fields, spectral transforms, weighted norms and
Littlewood-Paley blocks.

Fields are plain ``numpy`` arrays of shape ``(..., N, N)`` (row-major, so the
flattened layout is the length-N^2 vector).  The forward transform is the
unnormalised sum ``fft2`` and the inverse divides by ``N^2``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

SGF1_MAGIC = b"SGF1"


@dataclass(frozen=True)
class LatticeSpec:
    """Periodic N x N lattice with spacing ``a``.

    Parameters
    ----------
    N : int
        Sites per side (even, at least 4).
    a : float
        Lattice spacing.
    """

    N: int
    a: float

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 4 or self.N % 2:
            raise ValueError(f"N must be an even integer >= 4, got {self.N}")
        if not (self.a > 0 and np.isfinite(self.a)):
            raise ValueError(f"a must be positive, got {self.a}")

    @property
    def L(self) -> float:
        return self.N * self.a

    @property
    def area(self) -> float:
        """Cell area a^2 (the measure of one site)."""
        return self.a * self.a

    @property
    def shape(self) -> tuple[int, int]:
        return (self.N, self.N)

    @cached_property
    def momenta(self) -> tuple[np.ndarray, np.ndarray]:
        """Momentum grids (kx, ky) in fft ordering."""
        k1 = 2 * np.pi / self.L * np.fft.fftfreq(self.N, 1.0 / self.N)
        return np.meshgrid(k1, k1, indexing="ij")

    @cached_property
    def k2(self) -> np.ndarray:
        kx, ky = self.momenta
        return kx**2 + ky**2

    @cached_property
    def kabs(self) -> np.ndarray:
        return np.sqrt(self.k2)

    @cached_property
    def displacement(self) -> tuple[np.ndarray, np.ndarray]:
        """Minimal-image displacement of each site from the origin site."""
        n = (np.arange(self.N) + self.N // 2) % self.N - self.N // 2
        d = n * self.a
        return np.meshgrid(d, d, indexing="ij")

    @cached_property
    def radius(self) -> np.ndarray:
        """Minimal-image distance |x| of each site from the origin site."""
        dx, dy = self.displacement
        return np.hypot(dx, dy)

    @cached_property
    def centred(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates of each site relative to the torus centre (site N/2, N/2)."""
        c = (np.arange(self.N) - self.N // 2) * self.a
        return np.meshgrid(c, c, indexing="ij")

    @cached_property
    def centre_radius(self) -> np.ndarray:
        cx, cy = self.centred
        return np.hypot(cx, cy)

    def check(self, f: np.ndarray) -> None:
        if f.shape[-2:] != self.shape:
            raise ValueError(f"field shape {f.shape[-2:]} does not match lattice {self.shape}")


def to_spectral(f: np.ndarray, spec: LatticeSpec | None = None) -> np.ndarray:
    """Unnormalised forward transform over the last two axes."""
    if spec is not None:
        spec.check(f)
    return np.fft.fft2(f)


def from_spectral(g: np.ndarray, spec: LatticeSpec | None = None, real: bool = True) -> np.ndarray:
    """Inverse transform (divides by N^2); returns the real part by default."""
    if spec is not None:
        spec.check(g)
    out = np.fft.ifft2(g)
    return out.real if real else out


def hermitian_defect(g: np.ndarray) -> float:
    """max |g(-k) - conj g(k)|, zero for the transform of a real field."""
    flipped = np.roll(np.flip(g, axis=(-2, -1)), 1, axis=(-2, -1))
    return float(np.max(np.abs(flipped - np.conj(g))))


@dataclass(frozen=True)
class CutoffRho:
    """Smooth plateau cutoff centred on the torus centre.

    ``rho = 1`` for ``r <= radius``, raised-cosine down to 0 at ``radius + edge``.
    """

    spec: LatticeSpec
    radius: float
    edge: float
    values: np.ndarray = field(repr=False, compare=False)

    @property
    def support(self) -> np.ndarray:
        return self.values > 0

    @property
    def outer_radius(self) -> float:
        return self.radius + self.edge


def make_rho(spec: LatticeSpec, radius: float, edge: float) -> CutoffRho:
    if radius < 0 or edge <= 0:
        raise ValueError("need radius >= 0 and edge > 0")
    r = spec.centre_radius
    u = np.clip((r - radius) / edge, 0.0, 1.0)
    vals = 0.5 * (1.0 + np.cos(np.pi * u))
    vals[u >= 1.0] = 0.0
    return CutoffRho(spec, float(radius), float(edge), vals)


def plateau_bump(spec: LatticeSpec, radius: float, edge: float) -> np.ndarray:
    """Raised-cosine bump at the torus centre (same profile as the cutoff)."""
    return make_rho(spec, radius, edge).values


def weight(spec: LatticeSpec, n: float = 3.0) -> np.ndarray:
    """Polynomial weight <x>^{-n} with x measured from the torus centre."""
    return (1.0 + spec.centre_radius**2) ** (-n / 2)


def weighted_lp_norm(f: np.ndarray, spec: LatticeSpec, p: float = 2.0, n: float = 3.0) -> float:
    """(a^2 sum |<x>^{-n} f|^p)^{1/p}; p = inf gives the weighted sup norm."""
    g = np.abs(f * weight(spec, n))
    if np.isinf(p):
        return float(g.max())
    return float((spec.area * np.sum(g**p)) ** (1.0 / p))


def _smooth_step(u: np.ndarray) -> np.ndarray:
    # 1 for u <= 0, 0 for u >= 1, raised cosine in between
    return 0.5 * (1.0 + np.cos(np.pi * np.clip(u, 0.0, 1.0)))


def lp_block_multipliers(spec: LatticeSpec) -> list[tuple[int, np.ndarray]]:
    """Dyadic partition of unity in momentum space.

    Low-pass profiles ``P_i(k) = s(log2|k| - i)`` with a raised-cosine step
    ``s``; block ``-1`` is ``P_0`` and block ``i`` is ``P_{i+1} - P_i``, with the
    top block absorbing everything above the last radius.  The blocks sum to 1
    identically.
    """
    kabs = spec.kabs
    with np.errstate(divide="ignore"):
        logk = np.where(kabs > 0, np.log2(np.where(kabs > 0, kabs, 1.0)), -np.inf)
    imax = max(0, int(np.ceil(np.log2(kabs.max()))))
    low = [_smooth_step(logk - i) for i in range(imax + 1)]
    blocks = [(-1, low[0])]
    for i in range(imax):
        blocks.append((i, low[i + 1] - low[i]))
    blocks.append((imax, 1.0 - low[imax]))
    return blocks


def lp_blocks(f: np.ndarray, spec: LatticeSpec) -> list[tuple[int, np.ndarray]]:
    """Littlewood-Paley pieces Delta_i f over the last two axes."""
    spec.check(f)
    fh = np.fft.fft2(f)
    return [(i, np.fft.ifft2(fh * m).real) for i, m in lp_block_multipliers(spec)]


def besov_block_norms(f: np.ndarray, spec: LatticeSpec, weight_exponent: float = 3.0,
                      p: float = 2.0) -> list[tuple[int, float]]:
    """Weighted L^p norms of the Littlewood-Paley blocks of a single field."""
    return [(i, weighted_lp_norm(b, spec, p, weight_exponent)) for i, b in lp_blocks(f, spec)]


def steiner_diameter(points: Sequence[Sequence[float]]) -> float:
    """Length of the shortest tree joining 2 or 3 points in the plane."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be an array of 2D coordinates")
    n = len(pts)
    if n > 3:
        raise NotImplementedError("Steiner diameter only implemented for 2 or 3 points")
    if n < 2:
        raise ValueError("need at least 2 points")
    if n == 2:
        return float(np.linalg.norm(pts[0] - pts[1]))
    a = np.linalg.norm(pts[1] - pts[2])
    b = np.linalg.norm(pts[0] - pts[2])
    c = np.linalg.norm(pts[0] - pts[1])
    sides = sorted([a, b, c])
    # angle opposite the longest side; >= 120 deg means the tree uses the two short sides
    if sides[0] == 0.0:
        return float(sides[2])
    cos_big = (sides[0] ** 2 + sides[1] ** 2 - sides[2] ** 2) / (2 * sides[0] * sides[1])
    if cos_big <= -0.5:
        return float(sides[0] + sides[1])
    d1, d2 = pts[1] - pts[0], pts[2] - pts[0]
    area = 0.5 * abs(d1[0] * d2[1] - d1[1] * d2[0])
    return float(np.sqrt(0.5 * (a * a + b * b + c * c) + 2 * np.sqrt(3.0) * area))


# -- SGF1 snapshots ------------------------------------------------------------

def write_sgf1(path: str | Path, f: np.ndarray, a: float, m: float, scale_index: int = 0) -> None:
    """Write one field snapshot in the SGF1 binary layout."""
    f = np.asarray(f, dtype="<f8")
    if f.ndim != 2 or f.shape[0] != f.shape[1]:
        raise ValueError("SGF1 holds a single square field")
    with open(path, "wb") as fh:
        fh.write(SGF1_MAGIC)
        fh.write(struct.pack("<IddQ", f.shape[0], float(a), float(m), int(scale_index)))
        fh.write(np.ascontiguousarray(f).tobytes())


def read_sgf1(path: str | Path) -> tuple[np.ndarray, float, float, int]:
    """Returns (field, a, m, scale_index)."""
    raw = Path(path).read_bytes()
    if raw[:4] != SGF1_MAGIC:
        raise ValueError("not an SGF1 file")
    N, a, m, idx = struct.unpack_from("<IddQ", raw, 4)
    off = 4 + struct.calcsize("<IddQ")
    vals = np.frombuffer(raw, dtype="<f8", count=N * N, offset=off)
    if vals.size != N * N:
        raise ValueError("truncated SGF1 file")
    return vals.reshape(N, N).copy(), a, m, idx

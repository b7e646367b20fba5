"""Real-to-complex transforms over the last two axes (scipy.fft backend).

Every multiplier in the package is a function of |k| and hence even, so the
half spectrum from ``rfft2`` carries everything needed.
"""
from __future__ import annotations

import os

import numpy as np
import scipy.fft as sfft


def workers() -> int:
    """Thread cap from SGFLOW_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("SGFLOW_THREADS", "1")))
    except ValueError:
        return 1


def rfft2(f: np.ndarray) -> np.ndarray:
    return sfft.rfft2(f, workers=workers())


def irfft2(F: np.ndarray, n: int) -> np.ndarray:
    return sfft.irfft2(F, s=(n, n), workers=workers())


def half(mult, n: int):
    """Restrict a full-spectrum multiplier to the rfft half plane."""
    if np.ndim(mult) < 2:
        return mult
    return mult[..., : n // 2 + 1]


def apply_real(f: np.ndarray, mult) -> np.ndarray:
    """ifft2(mult * fft2 f) for real ``f`` and an even multiplier."""
    n = f.shape[-1]
    return irfft2(rfft2(f) * half(mult, n), n)


def half_weights(n: int) -> np.ndarray:
    """Multiplicity of each rfft column in the full spectrum (for Parseval sums)."""
    w = np.full(n // 2 + 1, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w

"""Small shared linear-algebra helpers."""

from __future__ import annotations

import numpy as np

EIG_FLOOR = 1e-12


def floored_inverse(a: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    """Symmetric pseudo-inverse via eigendecomposition with an eigenvalue floor.

    Eigenvalues at or below the floor are treated as exact zeros and dropped,
    so redundant moment directions (which make Ω exactly singular) never
    inject huge spurious weights.
    """
    sym = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(sym)
    cutoff = floor * max(float(w[-1]), 1.0)
    inv_w = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0), 0.0)
    out = (v * inv_w) @ v.T
    return 0.5 * (out + out.T)


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)

"""Vectorized numpy implementation of the pairwise kernel operations.

This is the fallback backend; the compiled extension exports the same
functions.  All functions treat coincident points (r below 1e-300) as
contributing zero, which implements the self-exclusion convention used by
the direct summation paths.
"""

from __future__ import annotations

import numpy as np

R_TINY = 1e-300
FOUR_PI = 4.0 * np.pi


def _displacements(targets: np.ndarray, sources: np.ndarray):
    s = targets[:, None, :] - sources[None, :, :]
    r = np.sqrt(np.einsum("mnd,mnd->mn", s, s))
    live = r > R_TINY
    rs = np.where(live, r, 1.0)
    return s, rs, live


def matrix_single(k: complex, targets: np.ndarray, sources: np.ndarray) -> np.ndarray:
    _, r, live = _displacements(targets, sources)
    out = np.exp(1j * k * r) / (FOUR_PI * r)
    out[~live] = 0.0
    return out


def matrix_double(k: complex, targets: np.ndarray, sources: np.ndarray,
                  src_normals: np.ndarray) -> np.ndarray:
    s, r, live = _displacements(targets, sources)
    ns = np.einsum("mnd,nd->mn", s, src_normals)
    out = ns * (1.0 - 1j * k * r) * np.exp(1j * k * r) / (FOUR_PI * r**3)
    out[~live] = 0.0
    return out


def matrix_adjoint(k: complex, targets: np.ndarray, sources: np.ndarray,
                   tgt_normals: np.ndarray) -> np.ndarray:
    s, r, live = _displacements(targets, sources)
    ns = np.einsum("mnd,md->mn", s, tgt_normals)
    out = ns * (1j * k * r - 1.0) * np.exp(1j * k * r) / (FOUR_PI * r**3)
    out[~live] = 0.0
    return out


def matrix_combined(k: complex, targets: np.ndarray, sources: np.ndarray,
                    src_normals: np.ndarray, beta_d: complex, beta_s: complex) -> np.ndarray:
    s, r, live = _displacements(targets, sources)
    ekr = np.exp(1j * k * r)
    ns = np.einsum("mnd,nd->mn", s, src_normals)
    out = ekr * (beta_s / (FOUR_PI * r)
                 + beta_d * ns * (1.0 - 1j * k * r) / (FOUR_PI * r**3))
    out[~live] = 0.0
    return out


def potential(k: complex, targets: np.ndarray, sources: np.ndarray,
              mono: np.ndarray | None = None,
              dipstr: np.ndarray | None = None,
              dipvec: np.ndarray | None = None,
              chunk: int = 512) -> np.ndarray:
    """Sum of monopole and dipole fields at the targets, self-pairs excluded."""
    m = targets.shape[0]
    pot = np.zeros(m, dtype=complex)
    for i0 in range(0, m, chunk):
        t = targets[i0 : i0 + chunk]
        s, r, live = _displacements(t, sources)
        ekr = np.exp(1j * k * r)
        if mono is not None:
            g = ekr / (FOUR_PI * r)
            g[~live] = 0.0
            pot[i0 : i0 + chunk] += g @ mono
        if dipstr is not None:
            ns = np.einsum("mnd,nd->mn", s, dipvec)
            d = ns * (1.0 - 1j * k * r) * ekr / (FOUR_PI * r**3)
            d[~live] = 0.0
            pot[i0 : i0 + chunk] += d @ dipstr
    return pot


def potential_grad(k: complex, targets: np.ndarray, sources: np.ndarray,
                   mono: np.ndarray, chunk: int = 512):
    """Monopole potential and its target gradient, self-pairs excluded."""
    m = targets.shape[0]
    pot = np.zeros(m, dtype=complex)
    grad = np.zeros((m, 3), dtype=complex)
    for i0 in range(0, m, chunk):
        t = targets[i0 : i0 + chunk]
        s, r, live = _displacements(t, sources)
        ekr = np.exp(1j * k * r)
        g = ekr / (FOUR_PI * r)
        g[~live] = 0.0
        pot[i0 : i0 + chunk] = g @ mono
        fac = (1j * k * r - 1.0) * ekr / (FOUR_PI * r**3)
        fac[~live] = 0.0
        grad[i0 : i0 + chunk] = np.einsum("mnd,mn,n->md", s, fac, mono)
    return pot, grad

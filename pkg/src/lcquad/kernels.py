"""Green's functions and layer-potential kernels for Laplace and Helmholtz.

The free-space Green's function is G_k(x,y) = e^{ikr}/(4 pi r) with
r = |x-y|; k = 0 selects Laplace.  Kernel families:

    single    G_k
    double    n_y . grad_y G_k = (n_y.(x-y)) (1 - ikr) e^{ikr} / (4 pi r^3)
    adjoint   n_x . grad_x G_k = (n_x.(x-y)) (ikr - 1) e^{ikr} / (4 pi r^3)
    combined  beta_d * double + beta_s * single

Signs follow the exterior jump relation sigma/2 + D[sigma] - ik S[sigma],
under which the interior Gauss identity for the double layer of a constant
density over a closed surface evaluates to -1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backend import get_backend
from .errors import SingularityError

FAMILIES = ("single", "double", "adjoint", "combined")
_ALIASES = {
    "single-layer": "single",
    "double-layer": "double",
    "adjoint-double-layer": "adjoint",
    "combined-field": "combined",
}


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family selector with wavenumber and combined-field coupling."""

    family: str
    k: complex = 0.0
    beta_d: complex = 1.0
    beta_s: complex = 1.0

    def __post_init__(self):
        fam = _ALIASES.get(self.family, self.family)
        if fam not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "k", complex(self.k))
        object.__setattr__(self, "beta_d", complex(self.beta_d))
        object.__setattr__(self, "beta_s", complex(self.beta_s))
        if self.k.imag < 0:
            raise ValueError("Im(k) must be >= 0")

    @property
    def needs_src_normal(self) -> bool:
        return self.family in ("double", "combined")

    @property
    def needs_tgt_normal(self) -> bool:
        return self.family == "adjoint"

    def label(self) -> str:
        return (f"{self.family};k={self.k.real:.17g}+{self.k.imag:.17g}j;"
                f"bd={self.beta_d.real:.17g}+{self.beta_d.imag:.17g}j;"
                f"bs={self.beta_s.real:.17g}+{self.beta_s.imag:.17g}j")


def greens(k: complex, x: np.ndarray, y: np.ndarray):
    """Free-space Green's function; scalar for single points, else vectorized."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.linalg.norm(x - y, axis=-1)
    if np.any(r < 1e-300):
        raise SingularityError("coincident evaluation point and source")
    out = np.exp(1j * complex(k) * r) / (4 * np.pi * r)
    return complex(out) if out.ndim == 0 else out


def kernel_value(spec: KernelSpec, x, y, n_y=None, n_x=None):
    """Pointwise kernel evaluation; the reference the matrix paths are tested
    against.  Vectorized over leading dimensions."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    s = x - y
    r = np.linalg.norm(s, axis=-1)
    if np.any(r < 1e-300):
        raise SingularityError("coincident evaluation point and source")
    k = spec.k
    ekr = np.exp(1j * k * r)
    if spec.family == "single":
        out = ekr / (4 * np.pi * r)
    elif spec.family == "double":
        if n_y is None:
            raise ValueError("double-layer kernel requires the source normal n_y")
        ns = np.sum(np.asarray(n_y, dtype=float) * s, axis=-1)
        out = ns * (1.0 - 1j * k * r) * ekr / (4 * np.pi * r**3)
    elif spec.family == "adjoint":
        if n_x is None:
            raise ValueError("adjoint kernel requires the target normal n_x")
        ns = np.sum(np.asarray(n_x, dtype=float) * s, axis=-1)
        out = ns * (1j * k * r - 1.0) * ekr / (4 * np.pi * r**3)
    else:
        if n_y is None:
            raise ValueError("combined-field kernel requires the source normal n_y")
        ns = np.sum(np.asarray(n_y, dtype=float) * s, axis=-1)
        out = ekr * (spec.beta_s / (4 * np.pi * r)
                     + spec.beta_d * ns * (1.0 - 1j * k * r) / (4 * np.pi * r**3))
    return complex(out) if out.ndim == 0 else out


def kernel_matrix(spec: KernelSpec, targets: np.ndarray, sources: np.ndarray,
                  src_normals: np.ndarray | None = None,
                  tgt_normals: np.ndarray | None = None) -> np.ndarray:
    """Dense (ntarget, nsource) kernel matrix via the selected backend.

    Coincident pairs produce zero entries (self-exclusion convention).
    """
    be = get_backend()
    targets = np.ascontiguousarray(targets, dtype=float)
    sources = np.ascontiguousarray(sources, dtype=float)
    if spec.needs_src_normal and src_normals is None:
        raise ValueError(f"{spec.family} kernel requires source normals")
    if spec.needs_tgt_normal and tgt_normals is None:
        raise ValueError("adjoint kernel requires target normals")
    if spec.family == "single":
        return be.matrix_single(spec.k, targets, sources)
    if spec.family == "double":
        return be.matrix_double(spec.k, targets, sources,
                                np.ascontiguousarray(src_normals, dtype=float))
    if spec.family == "adjoint":
        return be.matrix_adjoint(spec.k, targets, sources,
                                 np.ascontiguousarray(tgt_normals, dtype=float))
    return be.matrix_combined(spec.k, targets, sources,
                              np.ascontiguousarray(src_normals, dtype=float),
                              spec.beta_d, spec.beta_s)

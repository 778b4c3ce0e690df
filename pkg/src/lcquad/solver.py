"""GMRES, the exterior Dirichlet combined-field solve, and the Green's
identity verifier.

The scattering problem uses the representation u = D_k[sigma] - ik S_k[sigma],
whose jump relations turn the Dirichlet condition into the uniquely solvable
combined field equation sigma/2 + D_k[sigma] - ik S_k[sigma] = f on the
surface.  The system operator reuses one QuadCache holding a single combined
kernel, so S and D cost one quadrature pass together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelSpec, kernel_matrix
from .potential import (
    DirectAccelerator,
    apply,
    extend_targets,
    precompute,
)
from .quadrature import NearParams


@dataclass
class GmresResult:
    """Solution plus the per-iteration relative residual history."""

    x: np.ndarray
    residuals: np.ndarray
    converged: bool
    iterations: int


def _as_matvec(op):
    if hasattr(op, "matvec"):
        return op.matvec
    if isinstance(op, np.ndarray):
        return lambda v: op @ v
    if callable(op):
        return op
    raise TypeError("operator must be a matrix, a callable, or have .matvec")


def gmres(op, rhs, tol: float = 1e-8, maxit: int | None = None) -> GmresResult:
    """Unrestarted GMRES with modified Gram-Schmidt orthogonalization.

    Stops when the relative residual drops below tol, on happy breakdown
    (exact solution inside the Krylov space), or after maxit iterations;
    in the last case the best iterate is returned with converged=False.
    """
    matvec = _as_matvec(op)
    rhs = np.asarray(rhs, dtype=complex).reshape(-1)
    n = len(rhs)
    maxit = n if maxit is None else min(int(maxit), n)
    beta = np.linalg.norm(rhs)
    if beta == 0.0:
        return GmresResult(np.zeros(n, dtype=complex), np.array([0.0]),
                           True, 0)
    v = np.zeros((maxit + 1, n), dtype=complex)
    h = np.zeros((maxit + 1, maxit), dtype=complex)
    cs = np.zeros(maxit, dtype=complex)
    sn = np.zeros(maxit, dtype=complex)
    g = np.zeros(maxit + 1, dtype=complex)
    v[0] = rhs / beta
    g[0] = beta
    history = [1.0]
    j = 0
    while j < maxit:
        w = np.asarray(matvec(v[j]), dtype=complex).reshape(-1)
        for i in range(j + 1):
            h[i, j] = np.vdot(v[i], w)
            w -= h[i, j] * v[i]
        h[j + 1, j] = np.linalg.norm(w)
        breakdown = abs(h[j + 1, j]) <= 1e-14 * beta
        if not breakdown:
            v[j + 1] = w / h[j + 1, j]
        for i in range(j):
            hi = cs[i] * h[i, j] + sn[i] * h[i + 1, j]
            h[i + 1, j] = -np.conj(sn[i]) * h[i, j] + cs[i] * h[i + 1, j]
            h[i, j] = hi
        a, b = h[j, j], h[j + 1, j]
        if abs(a) == 0.0:
            cs[j], sn[j] = 0.0, 1.0
        else:
            t = np.sqrt(abs(a) ** 2 + abs(b) ** 2)
            cs[j] = abs(a) / t
            sn[j] = (a / abs(a)) * np.conj(b) / t
        h[j, j] = cs[j] * a + sn[j] * b
        h[j + 1, j] = 0.0
        g[j + 1] = -np.conj(sn[j]) * g[j]
        g[j] = cs[j] * g[j]
        j += 1
        history.append(abs(g[j]) / beta)
        if history[-1] <= tol or breakdown:
            break
    y = np.zeros(j, dtype=complex)
    for i in range(j - 1, -1, -1):
        y[i] = (g[i] - h[i, i + 1:j] @ y[i + 1:j]) / h[i, i]
    x = y @ v[:j]
    return GmresResult(x, np.asarray(history), history[-1] <= tol, j)


class CfieOperator:
    """Action of c*sigma + D_k[sigma] - ik S_k[sigma] at the surface nodes.

    identity_coeff is the jump coefficient c: the scalar 1/2 of the smooth
    exterior limit, or a per-node vector carrying the solid angle of the
    discretized surface at each node.
    """

    def __init__(self, cache, accelerator, identity_coeff=0.5, spec_index=0):
        self.cache = cache
        self.accelerator = accelerator
        self.identity_coeff = identity_coeff
        self.spec_index = spec_index
        self.dimension = cache.n_surface

    def matvec(self, x: np.ndarray) -> np.ndarray:
        pot = apply(self.cache, x, self.accelerator,
                    which=[self.spec_index])[0]
        return self.identity_coeff * np.asarray(x, dtype=complex) + pot.values


@dataclass
class CfieSolution:
    """Surface density, solve diagnostics, and an exterior-field evaluator."""

    sigma: np.ndarray
    residuals: np.ndarray
    converged: bool
    iterations: int
    k: complex
    cache: object = field(repr=False)
    accelerator: object = field(repr=False)
    spec_index: int = 0

    def evaluate(self, points: np.ndarray, accelerator=None) -> np.ndarray:
        """u = D_k[sigma] - ik S_k[sigma] at the given exterior points.

        Registers the points on the solve's cache incrementally (near
        corrections are built only for points inside a near ball).
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ext = extend_targets(self.cache, pts)
        pot = apply(ext, self.sigma, accelerator or self.accelerator,
                    which=[self.spec_index])[0]
        return pot.values[-len(pts):]


def solve_dirichlet_cfie(mesh, k: complex, f: np.ndarray, eps: float,
                         accelerator=None, maxit: int = 200,
                         params: NearParams | None = None,
                         operator: str = "cfie",
                         identity: str = "half") -> CfieSolution:
    """Exterior Dirichlet solve on a closed mesh via GMRES at tolerance eps.

    operator="cfie" solves c*sigma + D_k[sigma] - ik S_k[sigma] = f;
    operator="single" solves S_k[sigma] = f (a harness mode for identities).
    One QuadCache with a single combined kernel supplies both layers.

    identity picks the jump coefficient c.  "half" is the smooth-surface
    value 1/2.  "solid-angle" sets c per node to -D_0[1](x_i), the interior
    solid-angle fraction of the discretized surface (Gauss identity); nodes
    on the boundary of a patch sit on a small geometric ridge where the
    solid angle differs from 2 pi, and the corrected coefficient removes
    that defect from the collocated system.
    """
    k = complex(k)
    if k.imag < 0:
        raise ValueError("wavenumber must have nonnegative imaginary part")
    f = np.asarray(f, dtype=complex).reshape(-1)
    if len(f) != mesh.total_points:
        raise ValueError(f"boundary data must have {mesh.total_points} "
                         f"entries, got {len(f)}")
    if operator not in ("cfie", "single"):
        raise ValueError("operator must be 'cfie' or 'single'")
    if identity not in ("half", "solid-angle"):
        raise ValueError("identity must be 'half' or 'solid-angle'")
    if params is None:
        params = NearParams.for_order(mesh.order, eps)
    accelerator = accelerator or DirectAccelerator()
    if operator == "cfie":
        specs = [KernelSpec("combined", k, beta_d=1.0, beta_s=-1j * k)]
        if identity == "solid-angle":
            specs.append(KernelSpec("double", 0.0))
        cache = precompute(mesh, specs, params)
        if identity == "solid-angle":
            d1 = apply(cache, np.ones(mesh.total_points), accelerator,
                       which=[1])[0]
            ident = -d1.values[:mesh.total_points].real
        else:
            ident = 0.5
    else:
        cache = precompute(mesh, [KernelSpec("single", k)], params)
        ident = 0.0
    op = CfieOperator(cache, accelerator, identity_coeff=ident)
    res = gmres(op, f, tol=eps, maxit=maxit)
    return CfieSolution(sigma=res.x, residuals=res.residuals,
                        converged=res.converged, iterations=res.iterations,
                        k=k, cache=cache, accelerator=accelerator)


def point_source_field(k: complex, sources: np.ndarray,
                       strengths: np.ndarray, points: np.ndarray,
                       normals: np.ndarray | None = None):
    """Superposition of free-space point sources at the given points.

    Returns u, or (u, du/dn) when normals are supplied.
    """
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    strengths = np.asarray(strengths, dtype=complex).reshape(-1)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    u = kernel_matrix(KernelSpec("single", k), points, sources) @ strengths
    if normals is None:
        return u
    dudn = kernel_matrix(KernelSpec("adjoint", k), points, sources,
                         tgt_normals=np.atleast_2d(normals)) @ strengths
    return u, dudn


def greens_identity_error(mesh, k: complex, sources: np.ndarray,
                          strengths: np.ndarray | None = None,
                          eps: float = 5e-7,
                          params: NearParams | None = None,
                          accelerator=None) -> float:
    """Weighted relative L2 defect of u/2 = S_k[du/dn] - D_k[u] on-surface.

    u is the field of the given exterior point sources, so it solves the
    Helmholtz equation inside the surface and the identity holds exactly in
    the continuum; the defect measures the discretization as a whole.
    """
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    if strengths is None:
        strengths = np.ones(len(sources), dtype=complex)
    if params is None:
        params = NearParams.for_order(mesh.order, eps)
    x = mesh.flat_points()
    u, dudn = point_source_field(k, sources, strengths, x,
                                 normals=mesh.flat_normals())
    specs = [KernelSpec("single", k), KernelSpec("double", k)]
    cache = precompute(mesh, specs, params)
    acc = accelerator or DirectAccelerator()
    s_vals = apply(cache, dudn, acc)[0].values
    d_vals = apply(cache, u, acc)[1].values
    defect = s_vals - d_vals - 0.5 * u
    w = mesh.flat_weights()
    return float(np.sqrt(np.sum(w * np.abs(defect) ** 2)
                         / np.sum(w * np.abs(0.5 * u) ** 2)))

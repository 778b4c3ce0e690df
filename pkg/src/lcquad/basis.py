"""Orthonormal polynomial machinery on the reference simplex.

The reference simplex is T0 = {(u,v): u >= 0, v >= 0, u + v <= 1}.  The
basis consists of the orthonormal bivariate polynomials

    K_nm(u, v) = c_nm (1-v)^m P_m((2u+v-1)/(1-v)) P_{n-m}^{(0,2m+1)}(1-2v)

for 0 <= m <= n, normalized to unit L2 norm on T0.  Everything downstream
(charts, densities, quadrature corrections) is expressed in this basis, in
a fixed (n, m) lexicographic order: index(n, m) = n(n+1)/2 + m.

An "order p" set spans all total degrees < p, so it has n_p = p(p+1)/2
functions.  Interpolation nodes are approximate Fekete points extracted
from a dense candidate lattice by pivoted QR; quadrature weights come from
moment fitting on the same node family.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from .errors import DomainError, QuadratureError, TableParseError, TableValidationError

P_MAX_DEFAULT = 12
Q_MAX_DEFAULT = 20
SIMPLEX_TOL = 1e-13


def n_basis(p: int) -> int:
    """Number of basis functions of total degree < p."""
    return p * (p + 1) // 2


def basis_indices(p: int) -> list[tuple[int, int]]:
    """(n, m) pairs in the package-wide lexicographic order."""
    return [(n, m) for n in range(p) for m in range(n + 1)]


def in_simplex(uv: np.ndarray, tol: float = SIMPLEX_TOL) -> np.ndarray:
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    u, v = uv[:, 0], uv[:, 1]
    return (u >= -tol) & (v >= -tol) & (u + v <= 1.0 + tol)


def _check_simplex(uv: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(uv, dtype=float))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected points of shape (npts, 2), got {pts.shape}")
    ok = in_simplex(pts)
    if not ok.all():
        bad = pts[~ok][0]
        raise DomainError(f"point ({bad[0]}, {bad[1]}) lies outside the reference simplex")
    return pts


def _scaled_legendre(z: np.ndarray, y: np.ndarray, mmax: int) -> np.ndarray:
    """L_m = (1-v)^m P_m((2u+v-1)/(1-v)) as polynomials in z = 2u+v-1, y = 1-v.

    The recurrence (m+1) L_{m+1} = (2m+1) z L_m - m y^2 L_{m-1} never divides
    by y, so the v -> 1 limit is evaluated without a 0/0.
    """
    npts = z.shape[0]
    out = np.empty((mmax + 1, npts))
    out[0] = 1.0
    if mmax >= 1:
        out[1] = z
    for m in range(1, mmax):
        out[m + 1] = ((2 * m + 1) * z * out[m] - m * out[m - 1] * y * y) / (m + 1)
    return out


def _jacobi_02m1(x: np.ndarray, p: int) -> np.ndarray:
    """J[j, m] = P_j^{(0, 2m+1)}(x) for j + m <= p - 1, by three-term recurrence."""
    npts = x.shape[0]
    out = np.zeros((p, p, npts))
    for m in range(p):
        beta = 2 * m + 1
        out[0, m] = 1.0
        if p - m > 1:
            out[1, m] = (-beta + (2 + beta) * x) / 2.0
        for j in range(1, p - 1 - m):
            a = (2 * j + beta + 1) * (2 * j + beta + 2) / (2 * (j + 1) * (j + beta + 1))
            b = -(beta * beta) * (2 * j + beta + 1) / (
                2 * (j + 1) * (j + beta + 1) * (2 * j + beta)
            )
            c = j * (j + beta) * (2 * j + beta + 2) / ((j + 1) * (j + beta + 1) * (2 * j + beta))
            out[j + 1, m] = (a * x + b) * out[j, m] - c * out[j - 1, m]
    return out


def koornwinder(p: int, uv: np.ndarray) -> np.ndarray:
    """Evaluate all n_p basis functions of order p at points on T0.

    Returns an array of shape (npts, n_p); a single (2,) point gives (n_p,).
    """
    single = np.asarray(uv).ndim == 1
    pts = _check_simplex(uv)
    if p < 1:
        raise ValueError("order p must be >= 1")
    u, v = pts[:, 0], pts[:, 1]
    z = 2 * u + v - 1
    y = 1 - v
    leg = _scaled_legendre(z, y, p - 1)
    jac = _jacobi_02m1(1 - 2 * v, p)
    vals = np.empty((pts.shape[0], n_basis(p)))
    for n in range(p):
        for m in range(n + 1):
            c = np.sqrt((2 * m + 1) * (2 * n + 2))
            vals[:, n * (n + 1) // 2 + m] = c * leg[m] * jac[n - m, m]
    return vals[0] if single else vals


def koornwinder_derivs(p: int, uv: np.ndarray):
    """Values and first partials of the order-p basis.

    Returns (vals, du, dv), each (npts, n_p).  Derivative recurrences are
    obtained by differentiating the value recurrences, so they share the
    v -> 1 limit handling.
    """
    single = np.asarray(uv).ndim == 1
    pts = _check_simplex(uv)
    if p < 1:
        raise ValueError("order p must be >= 1")
    u, v = pts[:, 0], pts[:, 1]
    npts = pts.shape[0]
    z = 2 * u + v - 1
    y = 1 - v
    x = 1 - 2 * v
    mtop = p - 1

    leg = _scaled_legendre(z, y, mtop)
    jac = _jacobi_02m1(x, p)

    # d/du and d/dv of the scaled Legendre factor.
    legu = np.zeros((mtop + 1, npts))
    legv = np.zeros((mtop + 1, npts))
    if mtop >= 1:
        legu[1] = 2.0
        legv[1] = 1.0
    for m in range(1, mtop):
        legu[m + 1] = ((2 * m + 1) * (2 * leg[m] + z * legu[m]) - m * legu[m - 1] * y * y) / (m + 1)
        legv[m + 1] = (
            (2 * m + 1) * (leg[m] + z * legv[m])
            - m * (legv[m - 1] * y * y - 2 * leg[m - 1] * y)
        ) / (m + 1)

    # d/dv of the Jacobi factor (x = 1 - 2v, so dx/dv = -2).
    jacv = np.zeros((p, p, npts))
    for m in range(p):
        beta = 2 * m + 1
        if p - m > 1:
            jacv[1, m] = -(2 + beta)
        for j in range(1, p - 1 - m):
            a = (2 * j + beta + 1) * (2 * j + beta + 2) / (2 * (j + 1) * (j + beta + 1))
            b = -(beta * beta) * (2 * j + beta + 1) / (
                2 * (j + 1) * (j + beta + 1) * (2 * j + beta)
            )
            c = j * (j + beta) * (2 * j + beta + 2) / ((j + 1) * (j + beta + 1) * (2 * j + beta))
            jacv[j + 1, m] = -2 * a * jac[j, m] + (a * x + b) * jacv[j, m] - c * jacv[j - 1, m]

    nb = n_basis(p)
    vals = np.empty((npts, nb))
    du = np.empty((npts, nb))
    dv = np.empty((npts, nb))
    for n in range(p):
        for m in range(n + 1):
            c = np.sqrt((2 * m + 1) * (2 * n + 2))
            i = n * (n + 1) // 2 + m
            vals[:, i] = c * leg[m] * jac[n - m, m]
            du[:, i] = c * legu[m] * jac[n - m, m]
            dv[:, i] = c * (legv[m] * jac[n - m, m] + leg[m] * jacv[n - m, m])
    if single:
        return vals[0], du[0], dv[0]
    return vals, du, dv


def koornwinder_moments(p: int) -> np.ndarray:
    """Analytic integrals of the basis over T0: orthogonality against the
    constant K_00 = sqrt(2) forces (1/sqrt(2), 0, ..., 0)."""
    m = np.zeros(n_basis(p))
    m[0] = 1.0 / np.sqrt(2.0)
    return m


@dataclass(frozen=True)
class InterpNodeSet:
    """Interpolation nodes with the coefficient<->value maps for one order."""

    order: int
    nodes: np.ndarray       # (n_p, 2)
    matrix_u: np.ndarray    # values = U @ coeffs
    matrix_v: np.ndarray    # coeffs = V @ values
    norm_v: float           # spectral norm of V
    cond_u: float

    @property
    def count(self) -> int:
        return self.nodes.shape[0]

    def coeffs_from_values(self, values: np.ndarray) -> np.ndarray:
        return self.matrix_v @ values

    def values_from_coeffs(self, coeffs: np.ndarray) -> np.ndarray:
        return self.matrix_u @ coeffs


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes/weights on T0, exact for all basis functions of degree < exactness."""

    order: int
    nodes: np.ndarray     # (n, 2)
    weights: np.ndarray   # (n,)
    exactness: int
    positive: bool

    @property
    def count(self) -> int:
        return self.nodes.shape[0]


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _candidate_lattice(p: int) -> np.ndarray:
    """Symmetric barycentric lattice with at least ~40*p points."""
    target = 40 * p
    m = 2
    while (m + 1) * (m + 2) // 2 < target:
        m += 1
    pts = [(i / m, j / m) for i in range(m + 1) for j in range(m + 1 - i)]
    return np.array(pts)


def _refined_inverse(u: np.ndarray) -> np.ndarray:
    """Inverse with two Newton correction sweeps to tighten U @ V ~ I."""
    v = np.linalg.inv(u)
    eye = np.eye(u.shape[0])
    for _ in range(2):
        v = v + v @ (eye - u @ v)
    return v


def _node_set_from_points(p: int, nodes: np.ndarray) -> InterpNodeSet:
    u = koornwinder(p, nodes)
    cond = float(np.linalg.cond(u))
    if not np.isfinite(cond):
        raise QuadratureError(
            f"singular interpolation matrix at order {p} "
            f"({nodes.shape[0]} nodes from the candidate grid)"
        )
    v = _refined_inverse(u)
    return InterpNodeSet(
        order=p,
        nodes=_freeze(nodes),
        matrix_u=_freeze(u),
        matrix_v=_freeze(v),
        norm_v=float(np.linalg.norm(v, 2)),
        cond_u=cond,
    )


@lru_cache(maxsize=None)
def build_interp_nodes(p: int, p_max: int = P_MAX_DEFAULT) -> InterpNodeSet:
    """Approximate Fekete nodes of order p.

    Pivoted QR on the basis-by-candidate Vandermonde greedily maximizes the
    interpolation determinant over the lattice; the result is deterministic
    and keeps cond(U) moderate for p <= 12.
    """
    if not 1 <= p <= p_max:
        raise ValueError(f"order {p} outside [1, {p_max}]; load a table for higher orders")
    cand = _candidate_lattice(p)
    a = koornwinder(p, cand).T  # (n_p, ncand)
    _, _, piv = scipy.linalg.qr(a, pivoting=True, mode="economic")
    nodes = cand[np.sort(piv[: n_basis(p)])]
    return _node_set_from_points(p, nodes)


def _rule_moment_error(nodes: np.ndarray, weights: np.ndarray, degree: int) -> float:
    """Max |rule moment - analytic moment| over basis functions of degree < degree."""
    vals = koornwinder(degree, nodes)
    mom = vals.T @ weights
    return float(np.max(np.abs(mom - koornwinder_moments(degree))))


def _scan_exactness(nodes: np.ndarray, weights: np.ndarray, start: int, tol: float = 1e-12) -> int:
    """Largest e >= start such that all degrees < e integrate to tol (scan cap +12)."""
    e = start
    while e < start + 12:
        if _rule_moment_error(nodes, weights, e + 1) > tol:
            break
        e += 1
    return e


def _weights_positive(w: np.ndarray) -> bool:
    """Positivity up to roundoff: a -1e-18 weight is a zero, not a sign flip."""
    return bool(np.all(w > -1e-14 * np.max(np.abs(w))))


def _fit_weights(nodes: np.ndarray, q: int) -> np.ndarray:
    """Moment-fit weights: solve A w = analytic moments with A the basis
    Vandermonde, plus iterative refinement so the residual (which is exactly
    the quantity the exactness tests measure) reaches ~1e-14."""
    a = koornwinder(q, nodes).T
    m = koornwinder_moments(q)
    w = np.linalg.solve(a, m)
    for _ in range(4):
        r = m - a @ w
        if np.max(np.abs(r)) < 1e-15:
            break
        w = w + np.linalg.solve(a, r)
    return w


@lru_cache(maxsize=None)
def build_quadrature(q: int, q_max: int = Q_MAX_DEFAULT) -> QuadratureRule:
    """Order-q rule on T0: n_q approximate Fekete nodes with moment-fitted weights."""
    if not 1 <= q <= q_max:
        raise ValueError(f"order {q} outside [1, {q_max}]; load a table for higher orders")
    nodes = np.asarray(build_interp_nodes(q, p_max=max(q, P_MAX_DEFAULT)).nodes)
    w = _fit_weights(nodes, q)
    positive = _weights_positive(w)
    if not positive:
        warnings.warn(f"order-{q} moment-fitted rule has non-positive weights", stacklevel=2)
    return QuadratureRule(
        order=q,
        nodes=_freeze(nodes),
        weights=_freeze(w),
        exactness=_scan_exactness(nodes, w, q),
        positive=positive,
    )


# ---------------------------------------------------------------------------
# Plain-text table IO
#
#   TRIQUAD <order> <count> <exactness>     followed by <count> "u v w" lines
#   TRINODE <order> <count>                 followed by <count> "u v" lines
# ---------------------------------------------------------------------------

def save_table(obj, path) -> None:
    lines = []
    if isinstance(obj, QuadratureRule):
        lines.append(f"TRIQUAD {obj.order} {obj.count} {obj.exactness}")
        for (u, v), w in zip(obj.nodes, obj.weights):
            lines.append(f"{u:.17e} {v:.17e} {w:.17e}")
    elif isinstance(obj, InterpNodeSet):
        lines.append(f"TRINODE {obj.order} {obj.count}")
        for u, v in obj.nodes:
            lines.append(f"{u:.17e} {v:.17e}")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _parse_floats(tok: list[str], n: int, lineno: int) -> list[float]:
    if len(tok) != n:
        raise TableParseError(f"expected {n} fields, got {len(tok)}", line=lineno)
    try:
        return [float(t) for t in tok]
    except ValueError as exc:
        raise TableParseError(str(exc), line=lineno) from None


def load_quadrature_table(path):
    """Load a TRIQUAD or TRINODE table; exactness is re-verified, never trusted.

    Returns a QuadratureRule or an InterpNodeSet.  A rule with negative
    weights is accepted with a warning (positive=False).
    """
    with open(path) as f:
        raw = [ln.strip() for ln in f]
    lines = [(i + 1, ln) for i, ln in enumerate(raw) if ln]
    if not lines:
        raise TableParseError("empty table file", line=1)
    lineno, header = lines[0]
    tok = header.split()
    if tok[0] == "TRIQUAD":
        if len(tok) != 4:
            raise TableParseError("TRIQUAD header needs <order> <count> <exactness>", line=lineno)
        try:
            order, count, exactness = int(tok[1]), int(tok[2]), int(tok[3])
        except ValueError:
            raise TableParseError("non-integer TRIQUAD header field", line=lineno) from None
        body = lines[1:]
        if len(body) != count:
            raise TableParseError(
                f"header promises {count} nodes, file has {len(body)}", line=lineno
            )
        data = np.array([_parse_floats(ln.split(), 3, no) for no, ln in body])
        nodes, weights = data[:, :2], data[:, 2]
        if not in_simplex(nodes).all():
            raise TableValidationError(f"{path}: rule node outside the simplex")
        err = _rule_moment_error(nodes, weights, exactness)
        if err > 1e-12:
            raise TableValidationError(
                f"{path}: rule fails its claimed exactness {exactness} (moment error {err:.2e})"
            )
        positive = _weights_positive(weights)
        if not positive:
            warnings.warn(f"{path}: rule has non-positive weights", stacklevel=2)
        return QuadratureRule(
            order=order,
            nodes=_freeze(nodes),
            weights=_freeze(weights),
            exactness=_scan_exactness(nodes, weights, exactness),
            positive=positive,
        )
    if tok[0] == "TRINODE":
        if len(tok) != 3:
            raise TableParseError("TRINODE header needs <order> <count>", line=lineno)
        try:
            order, count = int(tok[1]), int(tok[2])
        except ValueError:
            raise TableParseError("non-integer TRINODE header field", line=lineno) from None
        if count != n_basis(order):
            raise TableValidationError(
                f"{path}: order {order} needs {n_basis(order)} nodes, header says {count}"
            )
        body = lines[1:]
        if len(body) != count:
            raise TableParseError(
                f"header promises {count} nodes, file has {len(body)}", line=lineno
            )
        nodes = np.array([_parse_floats(ln.split(), 2, no) for no, ln in body])
        if not in_simplex(nodes).all():
            raise TableValidationError(f"{path}: interpolation node outside the simplex")
        return _node_set_from_points(order, nodes)
    raise TableParseError(f"unknown table keyword {tok[0]!r}", line=lineno)

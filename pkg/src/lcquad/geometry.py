"""Curvilinear triangular patches and surface meshes.

A patch is a smooth chart X: T0 -> R^3 stored as basis coefficients per
coordinate.  A mesh is a collection of patches discretized at the shared
order-p interpolation nodes, with chart jets (position, tangents, normal,
area element) cached at those nodes.  Generators for the unit sphere and a
stellarator-like toroidal surface, plus a flat-triangle importer, produce
closed meshes with outward normals.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .basis import (
    build_interp_nodes,
    build_quadrature,
    koornwinder,
    koornwinder_derivs,
    n_basis,
)
from .errors import GeometryError, TableParseError

JAC_FLOOR = 1e-14
RADIUS_INFLATION = 0.05


@dataclass
class ChartJet:
    """Chart data at one or more parameter points (vectorized over points)."""

    x: np.ndarray        # (npts, 3)
    xu: np.ndarray       # (npts, 3)
    xv: np.ndarray       # (npts, 3)
    normal: np.ndarray   # (npts, 3), unit
    jac: np.ndarray      # (npts,), |xu x xv|


@dataclass
class Patch:
    """One curvilinear patch; q_far is assigned by the quadrature stage."""

    id: int
    order: int
    coeffs: np.ndarray   # (n_p, 3) basis coefficients of the chart
    centroid: np.ndarray
    radius: float
    aspect: float
    q_far: int | None = field(default=None)


def chart_jet_from_coeffs(p: int, coeffs: np.ndarray, uv: np.ndarray) -> ChartJet:
    """Evaluate a coefficient-form chart and its first derivatives."""
    vals, du, dv = koornwinder_derivs(p, np.atleast_2d(uv))
    x = vals @ coeffs
    xu = du @ coeffs
    xv = dv @ coeffs
    cr = np.cross(xu, xv)
    jac = np.linalg.norm(cr, axis=1)
    if np.any(jac <= JAC_FLOOR):
        raise GeometryError(f"degenerate chart: area element {jac.min():.3e} at a sample point")
    return ChartJet(x=x, xu=xu, xv=xv, normal=cr / jac[:, None], jac=jac)


def patch_from_samples(p: int, pts: np.ndarray, patch_id: int = 0) -> Patch:
    """Interpolate chart coefficients through positions at the order-p nodes."""
    pts = np.asarray(pts, dtype=float)
    if pts.shape != (n_basis(p), 3):
        raise ValueError(f"expected {(n_basis(p), 3)} samples, got {pts.shape}")
    ns = build_interp_nodes(p)
    coeffs = ns.matrix_v @ pts
    chart_jet_from_coeffs(p, coeffs, ns.nodes)  # non-degeneracy check at nodes
    c, r = centroid_radius(p, coeffs)
    return Patch(
        id=patch_id,
        order=p,
        coeffs=coeffs,
        centroid=c,
        radius=r,
        aspect=aspect_ratio(p, coeffs),
    )


@lru_cache(maxsize=None)
def _radius_lattice(m: int = 8, edge_div: int = 16) -> np.ndarray:
    """Degree-m sample lattice plus extra points along each edge of T0."""
    pts = [(i / m, j / m) for i in range(m + 1) for j in range(m + 1 - i)]
    for k in range(1, edge_div):
        t = k / edge_div
        pts += [(t, 0.0), (0.0, t), (t, 1.0 - t)]
    out = np.array(sorted(set(pts)))
    out.setflags(write=False)
    return out


def centroid_radius(p: int, coeffs: np.ndarray) -> tuple[np.ndarray, float]:
    """Patch center c = surface-measure mean of X over the patch and a
    conservative enclosing radius from a dense sample maximum."""
    rule = build_quadrature(p)
    jet = chart_jet_from_coeffs(p, coeffs, rule.nodes)
    w = np.asarray(rule.weights) * jet.jac
    c = (w @ jet.x) / w.sum()
    x_dense = koornwinder(p, _radius_lattice()) @ coeffs
    r = (1.0 + RADIUS_INFLATION) * float(np.max(np.linalg.norm(x_dense - c, axis=1)))
    return c, r


def aspect_ratio(p: int, coeffs: np.ndarray) -> float:
    """Root mean square over the patch of the ratio of the two eigenvalues
    of the first fundamental form (largest over smallest)."""
    rule = build_quadrature(p)
    jet = chart_jet_from_coeffs(p, coeffs, rule.nodes)
    e = np.einsum("ij,ij->i", jet.xu, jet.xu)
    f = np.einsum("ij,ij->i", jet.xu, jet.xv)
    g = np.einsum("ij,ij->i", jet.xv, jet.xv)
    disc = np.sqrt((e - g) ** 2 + 4 * f * f)
    lo = (e + g - disc) / 2
    hi = (e + g + disc) / 2
    if np.any(lo <= JAC_FLOOR):
        raise GeometryError("degenerate chart: vanishing metric eigenvalue")
    da = jet.jac * rule.weights
    return float(np.sqrt(np.sum((hi / lo) ** 2 * da) / np.sum(da)))


class SurfaceMesh:
    """Immutable collection of patches with node data cached at the shared
    order-p interpolation nodes.

    Arrays are indexed (patch, node, ...): points/xu/xv/normals are
    (Npat, n_p, 3); jacobians and weights (the J*w area weights) are
    (Npat, n_p).
    """

    def __init__(self, order: int, coeffs: np.ndarray):
        coeffs = np.ascontiguousarray(coeffs, dtype=float)
        if coeffs.ndim != 3 or coeffs.shape[1:] != (n_basis(order), 3):
            raise ValueError(f"coeffs must be (Npat, {n_basis(order)}, 3), got {coeffs.shape}")
        self.order = order
        self.coeffs = coeffs
        ns = build_interp_nodes(order)
        rule = build_quadrature(order)
        vals, du, dv = koornwinder_derivs(order, ns.nodes)
        self.points = np.einsum("lk,jkd->jld", vals, coeffs)
        self.xu = np.einsum("lk,jkd->jld", du, coeffs)
        self.xv = np.einsum("lk,jkd->jld", dv, coeffs)
        cr = np.cross(self.xu, self.xv)
        self.jacobians = np.linalg.norm(cr, axis=2)
        if np.any(self.jacobians <= JAC_FLOOR):
            j = int(np.argwhere(self.jacobians <= JAC_FLOOR)[0][0])
            raise GeometryError(f"degenerate chart on patch {j}")
        self.normals = cr / self.jacobians[..., None]
        self.weights = self.jacobians * rule.weights[None, :]
        x_rule = self.points  # interpolation nodes double as the order-p rule nodes
        self.centroids = (np.einsum("jl,jld->jd", self.weights, x_rule)
                          / self.weights.sum(axis=1)[:, None])
        dense = koornwinder(order, _radius_lattice())
        x_dense = np.einsum("lk,jkd->jld", dense, coeffs)
        dist = np.linalg.norm(x_dense - self.centroids[:, None, :], axis=2)
        self.radii = (1.0 + RADIUS_INFLATION) * dist.max(axis=1)
        self.aspects = np.array([aspect_ratio(order, c) for c in coeffs])
        self.q_far = np.zeros(len(coeffs), dtype=int)  # assigned by quadrature

    @property
    def npatches(self) -> int:
        return self.coeffs.shape[0]

    @property
    def nodes_per_patch(self) -> int:
        return n_basis(self.order)

    @property
    def total_points(self) -> int:
        return self.npatches * self.nodes_per_patch

    def patches(self) -> list[Patch]:
        return [
            Patch(
                id=j,
                order=self.order,
                coeffs=self.coeffs[j],
                centroid=self.centroids[j],
                radius=float(self.radii[j]),
                aspect=float(self.aspects[j]),
                q_far=int(self.q_far[j]) if self.q_far[j] > 0 else None,
            )
            for j in range(self.npatches)
        ]

    def chart_jet(self, j: int, uv: np.ndarray) -> ChartJet:
        return chart_jet_from_coeffs(self.order, self.coeffs[j], uv)

    def flat_points(self) -> np.ndarray:
        return self.points.reshape(-1, 3)

    def flat_normals(self) -> np.ndarray:
        return self.normals.reshape(-1, 3)

    def flat_weights(self) -> np.ndarray:
        return self.weights.reshape(-1)

    def area(self) -> float:
        return float(self.weights.sum())

    def signed_volume(self) -> float:
        """Divergence-theorem volume; positive means outward normals."""
        return float(np.einsum("jld,jld,jl->", self.points, self.normals, self.weights) / 3.0)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(f"order={self.order};npat={self.npatches};".encode())
        h.update(self.coeffs.tobytes())
        return h.hexdigest()

    def save_kpatch(self, path) -> None:
        with open(path, "w") as f:
            f.write(f"KPATCH {self.npatches} {self.order}\n")
            for j in range(self.npatches):
                for row in self.coeffs[j]:
                    f.write(f"{row[0]:.17e} {row[1]:.17e} {row[2]:.17e}\n")


def load_kpatch(path) -> SurfaceMesh:
    with open(path) as f:
        raw = [ln.strip() for ln in f]
    lines = [(i + 1, ln) for i, ln in enumerate(raw) if ln]
    if not lines:
        raise TableParseError("empty patch file", line=1)
    lineno, header = lines[0]
    tok = header.split()
    if tok[0] != "KPATCH" or len(tok) != 3:
        raise TableParseError("expected header 'KPATCH <Npat> <p>'", line=lineno)
    try:
        npat, p = int(tok[1]), int(tok[2])
    except ValueError:
        raise TableParseError("non-integer KPATCH header field", line=lineno) from None
    body = lines[1:]
    want = npat * n_basis(p)
    if len(body) != want:
        raise TableParseError(f"expected {want} coefficient lines, got {len(body)}", line=lineno)
    rows = []
    for no, ln in body:
        tokens = ln.split()
        if len(tokens) != 3:
            raise TableParseError(f"expected 3 fields, got {len(tokens)}", line=no)
        try:
            rows.append([float(t) for t in tokens])
        except ValueError as exc:
            raise TableParseError(str(exc), line=no) from None
    coeffs = np.array(rows).reshape(npat, n_basis(p), 3)
    return SurfaceMesh(p, coeffs)


def oversample_patch(mesh: SurfaceMesh, j: int, q: int):
    """Chart jets at the order-q rule nodes of patch j.

    Returns (points, normals, weights) with weights = rule weight times the
    area element, so plain sums integrate over the patch.
    """
    rule = build_quadrature(q)
    jet = mesh.chart_jet(j, rule.nodes)
    return jet.x, jet.normal, jet.jac * rule.weights


def _mesh_from_vertex_triangles(verts: np.ndarray, tris: np.ndarray, p: int,
                                project_unit_sphere: bool = False) -> SurfaceMesh:
    """Affine charts through triangle vertices, optionally radially projected."""
    uv = np.asarray(build_interp_nodes(p).nodes)
    nb = n_basis(p)
    coeffs = np.empty((len(tris), nb, 3))
    vmat = np.asarray(build_interp_nodes(p).matrix_v)
    for t, (ia, ib, ic) in enumerate(tris):
        a, b, c = verts[ia], verts[ib], verts[ic]
        pts = a + np.outer(uv[:, 0], b - a) + np.outer(uv[:, 1], c - a)
        if project_unit_sphere:
            pts = pts / np.linalg.norm(pts, axis=1)[:, None]
        coeffs[t] = vmat @ pts
    return SurfaceMesh(p, coeffs)


def gen_sphere(nrefine: int, p: int) -> SurfaceMesh:
    """Unit sphere from a refined octahedron: 8 * 4**nrefine patches.

    Refinement splits each spherical triangle at radially projected edge
    midpoints; every chart is the radial projection of an affine map, sampled
    at the interpolation nodes.
    """
    if nrefine < 0:
        raise ValueError("nrefine must be >= 0")
    verts = [np.array(v, dtype=float) for v in
             [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]]
    tris = []
    for sx in (1, -1):
        for sy in (1, -1):
            for sz in (1, -1):
                ia = 0 if sx > 0 else 1
                ib = 2 if sy > 0 else 3
                ic = 4 if sz > 0 else 5
                if sx * sy * sz > 0:
                    tris.append((ia, ib, ic))
                else:
                    tris.append((ia, ic, ib))
    edge_mid: dict[tuple[int, int], int] = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in edge_mid:
            m = verts[i] + verts[j]
            verts.append(m / np.linalg.norm(m))
            edge_mid[key] = len(verts) - 1
        return edge_mid[key]

    for _ in range(nrefine):
        nxt = []
        for ia, ib, ic in tris:
            mab = midpoint(ia, ib)
            mbc = midpoint(ib, ic)
            mca = midpoint(ic, ia)
            nxt += [(ia, mab, mca), (mab, ib, mbc), (mca, mbc, ic), (mab, mbc, mca)]
        tris = nxt
    return _mesh_from_vertex_triangles(np.array(verts), np.array(tris), p,
                                       project_unit_sphere=True)


STELLARATOR_DELTAS = {
    (-1, -1): 0.17,
    (-1, 0): 0.11,
    (0, 0): 1.0,
    (1, 0): 4.5,
    (2, 0): -0.25,
    (0, 1): 0.07,
    (2, 1): -0.45,
}


def stellarator_point(u, v):
    """Toroidal test surface; u is the poloidal angle, v the toroidal angle."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    x = np.zeros(np.broadcast(u, v).shape)
    y = np.zeros_like(x)
    z = np.zeros_like(x)
    for (i, j), d in STELLARATOR_DELTAS.items():
        arg = (1 - i) * u + j * v
        x = x + d * np.cos(v) * np.cos(arg)
        y = y + d * np.sin(v) * np.cos(arg)
        z = z + d * np.sin(arg)
    return np.stack([x, y, z], axis=-1)


def gen_stellarator(nu: int, nv: int, p: int) -> SurfaceMesh:
    """Stellarator-like torus from a 2*nu*nv triangulation of [0,2pi]^2."""
    if nu < 1 or nv < 1:
        raise ValueError("nu and nv must be >= 1")
    uv = np.asarray(build_interp_nodes(p).nodes)
    vmat = np.asarray(build_interp_nodes(p).matrix_v)
    du, dv = 2 * np.pi / nu, 2 * np.pi / nv
    coeffs = []
    for iu in range(nu):
        for iv in range(nv):
            u0, v0 = iu * du, iv * dv
            corners = [
                ((u0, v0), (u0 + du, v0), (u0, v0 + dv)),
                ((u0 + du, v0 + dv), (u0, v0 + dv), (u0 + du, v0)),
            ]
            for a, b, c in corners:
                uu = a[0] + uv[:, 0] * (b[0] - a[0]) + uv[:, 1] * (c[0] - a[0])
                vv = a[1] + uv[:, 0] * (b[1] - a[1]) + uv[:, 1] * (c[1] - a[1])
                coeffs.append(vmat @ stellarator_point(uu, vv))
    mesh = SurfaceMesh(p, np.array(coeffs))
    if mesh.signed_volume() < 0:
        # reparameterize every chart as X(v,u), which flips the normal
        swapped = koornwinder(p, uv[:, ::-1])
        flipped = np.einsum("nk,jkd->jnd", vmat @ swapped, mesh.coeffs)
        mesh = SurfaceMesh(p, flipped)
    return mesh


def import_flat_tri(path, p: int) -> SurfaceMesh:
    """Flat-triangle mesh file to a surface of affine charts.

    Format: `NVERT NTRI`, then NVERT lines `x y z`, then NTRI lines `i j k`
    (1-based, counterclockwise seen from outside).  If the file describes a
    closed surface oriented inward, all triangles are flipped.
    """
    with open(path) as f:
        raw = [ln.strip() for ln in f]
    lines = [(i + 1, ln) for i, ln in enumerate(raw) if ln and not ln.startswith("#")]
    if not lines:
        raise TableParseError("empty mesh file", line=1)
    lineno, header = lines[0]
    tok = header.split()
    if len(tok) != 2:
        raise TableParseError("expected header 'NVERT NTRI'", line=lineno)
    try:
        nvert, ntri = int(tok[0]), int(tok[1])
    except ValueError:
        raise TableParseError("non-integer mesh header field", line=lineno) from None
    if len(lines) - 1 != nvert + ntri:
        raise TableParseError(
            f"expected {nvert + ntri} body lines, got {len(lines) - 1}", line=lineno
        )
    verts = []
    for no, ln in lines[1 : 1 + nvert]:
        tokens = ln.split()
        if len(tokens) != 3:
            raise TableParseError(f"expected 3 vertex fields, got {len(tokens)}", line=no)
        try:
            verts.append([float(t) for t in tokens])
        except ValueError as exc:
            raise TableParseError(str(exc), line=no) from None
    verts = np.array(verts)
    tris = []
    for no, ln in lines[1 + nvert :]:
        tokens = ln.split()
        if len(tokens) != 3:
            raise TableParseError(f"expected 3 triangle fields, got {len(tokens)}", line=no)
        try:
            idx = [int(t) - 1 for t in tokens]
        except ValueError:
            raise TableParseError("non-integer vertex index", line=no) from None
        if min(idx) < 0 or max(idx) >= nvert:
            raise TableParseError(f"vertex index out of range 1..{nvert}", line=no)
        tris.append(idx)
    tris = np.array(tris, dtype=int)
    used = np.zeros(nvert, dtype=bool)
    used[tris.reshape(-1)] = True
    if not used.all():
        warnings.warn(f"{(~used).sum()} unreferenced vertices ignored", stacklevel=2)
    scale = np.ptp(verts, axis=0).max()
    for t, (ia, ib, ic) in enumerate(tris):
        area2 = np.linalg.norm(np.cross(verts[ib] - verts[ia], verts[ic] - verts[ia]))
        if area2 <= 1e-14 * scale * scale:
            raise GeometryError(f"degenerate triangle at index {t}")
    mesh = _mesh_from_vertex_triangles(verts, tris, p)
    vol = mesh.signed_volume()
    if vol < -1e-12 * scale**3:
        mesh = _mesh_from_vertex_triangles(verts, tris[:, [0, 2, 1]], p)
    return mesh

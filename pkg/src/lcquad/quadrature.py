"""Locally corrected quadrature for weakly singular layer potentials.

Per patch, targets fall into three regimes relative to the ball
B(c_j, eta*R_j):

* on the patch itself: singular integrals via target-split Duffy transforms
  (SelfMatrix),
* inside B(c_j, eta1*R_j): adaptive subdivision of the reference triangle
  with cached geometry (NearMatrix, adaptive part),
* in the remaining shell: a single non-adaptive rule whose order is chosen
  per target by moment agreement (NearMatrix, fixed-order part).

Everything is expressed through moment vectors m_i(x) = integral of
kernel(x, X(u,v)) K_i(u,v) J(u,v) over T0; a correction row for target x is
V^T m(x), mapping density node values to the potential at x.  All requested
kernels are integrated in one pass over shared nodes, which makes the
assembled matrices exactly linear in the kernel.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .basis import build_interp_nodes, build_quadrature, koornwinder, n_basis
from .errors import QuadratureError
from .geometry import SurfaceMesh
from .kernels import KernelSpec, kernel_matrix

Q_MAX_DEFAULT = 20
SLIVER_REL_AREA = 1e-14

T0_VERTS = (np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0]))


def default_eta(p: int) -> float:
    """Near-field multiplier recommended per discretization order."""
    if p <= 4:
        return 2.75
    if p <= 8:
        return 2.0
    return 1.25


@dataclass(frozen=True)
class NearParams:
    """Precision and near-field geometry parameters."""

    eps: float
    eta: float
    eta1: float = 1.25
    max_levels: int = 30
    eps_inflation: float = 5.0
    q_max: int = Q_MAX_DEFAULT

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.eta >= self.eta1 >= 1.0:
            raise ValueError("need eta >= eta1 >= 1")

    @staticmethod
    def for_order(p: int, eps: float, eta: float | None = None, **kw) -> "NearParams":
        return NearParams(eps=eps, eta=default_eta(p) if eta is None else eta, **kw)


@dataclass
class SelfMatrix:
    """Maps density node values to the patch's own-node self potentials."""

    patch: int
    mats: tuple  # one (n_p, n_p) complex matrix per kernel spec


@dataclass
class NearMatrix:
    """Correction rows for off-patch near targets of one patch."""

    patch: int
    target_ids: np.ndarray
    mats: tuple                 # one (ntargets, n_p) complex matrix per spec
    adaptive: np.ndarray        # bool per target
    q_far: np.ndarray           # fixed rule order per target (0 if adaptive)
    err_estimates: np.ndarray   # nonzero where best-effort (depth cap) applied
    accept_count: int = 0
    max_accept_ratio: float = 0.0


@dataclass
class FarOrderReport:
    """Far-field oversampling orders and the local scale they were tested at."""

    q: np.ndarray        # per-patch q_j
    d: np.ndarray        # per-patch scale d_j
    capped: np.ndarray   # per-patch flag: criterion unmet at q_max
    probes: list         # per-patch probe point arrays


class AdaptiveCache:
    """Per-(patch, triangle path) store of geometry and basis data.

    Values returned on a hit are the stored arrays themselves, so cached and
    uncached assembly are bitwise identical by construction.  lookups counts
    logical per-target uses (a fetch serving n targets counts n), so
    lookups - misses is the number of chart evaluations a per-target
    implementation would have performed but the cache avoided.
    """

    def __init__(self):
        self.store: dict = {}
        self.lookups = 0
        self.misses = 0

    def fetch(self, key, compute, uses=1):
        self.lookups += uses
        hit = self.store.get(key)
        if hit is None:
            self.misses += 1
            hit = compute()
            self.store[key] = hit
        return hit


def adaptive_stats(cache: AdaptiveCache | None) -> dict:
    if cache is None:
        return {"lookups": 0, "misses": 0, "saved": 0}
    return {
        "lookups": cache.lookups,
        "misses": cache.misses,
        "saved": cache.lookups - cache.misses,
    }


def patch_scale(mesh: SurfaceMesh, j: int) -> float:
    """d_j: smallest sqrt(J*w) over the patch's positive-weight rule nodes."""
    w = np.asarray(build_quadrature(mesh.order).weights)
    pos = w > 0
    return float(np.min(np.sqrt(mesh.jacobians[j, pos] * w[pos])))


def fibonacci_sphere(n: int) -> np.ndarray:
    """n deterministic, roughly equidistributed unit vectors."""
    i = np.arange(n)
    z = 1.0 - (2 * i + 1.0) / n
    theta = 2 * np.pi * i / ((1 + np.sqrt(5.0)) / 2)
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _as_spec_list(specs) -> list[KernelSpec]:
    if isinstance(specs, KernelSpec):
        return [specs]
    out = list(specs)
    if not out:
        raise ValueError("at least one kernel spec required")
    return out


def _tile_rows(arr: np.ndarray | None, idx) -> np.ndarray | None:
    return None if arr is None else arr[idx]


def _moment_kernel_matrix(spec: KernelSpec, tgt_x, tgt_n, src_x, src_n) -> np.ndarray:
    """Kernel matrix for moment assembly; adjoint targets use their normals."""
    return kernel_matrix(spec, tgt_x, src_x, src_normals=src_n, tgt_normals=tgt_n)


def _probe_kernel_matrix(spec: KernelSpec, probes, src_x, src_n) -> np.ndarray:
    """Kernel rows for far-order probing.

    Probe points carry no normals, so the adjoint family is probed through
    all three gradient components (rows stacked per component), which bounds
    any actual normal direction.
    """
    if spec.family == "adjoint":
        rows = []
        for d in range(3):
            e = np.zeros((len(probes), 3))
            e[:, d] = 1.0
            rows.append(kernel_matrix(spec, probes, src_x, tgt_normals=e))
        return np.vstack(rows)
    return kernel_matrix(spec, probes, src_x, src_normals=src_n)


def select_far_order(mesh: SurfaceMesh, j: int, near_points: np.ndarray,
                     specs, params: NearParams):
    """Smallest oversampled order q_j whose kernel moments have settled.

    The test compares the n_p moment vectors produced by the order-q and
    order-(q+1) rules at a probe set: the 10 farthest near targets, padded
    (when fewer than 20 near targets exist) with the farthest half of them
    plus 15 deterministic points on the near-field sphere.  Returns
    (q_j, capped, probes); capped means the criterion was still unmet
    at q_max.
    """
    specs = _as_spec_list(specs)
    c, r_ball = mesh.centroids[j], float(mesh.radii[j])
    near_points = np.asarray(near_points, dtype=float).reshape(-1, 3)
    if len(near_points) >= 20:
        d = np.linalg.norm(near_points - c, axis=1)
        probes = near_points[np.argsort(d)[-10:]]
    else:
        parts = []
        if len(near_points):
            d = np.linalg.norm(near_points - c, axis=1)
            keep = len(near_points) // 2
            if keep:
                parts.append(near_points[np.argsort(d)[-keep:]])
        parts.append(c + params.eta * r_ball * fibonacci_sphere(15))
        probes = np.vstack(parts)
    tol = params.eps * patch_scale(mesh, j) / build_interp_nodes(mesh.order).norm_v

    p = mesh.order
    basis_cache = {}

    def moments(q):
        nodes, weights = _interior_rule(q)
        jet = mesh.chart_jet(j, nodes)
        if q not in basis_cache:
            basis_cache[q] = koornwinder(p, nodes)
        wb = (jet.jac * weights)[:, None] * basis_cache[q]
        return [_probe_kernel_matrix(s, probes, jet.x, jet.normal) @ wb for s in specs]

    prev = moments(p)
    for q in range(p, params.q_max):
        cur = moments(q + 1)
        diff = max(
            float(np.max(np.linalg.norm(a - b, axis=1))) for a, b in zip(prev, cur)
        )
        if diff <= tol:
            return q, False, probes
        prev = cur
    warnings.warn(
        f"far-field order cap {params.q_max} reached on patch {j}; "
        "flagging for adaptive far evaluation", stacklevel=2
    )
    return params.q_max, True, probes


@lru_cache(maxsize=None)
def _gauss01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1) / 2, w / 2


@lru_cache(maxsize=None)
def _interior_rule(q: int):
    """Collapsed Gauss product rule on T0, exact to total degree q.

    All nodes are strictly interior and all weights positive, which the
    adaptive subdivision requires: rules with boundary nodes would place
    kernel evaluations arbitrarily close to targets that sit on a patch
    edge shared with a neighboring patch.
    """
    na = (q + 3) // 2
    nb = (q + 2) // 2
    a, wa = _gauss01(na)
    b, wb = _gauss01(nb)
    aa, bbv = np.meshgrid(a, b, indexing="ij")
    nodes = np.stack([aa.ravel(), (bbv * (1 - aa)).ravel()], axis=1)
    weights = (np.outer(wa, wb) * (1 - aa).reshape(na, nb)).ravel()
    return nodes, weights


def _cross2(e1, e2) -> float:
    return float(e1[0] * e2[1] - e1[1] * e2[0])


def _project_to_t0(uv: np.ndarray) -> np.ndarray:
    u = np.maximum(uv[:, 0], 0.0)
    v = np.maximum(uv[:, 1], 0.0)
    s = u + v
    over = s > 1.0
    if np.any(over):
        u[over] /= s[over]
        v[over] /= s[over]
    return np.stack([u, v], axis=1)


@lru_cache(maxsize=None)
def _preimage_lattice(m: int = 12) -> np.ndarray:
    pts = [(i / m, k / m) for i in range(m + 1) for k in range(m + 1 - i)]
    return np.array(pts)


def chart_preimage(mesh: SurfaceMesh, j: int, pts: np.ndarray, iters: int = 40):
    """Closest-point preimages on patch j for a batch of 3-space points.

    Lattice seeding followed by projected Gauss-Newton on |X(u,v) - x|^2.
    Returns (uv, dist) with uv clipped to T0.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    lat = _preimage_lattice()
    lx = mesh.chart_jet(j, lat).x
    d2 = np.sum((pts[:, None, :] - lx[None, :, :]) ** 2, axis=2)
    uv = lat[np.argmin(d2, axis=1)].copy()
    for _ in range(iters):
        jet = mesh.chart_jet(j, uv)
        res = pts - jet.x
        gu = np.einsum("nd,nd->n", res, jet.xu)
        gv = np.einsum("nd,nd->n", res, jet.xv)
        auu = np.einsum("nd,nd->n", jet.xu, jet.xu)
        auv = np.einsum("nd,nd->n", jet.xu, jet.xv)
        avv = np.einsum("nd,nd->n", jet.xv, jet.xv)
        det = auu * avv - auv * auv
        du = (avv * gu - auv * gv) / det
        dv = (auu * gv - auv * gu) / det
        new = _project_to_t0(uv + np.stack([du, dv], axis=1))
        step = np.max(np.abs(new - uv))
        uv = new
        if step < 1e-15:
            break
    jet = mesh.chart_jet(j, uv)
    return uv, np.linalg.norm(jet.x - pts, axis=1)


def _duffy_points(tri, n: int):
    """Tensor rule on the sub-triangle, clustered at its first vertex."""
    a_vert, b_vert, c_vert = tri
    ga, gw = _gauss01(n)
    aa, bb = np.meshgrid(ga, ga, indexing="ij")
    aa, bb = aa.ravel(), bb.ravel()
    ww = np.outer(gw, gw).ravel()
    uv = (a_vert[None, :]
          + aa[:, None] * (b_vert - a_vert)[None, :]
          + (aa * bb)[:, None] * (c_vert - b_vert)[None, :])
    area2 = abs(_cross2(b_vert - a_vert, c_vert - a_vert))
    return uv, ww * area2 * aa


def _split_at(u0: float, v0: float):
    """Sub-triangles of T0 sharing the vertex (u0, v0); slivers dropped."""
    t = np.array([u0, v0])
    tris = []
    for i in range(3):
        b, c = T0_VERTS[i], T0_VERTS[(i + 1) % 3]
        area = abs(_cross2(b - t, c - t)) / 2
        if area / 0.5 > SLIVER_REL_AREA:
            tris.append((t, b, c))
    return tris


def _duffy_moments(mesh: SurfaceMesh, j: int, x_t: np.ndarray,
                   n_t: np.ndarray | None, uv0, specs, tol: float,
                   n_start: int, n_cap: int, label: str):
    """Converged singular moment vectors for one target on patch j.

    T0 is split into sub-triangles joined at the target preimage uv0; a
    Duffy-transformed tensor Gauss rule on each is doubled until the moment
    vectors settle below tol.
    """
    p = mesh.order
    tris = _split_at(float(uv0[0]), float(uv0[1]))
    x_t = np.atleast_2d(x_t)
    n_t = None if n_t is None else np.atleast_2d(n_t)

    def run(n):
        m = [np.zeros(n_basis(p), dtype=complex) for _ in specs]
        for tri in tris:
            uv, w_duffy = _duffy_points(tri, n)
            jet = mesh.chart_jet(j, uv)
            wb = (jet.jac * w_duffy)[:, None] * koornwinder(p, uv)
            for s, spec in enumerate(specs):
                row = _moment_kernel_matrix(spec, x_t, n_t, jet.x, jet.normal)
                m[s] += row[0] @ wb
        return m

    n = n_start
    prev = run(n)
    while True:
        n *= 2
        if n > n_cap:
            raise QuadratureError(
                f"singular quadrature failed to converge on patch {j}, "
                f"{label} (Gauss size cap {n_cap})"
            )
        cur = run(n)
        diff = max(float(np.linalg.norm(a - b)) for a, b in zip(prev, cur))
        if diff <= tol:
            return cur
        prev = cur


def self_matrix(mesh: SurfaceMesh, j: int, specs, params: NearParams,
                n_gauss_start: int = 8, n_gauss_cap: int = 96) -> SelfMatrix:
    """Singular self-interaction matrices for one patch.

    Each target node splits T0 into sub-triangles joined at its preimage;
    Duffy-transformed tensor Gauss rules (doubled until the moment vectors
    settle below eps*d_j/normV) integrate kernel * basis * area element.
    """
    specs = _as_spec_list(specs)
    p = mesh.order
    nodes = np.asarray(build_interp_nodes(p).nodes)
    vmat = np.asarray(build_interp_nodes(p).matrix_v)
    tol = params.eps * patch_scale(mesh, j) / build_interp_nodes(p).norm_v
    n0 = max(p + 2, n_gauss_start)
    mats = [np.empty((len(nodes), n_basis(p)), dtype=complex) for _ in specs]
    for t, uv0 in enumerate(nodes):
        m = _duffy_moments(mesh, j, mesh.points[j, t], mesh.normals[j, t],
                           uv0, specs, tol, n0, n_gauss_cap, f"node {t}")
        for s in range(len(specs)):
            mats[s][t] = m[s] @ vmat
    return SelfMatrix(patch=j, mats=tuple(mats))


def _tri_children(tri):
    a, b, c = tri
    ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
    return [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]


def _tri_from_path(path) -> tuple:
    tri = T0_VERTS
    for step in path:
        tri = _tri_children(tri)[step]
    return tri


def near_matrix(mesh: SurfaceMesh, j: int, target_ids: np.ndarray,
                target_points: np.ndarray, target_normals: np.ndarray | None,
                specs, params: NearParams,
                cache: AdaptiveCache | None = None) -> NearMatrix:
    """Correction rows for the off-patch near targets of patch j.

    Targets inside eta1*R_j of the ball center get adaptive subdivision;
    the rest of the near shell gets a per-target fixed-order rule chosen by
    moment agreement between consecutive orders.
    """
    specs = _as_spec_list(specs)
    if any(s.needs_tgt_normal for s in specs) and target_normals is None:
        raise ValueError("adjoint kernels need target normals for near targets")
    p = mesh.order
    nb = n_basis(p)
    target_ids = np.asarray(target_ids, dtype=int)
    tx = np.ascontiguousarray(target_points, dtype=float).reshape(-1, 3)
    tn = None if target_normals is None else \
        np.ascontiguousarray(target_normals, dtype=float).reshape(-1, 3)
    ntgt = len(tx)
    vmat = np.asarray(build_interp_nodes(p).matrix_v)
    d_j = patch_scale(mesh, j)
    norm_v = build_interp_nodes(p).norm_v
    tol = params.eps * d_j / norm_v

    dist = np.linalg.norm(tx - mesh.centroids[j], axis=1)
    adaptive_mask = dist <= params.eta1 * mesh.radii[j]
    moments = [np.zeros((ntgt, nb), dtype=complex) for _ in specs]
    q_far_used = np.zeros(ntgt, dtype=int)
    err_est = np.zeros(ntgt)

    # fixed-order shell targets: smallest q agreeing with q+1 at this target
    shell = np.flatnonzero(~adaptive_mask)
    if len(shell):
        sx = tx[shell]
        sn = _tile_rows(tn, shell)

        def shell_moments(q, rows):
            rule = build_quadrature(q)
            jet = mesh.chart_jet(j, rule.nodes)
            wb = (jet.jac * rule.weights)[:, None] * koornwinder(p, rule.nodes)
            return [
                _moment_kernel_matrix(s, sx[rows], _tile_rows(sn, rows),
                                      jet.x, jet.normal) @ wb
                for s in specs
            ]

        unresolved = np.arange(len(shell))
        prev = shell_moments(p, unresolved)
        for q in range(p, params.q_max):
            cur = shell_moments(q + 1, unresolved)
            diff = np.max(
                np.stack([np.linalg.norm(a - b, axis=1) for a, b in zip(prev, cur)]),
                axis=0,
            )
            done = diff <= tol
            done_rows = unresolved[done]
            for s in range(len(specs)):
                moments[s][shell[done_rows]] = prev[s][done]
            q_far_used[shell[done_rows]] = q
            unresolved = unresolved[~done]
            if not len(unresolved):
                break
            prev = [m[~done] for m in cur]
        if len(unresolved):
            # accuracy-safe fallback: treat stubborn shell targets adaptively
            adaptive_mask[shell[unresolved]] = True

    # targets lying on the patch itself (duplicated boundary nodes shared
    # with neighboring patches) are singular, not near: Duffy at the preimage
    accept_count = 0
    max_ratio = 0.0
    adap = np.flatnonzero(adaptive_mask)
    if len(adap):
        uv_pre, dist_pre = chart_preimage(mesh, j, tx[adap])
        onpatch = dist_pre <= 1e-9 * mesh.radii[j]
        for r in np.flatnonzero(onpatch):
            t_row = adap[r]
            # a target on the patch itself is handled like a self node: the
            # chart normal at its preimage replaces the stored target normal
            # (a foreign node normal differs by the ridge angle, which makes
            # the adjoint kernel's tangential part non-integrable)
            loc_n = mesh.chart_jet(j, uv_pre[r][None]).normal
            m = _duffy_moments(
                mesh, j, tx[t_row], loc_n, uv_pre[r], specs,
                tol, max(p + 2, 8), 96, f"target {target_ids[t_row]}",
            )
            for s in range(len(specs)):
                moments[s][t_row] = m[s]
        adap = adap[~onpatch]

    # adaptive targets: level-synchronous subdivision with shared geometry
    a_nodes, a_weights = _interior_rule(min(p + 3, params.q_max))
    if len(adap):
        ax = tx[adap]
        an = _tile_rows(tn, adap)

        def payload(path, uses):
            def compute():
                tri = _tri_from_path(path)
                uv = (tri[0][None, :]
                      + np.outer(a_nodes[:, 0], tri[1] - tri[0])
                      + np.outer(a_nodes[:, 1], tri[2] - tri[0]))
                jet = mesh.chart_jet(j, uv)
                area_fac = abs(_cross2(tri[1] - tri[0], tri[2] - tri[0]))
                wb = (jet.jac * a_weights * area_fac)[:, None] * koornwinder(p, uv)
                return jet.x, jet.normal, wb
            if cache is None:
                return compute()
            return cache.fetch((j, path), compute, uses)

        def tri_moments(path, rows):
            x, n, wb = payload(path, len(rows))
            return [
                _moment_kernel_matrix(s, ax[rows], _tile_rows(an, rows), x, n) @ wb
                for s in specs
            ]

        acc = [np.zeros((len(adap), nb), dtype=complex) for _ in specs]
        nq_r = len(a_weights)
        state = {"accept": 0, "ratio": 0.0, "warned": False}

        def process_group(ents, rows, level, nxt):
            t_x = ax[rows]
            t_n = _tile_rows(an, rows)
            kid_paths = [e[0] + (i,) for e in ents for i in range(4)]
            pay = [payload(kp, len(rows)) for kp in kid_paths]
            src_x = np.concatenate([q[0] for q in pay])
            src_n = np.concatenate([q[1] for q in pay])
            kmats = [
                _moment_kernel_matrix(s, t_x, t_n, src_x, src_n) for s in specs
            ]
            thresh = (params.eps_inflation * params.eps * (4.0 ** -level)
                      * d_j / norm_v)
            for e_idx, (path, _, parent) in enumerate(ents):
                kid_m = []
                for i in range(4):
                    sl = slice((4 * e_idx + i) * nq_r, (4 * e_idx + i + 1) * nq_r)
                    wb = pay[4 * e_idx + i][2]
                    kid_m.append([km[:, sl] @ wb for km in kmats])
                child_sum = [
                    kid_m[0][s] + kid_m[1][s] + kid_m[2][s] + kid_m[3][s]
                    for s in range(len(specs))
                ]
                diff = np.max(
                    np.stack([
                        np.linalg.norm(parent[s] - child_sum[s], axis=1)
                        for s in range(len(specs))
                    ]),
                    axis=0,
                )
                ok = diff < thresh
                if level + 1 >= params.max_levels and not np.all(ok):
                    if not state["warned"]:
                        warnings.warn(
                            f"adaptive depth cap on patch {j}; best-effort rows",
                            stacklevel=2,
                        )
                        state["warned"] = True
                    err_est[adap[rows[~ok]]] = np.maximum(
                        err_est[adap[rows[~ok]]], diff[~ok]
                    )
                    ok = np.ones_like(ok)
                if np.any(ok):
                    sel = rows[ok]
                    for s in range(len(specs)):
                        acc[s][sel] += child_sum[s][ok]
                    state["accept"] += int(np.sum(ok))
                    state["ratio"] = max(
                        state["ratio"], float(np.max(diff[ok] / thresh))
                    )
                bad = ~ok
                if np.any(bad):
                    bad_rows = rows[bad]
                    for i in range(4):
                        nxt.append(
                            (path + (i,), bad_rows, [m[bad] for m in kid_m[i]])
                        )

        root_rows = np.arange(len(adap))
        # pending entries: (path, target rows, parent moments per spec);
        # parent moments are carried down from the child evaluation one
        # level up, so each triangle's moments are computed exactly once
        pending = [((), root_rows, tri_moments((), root_rows))]
        level = 0
        while pending:
            nxt = []
            # batch kernel evaluation over entries sharing a target row set
            groups: dict = {}
            for ent in pending:
                groups.setdefault(ent[1].tobytes(), []).append(ent)
            for key in sorted(groups):
                all_ents = groups[key]
                rows = all_ents[0][1]
                # bound each batched kernel matrix to ~2e6 entries
                step = max(1, int(2e6 / max(1, 4 * nq_r * len(rows))))
                for lo in range(0, len(all_ents), step):
                    process_group(all_ents[lo:lo + step], rows, level, nxt)
            pending = nxt
            level += 1
        accept_count = state["accept"]
        max_ratio = state["ratio"]
        for s in range(len(specs)):
            moments[s][adap] = acc[s]

    mats = tuple(m @ vmat for m in moments)
    return NearMatrix(
        patch=j,
        target_ids=target_ids,
        mats=mats,
        adaptive=adaptive_mask,
        q_far=q_far_used,
        err_estimates=err_est,
        accept_count=accept_count,
        max_accept_ratio=max_ratio,
    )

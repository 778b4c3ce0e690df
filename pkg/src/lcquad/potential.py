"""End-to-end layer-potential evaluation.

precompute() assembles everything that depends on the surface and the
requested kernels but not on the density: near lists from an octree,
per-patch oversampling orders, singular self blocks, near correction rows,
and the oversampled source data.  apply() then evaluates the potential by
subtract-and-add: a pluggable far-field accelerator sums all oversampled
sources at all targets, direct near/self contributions are subtracted
patchwise, and the corrected rows are added back.  apply_skip_near()
instead omits the near pairs inside the accelerator's direct phase, which
avoids the subtraction's cancellation at the price of a slower direct sum.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .basis import build_interp_nodes, koornwinder, n_basis
from .errors import AcceleratorError, CacheMismatchError, UnsupportedFeatureError
from .geometry import SurfaceMesh
from .kernels import KernelSpec, kernel_matrix
from .octree import build_near_lists, build_tree
from .quadrature import (
    AdaptiveCache,
    NearParams,
    _interior_rule,
    adaptive_stats,
    fibonacci_sphere,
    near_matrix,
    select_far_order,
    self_matrix,
)

MATRIX_CHUNK = 2_000_000


@dataclass
class Potential:
    """Potential values at the registered targets for one kernel."""

    points: np.ndarray        # (nt, 3)
    values: np.ndarray        # (nt,) complex
    surface_node: np.ndarray  # node id for on-surface targets, -1 otherwise
    label: str


class QuadCache:
    """Density-independent data for evaluating layer potentials on one mesh.

    Targets are the N surface nodes followed by any registered off-surface
    points.  Oversampled sources are stored patch-contiguously
    (src_offsets[j]:src_offsets[j+1] is patch j); excluded[j] lists the
    target rows whose direct contribution from patch j is replaced by the
    corrected self/near rows.
    """

    def __init__(self, mesh, specs, params, q, capped, src_x, src_n, src_w,
                 src_offsets, interp, selfs, nears, near_lists, tgt_x, tgt_n,
                 tgt_patch, excluded, metrics):
        self.mesh = mesh
        self.specs = specs
        self.params = params
        self.q = q
        self.capped = capped
        self.src_x = src_x
        self.src_n = src_n
        self.src_w = src_w
        self.src_offsets = src_offsets
        self.interp = interp
        self.selfs = selfs
        self.nears = nears
        self.near_lists = near_lists
        self.tgt_x = tgt_x
        self.tgt_n = tgt_n
        self.tgt_patch = tgt_patch
        self.excluded = excluded
        self.metrics = metrics

    @property
    def n_surface(self) -> int:
        return self.mesh.total_points

    @property
    def n_over(self) -> int:
        return len(self.src_x)

    @property
    def alpha(self) -> float:
        return self.n_over / self.n_surface

    def own_rows(self, j: int) -> np.ndarray:
        np_ = self.mesh.nodes_per_patch
        return np.arange(j * np_, (j + 1) * np_)


def _spec_list(specs) -> list[KernelSpec]:
    if isinstance(specs, KernelSpec):
        return [specs]
    out = list(specs)
    if not out:
        raise ValueError("at least one kernel spec required")
    return out


def precompute(mesh: SurfaceMesh, specs, params: NearParams,
               targets: np.ndarray | None = None,
               target_normals: np.ndarray | None = None,
               s_leaf: int = 40) -> QuadCache:
    """Assemble the density-independent quadrature data for a mesh.

    Surface nodes are always registered as targets; `targets` adds
    off-surface evaluation points.  Adjoint kernels need `target_normals`
    for any off-surface targets.
    """
    t0 = time.perf_counter()
    specs = _spec_list(specs)
    p = mesh.order
    npat = mesh.npatches
    n_p = n_basis(p)
    N = mesh.total_points

    surf_x = mesh.flat_points()
    surf_n = mesh.flat_normals()
    extra = (np.empty((0, 3)) if targets is None
             else np.atleast_2d(np.asarray(targets, dtype=float)))
    needs_tn = any(s.needs_tgt_normal for s in specs)
    if len(extra) and target_normals is None and needs_tn:
        raise ValueError("adjoint kernels need target normals for "
                         "off-surface targets")
    extra_n = (np.zeros((len(extra), 3)) if target_normals is None
               else np.atleast_2d(np.asarray(target_normals, dtype=float)))
    if len(extra_n) != len(extra):
        raise ValueError("target_normals must match targets")
    tgt_x = np.vstack([surf_x, extra])
    tgt_n = np.vstack([surf_n, extra_n])
    tgt_patch = np.concatenate([
        np.repeat(np.arange(npat), n_p),
        np.full(len(extra), -1, dtype=int),
    ])

    ball = params.eta * mesh.radii
    tree = build_tree(mesh.centroids, ball, tgt_x, s_leaf)
    near_lists = build_near_lists(tree, ball, tgt_patch)

    vmat = np.asarray(build_interp_nodes(p).matrix_v)
    acache = AdaptiveCache()
    q = np.zeros(npat, dtype=int)
    capped = np.zeros(npat, dtype=bool)
    src_parts, nrm_parts, w_parts, interp = [], [], [], []
    selfs, nears = [], []
    src_offsets = np.zeros(npat + 1, dtype=int)
    for j in range(npat):
        ids = near_lists[j]
        q[j], capped[j], _ = select_far_order(mesh, j, tgt_x[ids], specs, params)
        nodes, wts = _interior_rule(int(q[j]))
        jet = mesh.chart_jet(j, nodes)
        src_parts.append(jet.x)
        nrm_parts.append(jet.normal)
        w_parts.append(jet.jac * wts)
        interp.append(koornwinder(p, nodes) @ vmat)
        src_offsets[j + 1] = src_offsets[j] + len(wts)
        selfs.append(self_matrix(mesh, j, specs, params))
        nears.append(near_matrix(mesh, j, ids, tgt_x[ids],
                                 tgt_n[ids] if needs_tn else None,
                                 specs, params, cache=acache))
    mesh.q_far[:] = q

    excluded = [
        np.union1d(near_lists[j], np.arange(j * n_p, (j + 1) * n_p))
        for j in range(npat)
    ]
    t_init = time.perf_counter() - t0
    n_over = int(src_offsets[-1])
    sum_near = int(sum(len(ids) for ids in near_lists))
    metrics = {
        "alpha": n_over / N,
        "m": n_p * (sum_near + n_p) / N,
        "m_alt": n_p * (sum_near + npat * n_p) / N,
        "t_init": t_init,
        "s_init": N / t_init,
        "a_max": float(mesh.aspects.max()),
        "a_avg": float(mesh.aspects.mean()),
        "adaptive_cache": adaptive_stats(acache),
        "n_over": n_over,
        "capped_patches": int(capped.sum()),
    }
    return QuadCache(mesh, specs, params, q, capped,
                     np.vstack(src_parts), np.vstack(nrm_parts),
                     np.concatenate(w_parts), src_offsets, interp,
                     selfs, nears, near_lists, tgt_x, tgt_n, tgt_patch,
                     excluded, metrics)


def extend_targets(cache: QuadCache, points: np.ndarray,
                   normals: np.ndarray | None = None) -> QuadCache:
    """New cache with extra evaluation targets registered incrementally.

    Shares the oversampled sources, interpolation operators, and self
    matrices of the existing cache; near-correction rows are built only for
    the new points that fall inside a patch's near ball.
    """
    from .quadrature import NearMatrix

    pts = np.atleast_2d(np.asarray(points, dtype=float))
    mesh = cache.mesh
    needs_tn = any(s.needs_tgt_normal for s in cache.specs)
    if len(pts) and normals is None and needs_tn:
        raise ValueError("adjoint kernels need target normals for "
                         "off-surface targets")
    nrm = (np.zeros((len(pts), 3)) if normals is None
           else np.atleast_2d(np.asarray(normals, dtype=float)))
    if len(nrm) != len(pts):
        raise ValueError("target_normals must match targets")
    base = len(cache.tgt_x)
    tgt_x = np.vstack([cache.tgt_x, pts])
    tgt_n = np.vstack([cache.tgt_n, nrm])
    tgt_patch = np.concatenate([cache.tgt_patch,
                                np.full(len(pts), -1, dtype=int)])
    ball = cache.params.eta * mesh.radii
    acache = AdaptiveCache()
    nears, near_lists = [], []
    for j in range(mesh.npatches):
        d = np.linalg.norm(pts - mesh.centroids[j], axis=1)
        new_ids = base + np.flatnonzero(d < ball[j])
        old = cache.nears[j]
        if len(new_ids):
            add = near_matrix(mesh, j, new_ids, tgt_x[new_ids],
                              tgt_n[new_ids] if needs_tn else None,
                              cache.specs, cache.params, cache=acache)
            nm = NearMatrix(
                patch=j,
                target_ids=np.concatenate([old.target_ids, add.target_ids]),
                mats=tuple(np.vstack([old.mats[s], add.mats[s]])
                           for s in range(len(cache.specs))),
                adaptive=np.concatenate([old.adaptive, add.adaptive]),
                q_far=np.concatenate([old.q_far, add.q_far]),
                err_estimates=np.concatenate([old.err_estimates,
                                              add.err_estimates]))
        else:
            nm = old
        nears.append(nm)
        near_lists.append(nm.target_ids)
    n_p = n_basis(mesh.order)
    excluded = [np.union1d(near_lists[j], np.arange(j * n_p, (j + 1) * n_p))
                for j in range(mesh.npatches)]
    return QuadCache(mesh, cache.specs, cache.params, cache.q, cache.capped,
                     cache.src_x, cache.src_n, cache.src_w, cache.src_offsets,
                     cache.interp, cache.selfs, nears, near_lists,
                     tgt_x, tgt_n, tgt_patch, excluded, dict(cache.metrics))


def _accel_sources(spec: KernelSpec, strengths: np.ndarray, src_n: np.ndarray):
    """Monopole/dipole decomposition of one layer kernel."""
    if spec.family == "single":
        return strengths, None, None, False
    if spec.family == "double":
        return None, strengths, src_n, False
    if spec.family == "adjoint":
        return strengths, None, None, True
    return spec.beta_s * strengths, spec.beta_d * strengths, src_n, False


def _apply(cache: QuadCache, sigma, accelerator, skip: bool, which=None):
    t0 = time.perf_counter()
    sigma = np.asarray(sigma, dtype=complex).reshape(-1)
    N = cache.n_surface
    if len(sigma) != N:
        raise ValueError(f"density must have {N} entries, got {len(sigma)}")
    mesh = cache.mesh
    n_p = mesh.nodes_per_patch
    sig_pat = sigma.reshape(mesh.npatches, n_p)
    strengths = np.concatenate([
        cache.src_w[cache.src_offsets[j]:cache.src_offsets[j + 1]]
        * (cache.interp[j] @ sig_pat[j])
        for j in range(mesh.npatches)
    ])

    out = []
    for s in (range(len(cache.specs)) if which is None else which):
        spec = cache.specs[s]
        mono, dip, dvec, wgrad = _accel_sources(spec, strengths, cache.src_n)
        pot = accelerator.evaluate(
            spec.k, cache.src_x, cache.tgt_x, mono=mono, dipstr=dip,
            dipvec=dvec, want_grad=wgrad,
            tgt_normals=cache.tgt_n if wgrad else None,
            src_offsets=cache.src_offsets, excluded=cache.excluded,
            exclude_near=skip,
        )
        for j in range(mesh.npatches):
            lo, hi = cache.src_offsets[j], cache.src_offsets[j + 1]
            if not skip:
                rows = cache.excluded[j]
                if len(rows):
                    km = kernel_matrix(
                        spec, cache.tgt_x[rows], cache.src_x[lo:hi],
                        src_normals=cache.src_n[lo:hi],
                        tgt_normals=cache.tgt_n[rows] if wgrad else None,
                    )
                    pot[rows] -= km @ strengths[lo:hi]
            ids = cache.nears[j].target_ids
            if len(ids):
                pot[ids] += cache.nears[j].mats[s] @ sig_pat[j]
            pot[cache.own_rows(j)] += cache.selfs[j].mats[s] @ sig_pat[j]
        out.append(Potential(
            points=cache.tgt_x, values=pot,
            surface_node=np.where(np.arange(len(cache.tgt_x)) < N,
                                  np.arange(len(cache.tgt_x)), -1),
            label=spec.label(),
        ))
    t_lp = time.perf_counter() - t0
    cache.metrics["t_lp"] = t_lp
    cache.metrics["s_lp"] = N / t_lp
    return out


def apply(cache: QuadCache, sigma, accelerator, which=None):
    """Layer potentials at all registered targets, one per kernel spec.

    Subtract-and-add: the accelerator sums every oversampled source at every
    target, each patch's direct contribution at its excluded targets is
    subtracted, and the corrected near/self rows are added.  `which` selects
    a subset of the cache's kernel specs by index (default: all).
    """
    return _apply(cache, sigma, accelerator, skip=False, which=which)


def apply_skip_near(cache: QuadCache, sigma, accelerator, which=None):
    """Like apply(), but near pairs are omitted inside the direct phase.

    Requires an accelerator that supports near-pair exclusion; avoids the
    subtract step's cancellation when a near contribution is large.
    """
    if not getattr(accelerator, "supports_exclusion", False):
        raise UnsupportedFeatureError(
            "accelerator does not expose a near-pair exclusion hook")
    return _apply(cache, sigma, accelerator, skip=True, which=which)


def _pair_matrix(k, tgts, srcs, mono, dipstr, dipvec, want_grad, tgt_normals,
                 src_sel=None):
    """Direct contribution of (a subset of) sources at the given targets."""
    pot = np.zeros(len(tgts), dtype=complex)
    if src_sel is not None:
        srcs = srcs[src_sel]
        mono = None if mono is None else mono[src_sel]
        dipstr = None if dipstr is None else dipstr[src_sel]
        dipvec = None if dipvec is None else dipvec[src_sel]
    if len(srcs) == 0:
        return pot
    if mono is not None:
        fam = KernelSpec("adjoint" if want_grad else "single", k=k)
        pot += kernel_matrix(fam, tgts, srcs, tgt_normals=tgt_normals) @ mono
    if dipstr is not None:
        fam = KernelSpec("double", k=k)
        pot += kernel_matrix(fam, tgts, srcs, src_normals=dipvec) @ dipstr
    return pot


class DirectAccelerator:
    """Exact direct summation; the reference FarAccelerator."""

    eps_fmm = 0.0
    supports_exclusion = True

    def evaluate(self, k, src_x, targets, mono=None, dipstr=None, dipvec=None,
                 want_grad=False, tgt_normals=None, src_offsets=None,
                 excluded=None, exclude_near=False):
        if want_grad and dipstr is not None:
            raise UnsupportedFeatureError(
                "gradient of dipole sources is hypersingular and unsupported")
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        nt = len(targets)
        pot = np.zeros(nt, dtype=complex)
        if not exclude_near:
            step = max(1, MATRIX_CHUNK // max(1, len(src_x)))
            for lo in range(0, nt, step):
                sl = slice(lo, min(lo + step, nt))
                pot[sl] = _pair_matrix(
                    k, targets[sl], src_x, mono, dipstr, dipvec, want_grad,
                    None if tgt_normals is None else tgt_normals[sl])
            return pot
        if src_offsets is None or excluded is None:
            raise UnsupportedFeatureError(
                "exclusion requires per-patch source offsets and excluded rows")
        keep = np.ones(nt, dtype=bool)
        for j in range(len(src_offsets) - 1):
            sel = slice(src_offsets[j], src_offsets[j + 1])
            keep[:] = True
            keep[excluded[j]] = False
            rows = np.flatnonzero(keep)
            pot[rows] += _pair_matrix(
                k, targets[rows], src_x, mono, dipstr, dipvec, want_grad,
                None if tgt_normals is None else tgt_normals[rows],
                src_sel=sel)
        return pot


def direct_accelerator() -> DirectAccelerator:
    return DirectAccelerator()


class TreecodeAccelerator:
    """Single-expansion treecode with proxy equivalent sources.

    Upward pass fits monopole strengths on a proxy sphere per box by
    least-squares matching the box field on a larger check sphere; internal
    boxes are fit from their children's proxies.  A target leaf interacts
    with a box through its proxies when boxRadius/(dist - leafRadius) < theta
    and no excluded (patch, target) pair links them; otherwise it descends,
    and source leaves are summed directly.
    """

    supports_exclusion = True

    def __init__(self, eps_fmm: float, theta: float = 0.5,
                 n_proxy: int | None = None, leaf_size: int = 48,
                 k_guard: float = 8.0):
        if not 0 < theta <= 1.0:
            raise ValueError("theta must be in (0, 1]")
        if not eps_fmm > 0:
            raise ValueError("eps_fmm must be positive")
        self.eps_fmm = float(eps_fmm)
        self.theta = float(theta)
        if n_proxy is None:
            ratio = min(0.93, 0.85 * theta)
            degree = int(np.ceil(np.log(eps_fmm) / np.log(ratio)))
            n_proxy = min(1600, max(36, (degree + 1) ** 2))
        self.n_proxy = int(n_proxy)
        self.leaf_size = int(leaf_size)
        self.k_guard = float(k_guard)

    def _operators(self, level_half: float, k: complex, n_proxy: int):
        rp = 1.05 * np.sqrt(3.0) * level_half
        rc = max(1.1 * rp, 0.95 * np.sqrt(3.0) * level_half / self.theta)
        ppts = rp * fibonacci_sphere(n_proxy)
        cpts = rc * fibonacci_sphere(2 * n_proxy)
        amat = kernel_matrix(KernelSpec("single", k=k), cpts, ppts)
        return ppts, cpts, np.linalg.pinv(amat), amat

    def evaluate(self, k, src_x, targets, mono=None, dipstr=None, dipvec=None,
                 want_grad=False, tgt_normals=None, src_offsets=None,
                 excluded=None, exclude_near=False):
        if want_grad and dipstr is not None:
            raise UnsupportedFeatureError(
                "gradient of dipole sources is hypersingular and unsupported")
        src_x = np.atleast_2d(np.asarray(src_x, dtype=float))
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
        tree = build_tree(src_x, np.zeros(len(src_x)), targets, self.leaf_size)
        root = tree.boxes[0]
        if abs(complex(k)) * 2 * root.half > self.k_guard:
            warnings.warn(
                "treecode limited to low frequencies "
                f"(k*rootsize = {abs(complex(k)) * 2 * root.half:.2f} > "
                f"{self.k_guard}); falling back to direct summation",
                stacklevel=2)
            return DirectAccelerator().evaluate(
                k, src_x, targets, mono=mono, dipstr=dipstr, dipvec=dipvec,
                want_grad=want_grad, tgt_normals=tgt_normals,
                src_offsets=src_offsets, excluded=excluded,
                exclude_near=exclude_near)

        src_patch = None
        if src_offsets is not None:
            src_patch = np.zeros(len(src_x), dtype=int)
            for j in range(len(src_offsets) - 1):
                src_patch[src_offsets[j]:src_offsets[j + 1]] = j
        use_masks = src_patch is not None and excluded is not None
        excl_of_tgt = None
        tgt_mask = None
        if use_masks:
            excl_of_tgt = [[] for _ in range(len(targets))]
            for j, rows in enumerate(excluded):
                for t in rows:
                    excl_of_tgt[t].append(j)
            excl_of_tgt = [np.asarray(e, dtype=int) for e in excl_of_tgt]
            tgt_mask = [sum(1 << j for j in e) for e in excl_of_tgt]

        # gather subtree sources and patch masks bottom-up
        nb = len(tree.boxes)
        order = sorted(range(nb), key=lambda b: -tree.boxes[b].level)
        sub_src = [None] * nb
        box_mask = [0] * nb
        for b in order:
            box = tree.boxes[b]
            if box.is_leaf:
                sub_src[b] = np.asarray(box.centroid_ids, dtype=int)
            else:
                sub_src[b] = np.concatenate(
                    [sub_src[c] for c in box.children]) if box.children else \
                    np.empty(0, dtype=int)
            if use_masks and len(sub_src[b]):
                box_mask[b] = int(np.bitwise_or.reduce(
                    [1 << int(j) for j in np.unique(src_patch[sub_src[b]])]))

        # upward pass: proxy strengths per box with enough sources
        ops: dict = {}
        proxies = [None] * nb
        min_fit = max(8, self.n_proxy // 8)
        fit_tol = max(100 * self.eps_fmm, 1e-9)

        def fit_box(b):
            box = tree.boxes[b]
            if len(sub_src[b]) <= min_fit:
                return
            key = box.level
            if key not in ops:
                ops[key] = self._operators(box.half, k, self.n_proxy)
            ppts, cpts, pinv, amat = ops[key]
            cp = box.center + cpts
            if box.is_leaf or any(proxies[c] is None for c in box.children
                                  if len(sub_src[c])):
                f = _pair_matrix(k, cp, src_x, mono, dipstr, dipvec, False,
                                 None, src_sel=sub_src[b])
            else:
                f = np.zeros(len(cp), dtype=complex)
                for c in box.children:
                    if proxies[c] is None:
                        continue
                    cpp, cq = proxies[c]
                    f += kernel_matrix(KernelSpec("single", k=k), cp, cpp) @ cq
            qfit = pinv @ f
            resid = np.linalg.norm(amat @ qfit - f)
            scale = np.linalg.norm(f) + 1e-300
            n_try = self.n_proxy
            while resid > fit_tol * scale and n_try < 8 * self.n_proxy:
                n_try *= 2
                ppts, cpts, pinv, amat = self._operators(box.half, k, n_try)
                cp = box.center + cpts
                f = _pair_matrix(k, cp, src_x, mono, dipstr, dipvec, False,
                                 None, src_sel=sub_src[b])
                qfit = pinv @ f
                resid = np.linalg.norm(amat @ qfit - f)
                scale = np.linalg.norm(f) + 1e-300
            if resid > fit_tol * scale:
                raise AcceleratorError(
                    f"proxy fit failed on box {b} (residual "
                    f"{resid / scale:.2e} with {n_try} proxies)")
            proxies[b] = (box.center + ppts, qfit)

        for b in order:
            fit_box(b)

        pot = np.zeros(len(targets), dtype=complex)
        sq3 = np.sqrt(3.0)
        for leaf in tree.leaves():
            rows = np.asarray(leaf.target_ids, dtype=int)
            if not len(rows):
                continue
            tx = targets[rows]
            tnr = None if tgt_normals is None else tgt_normals[rows]
            leaf_mask = 0
            if use_masks:
                for t in rows:
                    leaf_mask |= tgt_mask[t]
            r_t = sq3 * leaf.half
            stack = [0]
            while stack:
                b = stack.pop()
                if not len(sub_src[b]):
                    continue
                box = tree.boxes[b]
                d = float(np.linalg.norm(box.center - leaf.center))
                r_b = sq3 * box.half
                # excluded (patch, target) pairs force descent to the direct
                # phase, which keeps both exclusion modes structurally equal
                masked = use_masks and (box_mask[b] & leaf_mask)
                far = (not masked and d - r_t > 0
                       and r_b / (d - r_t) < self.theta)
                if far and proxies[b] is not None:
                    ppts, qfit = proxies[b]
                    if want_grad:
                        km = kernel_matrix(KernelSpec("adjoint", k=k), tx,
                                           ppts, tgt_normals=tnr)
                    else:
                        km = kernel_matrix(KernelSpec("single", k=k), tx, ppts)
                    pot[rows] += km @ qfit
                elif box.children:
                    stack.extend(box.children)
                else:
                    sel = sub_src[b]
                    vals = np.zeros((len(rows),), dtype=complex)
                    if exclude_near and masked:
                        sp = src_patch[sel]
                        for i, t in enumerate(rows):
                            if not (tgt_mask[t] & box_mask[b]):
                                keep = slice(None)
                            else:
                                keep = ~np.isin(sp, excl_of_tgt[t])
                                if not np.any(keep):
                                    continue
                            vals[i] = _pair_matrix(
                                k, tx[i:i + 1], src_x[sel], None if mono is
                                None else mono[sel],
                                None if dipstr is None else dipstr[sel],
                                None if dipvec is None else dipvec[sel],
                                want_grad,
                                None if tnr is None else tnr[i:i + 1],
                                src_sel=keep)[0]
                    else:
                        vals = _pair_matrix(k, tx, src_x, mono, dipstr,
                                            dipvec, want_grad, tnr,
                                            src_sel=sel)
                    pot[rows] += vals
        return pot


def treecode_accelerator(eps_fmm: float, theta: float = 0.5,
                         n_proxy: int | None = None) -> TreecodeAccelerator:
    return TreecodeAccelerator(eps_fmm, theta=theta, n_proxy=n_proxy)


def metrics(cache: QuadCache, timings: dict | None = None) -> dict:
    """Evaluation report: oversampling alpha, memory-per-node m, throughput."""
    out = {
        "alpha": cache.metrics["alpha"],
        "m": cache.metrics["m"],
        "m_alt": cache.metrics["m_alt"],
        "s_init": cache.metrics["s_init"],
        "s_lp": cache.metrics.get("s_lp"),
        "a_max": cache.metrics["a_max"],
        "a_avg": cache.metrics["a_avg"],
    }
    if timings:
        out.update(timings)
    return out


def write_potentials_csv(path, potential: Potential) -> None:
    with open(path, "w") as f:
        f.write("x,y,z,Re,Im\n")
        for pt, val in zip(potential.points, potential.values):
            f.write(f"{pt[0]:.17e},{pt[1]:.17e},{pt[2]:.17e},"
                    f"{val.real:.17e},{val.imag:.17e}\n")


def save_cache(cache: QuadCache, path) -> None:
    """Binary dump of a QuadCache (np.savez with a JSON header)."""
    header = {
        "eps": cache.params.eps,
        "eta": cache.params.eta,
        "eta1": cache.params.eta1,
        "max_levels": cache.params.max_levels,
        "eps_inflation": cache.params.eps_inflation,
        "q_max": cache.params.q_max,
        "labels": [s.label() for s in cache.specs],
        "mesh_hash": cache.mesh.content_hash(),
        "version": 1,
    }
    nspec = len(cache.specs)
    npat = cache.mesh.npatches
    near_off = np.zeros(npat + 1, dtype=int)
    for j in range(npat):
        near_off[j + 1] = near_off[j] + len(cache.near_lists[j])
    near_ids = (np.concatenate(cache.near_lists) if near_off[-1]
                else np.empty(0, dtype=int))
    interp_off = np.zeros(npat + 1, dtype=int)
    for j in range(npat):
        interp_off[j + 1] = interp_off[j] + len(cache.interp[j])
    arrays = {
        "header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
        "q": cache.q, "capped": cache.capped,
        "src_x": cache.src_x, "src_n": cache.src_n, "src_w": cache.src_w,
        "src_offsets": cache.src_offsets,
        "interp": np.vstack(cache.interp), "interp_offsets": interp_off,
        "tgt_x": cache.tgt_x, "tgt_n": cache.tgt_n,
        "tgt_patch": cache.tgt_patch,
        "near_ids": near_ids, "near_offsets": near_off,
        "self_mats": np.stack([np.stack([sm.mats[s] for sm in cache.selfs])
                               for s in range(nspec)]),
        "near_mats": np.stack([
            np.vstack([nm.mats[s] for nm in cache.nears]) if near_off[-1]
            else np.empty((0, n_basis(cache.mesh.order)), dtype=complex)
            for s in range(nspec)]),
        "near_adaptive": np.concatenate(
            [nm.adaptive for nm in cache.nears]) if near_off[-1]
            else np.empty(0, dtype=bool),
        "near_qfar": np.concatenate(
            [nm.q_far for nm in cache.nears]) if near_off[-1]
            else np.empty(0, dtype=int),
        "near_err": np.concatenate(
            [nm.err_estimates for nm in cache.nears]) if near_off[-1]
            else np.empty(0),
        "metrics": np.frombuffer(
            json.dumps(cache.metrics).encode(), dtype=np.uint8),
    }
    np.savez(path, **arrays)


def load_cache(path, mesh: SurfaceMesh) -> QuadCache:
    """Restore a QuadCache dump; refuses a mesh or settings mismatch."""
    from .quadrature import NearMatrix, SelfMatrix

    data = np.load(path, allow_pickle=False)
    header = json.loads(bytes(data["header"]).decode())
    if header.get("version") != 1:
        raise CacheMismatchError(f"unknown cache version {header.get('version')}")
    if header["mesh_hash"] != mesh.content_hash():
        raise CacheMismatchError(
            "stored cache was built for a different mesh "
            f"(hash {header['mesh_hash'][:12]}..)")
    try:
        specs = [_spec_from_label(lbl) for lbl in header["labels"]]
    except Exception as exc:
        raise CacheMismatchError(f"unreadable kernel labels: {exc}") from exc
    params = NearParams(eps=header["eps"], eta=header["eta"],
                        eta1=header["eta1"], max_levels=header["max_levels"],
                        eps_inflation=header["eps_inflation"],
                        q_max=header["q_max"])
    npat = mesh.npatches
    nspec = len(specs)
    near_off = data["near_offsets"]
    near_lists = [data["near_ids"][near_off[j]:near_off[j + 1]]
                  for j in range(npat)]
    interp_off = data["interp_offsets"]
    interp = [data["interp"][interp_off[j]:interp_off[j + 1]]
              for j in range(npat)]
    selfs = [SelfMatrix(patch=j, mats=tuple(data["self_mats"][s][j]
                                            for s in range(nspec)))
             for j in range(npat)]
    nears = []
    for j in range(npat):
        sl = slice(near_off[j], near_off[j + 1])
        nears.append(NearMatrix(
            patch=j, target_ids=near_lists[j],
            mats=tuple(data["near_mats"][s][sl] for s in range(nspec)),
            adaptive=data["near_adaptive"][sl],
            q_far=data["near_qfar"][sl],
            err_estimates=data["near_err"][sl]))
    n_p = n_basis(mesh.order)
    excluded = [np.union1d(near_lists[j], np.arange(j * n_p, (j + 1) * n_p))
                for j in range(npat)]
    metrics_d = json.loads(bytes(data["metrics"]).decode())
    cache = QuadCache(mesh, specs, params, data["q"], data["capped"],
                      data["src_x"], data["src_n"], data["src_w"],
                      data["src_offsets"], interp, selfs, nears, near_lists,
                      data["tgt_x"], data["tgt_n"], data["tgt_patch"],
                      excluded, metrics_d)
    mesh.q_far[:] = cache.q
    return cache


def _parse_cplx(txt: str) -> complex:
    return complex(txt.split("=", 1)[1].replace("+-", "-"))


def _spec_from_label(label: str) -> KernelSpec:
    fam, kpart, bd, bs = label.split(";")
    return KernelSpec(fam, k=_parse_cplx(kpart), beta_d=_parse_cplx(bd),
                      beta_s=_parse_cplx(bs))

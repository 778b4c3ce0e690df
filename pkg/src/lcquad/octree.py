"""Level-restricted adaptive octree with tethered centroids and near lists.

The tree is built over two point families: patch centroids, which carry a
ball radius (eta * R_j) and stop descending once the child box width drops
below their diameter ("tethering"), and plain target points, which always
descend to leaves.  Near lists are assembled from the holding box, its
same-level colleagues, and adjacent coarser leaves, then filtered by the
strict ball criterion; the result is required to match the brute-force
definition exactly.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError

MAX_LEVEL_DEFAULT = 30


@dataclass
class Box:
    id: int
    level: int
    center: np.ndarray
    half: float
    grid: tuple[int, int, int]
    parent: int | None
    children: tuple[int, ...] = ()
    centroid_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    target_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    tethered_ids: list[int] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class TetherRecord:
    patch: int
    level: int
    box: int


class OctTree:
    """Adaptive octree; build with `build_tree`, not directly."""

    def __init__(self, centroids, tether_diam, targets, s, max_level=MAX_LEVEL_DEFAULT):
        self.centroids = np.atleast_2d(np.asarray(centroids, dtype=float)) \
            if len(centroids) else np.empty((0, 3))
        self.tether_diam = np.asarray(tether_diam, dtype=float) \
            if tether_diam is not None else np.zeros(len(self.centroids))
        self.targets = np.atleast_2d(np.asarray(targets, dtype=float)) \
            if len(targets) else np.empty((0, 3))
        if len(self.tether_diam) != len(self.centroids):
            raise ValueError("one tether diameter per centroid required")
        self.s = int(s)
        self.max_level = int(max_level)
        self.boxes: list[Box] = []
        self.tether_records: list[TetherRecord] = []
        self.centroid_box = np.full(len(self.centroids), -1, dtype=int)
        self.target_box = np.full(len(self.targets), -1, dtype=int)
        self._level_grid: list[dict] = []
        self._subtree_targets: dict[int, np.ndarray] = {}
        self._build()

    # -- construction -----------------------------------------------------

    def _build(self):
        allpts = np.vstack([self.centroids, self.targets]) \
            if len(self.centroids) + len(self.targets) else np.zeros((1, 3))
        lo, hi = allpts.min(axis=0), allpts.max(axis=0)
        center = (lo + hi) / 2
        half = 1.01 * max(float(np.max(hi - center)), 1e-30)
        root = Box(id=0, level=0, center=center, half=half, grid=(0, 0, 0), parent=None)
        self.boxes.append(root)
        self._refine(0, np.arange(len(self.centroids)), np.arange(len(self.targets)))
        self._rebuild_indexes()

    def _refine(self, box_id: int, cids: np.ndarray, tids: np.ndarray):
        box = self.boxes[box_id]
        if len(cids):
            stuck = self.tether_diam[cids] > box.half  # child width = box.half
            for c in cids[stuck]:
                box.tethered_ids.append(int(c))
                self.centroid_box[c] = box_id
                self.tether_records.append(TetherRecord(int(c), box.level, box_id))
            cids = cids[~stuck]
        count = len(cids) + len(tids)
        degenerate = count > self.s and self._inseparable(cids, tids)
        if count <= self.s or box.level >= self.max_level or degenerate:
            if count > self.s:
                warnings.warn(
                    f"forced leaf at level {box.level} with {count} points "
                    f"(duplicates or depth cap)", stacklevel=2
                )
            box.centroid_ids = cids
            box.target_ids = tids
            self.centroid_box[cids] = box_id
            self.target_box[tids] = box_id
            return
        self._split(box)
        coct = self._octants(self.centroids[cids], box.center) if len(cids) else None
        toct = self._octants(self.targets[tids], box.center) if len(tids) else None
        for o in range(8):
            sub_c = cids[coct == o] if coct is not None else cids[:0]
            sub_t = tids[toct == o] if toct is not None else tids[:0]
            self._refine(box.children[o], sub_c, sub_t)

    def _inseparable(self, cids, tids) -> bool:
        pts = np.vstack([self.centroids[cids], self.targets[tids]])
        return bool(np.all(np.ptp(pts, axis=0) < 1e-30))

    @staticmethod
    def _octants(pts: np.ndarray, center: np.ndarray) -> np.ndarray:
        side = (pts >= center).astype(int)
        return side[:, 0] * 4 + side[:, 1] * 2 + side[:, 2]

    def _split(self, box: Box):
        if box.level + 1 > self.max_level:
            raise GeometryError("octree depth cap exceeded during refinement")
        kids = []
        h = box.half / 2
        for o in range(8):
            off = np.array([(o >> 2) & 1, (o >> 1) & 1, o & 1])
            child = Box(
                id=len(self.boxes),
                level=box.level + 1,
                center=box.center + (2 * off - 1) * h,
                half=h,
                grid=tuple(2 * np.array(box.grid) + off),
                parent=box.id,
            )
            self.boxes.append(child)
            kids.append(child.id)
        box.children = tuple(kids)

    def _rebuild_indexes(self):
        depth = max(b.level for b in self.boxes)
        self._level_grid = [dict() for _ in range(depth + 1)]
        for b in self.boxes:
            self._level_grid[b.level][b.grid] = b.id
        self._subtree_targets = {}

    # -- queries -----------------------------------------------------------

    @property
    def depth(self) -> int:
        return len(self._level_grid) - 1

    def leaves(self) -> list[Box]:
        return [b for b in self.boxes if b.is_leaf]

    def colleagues(self, box_id: int) -> list[int]:
        """Existing distinct same-level boxes sharing a boundary point."""
        b = self.boxes[box_id]
        grid = self._level_grid[b.level]
        out = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    if dx == dy == dz == 0:
                        continue
                    g = (b.grid[0] + dx, b.grid[1] + dy, b.grid[2] + dz)
                    hit = grid.get(g)
                    if hit is not None:
                        out.append(hit)
        return out

    def coarser_adjacent_leaves(self, box_id: int) -> list[int]:
        """Leaves larger than this box owning adjacent empty grid positions."""
        b = self.boxes[box_id]
        grid = self._level_grid[b.level]
        out = set()
        n = 1 << b.level
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    if dx == dy == dz == 0:
                        continue
                    g = (b.grid[0] + dx, b.grid[1] + dy, b.grid[2] + dz)
                    if not all(0 <= gi < n for gi in g):
                        continue
                    if g in grid:
                        continue
                    for lev in range(b.level - 1, -1, -1):
                        shift = b.level - lev
                        ga = (g[0] >> shift, g[1] >> shift, g[2] >> shift)
                        hit = self._level_grid[lev].get(ga)
                        if hit is not None:
                            if self.boxes[hit].is_leaf:
                                out.add(hit)
                            break
        return sorted(out)

    def subtree_targets(self, box_id: int) -> np.ndarray:
        """All target ids held anywhere in the subtree of a box (cached)."""
        cached = self._subtree_targets.get(box_id)
        if cached is not None:
            return cached
        b = self.boxes[box_id]
        if b.is_leaf:
            ids = b.target_ids
        else:
            parts = [self.subtree_targets(c) for c in b.children]
            parts = [p for p in parts if len(p)]
            ids = np.concatenate(parts) if parts else np.empty(0, dtype=int)
        self._subtree_targets[box_id] = ids
        return ids

    def near_candidates(self, box_id: int) -> np.ndarray:
        """Targets in the box subtree, colleague subtrees, and coarser leaves."""
        parts = [self.subtree_targets(box_id)]
        for c in self.colleagues(box_id):
            parts.append(self.subtree_targets(c))
        for c in self.coarser_adjacent_leaves(box_id):
            parts.append(self.boxes[c].target_ids)
        parts = [p for p in parts if len(p)]
        if not parts:
            return np.empty(0, dtype=int)
        return np.unique(np.concatenate(parts))

    # -- invariant checkers --------------------------------------------------

    def check_partition(self) -> bool:
        held_t = sum(len(b.target_ids) for b in self.boxes if b.is_leaf)
        held_c = sum(len(b.centroid_ids) for b in self.boxes if b.is_leaf)
        tethered = sum(len(b.tethered_ids) for b in self.boxes)
        return (held_t == len(self.targets)
                and held_c + tethered == len(self.centroids)
                and np.all(self.target_box >= 0)
                and (len(self.centroids) == 0 or np.all(self.centroid_box >= 0)))

    def check_balance(self) -> bool:
        leaves = self.leaves()
        tol = 1e-12 * self.boxes[0].half
        for i, a in enumerate(leaves):
            for b in leaves[i + 1 :]:
                if abs(a.level - b.level) <= 1:
                    continue
                if np.all(np.abs(a.center - b.center) <= a.half + b.half + tol):
                    return False
        return True

    def stats_json_lines(self) -> str:
        lines = []
        for lev in range(self.depth + 1):
            boxes = [b for b in self.boxes if b.level == lev]
            leaves = [b for b in boxes if b.is_leaf]
            occ = max((len(b.target_ids) + len(b.centroid_ids) for b in leaves), default=0)
            lines.append(json.dumps({
                "level": lev,
                "boxes": len(boxes),
                "leaves": len(leaves),
                "max_leaf_occupancy": occ,
            }))
        lines.append(json.dumps({
            "total_boxes": len(self.boxes),
            "total_leaves": len(self.leaves()),
            "depth": self.depth,
            "tethered": len(self.tether_records),
        }))
        return "\n".join(lines) + "\n"


def build_tree(centroids, ball_radii, targets, s, max_level=MAX_LEVEL_DEFAULT) -> OctTree:
    """Tree over centroids (tethered by ball diameter 2*radius) and targets."""
    diam = 2.0 * np.asarray(ball_radii, dtype=float) if ball_radii is not None else None
    return OctTree(centroids, diam, targets, s, max_level=max_level)


def enforce_level_restriction(tree: OctTree) -> OctTree:
    """Refine leaves until boundary-sharing leaves differ by at most 1 level.

    Only adds refinement; held points are redistributed with the tether rule
    re-applied.
    """
    while True:
        to_refine = set()
        for leaf in tree.leaves():
            for cid in tree.coarser_adjacent_leaves(leaf.id):
                if leaf.level - tree.boxes[cid].level > 1:
                    to_refine.add(cid)
        if not to_refine:
            break
        for bid in sorted(to_refine):
            _refine_leaf_once(tree, bid)
        tree._rebuild_indexes()
    return tree


def _refine_leaf_once(tree: OctTree, box_id: int):
    box = tree.boxes[box_id]
    cids, tids = box.centroid_ids, box.target_ids
    box.centroid_ids = np.empty(0, dtype=int)
    box.target_ids = np.empty(0, dtype=int)
    tree._split(box)
    if len(cids):
        stuck = tree.tether_diam[cids] > box.half
        for c in cids[stuck]:
            box.tethered_ids.append(int(c))
            tree.centroid_box[c] = box_id
            tree.tether_records.append(TetherRecord(int(c), box.level, box_id))
        cids = cids[~stuck]
    coct = tree._octants(tree.centroids[cids], box.center) if len(cids) else None
    toct = tree._octants(tree.targets[tids], box.center) if len(tids) else None
    for o in range(8):
        child = tree.boxes[box.children[o]]
        sub_c = cids[coct == o] if coct is not None else cids[:0]
        sub_t = tids[toct == o] if toct is not None else tids[:0]
        child.centroid_ids = sub_c
        child.target_ids = sub_t
        tree.centroid_box[sub_c] = child.id
        tree.target_box[sub_t] = child.id


def near_lists_brute(centroids, ball_radii, targets, target_patch) -> list[np.ndarray]:
    """O(Npat * Ntarget) oracle for the near lists (strict inequality)."""
    centroids = np.atleast_2d(centroids)
    out = []
    for j in range(len(centroids)):
        d = np.linalg.norm(targets - centroids[j], axis=1)
        mask = (d < ball_radii[j]) & (target_patch != j)
        out.append(np.flatnonzero(mask))
    return out


def build_near_lists(tree: OctTree, ball_radii, target_patch) -> list[np.ndarray]:
    """Near-target ids per patch: strictly inside the patch ball, off-patch.

    Candidates come from the holding box, its colleagues, and adjacent
    coarser leaves; the filtered result equals the brute-force definition.
    """
    ball_radii = np.asarray(ball_radii, dtype=float)
    target_patch = np.asarray(target_patch, dtype=int)
    out = []
    for j in range(len(tree.centroids)):
        cand = tree.near_candidates(int(tree.centroid_box[j]))
        if len(cand) == 0:
            out.append(cand)
            continue
        d = np.linalg.norm(tree.targets[cand] - tree.centroids[j], axis=1)
        keep = (d < ball_radii[j]) & (target_patch[cand] != j)
        out.append(np.sort(cand[keep]))
    return out

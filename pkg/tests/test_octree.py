import json

import numpy as np
import pytest

from lcquad.octree import (
    build_near_lists,
    build_tree,
    enforce_level_restriction,
    near_lists_brute,
)


def _random_instance(rng, npatch=20, ntarget=400, big_radii=False):
    centroids = rng.uniform(-1, 1, size=(npatch, 3))
    radii = rng.uniform(0.2, 0.6, size=npatch) if big_radii \
        else rng.uniform(0.02, 0.15, size=npatch)
    targets = np.vstack([
        rng.uniform(-1, 1, size=(ntarget // 2, 3)),
        rng.normal(scale=0.05, size=(ntarget - ntarget // 2, 3)),  # cluster
    ])
    target_patch = rng.integers(-1, npatch, size=len(targets))
    return centroids, radii, targets, target_patch


def test_corner_points_single_split():
    pts = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    tree = build_tree(np.empty((0, 3)), None, pts, s=1)
    assert tree.depth == 1
    leaves = tree.leaves()
    assert len(leaves) == 8
    assert all(len(b.target_ids) == 1 for b in leaves)
    assert tree.check_partition()


def test_huge_ball_tethered_at_root():
    rng = np.random.default_rng(0)
    targets = rng.uniform(size=(100, 3))
    tree = build_tree(np.array([[0.5, 0.5, 0.5]]), np.array([10.0]), targets, s=10)
    assert tree.depth >= 1
    assert len(tree.tether_records) == 1
    rec = tree.tether_records[0]
    assert rec.patch == 0 and rec.level == 0 and rec.box == 0


def test_leaf_occupancy_bound():
    rng = np.random.default_rng(1)
    pts = rng.uniform(size=(10_000, 3))
    tree = build_tree(np.empty((0, 3)), None, pts, s=30)
    for leaf in tree.leaves():
        assert len(leaf.target_ids) + len(leaf.centroid_ids) <= 30
    assert tree.check_partition()


def test_duplicate_points_forced_leaf():
    pts = np.zeros((5, 3))
    with pytest.warns(UserWarning):
        tree = build_tree(np.empty((0, 3)), None, pts, s=2)
    assert tree.check_partition()
    held = [b for b in tree.leaves() if len(b.target_ids) == 5]
    assert len(held) == 1


def test_balance_idempotent():
    rng = np.random.default_rng(2)
    pts = rng.uniform(size=(500, 3))
    tree = build_tree(np.empty((0, 3)), None, pts, s=8)
    enforce_level_restriction(tree)
    n1 = len(tree.boxes)
    enforce_level_restriction(tree)
    assert len(tree.boxes) == n1
    assert tree.check_balance()
    assert tree.check_partition()


def test_spike_forces_neighbor_refinement():
    rng = np.random.default_rng(3)
    pts = np.vstack([rng.uniform(0, 1e-3, size=(300, 3)), [[0.9, 0.9, 0.9]]])
    tree = build_tree(np.empty((0, 3)), None, pts, s=4)
    assert not tree.check_balance()
    enforce_level_restriction(tree)
    assert tree.check_balance()
    assert tree.check_partition()


@pytest.mark.parametrize("seed", range(20))
def test_random_tree_properties(seed):
    rng = np.random.default_rng(seed)
    centroids, radii, targets, target_patch = _random_instance(
        rng, npatch=15, ntarget=250, big_radii=bool(seed % 2)
    )
    s = int(rng.integers(1, 24))
    tree = build_tree(centroids, radii, targets, s=s)
    enforce_level_restriction(tree)
    assert tree.check_partition()
    assert tree.check_balance()
    # tether soundness below the root
    for rec in tree.tether_records:
        box = tree.boxes[rec.box]
        if rec.level == 0:
            continue
        r = radii[rec.patch]
        assert r <= box.half * (1 + 1e-12)
        assert np.all(np.abs(centroids[rec.patch] - box.center) <= box.half * (1 + 1e-12))
        reach = np.max(np.abs(centroids[rec.patch] - box.center)) + r
        assert reach <= 3 * box.half * (1 + 1e-12)
    # exact near-list equality with the brute-force definition
    got = build_near_lists(tree, radii, target_patch)
    want = near_lists_brute(centroids, radii, targets, target_patch)
    for a, b in zip(got, want):
        assert np.array_equal(a, np.sort(b))


def test_two_distant_patches():
    centroids = np.array([[0.0, 0, 0], [10.0, 0, 0]])
    radii = np.array([1.0, 1.0])
    targets = np.array([[0.3, 0, 0], [0.5, 0.1, 0], [10.2, 0, 0], [9.9, -0.3, 0]])
    target_patch = np.full(4, -1)
    tree = build_tree(centroids, radii, targets, s=2)
    lists = build_near_lists(tree, radii, target_patch)
    assert np.array_equal(lists[0], [0, 1])
    assert np.array_equal(lists[1], [2, 3])


def test_boundary_tie_is_far():
    centroids = np.array([[0.0, 0, 0]])
    radii = np.array([0.25])
    targets = np.array([[0.25, 0.0, 0.0], [0.249, 0.0, 0.0]])
    tree = build_tree(centroids, radii, targets, s=1)
    lists = build_near_lists(tree, radii, np.full(2, -1))
    assert np.array_equal(lists[0], [1])


def test_off_patch_rule():
    centroids = np.array([[0.0, 0, 0]])
    radii = np.array([1.0])
    targets = np.array([[0.1, 0, 0], [0.2, 0, 0]])
    tree = build_tree(centroids, radii, targets, s=8)
    lists = build_near_lists(tree, radii, np.array([0, -1]))
    assert np.array_equal(lists[0], [1])


def test_large_random_equality():
    rng = np.random.default_rng(42)
    centroids = rng.uniform(-2, 2, size=(200, 3))
    radii = rng.uniform(0.05, 0.8, size=200)
    targets = rng.uniform(-2, 2, size=(5000, 3))
    target_patch = rng.integers(-1, 200, size=5000)
    tree = build_tree(centroids, radii, targets, s=40)
    enforce_level_restriction(tree)
    got = build_near_lists(tree, radii, target_patch)
    want = near_lists_brute(centroids, radii, targets, target_patch)
    assert all(np.array_equal(a, np.sort(b)) for a, b in zip(got, want))


def test_stats_json_lines():
    rng = np.random.default_rng(5)
    pts = rng.uniform(size=(300, 3))
    tree = build_tree(np.empty((0, 3)), None, pts, s=16)
    lines = tree.stats_json_lines().strip().split("\n")
    recs = [json.loads(ln) for ln in lines]
    assert recs[-1]["total_boxes"] == len(tree.boxes)
    assert recs[-1]["depth"] == tree.depth
    per_level = sum(r["boxes"] for r in recs[:-1])
    assert per_level == len(tree.boxes)

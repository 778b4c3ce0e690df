import numpy as np
import pytest

from lcquad.basis import (
    InterpNodeSet,
    QuadratureRule,
    basis_indices,
    build_interp_nodes,
    build_quadrature,
    koornwinder,
    koornwinder_derivs,
    koornwinder_moments,
    load_quadrature_table,
    n_basis,
    save_table,
)
from lcquad.errors import DomainError, TableParseError, TableValidationError


def test_n_basis_counts():
    assert [n_basis(p) for p in range(1, 6)] == [1, 3, 6, 10, 15]
    assert len(basis_indices(4)) == n_basis(4)


def test_constant_mode_is_sqrt2():
    pts = np.array([[0.1, 0.2], [0.0, 0.0], [0.5, 0.5]])
    vals = koornwinder(1, pts)
    assert vals.shape == (3, 1)
    assert np.allclose(vals[:, 0], np.sqrt(2.0), rtol=0, atol=1e-15)


def test_point_values_match_symbolic_oracle():
    # closed forms from the weighted-Jacobi product definition, evaluated
    # exactly in rational arithmetic and frozen here
    pt = np.array([1.0 / 3.0, 1.0 / 3.0])
    vals = koornwinder(3, pt)
    expect = np.array([
        np.sqrt(2.0),                  # (0,0)
        0.0,                           # (1,0)
        0.0,                           # (1,1)
        -5.0 * np.sqrt(6.0) / 9.0,     # (2,0)
        0.0,                           # (2,1)
        -2.0 * np.sqrt(30.0) / 9.0,    # (2,2)
    ])
    assert np.allclose(vals, expect, rtol=0, atol=5e-15)


def test_derivs_match_symbolic_oracle():
    pt = np.array([0.21, 0.37])
    vals, du, dv = koornwinder_derivs(4, pt)
    idx21 = 2 * 3 // 2 + 1
    idx32 = 3 * 4 // 2 + 2
    assert vals[idx21] == pytest.approx(0.75731136265079239863, abs=1e-14)
    assert du[idx21] == pytest.approx(-7.2124891681027847489, abs=1e-13)
    assert dv[idx21] == pytest.approx(0.84852813742385702928, abs=1e-13)
    assert vals[idx32] == pytest.approx(1.3304144835200795423, abs=1e-13)
    assert du[idx32] == pytest.approx(12.670614128762662307, abs=1e-12)
    assert dv[idx32] == pytest.approx(5.8571706821638721987, abs=1e-12)


@pytest.mark.parametrize("p", [2, 4, 7, 10])
def test_derivs_against_finite_differences(p):
    rng = np.random.default_rng(42)
    pts = rng.dirichlet((1.5, 1.5, 1.5), size=30)[:, :2]
    h = 1e-6
    _, du, dv = koornwinder_derivs(p, pts)
    fd_u = (koornwinder(p, pts + [h, 0]) - koornwinder(p, pts - [h, 0])) / (2 * h)
    fd_v = (koornwinder(p, pts + [0, h]) - koornwinder(p, pts - [0, h])) / (2 * h)
    scale = max(1.0, np.max(np.abs(du)), np.max(np.abs(dv)))
    assert np.max(np.abs(du - fd_u)) / scale < 1e-7
    assert np.max(np.abs(dv - fd_v)) / scale < 1e-7


def test_values_finite_on_degenerate_edge():
    # v -> 1 collapses the Legendre argument to 0/0; recurrences must not blow up
    pts = np.array([[0.0, 1.0], [0.0, 1.0 - 1e-15], [1e-16, 1.0 - 1e-16]])
    vals, du, dv = koornwinder_derivs(8, pts)
    assert np.all(np.isfinite(vals))
    assert np.all(np.isfinite(du))
    assert np.all(np.isfinite(dv))


def test_outside_simplex_raises():
    with pytest.raises(DomainError):
        koornwinder(3, np.array([0.6, 0.6]))
    with pytest.raises(DomainError):
        koornwinder_derivs(3, np.array([[-0.01, 0.2]]))
    # boundary within tolerance is fine
    koornwinder(3, np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.5]]))


@pytest.mark.parametrize("p", range(1, 11))
def test_orthonormality(p):
    # integrate products with a rule of twice the order
    rule = build_quadrature(2 * p) if 2 * p <= 20 else build_quadrature(20)
    vals = koornwinder(p, rule.nodes)
    gram = (vals * rule.weights[:, None]).T @ vals
    assert np.max(np.abs(gram - np.eye(n_basis(p)))) < 1e-12


def _composite_rule(levels):
    """Order-20 rule mapped onto a uniform 4**levels subdivision of T0."""
    base = build_quadrature(20)
    tris = [(np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0]))]
    for _ in range(levels):
        nxt = []
        for a, b, c in tris:
            ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
            nxt += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
        tris = nxt
    nodes, weights = [], []
    for a, b, c in tris:
        j = abs(np.cross(b - a, c - a))
        nodes.append(a + np.outer(base.nodes[:, 0], b - a) + np.outer(base.nodes[:, 1], c - a))
        weights.append(base.weights * j)
    return np.vstack(nodes), np.concatenate(weights)


@pytest.mark.parametrize("p", [11, 12])
def test_orthonormality_high_order(p):
    # degree-2p products exceed any single cached rule; a 3-level uniform
    # subdivision pushes the composite error far below the tolerance
    nodes, weights = _composite_rule(3)
    vals = koornwinder(p, nodes)
    gram = (vals * weights[:, None]).T @ vals
    assert np.max(np.abs(gram - np.eye(n_basis(p)))) < 1e-11


@pytest.mark.parametrize("q", range(1, 21))
def test_quadrature_exactness(q):
    rule = build_quadrature(q)
    assert rule.exactness >= q
    vals = koornwinder(q, rule.nodes)
    mom = vals.T @ rule.weights
    assert np.max(np.abs(mom - koornwinder_moments(q))) < 1e-12
    assert rule.weights.sum() == pytest.approx(0.5, abs=1e-13)


def test_interp_node_sets():
    for p in (1, 2, 4, 8, 12):
        ns = build_interp_nodes(p)
        assert ns.count == n_basis(p)
        resid = ns.matrix_u @ ns.matrix_v - np.eye(ns.count)
        assert np.max(np.abs(resid)) < 1e-12
        assert ns.norm_v > 0.0
    assert build_interp_nodes(4).cond_u < 100.0


@pytest.mark.parametrize("p", [3, 5, 8, 11])
def test_interpolation_roundtrip(p):
    # sample a random degree<p polynomial at the nodes, recover coefficients
    rng = np.random.default_rng(p)
    ns = build_interp_nodes(p)
    coeffs = rng.standard_normal(n_basis(p))
    values = ns.values_from_coeffs(coeffs)
    back = ns.coeffs_from_values(values)
    assert np.max(np.abs(back - coeffs)) < 1e-11
    # and the interpolant reproduces the polynomial off the nodes
    probe = rng.dirichlet((2.0, 2.0, 2.0), size=25)[:, :2]
    exact = koornwinder(p, probe) @ coeffs
    interp = koornwinder(p, probe) @ back
    assert np.max(np.abs(interp - exact)) < 1e-11


def test_order_bounds():
    with pytest.raises(ValueError):
        build_interp_nodes(0)
    with pytest.raises(ValueError):
        build_interp_nodes(13)
    with pytest.raises(ValueError):
        build_quadrature(21)
    build_interp_nodes(13, p_max=13)


def test_quadrature_table_roundtrip(tmp_path):
    rule = build_quadrature(6)
    path = tmp_path / "q6.txt"
    save_table(rule, path)
    loaded = load_quadrature_table(path)
    assert isinstance(loaded, QuadratureRule)
    assert loaded.order == rule.order
    assert loaded.exactness >= rule.order
    assert np.allclose(loaded.nodes, rule.nodes, rtol=0, atol=1e-16)
    assert np.allclose(loaded.weights, rule.weights, rtol=0, atol=1e-16)


def test_node_table_roundtrip(tmp_path):
    ns = build_interp_nodes(5)
    path = tmp_path / "n5.txt"
    save_table(ns, path)
    loaded = load_quadrature_table(path)
    assert isinstance(loaded, InterpNodeSet)
    assert loaded.order == 5
    assert np.allclose(loaded.nodes, ns.nodes, rtol=0, atol=1e-16)
    assert np.max(np.abs(loaded.matrix_u @ loaded.matrix_v - np.eye(ns.count))) < 1e-12


def test_table_parse_errors(tmp_path):
    bad = tmp_path / "bad.txt"

    bad.write_text("")
    with pytest.raises(TableParseError):
        load_quadrature_table(bad)

    bad.write_text("BOGUS 3 6\n")
    with pytest.raises(TableParseError):
        load_quadrature_table(bad)

    bad.write_text("TRIQUAD 2 3 2\n0.1 0.1 0.2\n0.2 0.2\n0.3 0.3 0.1\n")
    with pytest.raises(TableParseError) as exc:
        load_quadrature_table(bad)
    assert exc.value.line == 3

    bad.write_text("TRIQUAD 2 3 2\n0.1 0.1 0.2\n")
    with pytest.raises(TableParseError):
        load_quadrature_table(bad)

    bad.write_text("TRINODE 2 3\n0.1 0.1\n0.2 oops\n0.3 0.3\n")
    with pytest.raises(TableParseError) as exc:
        load_quadrature_table(bad)
    assert exc.value.line == 3


def test_table_validation_errors(tmp_path):
    bad = tmp_path / "bad.txt"

    # rule that cannot integrate degree<2: claims exactness it does not have
    bad.write_text("TRIQUAD 2 1 2\n0.25 0.25 0.5\n")
    with pytest.raises(TableValidationError):
        load_quadrature_table(bad)

    # node outside the simplex
    bad.write_text("TRINODE 1 1\n0.7 0.7\n")
    with pytest.raises(TableValidationError):
        load_quadrature_table(bad)

    # wrong node count for the order
    bad.write_text("TRINODE 3 4\n0.1 0.1\n0.2 0.2\n0.3 0.3\n0.4 0.4\n")
    with pytest.raises(TableValidationError):
        load_quadrature_table(bad)


def test_negative_weight_rule_accepted_with_flag(tmp_path):
    # a valid degree<1 rule with one negative weight: integrates constants
    tab = tmp_path / "neg.txt"
    tab.write_text(
        "TRIQUAD 1 2 1\n"
        "0.20000000000000000e+00 0.20000000000000000e+00 0.60000000000000000e+00\n"
        "0.30000000000000000e+00 0.30000000000000000e+00 -0.10000000000000000e+00\n"
    )
    with pytest.warns(UserWarning):
        rule = load_quadrature_table(tab)
    assert not rule.positive
    assert rule.weights.sum() == pytest.approx(0.5, abs=1e-15)

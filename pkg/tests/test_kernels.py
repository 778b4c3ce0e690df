import numpy as np
import pytest

from lcquad.backend import backend_name, get_backend
from lcquad.errors import SingularityError
from lcquad.geometry import gen_sphere, oversample_patch
from lcquad.kernels import KernelSpec, greens, kernel_matrix, kernel_value


def test_greens_point_values():
    x = np.array([2.0, 0.0, 0.0])
    o = np.zeros(3)
    assert greens(0.0, x, o) == pytest.approx(1 / (8 * np.pi), abs=1e-16)
    g = greens(1.0, np.array([1.0, 0, 0]), o)
    assert g.real == pytest.approx(np.cos(1) / (4 * np.pi), abs=1e-15)
    assert g.imag == pytest.approx(np.sin(1) / (4 * np.pi), abs=1e-15)
    assert abs(g - (0.0429960 + 0.0669610j)) < 2e-6
    gi = greens(1j, np.array([1.0, 0, 0]), o)
    assert gi == pytest.approx(np.exp(-1) / (4 * np.pi), abs=1e-16)


def test_greens_reciprocity_and_singularity():
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((2, 3))
    for k in (0.0, 2.0, 1 + 0.5j):
        assert greens(k, x, y) == greens(k, y, x)
    with pytest.raises(SingularityError):
        greens(1.0, x, x)


def test_greens_laplace_limit_linear_in_k():
    x = np.array([0.7, -0.2, 0.4])
    y = np.array([-0.3, 0.5, 0.1])
    e6 = abs(greens(1e-6, x, y) - greens(0.0, x, y))
    e7 = abs(greens(1e-7, x, y) - greens(0.0, x, y))
    assert e6 > 0
    assert e6 / e7 == pytest.approx(10.0, rel=0.05)


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec("triple")
    with pytest.raises(ValueError):
        KernelSpec("single", k=1 - 1j)
    assert KernelSpec("double-layer").family == "double"
    assert KernelSpec("combined-field", k=1.0, beta_s=-1j).beta_s == -1j


def test_double_layer_unit_sphere_value():
    # target at the center, source on the unit sphere with outward normal
    y = np.array([0.0, 0.0, 1.0])
    v = kernel_value(KernelSpec("double"), np.zeros(3), y, n_y=y)
    assert v == pytest.approx(-1 / (4 * np.pi), abs=1e-16)


def test_adjoint_swaps_roles():
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal((2, 3))
    n = rng.standard_normal(3)
    n /= np.linalg.norm(n)
    for k in (0.0, 1.5):
        adj = kernel_value(KernelSpec("adjoint", k=k), x, y, n_x=n)
        dbl = kernel_value(KernelSpec("double", k=k), y, x, n_y=n)
        assert adj == pytest.approx(dbl, abs=1e-16)


def test_missing_normals_rejected():
    x, y = np.ones(3), np.zeros(3)
    with pytest.raises(ValueError):
        kernel_value(KernelSpec("double"), x, y)
    with pytest.raises(ValueError):
        kernel_value(KernelSpec("adjoint"), x, y)
    with pytest.raises(ValueError):
        kernel_matrix(KernelSpec("combined"), x[None], y[None])


@pytest.mark.parametrize("family", ["single", "double", "adjoint", "combined"])
@pytest.mark.parametrize("k", [0.0, 1.3, 0.8 + 0.2j])
def test_matrix_matches_pointwise(family, k):
    rng = np.random.default_rng(hash((family, str(k))) % 2**32)
    tgt = rng.standard_normal((7, 3)) + [0, 0, 5]
    src = rng.standard_normal((9, 3))
    n_src = rng.standard_normal((9, 3))
    n_src /= np.linalg.norm(n_src, axis=1)[:, None]
    n_tgt = rng.standard_normal((7, 3))
    n_tgt /= np.linalg.norm(n_tgt, axis=1)[:, None]
    spec = KernelSpec(family, k=k, beta_d=1.5, beta_s=-2j)
    mat = kernel_matrix(spec, tgt, src, src_normals=n_src, tgt_normals=n_tgt)
    for i in (0, 3, 6):
        for j in (0, 4, 8):
            ref = kernel_value(spec, tgt[i], src[j], n_y=n_src[j], n_x=n_tgt[i])
            assert mat[i, j] == pytest.approx(ref, rel=1e-14)


def test_combined_is_linear_combination():
    rng = np.random.default_rng(8)
    tgt = rng.standard_normal((5, 3)) + [3, 0, 0]
    src = rng.standard_normal((6, 3))
    nrm = rng.standard_normal((6, 3))
    nrm /= np.linalg.norm(nrm, axis=1)[:, None]
    k, bd, bs = 1.1, 0.7 - 0.3j, 2.0 + 1j
    comb = kernel_matrix(KernelSpec("combined", k=k, beta_d=bd, beta_s=bs),
                         tgt, src, src_normals=nrm)
    dbl = kernel_matrix(KernelSpec("double", k=k), tgt, src, src_normals=nrm)
    sng = kernel_matrix(KernelSpec("single", k=k), tgt, src)
    assert np.max(np.abs(comb - (bd * dbl + bs * sng))) < 1e-14


def test_coincident_matrix_entries_are_zero():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
    mat = kernel_matrix(KernelSpec("single", k=1.0), pts, pts)
    assert np.all(np.diag(mat) == 0)
    assert np.all(mat[~np.eye(3, dtype=bool)] != 0)


def test_potential_matches_matrix():
    be = get_backend()
    rng = np.random.default_rng(12)
    tgt = rng.standard_normal((11, 3)) + [0, 4, 0]
    src = rng.standard_normal((13, 3))
    nrm = rng.standard_normal((13, 3))
    nrm /= np.linalg.norm(nrm, axis=1)[:, None]
    mono = rng.standard_normal(13) + 1j * rng.standard_normal(13)
    dip = rng.standard_normal(13) + 1j * rng.standard_normal(13)
    k = 0.9
    pot = be.potential(k, tgt, src, mono=mono, dipstr=dip, dipvec=nrm)
    ref = (kernel_matrix(KernelSpec("single", k=k), tgt, src) @ mono
           + kernel_matrix(KernelSpec("double", k=k), tgt, src, src_normals=nrm) @ dip)
    assert np.max(np.abs(pot - ref)) < 1e-13 * np.max(np.abs(ref))


def test_potential_gradient():
    be = get_backend()
    rng = np.random.default_rng(21)
    src = rng.standard_normal((10, 3))
    mono = rng.standard_normal(10) + 1j * rng.standard_normal(10)
    tgt = np.array([[2.0, 1.0, -0.5]])
    k = 1.2
    pot, grad = be.potential_grad(k, tgt, src, mono)
    assert pot[0] == pytest.approx(be.potential(k, tgt, src, mono=mono)[0], rel=1e-13)
    h = 1e-6
    for d in range(3):
        step = np.zeros(3)
        step[d] = h
        fd = (be.potential(k, tgt + step, src, mono=mono)[0]
              - be.potential(k, tgt - step, src, mono=mono)[0]) / (2 * h)
        assert grad[0, d] == pytest.approx(fd, rel=1e-8)
    # adjoint operator = target-normal dot gradient
    n_tgt = np.array([[0.3, -0.5, 0.8]])
    n_tgt = n_tgt / np.linalg.norm(n_tgt)
    adj = kernel_matrix(KernelSpec("adjoint", k=k), tgt, src, tgt_normals=n_tgt) @ mono
    assert adj[0] == pytest.approx(np.sum(grad[0] * n_tgt[0]), rel=1e-13)


def test_gauss_identity_brute_force():
    # interior potential of the double layer with unit density is exactly -1;
    # oversampled plain quadrature reaches it since the origin is far from
    # every patch
    spec = KernelSpec("double")

    def dlp_at_origin(refine, q):
        mesh = gen_sphere(refine, 4)
        tot = 0.0
        for j in range(mesh.npatches):
            x, n, w = oversample_patch(mesh, j, q)
            tot += np.sum(kernel_value(spec, np.zeros(3), x, n_y=n) * w)
        return tot

    coarse = abs(dlp_at_origin(0, 8) + 1)
    fine = abs(dlp_at_origin(1, 12) + 1)
    assert coarse < 1e-3
    assert fine < coarse / 10


def test_backend_name_is_known():
    assert backend_name() in ("cython", "numpy")


def test_backend_parity():
    # the compiled backend and the numpy fallback must agree on every op
    cy = pytest.importorskip("lcquad._kernels_cy")
    from lcquad import _kernels_np as npb

    rng = np.random.default_rng(99)
    tgt = rng.standard_normal((17, 3)) * 2
    src = rng.standard_normal((23, 3))
    n_src = rng.standard_normal((23, 3))
    n_src /= np.linalg.norm(n_src, axis=1)[:, None]
    n_tgt = rng.standard_normal((17, 3))
    n_tgt /= np.linalg.norm(n_tgt, axis=1)[:, None]
    mono = rng.standard_normal(23) + 1j * rng.standard_normal(23)
    dip = rng.standard_normal(23) + 1j * rng.standard_normal(23)
    for k in (0.0, 1.7, 0.4 + 0.9j):
        pairs = [
            (cy.matrix_single(k, tgt, src), npb.matrix_single(k, tgt, src)),
            (cy.matrix_double(k, tgt, src, n_src), npb.matrix_double(k, tgt, src, n_src)),
            (cy.matrix_adjoint(k, tgt, src, n_tgt), npb.matrix_adjoint(k, tgt, src, n_tgt)),
            (cy.matrix_combined(k, tgt, src, n_src, 1.5, -2j),
             npb.matrix_combined(k, tgt, src, n_src, 1.5, -2j)),
            (cy.potential(k, tgt, src, mono=mono, dipstr=dip, dipvec=n_src),
             npb.potential(k, tgt, src, mono=mono, dipstr=dip, dipvec=n_src)),
        ]
        gc, gn = cy.potential_grad(k, tgt, src, mono), npb.potential_grad(k, tgt, src, mono)
        pairs += [(gc[0], gn[0]), (gc[1], gn[1])]
        for a, b in pairs:
            scale = max(np.max(np.abs(b)), 1e-30)
            assert np.max(np.abs(a - b)) < 1e-13 * scale

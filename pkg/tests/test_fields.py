import numpy as np
import pytest

from holonomy_lab import exterior as ext
from holonomy_lab import special_forms as sf
from holonomy_lab.fields import (
    CoframeField,
    FormField,
    TorusGrid,
    cmc_functional,
    coclosed_residual,
    coframe_hodge_matrix,
    d,
    d_values,
    diff_box,
    g2_residuals,
    harmonic_residual,
    modified_wavenumber,
    partial,
    solve_connection,
    su3_residuals,
)


def rand_field(rng, grid, degree, extra=()):
    from math import comb
    return rng.normal(size=grid.shape + extra + (comb(grid.dim, degree),))


def rotation(rng):
    Q, R = np.linalg.qr(rng.normal(size=(3, 3)))
    Q = Q * np.sign(np.diag(R))
    return Q if np.linalg.det(Q) > 0 else -Q


def test_grid_validation():
    with pytest.raises(ValueError):
        TorusGrid((3, 8), stencil="fd4")
    with pytest.raises(ValueError):
        TorusGrid((8, 8), stencil="upwind")
    with pytest.raises(ValueError):
        TorusGrid((8, 8), period=(1.0,))
    g = TorusGrid((4, 8), period=2.0)
    assert g.spacing == (0.5, 0.25)
    assert g.npoints == 32
    assert TorusGrid((2, 2), stencil="spectral").dim == 2


def test_fd4_converges_at_fourth_order():
    errs = []
    for n in (16, 32, 64):
        g = TorusGrid((n,))
        x = g.coords()[0]
        errs.append(np.abs(partial(np.sin(3 * x), 0, g) - 3 * np.cos(3 * x)).max())
    assert 14.0 < errs[0] / errs[1] < 17.0
    assert 15.0 < errs[1] / errs[2] < 16.5


def test_spectral_derivative_is_exact_below_nyquist():
    g = TorusGrid((16, 12), stencil="spectral")
    x, y = g.coords()
    f = np.cos(7 * x) * np.sin(5 * y)
    np.testing.assert_allclose(partial(f, 0, g), -7 * np.sin(7 * x) * np.sin(5 * y), atol=1e-12)
    np.testing.assert_allclose(partial(f, 1, g), 5 * np.cos(7 * x) * np.cos(5 * y), atol=1e-12)


def test_modified_wavenumber_matches_stencil():
    g = TorusGrid((32,))
    x = g.coords()[0]
    for k in (1, 5, 11):
        got = partial(np.sin(k * x), 0, g)
        kap = modified_wavenumber(k, g.spacing[0])
        np.testing.assert_allclose(got, kap * np.cos(k * x), atol=1e-12)
    assert modified_wavenumber(3, 0.1, "spectral") == 3


def test_partial_offset_skips_leading_axes():
    g = TorusGrid((8, 8))
    rng = np.random.default_rng(0)
    v = rng.normal(size=(3, 8, 8, 2))
    out = partial(v, 1, g, offset=1)
    np.testing.assert_allclose(out[2], partial(v[2], 1, g), atol=1e-14)


def test_diff_box_exact_on_quartics():
    x = np.linspace(-1, 2, 11)
    h = x[1] - x[0]
    np.testing.assert_allclose(diff_box(x ** 4 - 2 * x, 0, h), 4 * x ** 3 - 2, atol=1e-11)
    np.testing.assert_allclose(diff_box(x ** 2, 0, h, order=2), 2 * x, atol=1e-12)
    with pytest.raises(ValueError):
        diff_box(x[:4], 0, h)


def test_d_of_function_is_gradient():
    g = TorusGrid((16, 16, 16), stencil="spectral")
    x, y, z = g.coords()
    f = FormField(g, 0, (np.sin(x) * np.cos(2 * z))[..., None])
    df = d(f).values
    np.testing.assert_allclose(df[..., 0], np.cos(x) * np.cos(2 * z), atol=1e-12)
    np.testing.assert_allclose(df[..., 1], 0.0, atol=1e-12)
    np.testing.assert_allclose(df[..., 2], -2 * np.sin(x) * np.sin(2 * z), atol=1e-12)


def test_d_of_one_form_example_fd4():
    # d(sin x dy) = cos x dx ^ dy to 4th order
    errs = []
    for n in (16, 32):
        g = TorusGrid((n, 4))
        x, _ = g.coords()
        vals = np.zeros(g.shape + (2,))
        vals[..., 1] = np.sin(x)
        errs.append(np.abs(d(FormField(g, 1, vals)).values[..., 0] - np.cos(x)).max())
    assert errs[0] < 1e-3 and 15 < errs[0] / errs[1] < 17


def test_d_of_one_form_example():
    # d(sin x dy) = cos x dx ^ dy
    g = TorusGrid((16, 16), stencil="spectral")
    x, _ = g.coords()
    vals = np.zeros(g.shape + (2,))
    vals[..., 1] = np.sin(x)
    np.testing.assert_allclose(d(FormField(g, 1, vals)).values[..., 0], np.cos(x), atol=1e-12)


@pytest.mark.parametrize("stencil", ["fd4", "spectral"])
def test_d_squared_vanishes(stencil):
    rng = np.random.default_rng(1)
    g = TorusGrid((6, 8, 6, 4), stencil=stencil)
    for p in range(3):
        v = rand_field(rng, g, p)
        dd = d_values(d_values(v, g, p), g, p + 1)
        assert np.abs(dd).max() < 1e-10


def test_d_commutes_with_translation():
    rng = np.random.default_rng(2)
    g = TorusGrid((8, 6, 10))
    v = rand_field(rng, g, 1)
    shifted = np.roll(v, (3, -2), axis=(0, 2))
    np.testing.assert_array_equal(np.roll(d_values(v, g, 1), (3, -2), axis=(0, 2)),
                                  d_values(shifted, g, 1))


def test_leibniz_rule_spectral():
    g = TorusGrid((16, 16, 16), stencil="spectral")
    x, y, z = g.coords()
    f = FormField(g, 0, (np.cos(x + y))[..., None])
    a = np.zeros(g.shape + (3,))
    a[..., 2] = np.sin(2 * z - x)
    a[..., 0] = np.cos(y)
    a = FormField(g, 1, a)
    lhs = d(f.wedge(a)).values
    rhs = d(f).wedge(a).values + f.wedge(d(a)).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-11)


def test_d_rejects_top_degree_and_bad_shapes():
    g = TorusGrid((4, 4))
    with pytest.raises(ValueError):
        d(FormField(g, 2, np.zeros((4, 4, 1))))
    with pytest.raises(ValueError):
        FormField(g, 1, np.zeros((4, 4, 3)))


def test_coframe_hodge_matches_metric_hodge():
    rng = np.random.default_rng(3)
    E = np.eye(3) + 0.3 * rng.normal(size=(5, 3, 3))
    E[0] = E[0][[1, 0, 2]]          # one negatively oriented coframe
    for p in range(4):
        got = coframe_hodge_matrix(E, p)
        for j in range(5):
            orient = np.sign(np.linalg.det(E[j]))
            want = ext.hodge_matrix(E[j].T @ E[j], orient, p)
            np.testing.assert_allclose(got[j], want, atol=1e-11)


def test_coframe_rejects_degenerate_points():
    g = TorusGrid((4, 4, 4))
    E = CoframeField.flat(g).E
    E[1, 2, 3] = 0.0
    with pytest.raises(sf.StructureError, match=r"\(1, 2, 3\)"):
        CoframeField(g, E)


def test_connection_solves_structure_equation():
    rng = np.random.default_rng(4)
    g = TorusGrid((8, 8, 8))
    x, y, z = g.coords()
    E = np.broadcast_to(np.eye(3), g.shape + (3, 3)).copy()
    E[..., 0, 1] += 0.2 * np.sin(z)
    E[..., 2, 0] += 0.1 * np.cos(x + y)
    E[..., 1, 1] += 0.2 * np.sin(x) * np.cos(z)
    eta = CoframeField(g, E)
    conn = solve_connection(eta)
    assert conn.structure_residual(eta) < 1e-12
    th = conn.full()
    np.testing.assert_allclose(th, -np.swapaxes(th, -2, -3), atol=0)
    assert solve_connection(CoframeField.flat(g)).structure_residual(CoframeField.flat(g)) == 0.0
    del rng


def test_flat_coframe_residuals_vanish():
    g = TorusGrid((8, 8, 8))
    eta = CoframeField.flat(g)
    _, sup = coclosed_residual(eta)
    assert sup == 0.0
    assert np.abs(cmc_functional(eta)).max() == 0.0
    for a in range(3):
        assert harmonic_residual(eta, a).sup_norm() == 0.0


def test_shear_coframe_is_coclosed():
    g = TorusGrid((16, 16, 16))
    x, _, z = g.coords()
    E = CoframeField.flat(g).E
    E[..., 1, 2] += 0.1 * np.sin(x) * np.cos(2 * z)
    _, sup = coclosed_residual(CoframeField(g, E))
    assert sup < 1e-14


def test_berger_cmc_oracle():
    # eta = (a e1, a e2, b e3) with de1 = 2 e23 and cyclic: H = 4/b + 2b/a^2
    g = TorusGrid((4, 4, 4))
    a, b = 1.3, 0.7
    E = np.broadcast_to(np.diag([a, a, b]), g.shape + (3, 3)).copy()
    deta = np.zeros(g.shape + (3, 3))
    deta[..., 0, 2] = 2 * a      # e23
    deta[..., 1, 1] = -2 * a     # e31 = -e13
    deta[..., 2, 0] = 2 * b      # e12
    H = cmc_functional(CoframeField(g, E), deta)
    np.testing.assert_allclose(H, 4 / b + 2 * b / a ** 2, rtol=1e-14)


def test_cmc_invariant_under_constant_rotation():
    rng = np.random.default_rng(5)
    g = TorusGrid((8, 8, 8), stencil="spectral")
    x, y, z = g.coords()
    E = np.broadcast_to(np.eye(3), g.shape + (3, 3)).copy()
    E[..., 0, 2] += 0.2 * np.cos(x - y)
    E[..., 1, 0] += 0.1 * np.sin(z)
    R = rotation(rng)
    H1 = cmc_functional(CoframeField(g, E))
    H2 = cmc_functional(CoframeField(g, np.einsum("ab,...bi->...ai", R, E)))
    np.testing.assert_allclose(H1, H2, atol=1e-12)
    assert np.abs(H1).max() > 1e-3


def test_harmonic_residual_conformal_oracle():
    # E = e^f I with f = f(x1): *dx^1 = e^f dx^{23}, so d(*dx^1) = f' e^f dx^{123}
    # and d(*dx^2), d(*dx^3) vanish
    g = TorusGrid((32, 8, 8), stencil="spectral")
    x = g.coords()[0]
    f = 0.1 * np.sin(x)
    E = np.exp(f)[..., None, None] * np.eye(3)
    eta = CoframeField(g, E)
    want = 0.1 * np.cos(x) * np.exp(f)
    np.testing.assert_allclose(harmonic_residual(eta, 0).values[..., 0], want, atol=1e-12)
    assert harmonic_residual(eta, 1).sup_norm() < 1e-12
    assert harmonic_residual(eta, 2).sup_norm() < 1e-12


def test_harmonic_residual_equivariant_under_axis_relabeling():
    g = TorusGrid((8, 8, 8))
    x, y, z = g.coords()
    E = np.broadcast_to(np.eye(3), g.shape + (3, 3)).copy()
    E[..., 0, 1] += 0.2 * np.sin(z)
    E[..., 2, 2] += 0.1 * np.cos(x + 2 * y)
    perm = [2, 0, 1]
    # relabel coordinates: new axis j is old axis perm[j]
    E2 = np.transpose(E, perm + [3, 4])[..., perm]
    total = sum(harmonic_residual(CoframeField(g, E), a).sup_norm() for a in range(3))
    total2 = sum(harmonic_residual(CoframeField(g, E2), a).sup_norm() for a in range(3))
    assert total == pytest.approx(total2, rel=1e-12)


def _stretched(g, eps=0.5):
    E = CoframeField.flat(g).E
    E[..., 2, 2] = 1 + eps * np.sin(g.coords()[0])
    return CoframeField(g, E)


def test_coclosed_residual_hand_expansion():
    # eta = (dx1, dx2, l dx3), l = 1 + sin(x1)/2: d(*eta_1) = d(l dx23) = l' dx123, others 0
    for stencil, tol in (("spectral", 1e-12), ("fd4", 2e-4)):
        g = TorusGrid((32, 4, 4), stencil=stencil)
        fields, sup = coclosed_residual(_stretched(g))
        x = g.coords()[0]
        np.testing.assert_allclose(fields[0].values[..., 0], 0.5 * np.cos(x), atol=tol)
        assert fields[1].sup_norm() < 1e-14 and fields[2].sup_norm() < 1e-14
        assert sup == pytest.approx(0.5, abs=tol)


def test_residuals_converge_at_stencil_order():
    errs_cocl, errs_cmc = [], []
    for n in (16, 32):
        g = TorusGrid((n, 4, 4))
        E = CoframeField.flat(g).E
        x = g.coords()[0]
        E[..., 1, 2] += 0.3 * np.sin(x)
        E[..., 2, 2] += 0.3 * np.cos(x)
        E[..., 2, 0] += 0.2 * np.sin(2 * x)
        eta = CoframeField(g, E)
        ref = CoframeField(g.with_stencil("spectral"), E)
        f1, _ = coclosed_residual(eta)
        f2, _ = coclosed_residual(ref)
        errs_cocl.append(max(np.abs(a.values - b.values).max() for a, b in zip(f1, f2)))
        errs_cmc.append(np.abs(cmc_functional(eta) - cmc_functional(ref)).max())
    assert np.log2(errs_cocl[0] / errs_cocl[1]) >= 3.5
    assert np.log2(errs_cmc[0] / errs_cmc[1]) >= 3.5


def test_coclosed_residual_translation_invariant():
    g = TorusGrid((8, 8, 8))
    x, y, z = g.coords()
    E = CoframeField.flat(g).E
    E[..., 0, 2] += 0.2 * np.sin(x + y)
    E[..., 1, 1] += 0.1 * np.cos(z)
    _, a = coclosed_residual(CoframeField(g, E))
    _, b = coclosed_residual(CoframeField(g, np.roll(E, (1, 3, -2), axis=(0, 1, 2))))
    assert a == b


def test_connection_left_invariant_oracle():
    # eta = e with d e_a = 2 e_{bc} (cyclic): theta_ab = eps_abc eta_c
    g = TorusGrid((4, 4, 4))
    eta = CoframeField.flat(g)
    deta = np.zeros(g.shape + (3, 3))
    deta[..., 0, 2], deta[..., 1, 1], deta[..., 2, 0] = 2.0, -2.0, 2.0
    conn = solve_connection(eta, deta)
    want = np.array([[0, 0, 1], [0, -1, 0], [1, 0, 0]], dtype=float)   # theta_12, theta_13, theta_23
    np.testing.assert_allclose(conn.upper, np.broadcast_to(want, conn.upper.shape), atol=1e-14)
    assert conn.structure_residual(eta, deta) < 1e-14


def test_g2_residuals_on_exact_perturbation():
    # sigma = phi + eps d(alpha): d sigma = 0 up to roundoff, d *sigma = O(eps)
    g = TorusGrid((4,) * 7, stencil="spectral")
    x = g.coords()
    alpha = np.zeros(g.shape + (21,))
    alpha[..., 0] = np.sin(x[2] + x[3])
    alpha[..., 7] = np.cos(x[0] - x[5])
    alpha[..., 15] = np.sin(x[6])
    da = d_values(alpha, g, 2)
    phi = sf.standard_phi().sigma.coeffs
    out = []
    for eps in (1e-2, 5e-3):
        res = g2_residuals(FormField(g, 3, phi + eps * da))
        assert res["d_sigma"] < 1e-12
        out.append(res["d_star_sigma"])
    assert 1.9 < out[0] / out[1] < 2.1


def test_su3_residual_scales_linearly():
    g = TorusGrid((4,) * 6, stencil="spectral")
    x = g.coords()
    flat = sf.flat_su3()
    w = FormField.constant(g, flat.omega)
    re = FormField.constant(g, flat.Omega_re).values.copy()
    re[..., 3] += 0.1 * np.sin(x[5])
    im = FormField.constant(g, flat.Omega_im)
    r1 = su3_residuals(w, FormField(g, 3, re), im)["d_re_Omega"]
    r3 = su3_residuals(w, FormField(g, 3, 3.0 * re), im)["d_re_Omega"]
    assert r1 > 0 and r3 == pytest.approx(3 * r1, rel=1e-12)


def test_su3_and_g2_residuals_on_flat_models():
    g6 = TorusGrid((4,) * 6)
    flat = sf.flat_su3()
    res = su3_residuals(FormField.constant(g6, flat.omega), FormField.constant(g6, flat.Omega_re),
                        FormField.constant(g6, flat.Omega_im))
    assert res["d_re_Omega"] == 0.0 and res["d_half_omega2"] == 0.0
    assert np.abs(res["mean_curvature"]).max() == 0.0
    g7 = TorusGrid((4,) * 7)
    res = g2_residuals(FormField.constant(g7, sf.standard_phi().sigma))
    assert res["d_sigma"] == 0.0 and res["d_star_sigma"] == 0.0
    assert np.abs(res["cmc"]).max() == 0.0


def test_g2_residuals_reject_non_definite():
    g7 = TorusGrid((4,) * 7)
    with pytest.raises(sf.StructureError):
        g2_residuals(FormField.constant(g7, ext.Form.from_terms(7, {"123": 1.0})))

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from math import comb

from holonomy_lab import exterior as ext
from holonomy_lab.exterior import Form, LinearMap, Metric

import oracles


def rand_metric(rng, n):
    M = rng.normal(size=(n, n))
    return M @ M.T + n * np.eye(n)


@st.composite
def form_pair(draw, max_dim=5):
    n = draw(st.integers(1, max_dim))
    p = draw(st.integers(0, n))
    q = draw(st.integers(0, n - p))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    return n, p, q, rng.uniform(-1, 1, comb(n, p)), rng.uniform(-1, 1, comb(n, q))


def test_basis_order():
    assert [ext.label(m) for m in ext.basis(3, 2)] == ["e12", "e13", "e23"]
    assert len(ext.basis(8, 4)) == 70


def test_basis_rejects_bad_dims():
    with pytest.raises(ext.ExteriorError):
        ext.basis(9, 1)
    with pytest.raises(ext.ExteriorError):
        ext.basis(3, 4)


def test_wedge_examples():
    e1, e2, e3 = (Form.basis_form1(3, i) for i in (1, 2, 3))
    assert (e1 ^ e2).terms() == {"12": 1.0}
    assert (e2 ^ e1).terms() == {"12": -1.0}
    assert (e1 ^ e1).terms() == {}
    assert (e3 ^ e1 ^ e2).terms() == {"123": 1.0}
    assert Form.basis_form(4, [3, 1]).terms() == {"13": -1.0}


@settings(max_examples=200, deadline=None)
@given(form_pair())
def test_wedge_matches_brute_force(case):
    n, p, q, a, b = case
    np.testing.assert_allclose(ext.wedge_coeffs(a, b, n, p, q), oracles.wedge(a, b, n, p, q),
                               atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(form_pair())
def test_graded_commutativity(case):
    n, p, q, a, b = case
    np.testing.assert_allclose(ext.wedge_coeffs(a, b, n, p, q),
                               (-1) ** (p * q) * ext.wedge_coeffs(b, a, n, q, p), atol=1e-12)


def test_wedge_associative():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(3, 9))
        p, q, r = 1, int(rng.integers(0, 3)), int(rng.integers(0, n - 3 + 1))
        if p + q + r > n:
            continue
        a, b, c = (rng.uniform(-1, 1, comb(n, k)) for k in (p, q, r))
        lhs = ext.wedge_coeffs(ext.wedge_coeffs(a, b, n, p, q), c, n, p + q, r)
        rhs = ext.wedge_coeffs(a, ext.wedge_coeffs(b, c, n, q, r), n, p, q + r)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_wedge_batched_matches_pointwise():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(5, 7, 21))
    b = rng.normal(size=(5, 7, 35))
    out = ext.wedge_coeffs(a, b, 7, 2, 3)
    for i in (0, 4):
        for j in (0, 6):
            np.testing.assert_allclose(out[i, j], ext.wedge_coeffs(a[i, j], b[i, j], 7, 2, 3),
                                       atol=1e-13)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_interior_matches_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, n + 1))
    v, a = rng.normal(size=n), rng.normal(size=comb(n, k))
    np.testing.assert_allclose(ext.interior_coeffs(v, a, n, k), oracles.interior(v, a, n, k),
                               atol=1e-12)


def test_interior_is_antiderivation():
    rng = np.random.default_rng(3)
    n, p, q = 6, 2, 3
    v, a, b = rng.normal(size=n), rng.normal(size=comb(n, p)), rng.normal(size=comb(n, q))
    lhs = ext.interior_coeffs(v, ext.wedge_coeffs(a, b, n, p, q), n, p + q)
    rhs = (ext.wedge_coeffs(ext.interior_coeffs(v, a, n, p), b, n, p - 1, q)
           + (-1) ** p * ext.wedge_coeffs(a, ext.interior_coeffs(v, b, n, q), n, p, q - 1))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2 ** 32 - 1), st.sampled_from([1, -1]))
def test_hodge_matches_brute_force(n, seed, orientation):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(0, n + 1))
    g = rand_metric(rng, n)
    b = rng.normal(size=comb(n, k))
    np.testing.assert_allclose(ext.hodge_coeffs(g, orientation, b, k),
                               oracles.hodge(g, orientation, b, k), atol=1e-10)


def test_hodge_euclidean_examples():
    m = Metric.identity(3)
    e1 = Form.basis_form1(3, 1)
    assert ext.hodge(m, e1).terms() == {"23": 1.0}
    assert ext.hodge(m, Form.basis_form(3, [1, 3])).terms() == {"2": -1.0}
    assert ext.hodge(Metric.identity(3, -1), e1).terms() == {"23": -1.0}
    vol = ext.volume_form(Metric(2, np.diag([4.0, 9.0])))
    assert vol.coeffs[0] == pytest.approx(6.0)


def test_star_star_and_pairing():
    rng = np.random.default_rng(4)
    for n in range(1, 9):
        g = rand_metric(rng, n)
        for k in range(n + 1):
            a, b = rng.normal(size=comb(n, k)), rng.normal(size=comb(n, k))
            H = ext.hodge_matrix(g, 1, k)
            np.testing.assert_allclose(a @ H @ ext.hodge_matrix(g, 1, n - k),
                                       (-1) ** (k * (n - k)) * a, atol=1e-11)
            top = ext.wedge_coeffs(a, b @ H, n, k, n - k)[0]
            ip = a @ ext.inner_matrix(g, k) @ b
            assert top == pytest.approx(ip * np.sqrt(np.linalg.det(g)), abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_pullback_matches_brute_force(m, n, seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(0, min(m, n) + 1))
    A, a = rng.normal(size=(m, n)), rng.normal(size=comb(m, k))
    np.testing.assert_allclose(ext.pullback_coeffs(A, a, k), oracles.pullback(A, a, k), atol=1e-11)


def test_compound_entries_are_minors():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(3, 6, 7))
    C = ext.compound(A, 3)
    rows, cols = oracles.subsets(6, 3), oracles.subsets(7, 3)
    for b in range(3):
        for i in (0, 7, 19):
            for j in (0, 11, 34):
                minor = np.linalg.det(A[b][np.ix_(rows[i], cols[j])])
                assert C[b, i, j] == pytest.approx(minor, abs=1e-12)


def test_pullback_is_functorial_and_multiplicative():
    rng = np.random.default_rng(6)
    A, B = LinearMap(rng.normal(size=(5, 4))), LinearMap(rng.normal(size=(4, 3)))
    a, b = Form(5, 1, rng.normal(size=5)), Form(5, 2, rng.normal(size=10))
    assert ext.pullback(A @ B, a ^ b).allclose(ext.pullback(B, ext.pullback(A, a ^ b)))
    assert ext.pullback(A, a ^ b).allclose(ext.pullback(A, a) ^ ext.pullback(A, b))


def test_metric_validation():
    with pytest.raises(ext.ExteriorError):
        Metric(2, [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ext.ExteriorError):
        Metric(2, [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ext.ExteriorError):
        Form(3, 2, np.zeros(2))


def test_inner_matrix_matches_brute_force():
    rng = np.random.default_rng(7)
    for n in range(1, 6):
        g = rand_metric(rng, n)
        for k in range(n + 1):
            a, b = rng.normal(size=comb(n, k)), rng.normal(size=comb(n, k))
            assert a @ ext.inner_matrix(g, k) @ b == pytest.approx(oracles.inner(a, b, g, k), abs=1e-11)

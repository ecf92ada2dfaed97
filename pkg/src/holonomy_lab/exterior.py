"""Dense exterior algebra on oriented inner-product spaces R^n, n <= 8.

A k-form on R^n is stored as a float64 vector of its C(n, k) coefficients.
Basis k-subsets of {1..n} are ordered by increasing bitmask (bit i-1 stands
for e^i), so on R^3 the 2-form order is e^{12}, e^{13}, e^{23}.  Every sign
in this module comes from the parity of the sorting permutation.

The ``*_coeffs`` functions work on raw arrays and accept arbitrary leading
batch axes; the grid code in :mod:`holonomy_lab.fields` lives on them.  The
:class:`Form` / :class:`Metric` / :class:`LinearMap` wrappers are the
pointwise value types.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb
from typing import Sequence

import numpy as np

MAX_DIM = 8


class ExteriorError(ValueError):
    """Raised for dimension/degree mismatches and invalid metrics."""


# ---------------------------------------------------------------------------
# basis bookkeeping

def _check_dim(n: int) -> None:
    if not 1 <= n <= MAX_DIM:
        raise ExteriorError(f"dimension must be in 1..{MAX_DIM}, got {n}")


@lru_cache(maxsize=None)
def basis(n: int, k: int) -> tuple[int, ...]:
    """Bitmasks of the k-subsets of {1..n} in canonical (increasing) order."""
    _check_dim(n)
    if not 0 <= k <= n:
        raise ExteriorError(f"degree {k} out of range for dimension {n}")
    return tuple(m for m in range(1 << n) if bin(m).count("1") == k)


@lru_cache(maxsize=None)
def basis_index(n: int, k: int) -> dict[int, int]:
    return {m: i for i, m in enumerate(basis(n, k))}


def subset(mask: int) -> tuple[int, ...]:
    """0-based indices contained in ``mask``, increasing."""
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return tuple(out)


def label(mask: int) -> str:
    return "e" + "".join(str(i + 1) for i in subset(mask))


def merge_sign(a: int, b: int) -> int:
    """Sign of e^A ^ e^B relative to e^{A|B}; 0 if the subsets overlap."""
    if a & b:
        return 0
    swaps = 0
    for i in subset(a):
        swaps += bin(b & ((1 << i) - 1)).count("1")
    return -1 if swaps & 1 else 1


@lru_cache(maxsize=None)
def _wedge_table(n: int, p: int, q: int):
    bp, bq = basis(n, p), basis(n, q)
    idx = basis_index(n, p + q)
    ia, ib, io, sg = [], [], [], []
    for i, a in enumerate(bp):
        for j, b in enumerate(bq):
            s = merge_sign(a, b)
            if s:
                ia.append(i)
                ib.append(j)
                io.append(idx[a | b])
                sg.append(s)
    ia = np.array(ia, dtype=np.intp)
    ib = np.array(ib, dtype=np.intp)
    scatter = np.zeros((len(io), comb(n, p + q)))
    scatter[np.arange(len(io)), io] = sg
    return ia, ib, scatter


@lru_cache(maxsize=None)
def _interior_table(n: int, k: int):
    # v _| e^I = sum_m (-1)^m v_{i_m} e^{I - i_m}
    idx = basis_index(n, k - 1)
    src, var, dst, sg = [], [], [], []
    for s, mask in enumerate(basis(n, k)):
        for pos, i in enumerate(subset(mask)):
            src.append(s)
            var.append(i)
            dst.append(idx[mask & ~(1 << i)])
            sg.append(-1 if pos & 1 else 1)
    scatter = np.zeros((len(dst), comb(n, k - 1)))
    scatter[np.arange(len(dst)), dst] = sg
    return np.array(src, dtype=np.intp), np.array(var, dtype=np.intp), scatter


@lru_cache(maxsize=None)
def _star_table(n: int, k: int):
    full = (1 << n) - 1
    idx = basis_index(n, n - k)
    perm = np.empty(comb(n, k), dtype=np.intp)
    sign = np.empty(comb(n, k))
    for i, mask in enumerate(basis(n, k)):
        perm[i] = idx[full & ~mask]
        sign[i] = merge_sign(mask, full & ~mask)
    mat = np.zeros((comb(n, k), comb(n, n - k)))
    mat[np.arange(len(perm)), perm] = sign
    return mat


# ---------------------------------------------------------------------------
# array-level kernels (leading axes are batch axes)

def wedge_coeffs(a: np.ndarray, b: np.ndarray, n: int, p: int, q: int) -> np.ndarray:
    if p + q > n:
        raise ExteriorError(f"degree overflow: {p} + {q} > {n}")
    ia, ib, scatter = _wedge_table(n, p, q)
    if not len(ia):
        shape = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
        return np.zeros(shape + (comb(n, p + q),))
    return _gather_scatter(a, ia, b, ib, scatter)


_BLOCK = 200_000


def _gather_scatter(a: np.ndarray, ia, b: np.ndarray, ib, scatter: np.ndarray) -> np.ndarray:
    """(a[..., ia] * b[..., ib]) @ scatter, blocked over the batch to stay in cache."""
    shape = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    npts = int(np.prod(shape))
    if npts * len(ia) <= _BLOCK:
        prod = a[..., ia] * b[..., ib]
        flat = prod.reshape(-1, len(ia)) @ scatter
        return flat.reshape(shape + (scatter.shape[1],))
    a2 = np.broadcast_to(a, shape + a.shape[-1:]).reshape(npts, a.shape[-1])
    b2 = np.broadcast_to(b, shape + b.shape[-1:]).reshape(npts, b.shape[-1])
    out = np.empty((npts, scatter.shape[1]))
    step = max(1, _BLOCK // len(ia))
    for s0 in range(0, npts, step):
        out[s0:s0 + step] = (a2[s0:s0 + step, ia] * b2[s0:s0 + step, ib]) @ scatter
    return out.reshape(shape + (scatter.shape[1],))


def interior_coeffs(v: np.ndarray, a: np.ndarray, n: int, k: int) -> np.ndarray:
    if k < 1:
        raise ExteriorError("interior product of a 0-form")
    src, var, scatter = _interior_table(n, k)
    return _gather_scatter(v, var, a, src, scatter)


def star_matrix(n: int, k: int) -> np.ndarray:
    """Matrix of the Euclidean Hodge star Lambda^k -> Lambda^{n-k} (row convention)."""
    return _star_table(n, k)


@lru_cache(maxsize=None)
def _compound_step(m: int, n: int, j: int):
    """Laplace expansion of j x j minors along their last row.

    det A[I, J] = sum_t (-1)^(j + t) A[i_last, c_t] det A[I - i_last, J - c_t].
    """
    rlow, clow = basis_index(m, j - 1), basis_index(n, j - 1)
    rows = basis(m, j)
    prev_row = np.array([rlow[r & ~(1 << (r.bit_length() - 1))] for r in rows], dtype=np.intp)
    last_row = np.array([r.bit_length() - 1 for r in rows], dtype=np.intp)
    cols = basis(n, j)
    prev_col = np.empty((len(cols), j), dtype=np.intp)
    elem = np.empty((len(cols), j), dtype=np.intp)
    sign = np.empty(j)
    for ci, c in enumerate(cols):
        for t, e in enumerate(subset(c)):
            prev_col[ci, t] = clow[c & ~(1 << e)]
            elem[ci, t] = e
    for t in range(j):
        sign[t] = 1.0 if (j - 1 - t) % 2 == 0 else -1.0
    return prev_row, last_row, prev_col, elem, sign


def compound(A: np.ndarray, k: int) -> np.ndarray:
    """k-th compound of ``A`` (..., m, n): entry [I, J] is det A[I, J].

    Row I holds the coefficients of A^*(e^I), so ``alpha @ compound(A, k)`` is
    the pullback of alpha.  Minors are built by Laplace expansion with the
    batch axis innermost, which keeps the gathers contiguous.
    """
    A = np.asarray(A, dtype=float)
    m, n = A.shape[-2:]
    batch = A.shape[:-2]
    if k == 0:
        return np.ones(batch + (1, 1))
    if k > min(m, n):
        return np.zeros(batch + (comb(m, k), comb(n, k) if k <= n else 0))
    if k == 1:
        return A.copy()
    flat = A.reshape((-1, m, n))
    npts = flat.shape[0]
    out = np.empty((npts, comb(m, k), comb(n, k)))
    block = max(1, 100_000 // (comb(m, k) * comb(n, k) * k))
    for s0 in range(0, npts, block):
        At = np.ascontiguousarray(np.moveaxis(flat[s0:s0 + block], 0, -1))  # (m, n, B)
        prev = At
        for j in range(2, k + 1):
            prev_row, last_row, prev_col, elem, sign = _compound_step(m, n, j)
            g = prev[prev_row][:, prev_col]               # (R, C, j, B)
            h = At[last_row][:, elem]                     # (R, C, j, B)
            prev = np.einsum("rctb,t->rcb", g * h, sign)
        out[s0:s0 + block] = np.moveaxis(prev, -1, 0)
    return out.reshape(batch + out.shape[1:])


def pullback_coeffs(A: np.ndarray, a: np.ndarray, k: int) -> np.ndarray:
    """Coefficients of A^* a for A of shape (..., m, n) and a k-form on R^m."""
    if k == 0:
        return np.broadcast_to(a, np.broadcast_shapes(a.shape, A.shape[:-2] + (1,))).copy()
    return np.einsum("...i,...ij->...j", a, compound(A, k))


def orthonormal_coframe(g: np.ndarray) -> np.ndarray:
    """P with g = P^T P and det P > 0 (P = L^T from the Cholesky factor)."""
    try:
        L = np.linalg.cholesky(g)
    except np.linalg.LinAlgError as exc:
        raise ExteriorError("metric is not positive definite") from exc
    return np.swapaxes(L, -1, -2)


def hodge_matrix(g: np.ndarray, orientation, k: int) -> np.ndarray:
    """Matrix of *_g on k-forms, shape (..., C(n,k), C(n,n-k)).

    Transforms to the g-orthonormal coframe theta = P e, stars there and
    transforms back.
    """
    g = np.asarray(g, dtype=float)
    n = g.shape[-1]
    P = orthonormal_coframe(g)
    to_theta = compound(np.linalg.inv(P), k)
    back = compound(P, n - k)
    mat = to_theta @ star_matrix(n, k) @ back
    return mat * np.asarray(orientation, dtype=float)[..., None, None]


def hodge_coeffs(g: np.ndarray, orientation, a: np.ndarray, k: int) -> np.ndarray:
    return np.einsum("...i,...ij->...j", a, hodge_matrix(g, orientation, k))


def inner_matrix(g: np.ndarray, k: int) -> np.ndarray:
    """Gram matrix of the metric induced by g on k-forms (compound of g^-1)."""
    return compound(np.linalg.inv(g), k)


# ---------------------------------------------------------------------------
# value types

@dataclass(frozen=True, eq=False)
class Form:
    """A k-form on R^dim with coefficients in canonical bitmask order."""

    dim: int
    degree: int
    coeffs: np.ndarray

    def __post_init__(self):
        _check_dim(self.dim)
        if not 0 <= self.degree <= self.dim:
            raise ExteriorError(f"degree {self.degree} out of range for dim {self.dim}")
        c = np.array(self.coeffs, dtype=float)
        if c.ndim == 0:
            c = c.reshape(1)
        if c.shape[-1] != comb(self.dim, self.degree):
            raise ExteriorError(
                f"expected {comb(self.dim, self.degree)} coefficients, got {c.shape[-1]}")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zero(cls, dim: int, degree: int) -> "Form":
        return cls(dim, degree, np.zeros(comb(dim, degree)))

    @classmethod
    def basis_form(cls, dim: int, indices: Sequence[int], coeff: float = 1.0) -> "Form":
        """``coeff * e^{i1} ^ ... ^ e^{ik}`` for 1-based (possibly unsorted) indices."""
        f = cls(dim, 0, [coeff])
        for i in indices:
            f = f ^ cls.basis_form1(dim, i)
        return f

    @classmethod
    def basis_form1(cls, dim: int, i: int) -> "Form":
        c = np.zeros(dim)
        c[i - 1] = 1.0
        return cls(dim, 1, c)

    @classmethod
    def from_terms(cls, dim: int, terms: dict[str, float]) -> "Form":
        """Build from {"123": 1.0, "257": -1.0, ...} with 1-based digit labels."""
        out = None
        for key, val in terms.items():
            f = cls.basis_form(dim, [int(ch) for ch in key], val)
            out = f if out is None else out + f
        if out is None:
            raise ExteriorError("from_terms needs at least one term")
        return out

    def coeff(self, indices: Sequence[int]) -> float:
        """Coefficient of e^{i1...ik} (1-based, any order; sign-adjusted)."""
        probe = Form.basis_form(self.dim, indices)
        mask = sum(1 << (i - 1) for i in indices)
        idx = basis_index(self.dim, self.degree)[mask]
        return float(self.coeffs[..., idx] * probe.coeffs[..., idx])

    def terms(self, tol: float = 0.0) -> dict[str, float]:
        return {label(m)[1:]: float(c) for m, c in zip(basis(self.dim, self.degree), self.coeffs)
                if abs(c) > tol}

    def _same_space(self, other: "Form"):
        if self.dim != other.dim or self.degree != other.degree:
            raise ExteriorError("forms live in different spaces")

    def __add__(self, other: "Form") -> "Form":
        self._same_space(other)
        return Form(self.dim, self.degree, self.coeffs + other.coeffs)

    def __sub__(self, other: "Form") -> "Form":
        self._same_space(other)
        return Form(self.dim, self.degree, self.coeffs - other.coeffs)

    def __neg__(self) -> "Form":
        return Form(self.dim, self.degree, -self.coeffs)

    def __mul__(self, s) -> "Form":
        return Form(self.dim, self.degree, self.coeffs * s)

    __rmul__ = __mul__

    def __xor__(self, other: "Form") -> "Form":
        return wedge(self, other)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Form):
            return NotImplemented
        return (self.dim == other.dim and self.degree == other.degree
                and np.array_equal(self.coeffs, other.coeffs))

    def allclose(self, other: "Form", atol: float = 1e-12) -> bool:
        return (self.dim == other.dim and self.degree == other.degree
                and np.allclose(self.coeffs, other.coeffs, rtol=0.0, atol=atol))

    def norm(self) -> float:
        """Euclidean coefficient norm (the standard-metric form norm)."""
        return float(np.linalg.norm(self.coeffs))

    def __repr__(self) -> str:
        body = " + ".join(f"{v:g}*e{k}" for k, v in self.terms(1e-15).items()) or "0"
        return f"Form(dim={self.dim}, degree={self.degree}: {body})"


@dataclass(frozen=True, eq=False)
class Metric:
    """Positive-definite inner product on R^dim plus an orientation sign."""

    dim: int
    g: np.ndarray
    orientation: int = 1

    def __post_init__(self):
        g = np.array(self.g, dtype=float)
        if g.shape != (self.dim, self.dim):
            raise ExteriorError(f"metric must be {self.dim}x{self.dim}")
        if not np.allclose(g, g.T, rtol=0, atol=1e-12 * max(1.0, np.abs(g).max())):
            raise ExteriorError("metric is not symmetric")
        if self.orientation not in (1, -1):
            raise ExteriorError("orientation must be +1 or -1")
        orthonormal_coframe(g)
        object.__setattr__(self, "g", 0.5 * (g + g.T))

    @classmethod
    def identity(cls, dim: int, orientation: int = 1) -> "Metric":
        return cls(dim, np.eye(dim), orientation)

    def det(self) -> float:
        return float(np.linalg.det(self.g))

    def flat(self, v: np.ndarray) -> Form:
        """Lower an index: the covector g(v, .)."""
        return Form(self.dim, 1, self.g @ np.asarray(v, dtype=float))

    def inner(self, a: Form, b: Form) -> float:
        if a.degree != b.degree:
            raise ExteriorError("inner product of forms of different degree")
        return float(a.coeffs @ inner_matrix(self.g, a.degree) @ b.coeffs)


@dataclass(frozen=True, eq=False)
class LinearMap:
    """A linear map R^dim_in -> R^dim_out given by its dim_out x dim_in matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2:
            raise ExteriorError("LinearMap needs a 2-d matrix")
        object.__setattr__(self, "matrix", m)

    @property
    def dim_in(self) -> int:
        return self.matrix.shape[1]

    @property
    def dim_out(self) -> int:
        return self.matrix.shape[0]

    def __matmul__(self, other: "LinearMap") -> "LinearMap":
        return LinearMap(self.matrix @ other.matrix)


# ---------------------------------------------------------------------------
# operations

def wedge(a: Form, b: Form) -> Form:
    if a.dim != b.dim:
        raise ExteriorError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return Form(a.dim, a.degree + b.degree,
                wedge_coeffs(a.coeffs, b.coeffs, a.dim, a.degree, b.degree))


def interior(v, a: Form) -> Form:
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != a.dim:
        raise ExteriorError(f"vector of length {v.shape[-1]} on forms of dim {a.dim}")
    if a.degree == 0:
        raise ExteriorError("interior product needs degree >= 1")
    return Form(a.dim, a.degree - 1, interior_coeffs(v, a.coeffs, a.dim, a.degree))


def hodge(m: Metric, a: Form) -> Form:
    if m.dim != a.dim:
        raise ExteriorError(f"metric dim {m.dim} vs form dim {a.dim}")
    return Form(a.dim, a.dim - a.degree, hodge_coeffs(m.g, m.orientation, a.coeffs, a.degree))


def pullback(A: LinearMap, a: Form) -> Form:
    if a.dim != A.dim_out:
        raise ExteriorError(f"form on R^{a.dim} cannot be pulled back by a map into R^{A.dim_out}")
    if a.degree > A.dim_in:
        raise ExteriorError(f"a {a.degree}-form has no image on R^{A.dim_in}")
    return Form(A.dim_in, a.degree, pullback_coeffs(A.matrix, a.coeffs, a.degree))


def volume_form(m: Metric) -> Form:
    vol = np.zeros(1)
    vol[0] = m.orientation * np.sqrt(m.det())
    return Form(m.dim, m.dim, vol)

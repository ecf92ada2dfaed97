"""Differential forms sampled on flat periodic tori.

Values are stored point-major: a degree-p field on a k-torus is an array of
shape ``resolution + (C(k, p),)`` so every point's coefficients are
contiguous.  Derivatives are 4th-order central differences (``fd4``) or
FFT-based (``spectral``); both are periodic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb
from typing import Optional, Sequence

import numpy as np

from . import exterior as ext
from .exterior import hodge_matrix
from .special_forms import StructureError, g2_metric_coeffs

DEGENERATE_DET = 1e-8
STENCILS = ("fd4", "spectral")
_MIN_RES = {"fd4": 4, "spectral": 2}


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid on R^k / (period Z^k)."""

    resolution: tuple
    period: Optional[tuple] = None
    stencil: str = "fd4"

    def __post_init__(self):
        res = tuple(int(n) for n in self.resolution)
        if not 1 <= len(res) <= ext.MAX_DIM:
            raise ValueError("torus dimension must be 1..8")
        if self.stencil not in STENCILS:
            raise ValueError(f"stencil must be one of {STENCILS}")
        if min(res) < _MIN_RES[self.stencil]:
            raise ValueError(f"{self.stencil} needs at least {_MIN_RES[self.stencil]} points per axis")
        per = self.period
        if per is None:
            per = (2 * np.pi,) * len(res)
        elif np.isscalar(per):
            per = (float(per),) * len(res)
        per = tuple(float(p) for p in per)
        if len(per) != len(res) or min(per) <= 0:
            raise ValueError("periods must be positive, one per axis")
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "period", per)

    @classmethod
    def cube(cls, dim: int, n: int, stencil: str = "fd4", period: float = 2 * np.pi) -> "TorusGrid":
        return cls((n,) * dim, (period,) * dim, stencil)

    @property
    def dim(self) -> int:
        return len(self.resolution)

    @property
    def shape(self) -> tuple:
        return self.resolution

    @property
    def spacing(self) -> tuple:
        return tuple(p / n for p, n in zip(self.period, self.resolution))

    @property
    def npoints(self) -> int:
        return int(np.prod(self.resolution))

    def coords(self) -> list[np.ndarray]:
        axes = [np.arange(n) * h for n, h in zip(self.resolution, self.spacing)]
        return np.meshgrid(*axes, indexing="ij")

    def with_stencil(self, stencil: str) -> "TorusGrid":
        return TorusGrid(self.resolution, self.period, stencil)


# ---------------------------------------------------------------------------
# one-dimensional derivatives

def partial(values: np.ndarray, axis: int, grid: TorusGrid, offset: int = 0) -> np.ndarray:
    """d/dx^axis of grid-sampled values (trailing axes are components).

    ``offset`` counts leading non-grid axes, e.g. a time axis.
    """
    h = grid.spacing[axis]
    n = grid.resolution[axis]
    axis = axis + offset
    if grid.stencil == "fd4":
        p1 = np.roll(values, -1, axis)
        m1 = np.roll(values, 1, axis)
        p2 = np.roll(values, -2, axis)
        m2 = np.roll(values, 2, axis)
        return (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
    k = 2 * np.pi * np.fft.rfftfreq(n, d=h)
    if n % 2 == 0:
        k[-1] = 0.0
    shape = [1] * values.ndim
    shape[axis] = len(k)
    spec = np.fft.rfft(values, axis=axis) * (1j * k).reshape(shape)
    return np.fft.irfft(spec, n=n, axis=axis)


def modified_wavenumber(k, h: float, stencil: str = "fd4"):
    """Effective wavenumber of the first-derivative stencil for exp(i k x)."""
    k = np.asarray(k, dtype=float)
    if stencil == "fd4":
        return (8 * np.sin(k * h) - np.sin(2 * k * h)) / (6 * h)
    return k


_BOX4 = {
    0: (np.array([-25, 48, -36, 16, -3]) / 12.0, 0),
    1: (np.array([-3, -10, 18, -6, 1]) / 12.0, -1),
}


def diff_box(f: np.ndarray, axis: int, h: float, order: int = 4) -> np.ndarray:
    """Non-periodic first derivative: central interior, one-sided edges.

    Exact for polynomials of degree <= order.
    """
    f = np.asarray(f, dtype=float)
    if order == 2:
        return np.gradient(f, h, axis=axis, edge_order=2)
    if order != 4:
        raise ValueError("order must be 2 or 4")
    n = f.shape[axis]
    if n < 5:
        raise ValueError("4th-order box stencil needs at least 5 points per axis")
    fm = np.moveaxis(f, axis, 0)
    out = np.empty_like(fm)
    out[2:-2] = (fm[:-4] - 8 * fm[1:-3] + 8 * fm[3:-1] - fm[4:]) / (12 * h)
    for i, (w, _) in _BOX4.items():
        out[i] = np.tensordot(w, fm[:5], axes=(0, 0)) / h
        out[n - 1 - i] = -np.tensordot(w, fm[::-1][:5], axes=(0, 0)) / h
    return np.moveaxis(out, 0, axis)


# ---------------------------------------------------------------------------
# exterior derivative

@lru_cache(maxsize=None)
def _d_table(k: int, p: int):
    """For each axis i: (src, dst, sign) with e^i ^ e^src = sign e^dst."""
    out = []
    idx = ext.basis_index(k, p + 1)
    for i in range(k):
        src, dst, sg = [], [], []
        for s, mask in enumerate(ext.basis(k, p)):
            sign = ext.merge_sign(1 << i, mask)
            if sign:
                src.append(s)
                dst.append(idx[mask | (1 << i)])
                sg.append(sign)
        out.append((np.array(src), np.array(dst), np.array(sg, dtype=float)))
    return out


def d_values(values: np.ndarray, grid: TorusGrid, degree: int) -> np.ndarray:
    """d on raw arrays of shape grid + extra + (C(k, degree),)."""
    k = grid.dim
    if degree >= k:
        raise ValueError("d of a top-degree form")
    out = np.zeros(values.shape[:-1] + (comb(k, degree + 1),))
    for axis, (src, dst, sg) in enumerate(_d_table(k, degree)):
        out[..., dst] += sg * partial(values[..., src], axis, grid)
    return out


@dataclass(frozen=True, eq=False)
class FormField:
    grid: TorusGrid
    degree: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        want = self.grid.shape + (comb(self.grid.dim, self.degree),)
        if v.shape != want:
            raise ValueError(f"field values must have shape {want}, got {v.shape}")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: TorusGrid, form: ext.Form) -> "FormField":
        if form.dim != grid.dim:
            raise ValueError("form dimension does not match the grid")
        return cls(grid, form.degree, np.broadcast_to(form.coeffs, grid.shape + form.coeffs.shape).copy())

    def at(self, index) -> ext.Form:
        return ext.Form(self.grid.dim, self.degree, self.values[tuple(index)])

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0

    def l2_norm(self) -> float:
        cell = np.prod(self.grid.spacing)
        return float(np.sqrt(np.sum(self.values ** 2) * cell))

    def __add__(self, other: "FormField") -> "FormField":
        return FormField(self.grid, self.degree, self.values + other.values)

    def __sub__(self, other: "FormField") -> "FormField":
        return FormField(self.grid, self.degree, self.values - other.values)

    def __mul__(self, s) -> "FormField":
        s = np.asarray(s)
        if s.ndim:
            s = s[..., None]
        return FormField(self.grid, self.degree, self.values * s)

    __rmul__ = __mul__

    def wedge(self, other: "FormField") -> "FormField":
        return FormField(self.grid, self.degree + other.degree,
                         ext.wedge_coeffs(self.values, other.values, self.grid.dim,
                                          self.degree, other.degree))


def d(f: FormField) -> FormField:
    """Discrete exterior derivative."""
    if f.degree >= f.grid.dim:
        raise ValueError("d of a top-degree form is not defined")
    return FormField(f.grid, f.degree + 1, d_values(f.values, f.grid, f.degree))


# ---------------------------------------------------------------------------
# coframes and connections

def coframe_hodge_matrix(E: np.ndarray, p: int) -> np.ndarray:
    """*_eta on p-forms for the coframe eta_a = E[a, i] dx^i.

    eta is orthonormal for g_eta = E^T E and eta_1 ^ ... ^ eta_k is the
    positive orientation, so the star is Euclidean in the eta basis.
    """
    k = E.shape[-1]
    return (ext.compound(np.linalg.inv(E), p) @ ext.star_matrix(k, p)) @ ext.compound(E, k - p)


@dataclass(frozen=True, eq=False)
class CoframeField:
    """k pointwise-independent 1-form fields; E[..., a, i] is the dx^i coefficient of eta_a."""

    grid: TorusGrid
    E: np.ndarray

    def __post_init__(self):
        E = np.asarray(self.E, dtype=float)
        k = self.grid.dim
        if E.shape != self.grid.shape + (k, k):
            raise ValueError(f"coframe array must have shape {self.grid.shape + (k, k)}")
        object.__setattr__(self, "E", E)
        self.check()

    def det(self) -> np.ndarray:
        return np.linalg.det(self.E)

    def check(self, threshold: float = DEGENERATE_DET) -> None:
        det = self.det()
        bad = ~(np.abs(det) >= threshold)
        if np.any(bad):
            idx = np.unravel_index(np.argmax(bad), det.shape)
            raise StructureError(
                f"degenerate coframe at point {tuple(int(i) for i in idx)} (det = {det[idx]:.3e})")

    @classmethod
    def flat(cls, grid: TorusGrid) -> "CoframeField":
        return cls(grid, np.broadcast_to(np.eye(grid.dim), grid.shape + (grid.dim, grid.dim)).copy())

    def component(self, a: int) -> FormField:
        return FormField(self.grid, 1, self.E[..., a, :])

    def metric(self) -> np.ndarray:
        return np.swapaxes(self.E, -1, -2) @ self.E

    def star_eta(self) -> np.ndarray:
        """*_eta eta_a for every a, shape (..., k, C(k, k-1))."""
        k = self.grid.dim
        # eta_a is the unit vector e_a in the eta basis
        unit = ext.star_matrix(k, 1)
        return np.einsum("ab,...bc->...ac", unit, ext.compound(self.E, k - 1))

    def d_eta(self) -> np.ndarray:
        """d eta_a, shape (..., k, C(k, 2))."""
        return d_values(self.E, self.grid, 1)


@dataclass(frozen=True, eq=False)
class ConnectionField:
    """Antisymmetric matrix of 1-forms, stored as its strict upper triangle.

    ``upper[..., p, :]`` is theta_{ab} for the p-th pair a < b.
    """

    grid: TorusGrid
    upper: np.ndarray

    @property
    def pairs(self) -> list[tuple[int, int]]:
        k = self.grid.dim
        return [(a, b) for a in range(k) for b in range(a + 1, k)]

    def full(self) -> np.ndarray:
        k = self.grid.dim
        th = np.zeros(self.grid.shape + (k, k, k))
        for p, (a, b) in enumerate(self.pairs):
            th[..., a, b, :] = self.upper[..., p, :]
            th[..., b, a, :] = -self.upper[..., p, :]
        return th

    def structure_residual(self, eta: CoframeField, deta: Optional[np.ndarray] = None) -> float:
        """sup |d eta + theta ^ eta|."""
        k = self.grid.dim
        th = self.full()
        deta = eta.d_eta() if deta is None else deta
        prod = ext.wedge_coeffs(th, eta.E[..., None, :, :], k, 1, 1).sum(axis=-2)
        return float(np.abs(deta + prod).max())


def solve_connection(eta: CoframeField, deta: Optional[np.ndarray] = None) -> ConnectionField:
    """The unique theta = -theta^T with d eta = -theta ^ eta.

    Writing d eta_a = (1/2) T_abc eta_b ^ eta_c, the cyclic sum
    G_abc = (T_abc + T_bca - T_cab) / 2 gives theta_ab = G_abc eta_c.
    """
    k = eta.grid.dim
    deta = eta.d_eta() if deta is None else deta
    coeffs = np.einsum("...ai,...ij->...aj", deta, ext.compound(np.linalg.inv(eta.E), 2))
    T = np.zeros(eta.grid.shape + (k, k, k))
    for p, mask in enumerate(ext.basis(k, 2)):
        b, c = ext.subset(mask)
        T[..., :, b, c] = coeffs[..., :, p]
        T[..., :, c, b] = -coeffs[..., :, p]
    G = 0.5 * (T + np.einsum("...bca->...abc", T) - np.einsum("...cab->...abc", T))
    theta = np.einsum("...abc,...ci->...abi", G, eta.E)
    pairs = [(a, b) for a in range(k) for b in range(a + 1, k)]
    upper = np.stack([theta[..., a, b, :] for a, b in pairs], axis=-2)
    return ConnectionField(eta.grid, upper)


# ---------------------------------------------------------------------------
# residual functionals

def coclosed_residual(eta: CoframeField):
    """d(*_eta eta_a) for each a and the sup norm over points and components."""
    if eta.grid.dim != 3:
        raise ValueError("coclosed_residual is defined for 3-dimensional coframes")
    dstar = d_values(eta.star_eta(), eta.grid, 2)
    fields = [FormField(eta.grid, 3, dstar[..., a, :]) for a in range(3)]
    return fields, float(np.abs(dstar).max())


def cmc_from(E: np.ndarray, deta: np.ndarray) -> np.ndarray:
    """*_eta(sum_a eta_a ^ d eta_a) for k = 3, pointwise."""
    top = ext.wedge_coeffs(E, deta, 3, 1, 2).sum(axis=-2)[..., 0]
    return top / np.linalg.det(E)


def cmc_functional(eta: CoframeField, deta: Optional[np.ndarray] = None) -> np.ndarray:
    """Scalar field *_eta(t_eta ^ d eta); ``deta`` overrides the discrete d eta."""
    if eta.grid.dim != 3:
        raise ValueError("cmc_functional is defined for 3-dimensional coframes")
    return cmc_from(eta.E, eta.d_eta() if deta is None else deta)


def harmonic_residual(eta: CoframeField, axis: int) -> FormField:
    """d(*_eta dx^axis)."""
    k = eta.grid.dim
    if eta.grid.dim != 3:
        raise ValueError("harmonic_residual is defined for 3-dimensional coframes")
    dx = np.zeros(k)
    dx[axis] = 1.0
    star = np.einsum("i,...ij->...j", dx, coframe_hodge_matrix(eta.E, 1))
    return d(FormField(eta.grid, 2, star))


def su3_mean_curvature(omega: np.ndarray, d_im: np.ndarray) -> np.ndarray:
    """H with -12 H = *(omega ^ d Im Omega); volume taken as omega^3 / 6."""
    top = ext.wedge_coeffs(omega, d_im, 6, 2, 4)[..., 0]
    w3 = ext.wedge_coeffs(ext.wedge_coeffs(omega, omega, 6, 2, 2), omega, 6, 4, 2)[..., 0]
    return -top / (w3 / 6.0) / 12.0


def su3_residuals(omega: FormField, Omega_re: FormField, Omega_im: FormField,
                  d_im: Optional[np.ndarray] = None) -> dict:
    """sup |d Re Omega|, sup |d(omega^2/2)| and the mean curvature field."""
    grid = omega.grid
    if grid.dim != 6:
        raise ValueError("su3_residuals needs a 6-dimensional grid")
    half_w2 = 0.5 * ext.wedge_coeffs(omega.values, omega.values, 6, 2, 2)
    dre = d_values(Omega_re.values, grid, 3)
    dw2 = d_values(half_w2, grid, 4)
    if d_im is None:
        d_im = d_values(Omega_im.values, grid, 3)
    return {
        "d_re_Omega": float(np.abs(dre).max()),
        "d_half_omega2": float(np.abs(dw2).max()),
        "mean_curvature": su3_mean_curvature(omega.values, d_im),
    }


def g2_cmc(sigma: np.ndarray, dsigma: np.ndarray, g=None, orient=None) -> np.ndarray:
    """(1/28) *_sigma(sigma ^ d sigma), pointwise."""
    if g is None:
        g, orient, _ = g2_metric_coeffs(sigma)
    vol = orient * np.sqrt(np.linalg.det(g))
    top = ext.wedge_coeffs(sigma, dsigma, 7, 3, 4)[..., 0]
    return top / vol / 28.0


def g2_residuals(sigma: FormField, dsigma: Optional[np.ndarray] = None) -> dict:
    """sup |d sigma|, sup |d *_sigma sigma| and the CMC field (1/28) *(sigma ^ d sigma)."""
    grid = sigma.grid
    if grid.dim != 7 or sigma.degree != 3:
        raise ValueError("g2_residuals needs a 3-form field on a 7-torus")
    g, orient, margin = g2_metric_coeffs(sigma.values)
    bad = margin <= 1e-10
    if np.any(bad):
        idx = np.unravel_index(np.argmax(bad), margin.shape)
        raise StructureError(f"sigma is not definite at point {tuple(int(i) for i in idx)}")
    star = np.einsum("...i,...ij->...j", sigma.values, hodge_matrix(g, orient, 3))
    if dsigma is None:
        dsigma = d_values(sigma.values, grid, 3)
    dstar = d_values(star, grid, 4)
    return {
        "d_sigma": float(np.abs(dsigma).max()),
        "d_star_sigma": float(np.abs(dstar).max()),
        "cmc": g2_cmc(sigma.values, dsigma, g, orient),
    }

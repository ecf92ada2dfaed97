"""Pointwise algebra of SU(2), SU(3), G2 and Spin(7) structures.

Array-level helpers (suffix ``_coeffs`` or taking raw arrays) broadcast over
leading batch axes so that :mod:`holonomy_lab.flows` can call them on whole
grids.  Complex forms are carried as pairs of real forms.

Index conventions: on R x R^6 and R x R^7 the first coordinate is the
normal/time direction, the remaining ones are the hypersurface coordinates
in order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Optional, Union

import numpy as np

from .exterior import (
    ExteriorError,
    Form,
    LinearMap,
    Metric,
    compound,
    hodge,
    hodge_matrix,
    interior,
    interior_coeffs,
    orthonormal_coframe,
    pullback,
    pullback_coeffs,
    star_matrix,
    wedge,
    wedge_coeffs,
)


class StructureError(ValueError):
    """A form fails the algebraic condition required by an operation."""


class NewtonError(RuntimeError):
    """Newton iteration for Ss^-1 failed to converge."""

    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


PHI_TERMS = {"123": 1, "145": 1, "167": 1, "246": 1, "257": -1, "347": -1, "356": -1}

DEFINITE_TOL = 1e-10


def _phi_coeffs() -> np.ndarray:
    return Form.from_terms(7, PHI_TERMS).coeffs


# ---------------------------------------------------------------------------
# G2: definite 3-forms on R^7

def g2_bilinear(sigma: np.ndarray) -> np.ndarray:
    """b(v, w) = (v _| s) ^ (w _| s) ^ s / 6, as an e^{1..7} coefficient.

    The 1/6 makes b equal to the identity for the standard 3-form.
    """
    sigma = np.asarray(sigma, dtype=float)
    contr = interior_coeffs(np.eye(7), sigma[..., None, :], 7, 3)  # (..., 7, 21)
    quint = wedge_coeffs(contr, sigma[..., None, :], 7, 2, 3)       # (..., 7, 21)
    top = wedge_coeffs(contr[..., :, None, :], quint[..., None, :, :], 7, 2, 5)[..., 0]
    return top / 6.0


def g2_metric_coeffs(sigma: np.ndarray):
    """Metric, orientation and definiteness margin of 3-forms on R^7.

    Returns ``(g, orientation, margin)``.  ``margin`` is the smallest
    eigenvalue of orientation * b / |det b|^(1/7) (scale free, det 1); it is
    positive exactly when sigma is definite.  ``g`` is only meaningful where
    the margin is positive.
    """
    b = g2_bilinear(sigma)
    detb = np.linalg.det(b)
    orient = np.where(detb < 0, -1.0, 1.0)
    absdet = np.abs(detb)
    safe = np.where(absdet > 0, absdet, 1.0)
    norm_b = orient[..., None, None] * b / safe[..., None, None] ** (1.0 / 7.0)
    spec = np.linalg.eigvalsh(0.5 * (norm_b + np.swapaxes(norm_b, -1, -2)))
    margin = np.where(absdet > 0, spec[..., 0], 0.0)
    g = orient[..., None, None] * b / safe[..., None, None] ** (1.0 / 9.0)
    return g, orient, margin


def _require_definite(margin, what="sigma"):
    margin = np.asarray(margin)
    bad = margin <= DEFINITE_TOL
    if np.any(bad):
        first = np.unravel_index(np.argmax(bad), margin.shape) if margin.ndim else ()
        raise StructureError(
            f"{what} is not definite (normalized b margin {float(margin[first]):.3e}"
            + (f" at index {tuple(int(i) for i in first)})" if margin.ndim else ")"))


def ss_coeffs(sigma: np.ndarray) -> np.ndarray:
    """Ss(sigma) = *_sigma sigma for definite sigma (batched, unchecked)."""
    g, orient, _ = g2_metric_coeffs(sigma)
    return np.einsum("...i,...ij->...j", sigma, hodge_matrix(g, orient, 3))


def ss_jacobian(sigma: np.ndarray) -> np.ndarray:
    """Derivative of Ss at sigma, as a (..., 35, 35) row-convention matrix.

    Uses the type decomposition of 3-forms: D Ss(x) = *((4/3) p1 x + p7 x - p27 x).
    """
    sigma = np.asarray(sigma, dtype=float)
    g, orient, _ = g2_metric_coeffs(sigma)
    star3 = hodge_matrix(g, orient, 3)
    psi = np.einsum("...i,...ij->...j", sigma, star3)
    gram = compound(np.linalg.inv(g), 3)
    # g-orthonormal frame vectors are the columns of P^-1, g = P^T P
    frame = np.swapaxes(np.linalg.inv(orthonormal_coframe(g)), -1, -2)
    y = interior_coeffs(frame, psi[..., None, :], 7, 4)  # (..., 7, 35)
    p7 = gram @ np.swapaxes(y, -1, -2) @ y / 4.0
    p1 = gram @ sigma[..., :, None] @ sigma[..., None, :] / 7.0
    m = (7.0 / 3.0) * p1 + 2.0 * p7 - np.eye(35)
    return m @ star3


@dataclass(frozen=True, eq=False)
class G2Form:
    """A definite 3-form on R^7 with its metric and Ss image."""

    sigma: Form
    metric: Metric = field(repr=False)
    star_sigma: Form = field(repr=False)

    @classmethod
    def from_sigma(cls, sigma: Form) -> "G2Form":
        g, star = metric_from_g2(sigma)
        return cls(sigma, g, star)


@dataclass(frozen=True, eq=False)
class Spin7Form:
    """Split Spin(7) 4-form Phi = dt ^ sigma + tau on R x R^7."""

    tau: Form
    t_component: Form

    def __post_init__(self):
        if (self.tau.dim, self.tau.degree) != (7, 4) or (self.t_component.dim,
                                                          self.t_component.degree) != (7, 3):
            raise StructureError("Spin7Form needs a 4-form tau and 3-form sigma on R^7")

    def assemble(self) -> Form:
        """The 4-form on R^8 (coordinate 1 is t)."""
        return assemble_spin7(self.t_component, self.tau)

    def metric(self) -> Metric:
        """g_Phi = dt^2 + g_sigma (split inputs only)."""
        gs, _ = metric_from_g2(self.t_component)
        g = np.eye(8)
        g[1:, 1:] = gs.g
        return Metric(8, g, gs.orientation)


def _embed(dim_low: int) -> LinearMap:
    """Projection R x R^m -> R^m used to pull forms up to the product."""
    m = np.zeros((dim_low, dim_low + 1))
    m[:, 1:] = np.eye(dim_low)
    return LinearMap(m)


def _dt(dim: int) -> Form:
    return Form.basis_form1(dim, 1)


def assemble_spin7(sigma: Form, tau: Form) -> Form:
    up = _embed(7)
    return wedge(_dt(8), pullback(up, sigma)) + pullback(up, tau)


def standard_phi() -> G2Form:
    phi = Form.from_terms(7, PHI_TERMS)
    return G2Form(phi, Metric.identity(7), hodge(Metric.identity(7), phi))


def standard_Phi0() -> Spin7Form:
    std = standard_phi()
    return Spin7Form(tau=std.star_sigma, t_component=std.sigma)


def metric_from_g2(sigma: Form) -> tuple[Metric, Form]:
    """Metric g_sigma (with orientation) and *_sigma sigma of a definite 3-form."""
    if (sigma.dim, sigma.degree) != (7, 3):
        raise StructureError("metric_from_g2 expects a 3-form on R^7")
    g, orient, margin = g2_metric_coeffs(sigma.coeffs)
    _require_definite(margin)
    m = Metric(7, g, int(orient))
    return m, hodge(m, sigma)


def is_definite_g2(sigma: Form) -> tuple[bool, np.ndarray]:
    """Membership in the open orbit Lambda^3_+, with the normalized b spectrum."""
    if (sigma.dim, sigma.degree) != (7, 3):
        return False, np.zeros(7)
    b = g2_bilinear(sigma.coeffs)
    detb = np.linalg.det(b)
    if detb == 0:
        return False, np.linalg.eigvalsh(b)
    o = -1.0 if detb < 0 else 1.0
    spec = np.linalg.eigvalsh(o * b / abs(detb) ** (1.0 / 7.0))
    return bool(spec[0] > DEFINITE_TOL), spec


def Ss(sigma: Form) -> Form:
    _, star = metric_from_g2(sigma)
    return star


def ss_inverse_coeffs(tau: np.ndarray, orientation, seed: np.ndarray, *,
                      max_iter: int = 50, rtol: float = 1e-12, max_halvings: int = 30):
    """Batched damped Newton for Ss(sigma) = tau starting from ``seed``.

    Returns ``(sigma, history, iterations)`` where history is the max relative
    residual per iteration.  Raises NewtonError if some point does not reach
    ``rtol`` within ``max_iter`` iterations.
    """
    tau = np.asarray(tau, dtype=float)
    batch = tau.shape[:-1]
    tau = tau.reshape(-1, 35)
    sigma = np.array(np.broadcast_to(seed, batch + (35,)), dtype=float).reshape(-1, 35)
    orientation = np.broadcast_to(np.asarray(orientation, dtype=float), batch).reshape(-1)
    _, seed_orient, margin = g2_metric_coeffs(sigma)
    _require_definite(margin, "seed")
    if np.any(seed_orient != orientation):
        raise StructureError("seed orientation does not match the requested orientation")

    scale = np.linalg.norm(tau, axis=-1)
    scale = np.where(scale > 0, scale, 1.0)
    resid = ss_coeffs(sigma) - tau
    rel = np.linalg.norm(resid, axis=-1) / scale
    history = [float(rel.max()) if rel.size else 0.0]
    it = 0
    while history[-1] > rtol:
        if it >= max_iter:
            raise NewtonError(
                f"Ss inverse did not converge in {max_iter} iterations "
                f"(residual {history[-1]:.3e})", history)
        it += 1
        active = rel > rtol
        s_a, r_a, rel_a = sigma[active], resid[active], rel[active]
        jac = ss_jacobian(s_a)
        step = -np.linalg.solve(np.swapaxes(jac, -1, -2), r_a[..., None])[..., 0]
        t = np.ones(len(s_a))
        pending = np.ones(len(s_a), dtype=bool)
        new_s = s_a.copy()
        new_r = r_a.copy()
        new_rel = rel_a.copy()
        for _ in range(max_halvings):
            cand = s_a[pending] + t[pending, None] * step[pending]
            _, o_c, m_c = g2_metric_coeffs(cand)
            ok = (m_c > DEFINITE_TOL) & (o_c == orientation[active][pending])
            r_c = np.full(cand.shape, np.nan)
            if np.any(ok):
                r_c[ok] = ss_coeffs(cand[ok]) - tau[active][pending][ok]
            rel_c = np.linalg.norm(r_c, axis=-1) / scale[active][pending]
            accept = ok & (rel_c < rel_a[pending])
            idx = np.flatnonzero(pending)[accept]
            new_s[idx], new_r[idx], new_rel[idx] = cand[accept], r_c[accept], rel_c[accept]
            pending[idx] = False
            if not pending.any():
                break
            t[pending] *= 0.5
        if pending.any():
            raise NewtonError("Newton line search failed (no decrease along the step)",
                              history + [float(rel.max())])
        sigma[active], resid[active], rel[active] = new_s, new_r, new_rel
        history.append(float(rel.max()))
    return sigma.reshape(batch + (35,)), history, it


def Ss_inv(tau: Form, orientation: int, seed: Form, max_iter: int = 50) -> Form:
    """The definite sigma near ``seed`` with Ss(sigma) = tau and the given orientation."""
    if (tau.dim, tau.degree) != (7, 4):
        raise StructureError("Ss_inv expects a 4-form on R^7")
    sigma, _, _ = ss_inverse_coeffs(tau.coeffs, orientation, seed.coeffs, max_iter=max_iter)
    return Form(7, 3, sigma)


# ---------------------------------------------------------------------------
# SU(3) data on R^6

@dataclass(frozen=True, eq=False)
class SU3Data:
    omega: Form
    Omega_re: Form
    Omega_im: Form

    def __post_init__(self):
        for f, k in ((self.omega, 2), (self.Omega_re, 3), (self.Omega_im, 3)):
            if (f.dim, f.degree) != (6, k):
                raise StructureError("SU3Data needs a 2-form and two 3-forms on R^6")


@dataclass(frozen=True, eq=False)
class AlmostComplex:
    J: np.ndarray

    def __post_init__(self):
        J = np.array(self.J, dtype=float)
        if J.shape != (6, 6):
            raise StructureError("AlmostComplex expects a 6x6 matrix")
        if np.abs(J @ J + np.eye(6)).max() > 1e-10:
            raise StructureError("J^2 != -1")
        object.__setattr__(self, "J", J)


def flat_su3() -> SU3Data:
    """The SU(3) structure on R^6 = C^3 with dz^k = e^{2k-1} + i e^{2k}."""
    return SU3Data(
        omega=Form.from_terms(6, {"12": 1, "34": 1, "56": 1}),
        Omega_re=Form.from_terms(6, {"135": 1, "146": -1, "236": -1, "245": -1}),
        Omega_im=Form.from_terms(6, {"136": 1, "145": 1, "235": 1, "246": -1}),
    )


def volume_compat_coeffs(omega, re, im) -> np.ndarray:
    """Top coefficient of w^3/6 - (i/8) Omega ^ conj(Omega) = w^3/6 - Re ^ Im / 4."""
    w2 = wedge_coeffs(omega, omega, 6, 2, 2)
    w3 = wedge_coeffs(w2, omega, 6, 4, 2)[..., 0]
    ri = wedge_coeffs(re, im, 6, 3, 3)[..., 0]
    return w3 / 6.0 - ri / 4.0


def volume_compat_residual(d: SU3Data) -> float:
    return float(volume_compat_coeffs(d.omega.coeffs, d.Omega_re.coeffs, d.Omega_im.coeffs))


def two_form_matrix(omega: np.ndarray, n: int) -> np.ndarray:
    """Antisymmetric matrix W with omega(v, w) = v^T W w."""
    from .exterior import basis, subset
    W = np.zeros(omega.shape[:-1] + (n, n))
    for idx, mask in enumerate(basis(n, 2)):
        i, j = subset(mask)
        W[..., i, j] = omega[..., idx]
        W[..., j, i] = -omega[..., idx]
    return W


def su3_algebra_residuals(omega, re, im, J=None) -> dict[str, np.ndarray]:
    """Pointwise algebraic SU(3) conditions on (omega, Re Omega, Im Omega).

    ``volume``: the volume compatibility residual; ``type``: |omega ^ Re|
    + |omega ^ Im| (omega of type (1,1)); ``positivity``: smallest eigenvalue
    of omega(v, J v) when J is supplied.
    """
    out = {
        "volume": volume_compat_coeffs(omega, re, im),
        "type": np.abs(wedge_coeffs(omega, re, 6, 2, 3)).max(-1)
        + np.abs(wedge_coeffs(omega, im, 6, 2, 3)).max(-1),
    }
    if J is not None:
        W = two_form_matrix(omega, 6)
        h = W @ J
        out["positivity"] = np.linalg.eigvalsh(0.5 * (h + np.swapaxes(h, -1, -2)))[..., 0]
    return out


def hitchin_K(phi: np.ndarray, orientation=1.0) -> np.ndarray:
    """K_phi(v) = (v _| phi) ^ phi read as a vector via u _| vol = (v _| phi) ^ phi.

    Returned as (..., 6, 6) with K[:, i] = K(e_i).
    """
    phi = np.asarray(phi, dtype=float)
    contr = interior_coeffs(np.eye(6), phi[..., None, :], 6, 3)           # (..., 6, 15)
    five = wedge_coeffs(contr, phi[..., None, :], 6, 2, 3)                # (..., 6, 6)
    vol = np.ones(1)
    vmat = interior_coeffs(np.eye(6), vol, 6, 6)                          # row j: e_j _| vol
    u = five @ np.linalg.inv(vmat)                                        # (..., i, j) = K(e_i)_j
    # overall sign fixed so that Re(dz1 dz2 dz3) yields the J with dz^k of type (1,0)
    K = -np.swapaxes(u, -1, -2)
    return K * np.asarray(orientation, dtype=float)[..., None, None]


def hitchin_lambda(phi: np.ndarray) -> np.ndarray:
    K = hitchin_K(phi)
    return np.trace(K @ K, axis1=-2, axis2=-1) / 6.0


def j_from_elliptic_coeffs(phi: np.ndarray, orientation=1.0):
    """Batched J_phi; returns (J, lambda).  J is only valid where lambda < 0."""
    K = hitchin_K(phi, orientation)
    lam = np.trace(K @ K, axis1=-2, axis2=-1) / 6.0
    scale = np.sqrt(np.where(lam < 0, -lam, 1.0))
    return K / scale[..., None, None], lam


def j_from_elliptic(phi: Form, orientation: int = 1) -> AlmostComplex:
    if (phi.dim, phi.degree) != (6, 3):
        raise StructureError("j_from_elliptic expects a 3-form on R^6")
    J, lam = j_from_elliptic_coeffs(phi.coeffs, orientation)
    if not lam < 0:
        raise StructureError(f"3-form is not elliptic (lambda = {float(lam):.3e} >= 0)")
    return AlmostComplex(J)


def is_type_30(re: Form, im: Form, J: np.ndarray, atol: float = 1e-10) -> bool:
    """Omega = re + i im annihilates every (0,1) vector v + iJv of J."""
    for v in np.eye(6):
        Jv = J @ v
        real = interior(v, re) - interior(Jv, im)
        imag = interior(v, im) + interior(Jv, re)
        if max(np.abs(real.coeffs).max(), np.abs(imag.coeffs).max()) > atol:
            return False
    return True


def _orthonormal_complement(n: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Columns b_1..b_{m-1} g-orthonormal, orthogonal to n, with (n, b) oriented."""
    m = len(n)
    P = orthonormal_coframe(g)            # g = P^T P; P maps to a Euclidean frame
    nh = P @ n
    # Householder-like completion in the Euclidean picture
    Q, _ = np.linalg.qr(np.column_stack([nh, np.eye(m)]))
    Q = Q[:, :m]
    if Q[:, 0] @ nh < 0:
        Q[:, 0] = -Q[:, 0]
    if np.linalg.det(Q) < 0:
        Q[:, -1] = -Q[:, -1]
    return np.linalg.solve(P, Q[:, 1:])


def su3_from_hypersurface(structure: Union[G2Form, Spin7Form], normal, atol: float = 1e-10):
    """Induced structure on the g-orthogonal complement of a unit normal.

    G2 input gives SU3Data (omega = n _| sigma, Re Omega = sigma|, Im Omega =
    -(n _| *sigma)|); split Spin(7) input gives the G2Form n _| Phi, whose Ss
    image is the restriction of Phi.  Forms are expressed in a g-orthonormal
    basis of n-perp, positively oriented after n.
    """
    n = np.asarray(normal, dtype=float)
    if isinstance(structure, G2Form):
        metric, sigma, star = structure.metric, structure.sigma, structure.star_sigma
        top = 7
    elif isinstance(structure, Spin7Form):
        metric = structure.metric()
        sigma = structure.assemble()
        star = None
        top = 8
    else:
        raise TypeError("structure must be a G2Form or Spin7Form")
    if n.shape != (top,):
        raise StructureError(f"normal must have length {top}")
    length = float(np.sqrt(n @ metric.g @ n))
    if abs(length - 1.0) > atol:
        raise StructureError(f"normal is not a unit vector (|n|_g = {length:.12g})")
    frame = LinearMap(_orthonormal_complement(n, metric.g))
    if isinstance(structure, G2Form):
        return SU3Data(
            omega=pullback(frame, interior(n, sigma)),
            Omega_re=pullback(frame, sigma),
            Omega_im=-pullback(frame, interior(n, star)),
        )
    return G2Form.from_sigma(pullback(frame, interior(n, sigma)))


def assemble_g2_coeffs(omega, re, im):
    """sigma = dt ^ omega + Re and tau = omega^2/2 - dt ^ Im on R x R^6 (batched)."""
    up = _embed(6).matrix
    dt = np.zeros(7)
    dt[0] = 1.0
    sigma = wedge_coeffs(dt, pullback_coeffs(up, omega, 2), 7, 1, 2) + pullback_coeffs(up, re, 3)
    half_w2 = 0.5 * wedge_coeffs(omega, omega, 6, 2, 2)
    tau = pullback_coeffs(up, half_w2, 4) - wedge_coeffs(dt, pullback_coeffs(up, im, 3), 7, 1, 3)
    return sigma, tau


def assemble_g2(omega: Form, Omega_re: Form, Omega_im: Form, tol: float = 1e-8):
    d = SU3Data(omega, Omega_re, Omega_im)
    res = volume_compat_residual(d)
    if abs(res) > tol:
        raise StructureError(f"volume compatibility residual {res:.3e} exceeds {tol:g}")
    s, t = assemble_g2_coeffs(omega.coeffs, Omega_re.coeffs, Omega_im.coeffs)
    return Form(7, 3, s), Form(7, 4, t)


# ---------------------------------------------------------------------------
# SU(2): hyperkahler triples on R^4 = C^2, coordinates (x1, y1, x2, y2)

@dataclass(frozen=True, eq=False)
class SU2Triple:
    upsilon: tuple

    def __post_init__(self):
        if len(self.upsilon) != 3 or any((u.dim, u.degree) != (4, 2) for u in self.upsilon):
            raise StructureError("SU2Triple needs three 2-forms on R^4")


def flat_su2_triple() -> SU2Triple:
    return SU2Triple((Form.from_terms(4, {"12": 1, "34": 1}),
                      Form.from_terms(4, {"13": 1, "24": -1}),
                      Form.from_terms(4, {"14": 1, "23": 1})))


@dataclass
class SU2Report:
    wedges: np.ndarray          # 3x3 matrix of Upsilon_i ^ Upsilon_j / e^{1234}
    equal_squares: bool
    mixed_vanish: bool
    nondegenerate: bool
    metric_ok: Optional[bool] = None

    @property
    def passed(self) -> bool:
        ok = self.equal_squares and self.mixed_vanish and self.nondegenerate
        return ok and self.metric_ok is not False


def su2_wedge_matrix(u1, u2, u3) -> np.ndarray:
    us = np.stack(np.broadcast_arrays(u1, u2, u3), axis=-2)
    return wedge_coeffs(us[..., :, None, :], us[..., None, :, :], 4, 2, 2)[..., 0]


def su2_checks(t: SU2Triple, metric: Optional[Metric] = None, atol: float = 1e-12) -> SU2Report:
    W = su2_wedge_matrix(*(u.coeffs for u in t.upsilon))
    d = np.diag(W)
    off = W[~np.eye(3, dtype=bool)]
    rep = SU2Report(
        wedges=W,
        equal_squares=bool(np.ptp(d) <= atol * max(1.0, abs(d).max())),
        mixed_vanish=bool(np.abs(off).max() <= atol * max(1.0, abs(d).max())),
        nondegenerate=bool(abs(d[0]) > atol),
    )
    if metric is not None:
        vol = float(metric.orientation * np.sqrt(metric.det()))
        rep.metric_ok = bool(np.abs(W - 2 * vol * np.eye(3)).max() <= atol * max(1.0, abs(vol)))
    return rep


@dataclass
class HyperkahlerResult:
    upsilon1: np.ndarray        # (..., 6) per-point coefficients
    upsilon2: np.ndarray        # (6,) constant
    upsilon3: np.ndarray
    metric: np.ndarray          # (..., 4, 4)
    hessian: np.ndarray         # (..., 2, 2) complex, d^2 phi / dz_i dzbar_j
    ma_residual: np.ndarray     # det(hessian) - 1
    pseudoconvex: np.ndarray    # bool flags


def _dz():
    dz1 = np.array([1, 1j, 0, 0])
    dz2 = np.array([0, 0, 1, 1j])
    return dz1, dz2


def hermitian_to_metric(h: np.ndarray) -> np.ndarray:
    """Real metric Re(h_ij dz^i dzbar^j) in coordinates (x1, y1, x2, y2)."""
    A, B = h.real, h.imag
    g = np.zeros(h.shape[:-2] + (4, 4))
    xs, ys = [0, 2], [1, 3]
    for i in range(2):
        for j in range(2):
            g[..., xs[i], xs[j]] = A[..., i, j]
            g[..., ys[i], ys[j]] = A[..., i, j]
            g[..., xs[i], ys[j]] = B[..., i, j]
            g[..., ys[i], xs[j]] = -B[..., i, j]
    return g


def hyperkahler_from_hessian(h: np.ndarray) -> HyperkahlerResult:
    """Triple, metric and Monge-Ampere data from the complex Hessian field."""
    dz = _dz()
    u1 = 0
    for i in range(2):
        for j in range(2):
            w = wedge_coeffs(dz[i], np.conj(dz[j]), 4, 1, 1)
            u1 = u1 + h[..., i, j, None] * w
    u1 = (0.5j * u1).real
    holo = wedge_coeffs(dz[0], dz[1], 4, 1, 1)
    det = (h[..., 0, 0] * h[..., 1, 1] - h[..., 0, 1] * h[..., 1, 0]).real
    return HyperkahlerResult(
        upsilon1=u1,
        upsilon2=holo.real.copy(),
        upsilon3=holo.imag.copy(),
        metric=hermitian_to_metric(h),
        hessian=h,
        ma_residual=det - 1.0,
        pseudoconvex=(h[..., 0, 0].real > 0) & (det > 0),
    )


def complex_hessian(phi: np.ndarray, spacing, order: int = 4) -> np.ndarray:
    """d^2 phi / dz_i dzbar_j on a box grid with axes (x1, y1, x2, y2)."""
    from .fields import diff_box
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 4:
        raise StructureError("potential must be sampled on a 4-d grid")
    first = [diff_box(phi, a, spacing[a], order) for a in range(4)]
    second = [[diff_box(first[a], b, spacing[b], order) for b in range(4)] for a in range(4)]
    x, y = [0, 2], [1, 3]
    h = np.empty(phi.shape + (2, 2), dtype=complex)
    for i in range(2):
        for j in range(2):
            sym = 0.5 * (second[x[i]][x[j]] + second[x[j]][x[i]])
            sym_y = 0.5 * (second[y[i]][y[j]] + second[y[j]][y[i]])
            h[..., i, j] = 0.25 * (sym + sym_y + 1j * (second[x[i]][y[j]] - second[y[i]][x[j]]))
    return h


def hyperkahler_from_potential(phi_grid: np.ndarray, spacing, order: int = 4) -> HyperkahlerResult:
    """Upsilon_1 = (i/2) ddbar phi, Upsilon_2 + i Upsilon_3 = dz1 ^ dz2 and the MA residual.

    Non-pseudoconvex points are flagged in the result, not rejected.
    """
    return hyperkahler_from_hessian(complex_hessian(phi_grid, spacing, order))

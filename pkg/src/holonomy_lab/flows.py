"""Hypersurface evolution equations on flat tori.

Three flows are integrated by the method of lines with classical RK4:

* SU(2): a coframe (omega_1, omega_2, omega_3) on T^3 with
  d omega/dt = *(d omega) - (1/2) *(omega^T ^ d omega) omega.
* G2: (omega, phi) on T^6 with d phi/dt = d omega and
  d omega/dt = -L_omega^{-1}(d psi), psi = J_phi^* phi.
* Spin(7): a 4-form tau on T^7 with d tau/dt = d(Ss^{-1}(tau)).

Each flow is wrapped in a ``FlowSystem`` that owns the state layout, the
right-hand side, the monitors and the ambient forms used by
:func:`reconstruct_ambient`.  States are plain arrays, point-major like the
fields in :mod:`holonomy_lab.fields`.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from . import exterior as ext
from .fields import (
    CoframeField,
    FormField,
    TorusGrid,
    _d_table,
    cmc_from,
    coframe_hodge_matrix,
    d_values,
    diff_box,
    modified_wavenumber,
    partial,
)
from .special_forms import (
    NewtonError,
    StructureError,
    flat_su2_triple,
    g2_metric_coeffs,
    hitchin_K,
    ss_coeffs,
    ss_inverse_coeffs,
    standard_Phi0,
    standard_phi,
    su3_algebra_residuals,
    volume_compat_coeffs,
)

BLOWUP_FACTOR = 1e6
COMPAT_TOL = 1e-6
DEGENERATE_DET = 1e-8
CHUNK = 4096


class FlowHalt(Exception):
    """A numerical halt condition; recorded in the report, not an artifact error."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


class NonlinearRegime(RuntimeError):
    """The ill-posedness probe left the linear regime."""


def _chunked(fn: Callable, *arrays: np.ndarray, batch_shape: tuple, chunk: int = CHUNK):
    """Apply ``fn`` to slices of the flattened grid to bound temporary memory."""
    npts = int(np.prod(batch_shape))
    flat = [a.reshape((npts,) + a.shape[len(batch_shape):]) for a in arrays]
    parts = [fn(*(a[i:i + chunk] for a in flat)) for i in range(0, npts, chunk)]
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(p).reshape(batch_shape + p[0].shape[1:]) for p in zip(*parts))
    return np.concatenate(parts).reshape(batch_shape + parts[0].shape[1:])


def _first_bad(mask: np.ndarray) -> tuple:
    return tuple(int(i) for i in np.unravel_index(np.argmax(mask), mask.shape))


def _lift(values: np.ndarray, k: int, p: int) -> np.ndarray:
    """Spatial p-form on R^k as a form on R x R^k (time is coordinate 1)."""
    up = np.zeros((k, k + 1))
    up[:, 1:] = np.eye(k)
    return np.einsum("...i,ij->...j", values, ext.compound(up, p)) if p else values


def _dt_wedge(values: np.ndarray, k: int, p: int) -> np.ndarray:
    dt = np.zeros(k + 1)
    dt[0] = 1.0
    return ext.wedge_coeffs(dt, _lift(values, k, p), k + 1, 1, p)


def band_norms(values: np.ndarray, grid: TorusGrid) -> list[float]:
    """L^2 norm of the state split into octave bands of integer mode number.

    Band 0 is the mean, band j >= 1 holds modes with 2^(j-1) <= |m| < 2^j.
    """
    k = grid.dim
    coef = np.fft.fftn(values, axes=tuple(range(k))) / grid.npoints
    power = np.sum(np.abs(coef) ** 2, axis=tuple(range(k, values.ndim)))
    ms = np.meshgrid(*[np.fft.fftfreq(n, 1.0 / n) for n in grid.resolution], indexing="ij")
    mag = np.sqrt(sum(m ** 2 for m in ms))
    vol = float(np.prod(grid.period))
    nbands = int(np.floor(np.log2(max(mag.max(), 1.0)))) + 2
    band = np.where(mag < 0.5, 0, np.floor(np.log2(np.maximum(mag, 1.0))).astype(int) + 1)
    return [float(np.sqrt(vol * power[band == j].sum())) for j in range(nbands)]


def l2_norm(values: np.ndarray, grid: TorusGrid) -> float:
    return float(np.sqrt(np.sum(values ** 2) * np.prod(grid.spacing)))


# ---------------------------------------------------------------------------
# flow systems

class FlowSystem:
    """Interface shared by the three flows."""

    kind: str = ""
    grid: TorusGrid

    def rhs(self, y: np.ndarray, stage: int = 0) -> np.ndarray:
        raise NotImplementedError

    def begin_step(self, y: np.ndarray) -> None:
        """Called once per accepted step before the first stage."""

    def monitor(self, y: np.ndarray) -> dict:
        raise NotImplementedError

    def check(self, mon: dict) -> Optional[FlowHalt]:
        return None

    def ambient_forms(self, y: np.ndarray) -> list[tuple[str, int, np.ndarray]]:
        raise NotImplementedError

    def seeds(self) -> Optional[np.ndarray]:
        return None


def su2_rhs_values(E: np.ndarray, grid: TorusGrid, degenerate: float = DEGENERATE_DET) -> np.ndarray:
    det = np.linalg.det(E)
    bad = ~(np.abs(det) >= degenerate)
    if np.any(bad):
        raise FlowHalt("degenerate", f"coframe det {det[bad].flat[0]:.3e} at {_first_bad(bad)}")
    deta = d_values(E, grid, 1)
    star = np.einsum("...ai,...ij->...aj", deta, coframe_hodge_matrix(E, 2))
    return star - 0.5 * cmc_from(E, deta)[..., None, None] * E


def su2_rhs(omega: CoframeField) -> np.ndarray:
    """Tangent d omega/dt, shape grid + (3, 3); row a is the 1-form d omega_a/dt."""
    if omega.grid.dim != 3:
        raise ValueError("the SU(2) flow lives on a 3-torus")
    try:
        return su2_rhs_values(omega.E, omega.grid)
    except FlowHalt as exc:
        raise StructureError(str(exc)) from exc


class SU2Flow(FlowSystem):
    kind = "su2"

    def __init__(self, grid: TorusGrid, degenerate: float = DEGENERATE_DET):
        if grid.dim != 3:
            raise ValueError("the SU(2) flow lives on a 3-torus")
        self.grid = grid
        self.degenerate = degenerate

    def rhs(self, y, stage=0):
        return su2_rhs_values(y, self.grid, self.degenerate)

    def check(self, mon):
        if mon["margin"] < self.degenerate:
            return FlowHalt("degenerate", f"coframe det {mon['margin']:.3e}")
        return None

    def monitor(self, y):
        det = np.linalg.det(y)
        deta = d_values(y, self.grid, 1)
        cmc = cmc_from(y, deta)
        star = np.einsum("ab,...bc->...ac", ext.star_matrix(3, 1), ext.compound(y, 2))
        cocl = d_values(star, self.grid, 2)
        return {
            "coclosed": float(np.abs(cocl).max()),
            "cmc_mean": float(cmc.mean()),
            "cmc_min": float(cmc.min()),
            "cmc_max": float(cmc.max()),
            "cmc_std": float(cmc.std()),
            "margin": float(np.abs(det).min()),
        }

    def ambient_forms(self, y):
        # Upsilon_a = *omega_a - dt ^ omega_a, closed along an exact solution
        star = np.einsum("ab,...bc->...ac", ext.star_matrix(3, 1), ext.compound(y, 2))
        return [("upsilon", 2, _lift(star, 3, 2) - _dt_wedge(y, 3, 1))]

    def payload(self, y) -> CoframeField:
        return CoframeField(self.grid, y)


def wedge2_matrix(omega: np.ndarray) -> np.ndarray:
    """L_omega as (..., 15, 15): row i holds omega ^ e^i for the i-th 2-form basis element."""
    return ext.wedge_coeffs(omega[..., None, :], np.eye(15), 6, 2, 2)


def _psi_and_lambda(phi: np.ndarray):
    K = hitchin_K(phi)
    lam = np.trace(K @ K, axis1=-2, axis2=-1) / 6.0
    J = K / np.sqrt(np.where(lam < 0, -lam, 1.0))[..., None, None]
    psi = np.einsum("...i,...ij->...j", phi, ext.compound(J, 3))
    return psi, lam


def _l_omega_solve(omega: np.ndarray, rhs: np.ndarray, grid_shape: tuple) -> np.ndarray:
    L = wedge2_matrix(omega)
    try:
        x = np.linalg.solve(np.swapaxes(L, -1, -2), rhs[..., None])[..., 0]
        if np.all(np.isfinite(x)):
            return x
    except np.linalg.LinAlgError:
        pass
    cond = np.linalg.cond(L)
    worst = np.where(np.isfinite(cond), cond, np.inf)
    idx = _first_bad(worst == worst.max())
    raise FlowHalt("conditioning", f"L_omega singular at {idx} (cond {worst[idx]:.3e})")


class G2Flow(FlowSystem):
    """State layout per point: 15 coefficients of omega then 20 of phi = Re Omega."""

    kind = "g2"

    def __init__(self, grid: TorusGrid, compat_tol: float = COMPAT_TOL):
        if grid.dim != 6:
            raise ValueError("the G2 flow lives on a 6-torus")
        self.grid = grid
        self.compat_tol = compat_tol

    @staticmethod
    def pack(omega: np.ndarray, phi: np.ndarray) -> np.ndarray:
        return np.concatenate([omega, phi], axis=-1)

    @staticmethod
    def unpack(y: np.ndarray):
        return y[..., :15], y[..., 15:]

    def _psi(self, phi):
        psi, lam = _chunked(_psi_and_lambda, phi, batch_shape=self.grid.shape)
        bad = ~(lam < 0)
        if np.any(bad):
            idx = _first_bad(bad)
            raise FlowHalt("ellipticity", f"lambda(phi) = {lam[idx]:.3e} >= 0 at {idx}")
        return psi, lam

    def rhs(self, y, stage=0):
        omega, phi = self.unpack(y)
        psi, _ = self._psi(phi)
        dpsi = d_values(psi, self.grid, 3)
        domega = -_chunked(lambda w, r: _l_omega_solve(w, r, self.grid.shape), omega, dpsi,
                           batch_shape=self.grid.shape)
        return self.pack(domega, d_values(omega, self.grid, 2))

    def monitor(self, y):
        omega, phi = self.unpack(y)
        psi, lam = self._psi(phi)
        K = _chunked(lambda p: hitchin_K(p), phi, batch_shape=self.grid.shape)
        J = K / np.sqrt(-lam)[..., None, None]
        alg = _chunked(lambda w, r, i, j: tuple(su3_algebra_residuals(w, r, i, j).values()),
                       omega, phi, psi, J, batch_shape=self.grid.shape)
        half_w2 = 0.5 * ext.wedge_coeffs(omega, omega, 6, 2, 2)
        return {
            "d_phi": float(np.abs(d_values(phi, self.grid, 3)).max()),
            "d_half_omega2": float(np.abs(d_values(half_w2, self.grid, 4)).max()),
            "volume_compat": float(np.abs(alg[0]).max()),
            "type_compat": float(alg[1].max()),
            "positivity": float(alg[2].min()),
            "margin": float((-lam).min()),
        }

    def check(self, mon):
        for key in ("volume_compat", "type_compat"):
            if mon[key] > self.compat_tol:
                return FlowHalt("compatibility", f"{key} residual {mon[key]:.3e} > {self.compat_tol:g}")
        if mon["positivity"] <= 0:
            return FlowHalt("positivity", f"omega(., J.) has eigenvalue {mon['positivity']:.3e}")
        return None

    def ambient_forms(self, y):
        omega, phi = self.unpack(y)
        psi, _ = self._psi(phi)
        half_w2 = 0.5 * ext.wedge_coeffs(omega, omega, 6, 2, 2)
        sigma = _dt_wedge(omega, 6, 2) + _lift(phi, 6, 3)
        tau = _lift(half_w2, 6, 4) - _dt_wedge(psi, 6, 3)
        return [("sigma", 3, sigma), ("tau", 4, tau)]

    def payload(self, y) -> dict:
        omega, phi = self.unpack(y)
        psi, _ = self._psi(phi)
        return {"omega": FormField(self.grid, 2, omega),
                "Omega_re": FormField(self.grid, 3, phi),
                "Omega_im": FormField(self.grid, 3, psi)}


def g2_rhs(omega: FormField, Omega_re: FormField) -> tuple[np.ndarray, np.ndarray]:
    """Tangent (d phi/dt, d omega/dt) of the G2 flow, phi = Re Omega."""
    flow = G2Flow(omega.grid)
    try:
        out = flow.rhs(flow.pack(omega.values, Omega_re.values))
    except FlowHalt as exc:
        raise StructureError(str(exc)) from exc
    domega, dphi = flow.unpack(out)
    return dphi, domega


class Spin7Flow(FlowSystem):
    """State: tau (35 coefficients per point); sigma = Ss^{-1}(tau) is tracked as Newton seed."""

    kind = "spin7"

    def __init__(self, grid: TorusGrid, seeds: np.ndarray, orientation: float = 1.0,
                 max_iter: int = 50, rtol: float = 1e-12):
        if grid.dim != 7:
            raise ValueError("the Spin(7) flow lives on a 7-torus")
        self.grid = grid
        self._seeds = np.array(seeds, dtype=float)
        self.orientation = orientation
        self.max_iter = max_iter
        self.rtol = rtol
        self._base = None
        self._base_y = None

    def seeds(self):
        return self._seeds

    def solve(self, tau: np.ndarray, seed: np.ndarray) -> np.ndarray:
        def one(t, s):
            return ss_inverse_coeffs(t, self.orientation, s, max_iter=self.max_iter, rtol=self.rtol)[0]
        try:
            return _chunked(one, tau, seed, batch_shape=self.grid.shape)
        except NewtonError as exc:
            raise FlowHalt("newton", str(exc)) from exc
        except StructureError as exc:
            raise FlowHalt("definiteness", str(exc)) from exc

    def begin_step(self, y):
        if self._base_y is y:
            return
        self._seeds = self.solve(y, self._seeds)
        self._base, self._base_y = self._seeds, y

    def _sigma(self, y):
        return self._base if self._base_y is y else self.solve(y, self._seeds)

    def rhs(self, y, stage=0):
        return d_values(self._sigma(y), self.grid, 3)

    def monitor(self, y):
        sigma = self._sigma(y)
        _, _, margin = _chunked(g2_metric_coeffs, sigma, batch_shape=self.grid.shape)
        back = _chunked(ss_coeffs, sigma, batch_shape=self.grid.shape)
        return {
            "d_tau": float(np.abs(d_values(y, self.grid, 4)).max()),
            "ss_consistency": float(np.abs(back - y).max()),
            "margin": float(margin.min()),
        }

    def ambient_forms(self, y):
        sigma = self._sigma(y)
        return [("Phi", 4, _dt_wedge(sigma, 7, 3) + _lift(y, 7, 4))]

    def payload(self, y) -> FormField:
        return FormField(self.grid, 4, y)


def spin7_rhs(tau: FormField, seeds: np.ndarray, orientation: float = 1.0):
    """Tangent d tau/dt = d(Ss^{-1} tau) and the updated per-point seeds."""
    flow = Spin7Flow(tau.grid, seeds, orientation)
    try:
        sigma = flow.solve(tau.values, flow.seeds())
    except FlowHalt as exc:
        raise StructureError(str(exc)) from exc
    return d_values(sigma, tau.grid, 3), sigma


# ---------------------------------------------------------------------------
# integration

@dataclass
class FlowState:
    t: float
    payload: np.ndarray
    seeds: Optional[np.ndarray] = None


@dataclass
class FlowReport:
    kind: str
    dt: float
    T: float
    resolution: tuple
    stencil: str
    rows: list = field(default_factory=list)
    halt_reason: str = "completed"
    halt_detail: str = ""
    halt_time: float = math.inf
    steps: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def halted(self) -> bool:
        return self.halt_reason != "completed"

    def column(self, key: str) -> np.ndarray:
        return np.array([r.get(key, np.nan) for r in self.rows], dtype=float)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "dt": self.dt, "T": self.T,
            "resolution": list(self.resolution), "stencil": self.stencil,
            "steps": self.steps, "halt_reason": self.halt_reason,
            "halt_detail": self.halt_detail,
            "halt_time": None if math.isinf(self.halt_time) else self.halt_time,
            "meta": self.meta, "rows": self.rows,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        keys = []
        for r in self.rows:
            keys += [k for k in r if k not in keys and k != "bands"]
        nb = max((len(r.get("bands", [])) for r in self.rows), default=0)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys + [f"band{j}" for j in range(nb)])
        for r in self.rows:
            bands = list(r.get("bands", [])) + [""] * (nb - len(r.get("bands", [])))
            w.writerow([repr(r[k]) if isinstance(r.get(k), float) else r.get(k, "") for k in keys] + bands)
        return buf.getvalue()


@dataclass
class Trajectory:
    kind: str
    grid: TorusGrid
    dt: float
    archive_every: int
    states: list = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])


def _nonfinite(y: np.ndarray) -> bool:
    return not np.all(np.isfinite(y))


def integrate(system: FlowSystem, y0: np.ndarray, dt: float, T: float, *,
              monitor_every: int = 1, archive_every: int = 1,
              blowup: float = BLOWUP_FACTOR, meta: Optional[dict] = None):
    """Fixed-step RK4 with monitors and halts; returns (FlowReport, Trajectory)."""
    if dt <= 0 or T < 0:
        raise ValueError("dt must be positive and T non-negative")
    nsteps = int(round(T / dt))
    if abs(nsteps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be an integer multiple of dt")
    if monitor_every < 1 or archive_every < 1:
        raise ValueError("cadences must be positive integers")
    grid = system.grid
    y = np.array(y0, dtype=float)
    n0 = l2_norm(y, grid)
    report = FlowReport(system.kind, dt, T, grid.resolution, grid.stencil, meta=dict(meta or {}))
    traj = Trajectory(system.kind, grid, dt, archive_every)

    def record(step, y):
        row = {"step": step, "t": step * dt, "l2": l2_norm(y, grid), "bands": band_norms(y, grid)}
        row.update(system.monitor(y))
        report.rows.append(row)
        return system.check(row)

    def archive(step, y):
        seeds = system.seeds()
        traj.states.append(FlowState(step * dt, y.copy(), None if seeds is None else seeds.copy()))

    def halt(step, exc):
        report.halt_reason, report.halt_detail = exc.reason, exc.detail
        report.halt_time = step * dt
        report.steps = step

    try:
        if system.seeds() is not None:
            system.begin_step(y)
        problem = record(0, y)
        archive(0, y)
        if problem:
            halt(0, problem)
            return report, traj
    except FlowHalt as exc:
        halt(0, exc)
        return report, traj

    for step in range(1, nsteps + 1):
        try:
            system.begin_step(y)
            k1 = system.rhs(y, 0)
            k2 = system.rhs(y + 0.5 * dt * k1, 1)
            k3 = system.rhs(y + 0.5 * dt * k2, 2)
            k4 = system.rhs(y + dt * k3, 3)
            y = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if _nonfinite(y):
                raise FlowHalt("nan", "non-finite state")
            norm = l2_norm(y, grid)
            if norm > blowup * n0:
                raise FlowHalt("blowup", f"L2 norm {norm:.3e} > {blowup:g} x initial")
            if isinstance(system, SU2Flow):
                det = np.abs(np.linalg.det(y))
                if np.any(~(det >= system.degenerate)):
                    raise FlowHalt("degenerate", f"coframe det {det.min():.3e}")
            problem = None
            if step % monitor_every == 0 or step == nsteps:
                system.begin_step(y)
                problem = record(step, y)
            if step % archive_every == 0:
                archive(step, y)
            if problem:
                raise problem
        except FlowHalt as exc:
            halt(step, exc)
            return report, traj
    report.steps = nsteps
    return report, traj


# ---------------------------------------------------------------------------
# ambient reconstruction

@dataclass
class AmbientResult:
    times: np.ndarray
    forms: dict           # name -> (degree, array (nt,) + grid + (C(k+1, p),))
    ambient: np.ndarray   # sup |d(ambient)| per archived time
    slice: np.ndarray     # sup of the purely spatial part per archived time
    mixed: np.ndarray     # sup of the dt components per archived time


def ambient_d(A: np.ndarray, grid: TorusGrid, step: float, p: int) -> np.ndarray:
    """d on R x T^k for arrays (nt,) + grid + (C(k+1, p),); time is axis 0 and coordinate 1."""
    k = grid.dim
    out = np.zeros(A.shape[:-1] + (math.comb(k + 1, p + 1),))
    for axis, (src, dst, sg) in enumerate(_d_table(k + 1, p)):
        if axis == 0:
            der = diff_box(A[..., src], 0, step, order=4)
        else:
            der = partial(A[..., src], axis - 1, grid, offset=1)
        out[..., dst] += sg * der
    return out


def reconstruct_ambient(system: FlowSystem, traj: Trajectory) -> AmbientResult:
    """Assemble the ambient forms from an archived trajectory and measure their closure."""
    times = traj.times
    if len(times) < 5:
        raise ValueError("need at least 5 archived states")
    gaps = np.diff(times)
    step = traj.dt * traj.archive_every
    if np.abs(gaps - step).max() > 1e-9 * step:
        raise ValueError("archive is not uniform in time")
    saved = system.seeds()
    per_time = []
    for s in traj.states:
        if s.seeds is not None:
            system._seeds = s.seeds
        per_time.append(system.ambient_forms(s.payload))
    if saved is not None:
        system._seeds = saved
    forms, amb, sl, mx = {}, [], [], []
    k = traj.grid.dim
    for j, (name, p, _) in enumerate(per_time[0]):
        A = np.stack([pt[j][2] for pt in per_time])
        forms[name] = (p, A)
        dA = ambient_d(A, traj.grid, step, p)
        spatial = np.array([not (m & 1) for m in ext.basis(k + 1, p + 1)])
        axes = tuple(range(1, dA.ndim))
        amb.append(np.abs(dA).max(axis=axes))
        sl.append(np.abs(dA[..., spatial]).max(axis=axes))
        mx.append(np.abs(dA[..., ~spatial]).max(axis=axes))
    return AmbientResult(times, forms, np.max(amb, axis=0), np.max(sl, axis=0), np.max(mx, axis=0))


# ---------------------------------------------------------------------------
# initial data

def flat_state(kind: str, grid: TorusGrid) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Flat model data as (state, seeds)."""
    if kind == "su2":
        return CoframeField.flat(grid).E, None
    if kind == "g2":
        return graph_state("g2", grid, np.zeros(grid.shape), 0.0)
    if kind == "spin7":
        return graph_state("spin7", grid, np.zeros(grid.shape), 0.0)
    raise ValueError(f"unknown flow kind {kind!r}")


def pick_modes(dim: int, count: int, seed: int) -> list[np.ndarray]:
    """``count`` (1 to 3) distinct nonzero integer wavevectors with entries in -2..2."""
    if not 1 <= count <= 3:
        raise ValueError("analytic data uses 1 to 3 modes")
    rng = np.random.default_rng(seed)
    vecs = []
    while len(vecs) < count:
        v = rng.integers(-2, 3, size=dim)
        if np.any(v) and not any(np.array_equal(v, w) or np.array_equal(v, -w) for w in vecs):
            vecs.append(v)
    return vecs


def analytic_profile(grid: TorusGrid, modes, seed: int) -> np.ndarray:
    """Trigonometric polynomial with at most 3 modes, sup-normalized to 1.

    ``modes`` is a list of integer wavevectors or a mode count (see
    :func:`pick_modes`).  Amplitudes and phases come from ``seed``.
    """
    if isinstance(modes, (int, np.integer)):
        vecs = pick_modes(grid.dim, int(modes), seed)
    else:
        vecs = [np.asarray(v, dtype=int) for v in modes]
        if not 1 <= len(vecs) <= 3 or any(v.shape != (grid.dim,) for v in vecs):
            raise ValueError("analytic data uses 1 to 3 integer wavevectors of the grid dimension")
    nyq = min(grid.resolution) // 2
    if any(np.abs(v).max() >= nyq for v in vecs):
        raise ValueError("wavevector at or above the grid Nyquist mode")
    rng = np.random.default_rng(seed)
    x = grid.coords()
    u = np.zeros(grid.shape)
    for v in vecs:
        amp, phase = rng.uniform(0.5, 1.0), rng.uniform(0, 2 * np.pi)
        arg = sum(vi * 2 * np.pi / L * xi for vi, L, xi in zip(v, grid.period, x))
        u += amp * np.cos(arg + phase)
    return u / np.abs(u).max()


def rough_profile(grid: TorusGrid, seed: int, axes: Optional[Sequence[int]] = None) -> np.ndarray:
    """Flat-spectrum random field up to (excluding) Nyquist, zero mean, sup-normalized.

    ``axes`` restricts the dependence to a subset of coordinates.
    """
    rng = np.random.default_rng(seed)
    axes = tuple(range(grid.dim)) if axes is None else tuple(axes)
    sub = tuple(grid.resolution[a] for a in axes)
    coef = rng.normal(size=sub) + 1j * rng.normal(size=sub)
    ms = np.meshgrid(*[np.fft.fftfreq(n, 1.0 / n) for n in sub], indexing="ij")
    keep = np.ones(sub, dtype=bool)
    for m, n in zip(ms, sub):
        keep &= np.abs(m) < n / 2
    keep &= sum(np.abs(m) for m in ms) > 0
    u = np.fft.ifftn(coef * keep).real
    shape = [1] * grid.dim
    for a, n in zip(axes, sub):
        shape[a] = n
    u = np.broadcast_to(u.reshape(shape), grid.shape).copy()
    return u / np.abs(u).max()


def spectral_gradient(u: np.ndarray, grid: TorusGrid) -> np.ndarray:
    g = grid.with_stencil("spectral")
    return np.stack([partial(u, a, g) for a in range(grid.dim)], axis=-1)


def _ambient_model(kind: str):
    if kind == "su2":
        return [u.coeffs for u in flat_su2_triple().upsilon], 2
    if kind == "g2":
        return standard_phi().sigma.coeffs, 3
    if kind == "spin7":
        return standard_Phi0().assemble().coeffs, 4
    raise ValueError(f"unknown flow kind {kind!r}")


def graph_state(kind: str, grid: TorusGrid, u: np.ndarray, eps: float,
                shift: Optional[np.ndarray] = None):
    """Structure induced on an embedded hypersurface of the flat model space.

    The embedding is F(y) = (eps u(y), y + eps v(y)) into R x T^k carrying the
    flat SU(2) triple, G2 form or Spin(7) form (time is the first
    coordinate); ``shift`` holds v with shape grid + (k,).  Every induced
    form is a pullback along F, so the slice constraints hold exactly in the
    continuum.  Returns (state, seeds).
    """
    k = grid.dim
    A = np.zeros(grid.shape + (k + 1, k))
    A[..., 0, :] = eps * spectral_gradient(u, grid)
    A[..., 1:, :] = np.eye(k)
    if shift is not None:
        for i in range(k):
            A[..., 1 + i, :] += eps * spectral_gradient(shift[..., i], grid)
    # normal = generalized cross product of the tangent columns
    normal = np.stack([(-1) ** i * np.linalg.det(np.delete(A, i, axis=-2)) for i in range(k + 1)],
                      axis=-1)
    normal *= np.sign(normal[..., :1])
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    model, p = _ambient_model(kind)

    def induced(F, q):
        contr = ext.interior_coeffs(normal, F, k + 1, q)
        return (np.einsum("...i,...ij->...j", contr, ext.compound(A, q - 1)),
                np.einsum("i,...ij->...j", F, ext.compound(A, q)))

    if kind == "su2":
        E = np.stack([induced(F, 2)[0] for F in model], axis=-2)
        return E, None
    if kind == "g2":
        omega, phi = induced(model, 3)
        return G2Flow.pack(omega, phi), None
    sigma, tau = induced(model, 4)
    return tau, sigma


def perturbed_state(kind: str, grid: TorusGrid, eps: float, seed: int, *,
                    profile: str = "analytic", modes=1, shift_modes=None):
    """Hypersurface data whose height and tangential shift come from one profile family.

    Analytic profiles use ``modes`` for the height and ``shift_modes``
    (default: the same) for the shift.  With a single shared wavevector all
    gradients are parallel and products of perturbations drop out of the
    induced forms, so distinct height and shift modes give a more generic test.
    """
    k = grid.dim
    if profile == "analytic":
        def vecs_of(m, s):
            return pick_modes(k, m, s) if isinstance(m, (int, np.integer)) else m
        hv = vecs_of(modes, seed)
        sv = hv if shift_modes is None else vecs_of(shift_modes, seed + 1)
        funcs = [analytic_profile(grid, hv, seed)]
        funcs += [analytic_profile(grid, sv, seed + 1 + j) for j in range(k)]
    elif profile == "rough":
        funcs = [rough_profile(grid, seed + j) for j in range(k + 1)]
    else:
        raise ValueError("profile must be 'analytic' or 'rough'")
    return graph_state(kind, grid, funcs[0], eps, np.stack(funcs[1:], axis=-1))


def shear_state(grid: TorusGrid, f: np.ndarray, eps: float) -> np.ndarray:
    """The coclosed coframe (dx1, dx2 + eps f dx3, dx3), f independent of x2."""
    if grid.dim != 3:
        raise ValueError("shear data live on a 3-torus")
    if np.abs(np.diff(f, axis=1)).max() > 0:
        raise ValueError("shear profile must not depend on x2")
    E = CoframeField.flat(grid).E
    E[..., 1, 2] += eps * f
    return E


def make_system(kind: str, grid: TorusGrid, seeds: Optional[np.ndarray] = None, *,
                compat_tol: float = COMPAT_TOL, degenerate: float = DEGENERATE_DET) -> FlowSystem:
    if kind == "su2":
        return SU2Flow(grid, degenerate)
    if kind == "g2":
        return G2Flow(grid, compat_tol)
    if kind == "spin7":
        if seeds is None:
            raise ValueError("the Spin(7) flow needs per-point seeds")
        return Spin7Flow(grid, seeds)
    raise ValueError(f"unknown flow kind {kind!r}")


# ---------------------------------------------------------------------------
# ill-posedness probe

def su2_symbol(xi: np.ndarray) -> np.ndarray:
    """Linearization of the SU(2) flow at the flat coframe for h e^{i xi.x}.

    Acts on the 9 entries h[a, i] (a: coframe index, i: dx^i) and returns the
    complex 9x9 matrix of h -> i xi x h_a - (i/2) sum_b (xi x h_b)_b e_a.
    """
    X = np.array([[0, -xi[2], xi[1]], [xi[2], 0, -xi[0]], [-xi[1], xi[0], 0]], dtype=complex)
    S = np.zeros((9, 9), dtype=complex)
    for a in range(3):
        S[3 * a:3 * a + 3, 3 * a:3 * a + 3] = 1j * X
        for b in range(3):
            S[3 * a + a, 3 * b:3 * b + 3] += -0.5j * X[b]
    return S


def symbol_growth(k: float, h: float, stencil: str = "fd4") -> float:
    """Largest growth rate of the discrete linearized SU(2) flow along (k, 0, 0)."""
    kap = float(modified_wavenumber(k, h, stencil))
    return float(np.linalg.eigvals(su2_symbol(np.array([kap, 0.0, 0.0]))).real.max())


def _fit_rate(times: np.ndarray, series: np.ndarray, lam_max: float) -> tuple[float, float]:
    """Fit series(t) ~ v1 e^{lam t} + v2 e^{-lam t} + v3 + v4 t (shared lam) by variable projection."""
    ts = times - times.mean()

    def resid(lam):
        B = np.column_stack([np.exp(lam * ts), np.exp(-lam * ts), np.ones_like(ts), ts])
        coef, *_ = np.linalg.lstsq(B, series, rcond=None)
        return float(np.sum((B @ coef - series) ** 2))

    res = minimize_scalar(resid, bounds=(1e-3, lam_max), method="bounded",
                          options={"xatol": 1e-10})
    scale = float(np.sum(series ** 2)) or 1.0
    return float(res.x), float(res.fun / scale)


def _mode_series(traj: Trajectory, k: int) -> np.ndarray:
    """Real and imaginary parts of the (k, 0, 0) Fourier coefficient of every entry of E - I."""
    n = traj.grid.resolution[0]
    phase = np.exp(-2j * np.pi * k * np.arange(n) / n)
    out = []
    for s in traj.states:
        c = np.einsum("i,ijkab->ab", phase, s.payload - np.eye(3)) / traj.grid.npoints
        out.append(np.concatenate([c.real.ravel(), c.imag.ravel()]))
    return np.array(out)


@dataclass
class ProbeResult:
    wavenumbers: list
    rates: list
    oracle: list
    linearity: list
    fit_residual: list
    eps: float
    T: float
    resolution: tuple

    def ratios(self) -> list[tuple[int, int, float]]:
        out = []
        for i, k in enumerate(self.wavenumbers):
            if k and 2 * k in self.wavenumbers:
                j = self.wavenumbers.index(2 * k)
                out.append((k, 2 * k, self.rates[j] / self.rates[i]))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "rate", "oracle", "rel_error", "linearity_ratio", "fit_residual"])
        for k, r, o, lin, fr in zip(self.wavenumbers, self.rates, self.oracle, self.linearity,
                                    self.fit_residual):
            rel = abs(r - o) / o if o else abs(r)
            w.writerow([k, repr(r), repr(o), repr(rel), repr(lin), repr(fr)])
        return buf.getvalue()


def illposedness_probe(flow_kind: str, wavenumbers: Sequence[int], eps: float, T_short: float, *,
                       resolution: int = 64, dt: float = 0.05, stencil: str = "fd4",
                       archive_every: int = 1, linearity_tol: float = 0.05) -> ProbeResult:
    """Growth rate of single Fourier modes around the flat SU(2) coframe.

    Every requested wavenumber is seeded at once in the shear profile
    f(x1) = sum_k cos(k x1); modes do not interact in the linear regime, which
    is checked by rerunning with 2 eps and requiring the final mode
    amplitudes to double within ``linearity_tol``.
    """
    if flow_kind != "su2":
        raise ValueError("the probe is implemented for the SU(2) flow")
    ks = [int(k) for k in wavenumbers]
    grid = TorusGrid.cube(3, resolution, stencil)
    if max(ks) >= resolution // 2:
        raise ValueError("wavenumber at or above Nyquist")
    x1 = grid.coords()[0]
    f = sum(np.cos(k * x1) for k in ks)
    system = SU2Flow(grid)
    runs = []
    for scale in (1.0, 2.0):
        y0 = shear_state(grid, f, scale * eps)
        rep, traj = integrate(system, y0, dt, T_short, monitor_every=max(1, int(round(T_short / dt))),
                              archive_every=archive_every)
        if rep.halted:
            raise NonlinearRegime(f"probe run halted: {rep.halt_reason} {rep.halt_detail}")
        runs.append(traj)
    h = grid.spacing[0]
    lam_max = 4.0 / h
    rates, oracle, lin, fres = [], [], [], []
    for k in ks:
        s1, s2 = _mode_series(runs[0], k), _mode_series(runs[1], k)
        a1, a2 = np.linalg.norm(s1[-1]), np.linalg.norm(s2[-1])
        ratio = a2 / a1 if a1 else 2.0
        lin.append(float(ratio))
        if abs(ratio / 2.0 - 1.0) > linearity_tol:
            raise NonlinearRegime(f"mode {k}: amplitude ratio {ratio:.4f} under eps doubling")
        if k == 0:
            rates.append(float(np.log(np.linalg.norm(s1[-1]) / np.linalg.norm(s1[0])) / T_short))
            fres.append(0.0)
            oracle.append(0.0)
            continue
        lam, r = _fit_rate(runs[0].times, s1 / eps, lam_max)
        rates.append(lam)
        fres.append(r)
        oracle.append(symbol_growth(k, h, stencil))
    return ProbeResult(ks, rates, oracle, lin, fres, eps, T_short, grid.resolution)


def halt_time_comparison(resolutions: Sequence[int], eps: float, seed: int, *, dt: float = 0.02,
                         T_max: float = 3.0, mode: int = 1, stencil: str = "fd4") -> list[dict]:
    """Halt times of analytic versus rough shear data of equal L^2 norm.

    Analytic: f = cos(mode x1) scaled by eps.  Rough: flat-spectrum f(x1, x3)
    rescaled to the same L^2 norm.  A run reaching T_max without halting
    reports an infinite halt time.
    """
    rows = []
    for n in resolutions:
        grid = TorusGrid.cube(3, n, stencil)
        x1 = grid.coords()[0]
        fa = eps * np.cos(mode * x1)
        fr = rough_profile(grid, seed, axes=(0, 2))
        fr *= np.linalg.norm(fa) / np.linalg.norm(fr)
        row = {"resolution": n}
        for name, f in (("analytic", fa), ("rough", fr)):
            rep, _ = integrate(SU2Flow(grid), shear_state(grid, f, 1.0), dt, T_max,
                               monitor_every=int(round(T_max / dt)), archive_every=10 ** 9)
            row[f"{name}_halt"] = rep.halt_time
            row[f"{name}_reason"] = rep.halt_reason
        rows.append(row)
    return rows

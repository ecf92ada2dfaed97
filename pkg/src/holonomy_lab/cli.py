"""Command line scenario runner.

Every subcommand reads an optional strict JSON config (``--config``); flags
given on the command line override config values.  Reports are written to
the output directory and contain no timestamps, so reruns of the same
config produce identical bytes.

Exit codes: 0 success, 2 configuration or input-format error, 3 numerical
halt (the report is still written), 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import flows as fl
from . import selftest
from .fields import (
    CoframeField,
    FormField,
    TorusGrid,
    cmc_functional,
    coclosed_residual,
    g2_residuals,
    su3_residuals,
)
from .serialization import FieldBundle, FieldFormatError, read_bundle, write_bundle, write_scalar_csv
from .special_forms import (
    StructureError,
    hyperkahler_from_potential,
    su2_wedge_matrix,
    volume_compat_coeffs,
)

EXIT_OK, EXIT_CONFIG, EXIT_HALT, EXIT_IO = 0, 2, 3, 4
DIMS = {"su2": 3, "g2": 6, "spin7": 7}


class ConfigError(ValueError):
    """Invalid scenario configuration."""


# ---------------------------------------------------------------------------
# configuration

COMMON_KEYS = {"command", "output", "workers"}
SCHEMAS = {
    "algebra-selftest": {"cases", "seed"},
    "flow-run": {"case", "init", "resolution", "period", "dt", "T", "monitor_every",
                 "archive_every", "stencil", "tolerances"},
    "probe-illposedness": {"case", "k", "eps", "T", "resolution", "dt", "stencil",
                           "halt_compare"},
    "diagnose": {"files", "kind"},
    "hk-potential": {"resolution", "box", "eps", "order"},
}
INIT_KEYS = {
    "flat": {"type"},
    "analytic-perturb": {"type", "modes", "shift_modes", "eps", "seed"},
    "rough-perturb": {"type", "eps", "seed"},
    "file": {"type", "path"},
}
TOLERANCE_KEYS = {"blowup", "compat", "degenerate"}
HALT_COMPARE_KEYS = {"resolutions", "eps", "seed", "dt", "T_max"}


def _check_keys(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _positive(cfg: dict, key: str, integer: bool = False) -> None:
    if key in cfg and cfg[key] is not None:
        v = cfg[key]
        ok = isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0
        if integer:
            ok = ok and float(v).is_integer()
        if not ok:
            raise ConfigError(f"{key} must be a positive {'integer' if integer else 'number'}")


def load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def merge(command: str, cfg: dict, flags: dict) -> dict:
    """Validate the config for ``command`` and overlay non-None flags."""
    _check_keys(cfg, SCHEMAS[command] | COMMON_KEYS, "config")
    if "command" in cfg and cfg["command"] != command:
        raise ConfigError(f"config is for {cfg['command']!r}, not {command!r}")
    out = dict(cfg)
    for k, v in flags.items():
        if v is not None:
            out[k] = v
    for key in ("dt", "T", "eps"):
        _positive(out, key)
    for key in ("monitor_every", "archive_every", "cases", "workers", "order"):
        _positive(out, key, integer=True)
    if "stencil" in out and out["stencil"] not in ("fd4", "spectral"):
        raise ConfigError("stencil must be 'fd4' or 'spectral'")
    if "case" in out and out["case"] not in DIMS:
        raise ConfigError(f"case must be one of {sorted(DIMS)}")
    if "tolerances" in out:
        _check_keys(out["tolerances"], TOLERANCE_KEYS, "tolerances")
        for k in out["tolerances"]:
            _positive(out["tolerances"], k)
    if "init" in out:
        init = out["init"]
        if not isinstance(init, dict) or init.get("type") not in INIT_KEYS:
            raise ConfigError(f"init.type must be one of {sorted(INIT_KEYS)}")
        _check_keys(init, INIT_KEYS[init["type"]], "init")
        _positive(init, "eps")
    if "halt_compare" in out:
        _check_keys(out["halt_compare"], HALT_COMPARE_KEYS, "halt_compare")
    return out


def _resolution(value, dim: int) -> tuple:
    if value is None:
        raise ConfigError("resolution is required")
    res = (int(value),) * dim if np.isscalar(value) else tuple(int(v) for v in value)
    if len(res) != dim or min(res) <= 0:
        raise ConfigError(f"resolution needs {dim} positive entries")
    return res


def _grid(cfg: dict, dim: int) -> TorusGrid:
    try:
        return TorusGrid(_resolution(cfg.get("resolution"), dim), cfg.get("period"),
                         cfg.get("stencil", "fd4"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _set_workers(n: Optional[int]) -> int:
    n = int(n or os.cpu_count() or 1)
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(n)
    except ImportError:
        pass
    return n


def _clean(obj):
    """JSON-safe copy: inf/nan become strings, numpy scalars become floats."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(_clean(data), indent=1, sort_keys=True) + "\n")


def _outdir(cfg: dict) -> Path:
    out = Path(cfg.get("output") or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands

def cmd_selftest(cfg: dict) -> int:
    results = selftest.run(int(cfg.get("cases", 1000)), int(cfg.get("seed", 0)))
    report = {"command": "algebra-selftest", "cases": int(cfg.get("cases", 1000)),
              "seed": int(cfg.get("seed", 0)), "checks": [r.to_dict() for r in results],
              "passed": all(r.passed for r in results)}
    _write_json(_outdir(cfg) / "selftest.json", report)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_error={r.max_error:.3e} tol={r.tol:g}")
    return EXIT_OK if report["passed"] else EXIT_HALT


def initial_state(case: str, grid: TorusGrid, init: dict):
    kind = init.get("type", "flat")
    if kind == "flat":
        return fl.flat_state(case, grid)
    if kind == "analytic-perturb":
        return fl.perturbed_state(case, grid, float(init.get("eps", 1e-3)), int(init.get("seed", 0)),
                                  profile="analytic", modes=init.get("modes", 1),
                                  shift_modes=init.get("shift_modes"))
    if kind == "rough-perturb":
        return fl.perturbed_state(case, grid, float(init.get("eps", 1e-3)), int(init.get("seed", 0)),
                                  profile="rough")
    bundle = read_bundle(init["path"], kind=f"flow-{case}")
    if bundle.grid.resolution != grid.resolution:
        raise FieldFormatError("initial-data file resolution differs from the configured grid")
    state = bundle.components["state"][1]
    if case == "g2":
        state = fl.G2Flow.pack(state, bundle.components["phi"][1])
    seeds = bundle.components["seeds"][1] if "seeds" in bundle.components else None
    return state, seeds


def _state_bundle(case: str, grid: TorusGrid, state: np.ndarray, seeds, meta: dict) -> FieldBundle:
    if case == "su2":
        comps = {"state": (1, state)}
    elif case == "g2":
        comps = {"state": (2, state[..., :15]), "phi": (3, state[..., 15:])}
    else:
        comps = {"state": (4, state)}
    if seeds is not None:
        comps["seeds"] = (3, seeds)
    return FieldBundle(f"flow-{case}", grid, comps, meta)


def cmd_flow(cfg: dict) -> int:
    case = cfg.get("case")
    if case is None:
        raise ConfigError("flow run needs a case")
    for key in ("dt", "T"):
        if key not in cfg:
            raise ConfigError(f"flow run needs {key}")
    grid = _grid(cfg, DIMS[case])
    init = cfg.get("init", {"type": "flat"})
    tol = cfg.get("tolerances", {})
    try:
        y0, seeds = initial_state(case, grid, init)
        system = fl.make_system(case, grid, seeds,
                                compat_tol=float(tol.get("compat", fl.COMPAT_TOL)),
                                degenerate=float(tol.get("degenerate", fl.DEGENERATE_DET)))
    except (ValueError, StructureError) as exc:
        raise ConfigError(f"initial data: {exc}") from exc
    meta = {"init": init, "workers": cfg.get("workers")}
    report, traj = fl.integrate(system, y0, float(cfg["dt"]), float(cfg["T"]),
                                monitor_every=int(cfg.get("monitor_every", 1)),
                                archive_every=int(cfg.get("archive_every", 1)),
                                blowup=float(tol.get("blowup", fl.BLOWUP_FACTOR)), meta=meta)
    out = _outdir(cfg)
    ambient = None
    if not report.halted and len(traj.states) >= 5:
        amb = fl.reconstruct_ambient(system, traj)
        ambient = {"times": amb.times.tolist(), "ambient": amb.ambient.tolist(),
                   "slice": amb.slice.tolist(), "mixed": amb.mixed.tolist()}
    data = report.to_dict()
    data["ambient"] = ambient
    _write_json(out / "report.json", data)
    (out / "report.csv").write_text(report.to_csv())
    archive = out / "archive"
    archive.mkdir(exist_ok=True)
    names = []
    for i, s in enumerate(traj.states):
        name = f"state_{i:05d}.bin"
        write_bundle(archive / name, _state_bundle(case, grid, s.payload, s.seeds, {"t": s.t}))
        names.append({"file": name, "t": s.t})
    _write_json(archive / "manifest.json", {
        "kind": case, "dt": report.dt, "T": report.T, "monitor_every": int(cfg.get("monitor_every", 1)),
        "archive_every": int(cfg.get("archive_every", 1)), "halt_reason": report.halt_reason,
        "states": names})
    print(f"{case}: {report.halt_reason} after {report.steps} steps")
    return EXIT_HALT if report.halted else EXIT_OK


def _parse_k(value) -> list[int]:
    if isinstance(value, str):
        try:
            return [int(x) for x in value.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError("k must be a comma-separated list of integers") from exc
    return [int(x) for x in value]


def cmd_probe(cfg: dict) -> int:
    case = cfg.get("case", "su2")
    if case != "su2":
        raise ConfigError("the ill-posedness probe supports case su2")
    ks = _parse_k(cfg.get("k", [2, 4, 8]))
    res = int(cfg.get("resolution", 64))
    if not ks or min(ks) < 0 or max(ks) >= res // 2:
        raise ConfigError("wavenumbers must be non-negative and below Nyquist")
    out = _outdir(cfg)
    try:
        result = fl.illposedness_probe(case, ks, float(cfg.get("eps", 1e-9)), float(cfg.get("T", 1.5)),
                                       resolution=res, dt=float(cfg.get("dt", 0.05)),
                                       stencil=cfg.get("stencil", "fd4"))
    except fl.NonlinearRegime as exc:
        _write_json(out / "probe.json", {"halt_reason": "nonlinear", "detail": str(exc)})
        print(f"probe aborted: {exc}")
        return EXIT_HALT
    (out / "growth.csv").write_text(result.to_csv())
    rates = result.rates
    report = {"case": case, "k": ks, "eps": result.eps, "T": result.T, "resolution": res,
              "rates": rates, "oracle": result.oracle, "linearity": result.linearity,
              "ratios": [list(r) for r in result.ratios()],
              "monotone": bool(all(b > a for a, b in zip(rates, rates[1:])))}
    hc = cfg.get("halt_compare")
    if hc:
        rows = fl.halt_time_comparison(hc.get("resolutions", [16, 32]), float(hc.get("eps", 1e-2)),
                                       int(hc.get("seed", 0)), dt=float(hc.get("dt", 0.05)),
                                       T_max=float(hc.get("T_max", 3.0)))
        report["halt_compare"] = rows
    _write_json(out / "probe.json", report)
    for k, r, o in zip(ks, rates, result.oracle):
        print(f"k={k} rate={r:.6f} oracle={o:.6f}")
    return EXIT_OK


def diagnose_bundle(bundle: FieldBundle) -> dict:
    """All residuals applicable to the bundle's structure kind."""
    g, comps = bundle.grid, bundle.components
    kind = bundle.kind
    try:
        if kind in ("coframe", "flow-su2"):
            eta = CoframeField(g, comps["state" if "state" in comps else "eta"][1])
            _, cocl = coclosed_residual(eta)
            cmc = cmc_functional(eta)
            return {"coclosed": cocl, "cmc_mean": float(cmc.mean()), "cmc_min": float(cmc.min()),
                    "cmc_max": float(cmc.max()), "min_abs_det": float(np.abs(eta.det()).min())}
        if kind in ("su3", "flow-g2"):
            omega = comps["omega"][1] if "omega" in comps else comps["state"][1]
            phi = comps["Omega_re"][1] if "Omega_re" in comps else comps["phi"][1]
            if "Omega_im" in comps:
                psi = comps["Omega_im"][1]
            else:
                psi, _ = fl.G2Flow(g)._psi(phi)
            res = su3_residuals(FormField(g, 2, omega), FormField(g, 3, phi), FormField(g, 3, psi))
            H = res.pop("mean_curvature")
            res.update({"H_mean": float(H.mean()), "H_min": float(H.min()), "H_max": float(H.max()),
                        "volume_compat": float(np.abs(volume_compat_coeffs(omega, phi, psi)).max())})
            return res
        if kind == "g2":
            res = g2_residuals(FormField(g, 3, comps["sigma"][1]))
            c = res.pop("cmc")
            res.update({"cmc_mean": float(c.mean()), "cmc_min": float(c.min()), "cmc_max": float(c.max())})
            return res
        if kind == "kahler-potential":
            h = bundle.grid.spacing
            hk = hyperkahler_from_potential(comps["phi"][1][..., 0], h, int(bundle.meta.get("order", 4)))
            W = su2_wedge_matrix(hk.upsilon1, hk.upsilon2, hk.upsilon3)
            vol = np.sqrt(np.abs(np.linalg.det(hk.metric)))
            return {"ma_residual_max": float(np.abs(hk.ma_residual).max()),
                    "pseudoconvex_fraction": float(hk.pseudoconvex.mean()),
                    "triple_error": float(np.abs(W - 2 * vol[..., None, None] * np.eye(3)).max())}
        if kind == "flow-spin7":
            system = fl.Spin7Flow(g, comps["seeds"][1])
            return system.monitor(comps["state"][1])
    except (KeyError, ValueError, StructureError, fl.FlowHalt) as exc:
        raise FieldFormatError(f"cannot diagnose {kind!r} data: {exc}") from exc
    raise FieldFormatError(f"unsupported structure kind {kind!r}")


def cmd_diagnose(cfg: dict) -> int:
    files = cfg.get("files") or []
    if not files:
        raise ConfigError("diagnose needs at least one field file")
    out = _outdir(cfg)
    reports = {}
    for f in files:
        bundle = read_bundle(f, kind=cfg.get("kind"))
        reports[str(f)] = {"kind": bundle.kind, "residuals": diagnose_bundle(bundle)}
    _write_json(out / "diagnose.json", reports)
    print(json.dumps(_clean(reports), sort_keys=True))
    return EXIT_OK


def cmd_hk(cfg: dict) -> int:
    n = int(cfg.get("resolution", 16))
    L = float(cfg.get("box", 1.0))
    eps = float(cfg.get("eps", 0.0))
    order = int(cfg.get("order", 4))
    if n < 5:
        raise ConfigError("hk-potential needs resolution >= 5")
    ax = np.linspace(-L, L, n)
    x1, y1, x2, y2 = np.meshgrid(ax, ax, ax, ax, indexing="ij")
    # |z|^2 plus the Hermitian coupling 2 eps Re(z1 conj z2)
    phi = x1 ** 2 + y1 ** 2 + x2 ** 2 + y2 ** 2 + 2 * eps * (x1 * x2 + y1 * y2)
    h = ax[1] - ax[0]
    res = hyperkahler_from_potential(phi, (h,) * 4, order)
    W = su2_wedge_matrix(res.upsilon1, res.upsilon2, res.upsilon3)
    vol = np.sqrt(np.linalg.det(res.metric))
    out = _outdir(cfg)
    report = {"resolution": n, "box": L, "eps": eps, "order": order,
              "ma_residual_max": float(np.abs(res.ma_residual).max()),
              "ma_residual_mean": float(res.ma_residual.mean()),
              "pseudoconvex_fraction": float(res.pseudoconvex.mean()),
              "metric_flat_error": float(np.abs(res.metric - np.eye(4)).max()),
              "triple_error": float(np.abs(W - 2 * vol[..., None, None] * np.eye(3)).max())}
    _write_json(out / "hk.json", report)
    box = TorusGrid((n,) * 4, 2 * L + h)
    write_scalar_csv(out / "ma_residual.csv", box, res.ma_residual)
    write_bundle(out / "potential.bin", FieldBundle("kahler-potential", box, {"phi": (0, phi[..., None])},
                                                    {"box": L, "eps": eps, "order": order}))
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; flags override its values")
    common.add_argument("--out", dest="output", help="output directory")
    common.add_argument("--workers", type=int, help="threads for linear algebra (default: all cores)")
    p = argparse.ArgumentParser(prog="holonomy-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    st = sub.add_parser("algebra-selftest", parents=[common], help="randomized algebra identities")
    st.add_argument("--cases", type=int)
    st.add_argument("--seed", type=int)

    flow = sub.add_parser("flow", help="hypersurface flows")
    fsub = flow.add_subparsers(dest="sub", required=True)
    run = fsub.add_parser("run", parents=[common], help="integrate one flow")
    run.add_argument("--case", choices=sorted(DIMS))
    run.add_argument("--init", choices=["flat", "analytic", "rough", "file"])
    run.add_argument("--init-file")
    run.add_argument("--eps", type=float)
    run.add_argument("--seed", type=int)
    run.add_argument("--res", dest="resolution", type=int)
    run.add_argument("--dt", type=float)
    run.add_argument("--T", type=float)
    run.add_argument("--monitor-every", dest="monitor_every", type=int)
    run.add_argument("--archive-every", dest="archive_every", type=int)
    run.add_argument("--stencil", choices=["fd4", "spectral"])

    probe = sub.add_parser("probe", help="ill-posedness probe")
    psub = probe.add_subparsers(dest="sub", required=True)
    ill = psub.add_parser("illposedness", parents=[common], help="mode growth rates around the flat coframe")
    ill.add_argument("--case", choices=["su2"])
    ill.add_argument("--k")
    ill.add_argument("--eps", type=float)
    ill.add_argument("--T", type=float)
    ill.add_argument("--res", dest="resolution", type=int)
    ill.add_argument("--dt", type=float)
    ill.add_argument("--stencil", choices=["fd4", "spectral"])

    dg = sub.add_parser("diagnose", parents=[common], help="residuals of field files")
    dg.add_argument("files", nargs="*")
    dg.add_argument("--kind")

    hk = sub.add_parser("hk-potential", parents=[common], help="hyperkahler data from a Kahler potential")
    hk.add_argument("--res", dest="resolution", type=int)
    hk.add_argument("--box", type=float)
    hk.add_argument("--eps", type=float)
    hk.add_argument("--order", type=int, choices=[2, 4])
    return p


def _flags(args: argparse.Namespace) -> tuple[str, dict]:
    d = {k: v for k, v in vars(args).items() if k not in ("config", "cmd", "sub")}
    if args.cmd == "flow":
        command = "flow-run"
        init_kind = d.pop("init")
        eps, seed, path = d.pop("eps"), d.pop("seed"), d.pop("init_file")
        if init_kind is not None:
            name = {"analytic": "analytic-perturb", "rough": "rough-perturb"}.get(init_kind, init_kind)
            init = {"type": name}
            if name in ("analytic-perturb", "rough-perturb"):
                init.update({k: v for k, v in (("eps", eps), ("seed", seed)) if v is not None})
            if name == "file":
                init["path"] = path
            d["init"] = init
        elif eps is not None or seed is not None:
            raise ConfigError("--eps/--seed need --init analytic or rough")
    elif args.cmd == "probe":
        command = "probe-illposedness"
    else:
        command = args.cmd
    if command == "diagnose" and not d.get("files"):
        d["files"] = None
    return command, d


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        command, flags = _flags(args)
        cfg = merge(command, load_config(args.config), flags)
        _set_workers(cfg.get("workers"))
        handler = {"algebra-selftest": cmd_selftest, "flow-run": cmd_flow,
                   "probe-illposedness": cmd_probe, "diagnose": cmd_diagnose,
                   "hk-potential": cmd_hk}[command]
        return handler(cfg)
    except (ConfigError, FieldFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

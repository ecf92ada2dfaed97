import json

import numpy as np
import pytest

from holonomy_lab import cli
from holonomy_lab import flows as fl
from holonomy_lab.fields import FormField, TorusGrid, su3_residuals
from holonomy_lab.serialization import (
    FieldBundle,
    FieldFormatError,
    read_bundle,
    write_bundle,
    write_scalar_csv,
)


def perturbed_su3(grid):
    y, _ = fl.perturbed_state("g2", grid, 1e-2, 1, modes=[[1, 1, 0, 0, 0, 0]],
                              shift_modes=[[0, 1, 1, 0, 0, 0]])
    omega, phi = fl.G2Flow.unpack(y)
    psi, _ = fl.G2Flow(grid)._psi(phi)
    return omega, phi, psi


# ---------------------------------------------------------------------------
# serialization

def test_bundle_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    g = TorusGrid((4, 6, 5), period=(1.0, 2.0, 3.0), stencil="spectral")
    comps = {"eta": (1, rng.normal(size=g.shape + (3, 3))), "f": (0, rng.normal(size=g.shape + (1,)))}
    write_bundle(tmp_path / "a.bin", FieldBundle("coframe", g, comps, {"note": "x"}))
    back = read_bundle(tmp_path / "a.bin", kind="coframe")
    assert back.grid == g and back.meta == {"note": "x"}
    for name, (deg, vals) in comps.items():
        assert back.components[name][0] == deg
        np.testing.assert_array_equal(back.components[name][1], vals)


def test_bundle_errors(tmp_path):
    g = TorusGrid((4, 4))
    with pytest.raises(FieldFormatError):
        write_bundle(tmp_path / "x.bin", FieldBundle("k", g, {"a": (1, np.zeros((4, 4, 3)))}))
    write_bundle(tmp_path / "ok.bin", FieldBundle("k", g, {"a": (1, np.zeros((4, 4, 2)))}))
    with pytest.raises(FieldFormatError):
        read_bundle(tmp_path / "ok.bin", kind="other")
    raw = (tmp_path / "ok.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(FieldFormatError, match="bytes"):
        read_bundle(tmp_path / "short.bin")
    (tmp_path / "junk.bin").write_bytes(b"not json\n")
    with pytest.raises(FieldFormatError):
        read_bundle(tmp_path / "junk.bin")


def test_scalar_csv(tmp_path):
    g = TorusGrid((4, 4))
    write_scalar_csv(tmp_path / "s.csv", g, np.arange(16.0).reshape(4, 4), "v")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "i1,i2,x1,x2,v"
    assert len(lines) == 17
    assert lines[-1].split(",")[-1] == "15.0"


# ---------------------------------------------------------------------------
# command line

def test_selftest_command(tmp_path, capsys):
    assert cli.main(["algebra-selftest", "--cases", "200", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "selftest.json").read_text())
    assert rep["passed"] and rep["seed"] == 0
    assert "PASS graded_commutativity" in capsys.readouterr().out


def test_flat_flow_run_is_stationary_and_deterministic(tmp_path):
    args = ["flow", "run", "--case", "su2", "--init", "flat", "--res", "16", "--dt", "1e-3", "--T", "0.5",
            "--monitor-every", "100", "--archive-every", "100"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a" / "report.json").read_bytes(), (tmp_path / "b" / "report.json").read_bytes()
    assert a == b
    rep = json.loads(a)
    assert rep["halt_reason"] == "completed"
    assert max(r["coclosed"] for r in rep["rows"]) == 0.0
    manifest = json.loads((tmp_path / "a" / "archive" / "manifest.json").read_text())
    assert len(manifest["states"]) == 6 and manifest["kind"] == "su2"
    # archived states diagnose to an all-zero report
    last = tmp_path / "a" / "archive" / manifest["states"][-1]["file"]
    assert cli.main(["diagnose", str(last), "--kind", "flow-su2", "--out", str(tmp_path / "d")]) == 0
    res = json.loads((tmp_path / "d" / "diagnose.json").read_text())[str(last)]["residuals"]
    assert res["coclosed"] == 0.0 and res["cmc_max"] == 0.0 and res["cmc_min"] == 0.0


def test_config_file_with_flag_override(tmp_path):
    cfg = {"command": "flow-run", "case": "su2", "init": {"type": "analytic-perturb", "eps": 1e-3,
           "seed": 2, "modes": [[1, 0, 0]], "shift_modes": [[0, 1, 2]]},
           "resolution": 8, "dt": 0.05, "T": 0.5, "archive_every": 2}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["flow", "run", "--config", str(path), "--T", "0.25", "--archive-every", "1",
                     "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["T"] == 0.25 and rep["meta"]["init"]["seed"] == 2
    amb = rep["ambient"]
    assert all(s <= 10 * a for s, a in zip(amb["slice"], amb["ambient"]))


def test_flow_restart_from_archived_file(tmp_path):
    assert cli.main(["flow", "run", "--case", "g2", "--res", "4", "--dt", "0.1", "--T", "0.1",
                     "--out", str(tmp_path / "a")]) == 0
    state = tmp_path / "a" / "archive" / "state_00001.bin"
    assert cli.main(["flow", "run", "--case", "g2", "--res", "4", "--dt", "0.1", "--T", "0.1",
                     "--init", "file", "--init-file", str(state), "--out", str(tmp_path / "b")]) == 0
    assert cli.main(["flow", "run", "--case", "su2", "--res", "4", "--dt", "0.1", "--T", "0.1",
                     "--init", "file", "--init-file", str(state), "--out", str(tmp_path / "c")]) == 2


@pytest.mark.parametrize("cfg", [
    {"case": "su2", "resolution": 8, "dt": 0.1, "T": 0.1, "typo": 1},
    {"case": "su2", "resolution": 8, "dt": 0.1, "T": 0.1, "init": {"type": "flat", "eps": 1}},
    {"case": "su2", "resolution": 8, "dt": 0.1, "T": 0.1, "tolerances": {"blowup": -1}},
    {"case": "su2", "resolution": 8, "dt": 0, "T": 0.1},
    {"case": "hyperbolic", "resolution": 8, "dt": 0.1, "T": 0.1},
    {"command": "diagnose", "case": "su2", "resolution": 8, "dt": 0.1, "T": 0.1},
])
def test_config_errors_exit_2(tmp_path, cfg):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["flow", "run", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_cli_exit_codes_for_io_and_halt(tmp_path):
    assert cli.main(["diagnose", str(tmp_path / "missing.bin"), "--out", str(tmp_path)]) == 4
    assert cli.main(["flow", "run", "--bogus-flag"]) == 2
    # rough data blows up: exit 3, report still written
    assert cli.main(["flow", "run", "--case", "su2", "--init", "rough", "--eps", "0.2", "--seed", "1",
                     "--res", "16", "--dt", "0.05", "--T", "5", "--monitor-every", "200",
                     "--out", str(tmp_path / "h")]) == 3
    rep = json.loads((tmp_path / "h" / "report.json").read_text())
    assert rep["halt_reason"] in ("blowup", "nan", "degenerate") and rep["halt_time"] < 5


def test_diagnose_su3_roundtrip_matches_in_process(tmp_path):
    g = TorusGrid((4,) * 6)
    omega, phi, psi = perturbed_su3(g)
    path = tmp_path / "su3.bin"
    write_bundle(path, FieldBundle("su3", g, {"omega": (2, omega), "Omega_re": (3, phi), "Omega_im": (3, psi)}))
    assert cli.main(["diagnose", str(path), "--kind", "su3", "--out", str(tmp_path)]) == 0
    got = json.loads((tmp_path / "diagnose.json").read_text())[str(path)]["residuals"]
    ref = su3_residuals(FormField(g, 2, omega), FormField(g, 3, phi), FormField(g, 3, psi))
    assert got["d_re_Omega"] == ref["d_re_Omega"]
    assert got["d_half_omega2"] == ref["d_half_omega2"]
    assert got["H_max"] == float(ref["mean_curvature"].max())
    assert got["volume_compat"] < 1e-13


def test_diagnose_kind_mismatch_exit_2(tmp_path):
    g = TorusGrid((4,) * 3)
    path = tmp_path / "c.bin"
    write_bundle(path, FieldBundle("coframe", g, {"eta": (1, np.broadcast_to(np.eye(3), g.shape + (3, 3)))}))
    assert cli.main(["diagnose", str(path), "--kind", "g2", "--out", str(tmp_path)]) == 2
    assert cli.main(["diagnose", str(path), "--kind", "coframe", "--out", str(tmp_path)]) == 0


def test_hk_potential_command(tmp_path):
    assert cli.main(["hk-potential", "--res", "8", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "hk.json").read_text())
    assert rep["ma_residual_max"] < 1e-12 and rep["pseudoconvex_fraction"] == 1.0
    assert cli.main(["diagnose", str(tmp_path / "potential.bin"), "--out", str(tmp_path / "d")]) == 0
    res = json.loads((tmp_path / "d" / "diagnose.json").read_text())
    assert list(res.values())[0]["residuals"]["ma_residual_max"] < 1e-12


def test_probe_command_writes_growth_table(tmp_path):
    assert cli.main(["probe", "illposedness", "--case", "su2", "--k", "1,2,4", "--eps", "1e-9",
                     "--res", "16", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "growth.csv").read_text().splitlines()
    assert rows[0].startswith("k,rate") and len(rows) == 4
    rep = json.loads((tmp_path / "probe.json").read_text())
    assert rep["monotone"]
    assert cli.main(["probe", "illposedness", "--k", "9", "--res", "16", "--out", str(tmp_path)]) == 2


def test_report_rows_recompute_from_archive(tmp_path):
    assert cli.main(["flow", "run", "--case", "su2", "--init", "analytic", "--eps", "1e-2", "--res", "8",
                     "--dt", "0.05", "--T", "0.25", "--monitor-every", "1", "--archive-every", "1",
                     "--out", str(tmp_path)]) == 0
    rows = {r["step"]: r for r in json.loads((tmp_path / "report.json").read_text())["rows"]}
    states = json.loads((tmp_path / "archive" / "manifest.json").read_text())["states"]
    files = [str(tmp_path / "archive" / s["file"]) for s in states]
    assert cli.main(["diagnose", *files, "--out", str(tmp_path / "d")]) == 0
    diag = json.loads((tmp_path / "d" / "diagnose.json").read_text())
    for step, f in enumerate(files):
        res = diag[f]["residuals"]
        for key in ("coclosed", "cmc_max", "cmc_min", "cmc_mean"):
            assert res[key] == rows[step][key]
        assert res["min_abs_det"] == rows[step]["margin"]

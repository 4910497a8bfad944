import json

import numpy as np
import pytest

from minmove import cli
from minmove.checks import Check
from minmove.cli import (EXIT_CHECK, EXIT_DOMAIN, EXIT_NONCONVERGED, EXIT_OK, EXIT_USAGE, ConfigError,
                         export_fields, main, parse_config_text)
from minmove.grid import Field, Lattice, Trajectory, read_field_csv

HEAT = """\
# small heat run
scheme.ell = 8
scheme.T = 0.05
domain.nodes = 17,17
exact.kind = heat_separable
verify.competitors = 5
"""

SHRINK = """\
scheme.ell = 4
scheme.T = 0.1
domain.kind = ball
domain.radius0 = 0.4
domain.radius_rate = -1.0
initial.kind = zero
"""


def write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.mark.parametrize("text, message", [
    ("scheme.T = 1\n", "<config>: missing scheme.ell"),
    ("scheme.ell = 2\nscheme.T = 1\nscheme.zeta = 3\n", "<config>:3: unknown key 'scheme.zeta'"),
    ("scheme.ell = 2\n\nscheme.ell = 3\nscheme.T = 1\n", "<config>:3: duplicate key 'scheme.ell' (first set on line 1)"),
    ("scheme.ell = two\nscheme.T = 1\n", "<config>:1: bad value for scheme.ell"),
    ("scheme.ell 2\n", "<config>:1: expected 'key = value'"),
    ("scheme.ell = 0\nscheme.T = 1\n", "scheme.ell >= 1"),
])
def test_parse_errors(text, message):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert message in str(exc.value)


ECHO = """\
boundary.kind = zero
components = 1
domain.hi = 1.0,1.0
domain.kind = cylinder
domain.lo = 0.0,0.0
domain.nodes = 17,17
domain.radius0 = 0.25
domain.radius_rate = 0.0
exact.C = 1.0
exact.kind = heat_separable
exact.margin = 0.1
exact.p = 2.0
exact.t0 = 0.1
initial.kind = exact
integrand.a = 1.0
integrand.kind = p_dirichlet
integrand.lambda = 0.0
integrand.p = 2.0
run.allow_flagged = false
run.seed = 0
scheme.T = 0.05
scheme.ell = 8
scheme.q = 1.0
solver.max_iters = 20000
solver.tol_obj = 1e-10
solver.tol_step = 1e-09
verify.competitors = 5
verify.dissipation = true
verify.dissipation_eps = 0.25
verify.energy = true
verify.initial = true
verify.landes_h = 0.25
verify.mollifier = true
verify.parabolic = true
verify.variational = true
"""


def test_config_echo_golden():
    cfg = parse_config_text(HEAT)
    assert cfg.to_text() == ECHO
    # the echo parses back to the same values
    assert parse_config_text(ECHO).values == cfg.values
    assert cfg.echo()["domain.nodes"] == [17, 17]


def test_export_round_trip(tmp_path):
    lat = Lattice.box((0, 0), (1, 2), (4, 3))
    vals = np.random.default_rng(0).normal(size=(6, 4, 3, 1))
    tr = Trajectory(vals, lat, 0.1)
    files = export_fields(tr, tmp_path, 2)
    names = sorted(p.name for p in files)
    assert names == sorted(f"slice_{i}.{e}" for i in (0, 2, 4, 5) for e in ("csv", "vtk"))
    np.testing.assert_array_equal(read_field_csv(tmp_path / "slice_4.csv", lat).values, vals[4])
    vtk = (tmp_path / "slice_2.vtk").read_text().splitlines()
    assert vtk[3] == "DATASET STRUCTURED_POINTS" and vtk[4] == "DIMENSIONS 4 3 1"
    # VTK order runs the first axis fastest
    assert float(vtk[10]) == vals[2, 0, 0, 0] and float(vtk[11]) == vals[2, 1, 0, 0]
    with pytest.raises(ValueError):
        export_fields(tr, tmp_path, 0)


def test_run_verify_and_determinism(tmp_path):
    cfg = write(tmp_path, HEAT)
    assert main(["run", cfg, "--out", str(tmp_path / "a"), "--seed", "3"]) == EXIT_OK
    assert main(["--seed", "3", "--out", str(tmp_path / "b"), "run", cfg]) == EXIT_OK
    ma = (tmp_path / "a" / "manifest.json").read_bytes()
    assert ma == (tmp_path / "b" / "manifest.json").read_bytes()
    man = json.loads(ma)
    assert man["status"] == 0 and man["config"]["run.seed"] == 3
    assert {"config.txt", "trajectory.npy", "ledger.csv", "report.json", "fields/slice_8.csv"} <= set(man["files"])
    assert all(man["checks"].values())
    assert (tmp_path / "a" / "timing.json").exists()
    assert main(["verify", str(tmp_path / "a")]) == EXIT_OK
    rep = json.loads((tmp_path / "a" / "verify_report.json").read_text())
    assert rep["checks"]["boundary_conformance"]["pass"]


def test_shrinking_domain_exit_code(tmp_path, capsys):
    assert main(["run", write(tmp_path, SHRINK), "--out", str(tmp_path / "o")]) == EXIT_DOMAIN
    assert "shrinks" in capsys.readouterr().err


def test_nonconverged_exit_code(tmp_path):
    text = HEAT + "solver.max_iters = 1\n"
    assert main(["run", write(tmp_path, text), "--out", str(tmp_path / "o")]) == EXIT_NONCONVERGED
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert any("nonconverged" in m for m in man["messages"])


def test_failed_check_exit_code(tmp_path, monkeypatch):
    real = cli.run_checks

    def with_failure(*a, **k):
        checks, info = real(*a, **k)
        return checks + [Check("forced", 1.0, 0.0)], info

    monkeypatch.setattr(cli, "run_checks", with_failure)
    assert main(["run", write(tmp_path, HEAT), "--out", str(tmp_path / "o")]) == EXIT_CHECK


@pytest.mark.parametrize("argv", [[], ["bogus"], ["run"]])
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_config_errors_exit_one(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.cfg")]) == EXIT_USAGE
    assert main(["run", write(tmp_path, "scheme.T = 1\n")]) == EXIT_USAGE
    assert "missing scheme.ell" in capsys.readouterr().err


def test_lemmas_subcommand(tmp_path):
    assert main(["lemmas", "--q", "1", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "lemma_constants.csv").read_text().startswith("lemma_id,q,c_hat")

import json
import math

import pytest

from sgflow.cli import ConfigError, load_config, main, parse_config, validate
from sgflow.lattice import read_sgf1


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_pi_and_comments():
    raw = parse_config("coupling.beta2 = 2pi  # two pi\n\n# only a comment\nlattice.N = 64\n")
    cfg = validate(raw)
    assert cfg["coupling.beta2"] == pytest.approx(2 * math.pi)
    assert cfg["lattice.N"] == 64 and cfg["cutoff.T"] == 16.0


def test_every_violation_reported(tmp_path):
    p = _write(tmp_path, "bad.cfg", "coupling.beta2 = 7pi\ntruncation.ell_star = 3\ncutoff.T = 64\n")
    with pytest.raises(ConfigError) as e:
        load_config(p)
    msgs = " ".join(e.value.errors)
    assert "cutoff.T" in msgs and "coupling.beta2" in msgs
    with pytest.raises(ConfigError, match="bogus: unknown key"):
        validate({"bogus": "1"})


def test_malformed_line():
    with pytest.raises(ConfigError):
        parse_config("lattice.N 16\n")


def test_validate_command(tmp_path, capsys):
    p = _write(tmp_path, "empty.cfg", "")
    assert main(["validate", str(p)]) == 0
    out = capsys.readouterr().out
    assert "lattice.N = 32" in out


def test_bad_config_exit_code(tmp_path, capsys):
    p = _write(tmp_path, "bad.cfg", "lattice.N = 33\n")
    assert main(["validate", str(p)]) == 1
    assert "lattice.N" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.cfg")]) == 1


def test_run_is_deterministic(tmp_path, capsys):
    cfg = _write(tmp_path, "fc.cfg", "experiment.kind = free-check\nlattice.N = 16\nlattice.a = 0.25\n"
                 "cutoff.T = 4\ncutoff.rho_radius = 1\nensemble.M = 500\noutput.snapshots = 2\n")
    runs = []
    for d in ("a", "b"):
        assert main(["run", str(cfg), "--seed", "3", "--out", str(tmp_path / d)]) == 0
        runs.append(json.loads((tmp_path / d / "manifest.json").read_text()))
    assert runs[0]["record_hash"] == runs[1]["record_hash"]
    assert runs[0]["artifacts"] == runs[1]["artifacts"]
    for name in ("results.csv", "free_0000.sgf1"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    phi, a, m, _ = read_sgf1(tmp_path / "a" / "free_0001.sgf1")
    assert phi.shape == (16, 16) and (a, m) == (0.25, 1.0)
    main(["run", str(cfg), "--seed", "4", "--out", str(tmp_path / "c")])
    other = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert other["record_hash"] != runs[0]["record_hash"]


def test_dump_kernels(tmp_path, capsys):
    cfg = _write(tmp_path, "kd.cfg", "lattice.N = 16\nlattice.a = 0.25\ncutoff.T = 4\n"
                 "cutoff.rho_radius = 1\ntruncation.ell_star = 2\n")
    assert main(["dump-kernels", str(cfg), "--out", str(tmp_path / "k")]) == 0
    names = {p.name for p in (tmp_path / "k").iterdir()}
    assert names == {"f2_table.csv", "lambda_t.csv", "multipliers.csv"}
    head = (tmp_path / "k" / "multipliers.csv").read_text().splitlines()[0]
    assert head == "t,w,q_hat,gdot_hat,g_hat"

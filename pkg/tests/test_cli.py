import json
import os
import re

import pytest

from paramsos import __version__
from paramsos.cli import EXIT_CONFIG, EXIT_EMPTY, EXIT_FAIL, EXIT_OK, main
from paramsos.config import fixture_path

TINY = """
[[bus]]
id = "a"
[[bus]]
id = "b"
load_p = 0.3
load_q = 0.1
[[line]]
from = "a"
to = "b"
r = 0.05
x = 0.2
[[inverter]]
bus = "a"
tau = 0.1
[[inverter]]
bus = "b"
tau = 0.1
p_set = 0.2

[analysis]
alpha = 0.05
c = 1.0
alphas = [0.05]
cs = [1.0]
beta_max = 1.0
tol = 0.25
mc_samples = 20
"""


def _write(path, text):
    path.write_text(text)
    return str(path)


def _fixture_variant(tmp_path, **repl):
    text = fixture_path().read_text()
    for k, v in repl.items():
        text = re.sub(rf"^{k} = .*$", f"{k} = {v}", text, flags=re.M)
    return _write(tmp_path / "variant.toml", text)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    cfg = _write(d / "tiny.toml", TINY)
    code = main(["certify", "--config", cfg, "--out", str(d / "cert")])
    return d, cfg, code


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_powerflow(tmp_path, capsys):
    assert main(["powerflow", "--config", str(fixture_path()), "--out", str(tmp_path)]) == EXIT_OK
    data = json.loads((tmp_path / "powerflow.json").read_text())
    assert data["schema"] == 1 and len(data["fingerprint"]) == 16
    assert (tmp_path / "powerflow.txt").read_text() == capsys.readouterr().out
    mode = os.stat(tmp_path / "powerflow.json").st_mode & 0o777
    assert mode == 0o666 & ~_umask()


def _umask():
    m = os.umask(0)
    os.umask(m)
    return m


def test_malformed_config_names_field(tmp_path, capsys):
    cfg = _write(tmp_path / "bad.toml", TINY.replace("tol = 0.25", "tol = -1"))
    assert main(["certify", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "analysis.tol" in capsys.readouterr().err


def test_missing_config(tmp_path):
    assert main(["powerflow", "--config", str(tmp_path / "none.toml")]) == EXIT_CONFIG


def test_certify_tiny(tiny):
    d, _, code = tiny
    assert code == EXIT_OK
    data = json.loads((d / "cert" / "result.json").read_text())
    assert data["status"] in ("ok", "cap") and data["beta_star"] > 0
    assert data["residual"] <= 1e-7
    assert (d / "cert" / "result_certificate.txt").exists()
    assert (d / "cert" / "result_report.txt").exists()


def test_sweep_cell_matches_certify(tiny):
    d, cfg, _ = tiny
    assert main(["sweep", "--config", cfg, "--out", str(d / "sweep")]) == EXIT_OK
    cell = d / "sweep" / "cell_a0.05_c1" / "result.json"
    assert cell.read_bytes() == (d / "cert" / "result.json").read_bytes()
    assert (d / "sweep" / "sweep.tsv").exists() and (d / "sweep" / "sweep.json").exists()
    polys = sorted(p.name for p in (d / "sweep").glob("polygon_*.tsv"))
    assert polys == ["polygon_a0.05_c1_a.tsv", "polygon_a0.05_c1_b.tsv"]


def test_validate_tiny_passes(tiny):
    d, cfg, _ = tiny
    res = str(d / "cert" / "result.json")
    assert main(["validate", res, "--config", cfg, "--out", str(d / "val")]) == EXIT_OK
    data = json.loads((d / "val" / "validation.json").read_text())
    assert data["passed"] and data["counterexamples"] == []


def test_validate_missing_result(tiny, tmp_path):
    _, cfg, _ = tiny
    assert main(["validate", str(tmp_path / "nope.json"), "--config", cfg]) == EXIT_CONFIG


def test_validate_other_config_refused(tiny, tmp_path, capsys):
    d, _, _ = tiny
    other = _write(tmp_path / "other.toml", TINY.replace("mc_samples = 20", "mc_samples = 21"))
    assert main(["validate", str(d / "cert" / "result.json"), "--config", other]) == EXIT_CONFIG
    assert "configuration" in capsys.readouterr().err


def test_cap_reached(tmp_path):
    cfg = _write(tmp_path / "cap.toml", TINY.replace("beta_max = 1.0", "beta_max = 0.3").replace("tol = 0.25", "tol = 0.1"))
    assert main(["certify", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    data = json.loads((tmp_path / "result.json").read_text())
    assert data["cap_reached"] and data["status"] == "cap" and data["beta_star"] == 0.3


def test_empty_region_exit(tmp_path, capsys):
    # every gain at least 1 puts the fixture past its instability onset
    cfg = _fixture_variant(tmp_path, lambda_min="1.0", beta_max="6.0")
    assert main(["certify", "--config", cfg, "--out", str(tmp_path)]) == EXIT_EMPTY
    data = json.loads((tmp_path / "result.json").read_text())
    assert data["status"] == "empty" and data["beta_star"] == 0.0
    assert all(t["status"] == "Infeasible" and not t["flagged"] for t in data["trace"])
    assert main(["validate", "--config", cfg, "--out", str(tmp_path)]) == EXIT_EMPTY


def test_tampered_result_fails_validation(fixture_config, fixture_cell, tmp_path):
    from paramsos.report import write_cell

    write_cell(tmp_path, fixture_config, fixture_cell, fixture_config.analysis)
    path = tmp_path / "result.json"
    data = json.loads(path.read_text())
    data["beta_star"] = 3 * data["beta_star"]
    path.write_text(json.dumps(data))
    args = ["validate", str(path), "--config", str(fixture_path()), "--out", str(tmp_path / "v"), "--samples", "30",
            "--dump-trajectories"]
    assert main(args) == EXIT_FAIL
    out = json.loads((tmp_path / "v" / "validation.json").read_text())
    assert not out["passed"] and out["counterexamples"]
    assert list((tmp_path / "v" / "trajectories").glob("sample_*.csv"))

import csv
import json

import pytest
import yaml

from kamscar.cli import main
from kamscar.config import DEFAULTS, ExperimentConfig, defaults_yaml
from kamscar.errors import ConfigError


def run(tmp_path, *args):
    return main(list(args) + ["-o", str(tmp_path / "out")])


def test_defaults_round_trip(capsys):
    assert main(["print-defaults"]) == 0
    doc = yaml.safe_load(capsys.readouterr().out)
    assert doc == yaml.safe_load(defaults_yaml()) and doc["diophantine"]["kappa"] == 0.2


def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"diophantin": {}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"schema_version": 2})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"flow": {"gamma": 3.0}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"h_list": [0]})


def test_digest_ignores_output_dir():
    a = ExperimentConfig.from_dict({"output_dir": "x"})
    b = ExperimentConfig.from_dict({"output_dir": "y"})
    assert a.digest() == b.digest()
    assert a.digest() != ExperimentConfig.from_dict({"seed": 1}).digest()
    assert set(DEFAULTS) - set(a.experiment_doc()) == {"output_dir"}


def test_check_hypotheses_ok(tmp_path):
    assert run(tmp_path, "check-hypotheses") == 0
    rep = json.loads((tmp_path / "out" / "hypotheses.json").read_text())
    assert rep["passed"] and rep["transversality_det"]["min"] > 0
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert "hypotheses.json" in man["files"]


def test_check_hypotheses_full_square(tmp_path, capsys):
    code = run(tmp_path, "check-hypotheses", "--set", "domain={lo: [0.1, 0.1], hi: [1.0, 1.0]}")
    assert code == 2
    assert "witness (0.1, 0.1)" in capsys.readouterr().err


def test_unperturbed_model_fails_transversality(tmp_path):
    assert run(tmp_path, "check-hypotheses", "--set", "hamiltonian=builtin:flat_torus_unperturbed") == 2


def test_config_errors_exit_4(tmp_path):
    assert run(tmp_path, "check-hypotheses", "--set", "bogus=1") == 4
    assert run(tmp_path, "check-hypotheses", "--set", "novalue") == 4
    assert run(tmp_path, "check-hypotheses", "--config", str(tmp_path / "missing.yaml")) == 4
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 4


def test_config_file(tmp_path):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(yaml.safe_dump({"h_list": [0.1], "t_eval": [0.0]}))
    assert main(["quasispectrum", "--config", str(cfg), "-o", str(tmp_path / "q")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "q" / "quasispectrum" / "table_h10_t0.csv")))
    assert len(rows) == 45
    row = next(r for r in rows if (r["m1"], r["m2"]) == ("4", "3"))
    assert float(row["mu"]) == pytest.approx(0.25)


def test_empty_nonresonant_set_is_a_warning(tmp_path, capsys):
    code = run(tmp_path, "quasispectrum", "--set", "h_list=[0.1]", "--set", "diophantine.kappa=100")
    assert code == 0
    assert "warning" in capsys.readouterr().err


def test_numerical_failure_exit_3(tmp_path):
    code = run(tmp_path, "eigensolve", "--set", "h_list=[0.1]", "--set", "quantize.rho=1.0",
               "--set", "quantize.window_margin=0.0", "--set", "scar.band=[0.0, 1.0]")
    assert code == 3

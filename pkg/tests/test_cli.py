import json
import shutil
import subprocess
import sys
from pathlib import Path

import yaml

import robust_sbm
from robust_sbm.cli import EXIT_ABORT, EXIT_CONFIG, EXIT_OK, main

DATA = Path(robust_sbm.__file__).parent / "data"


def config(tmp_path, **overrides):
    shutil.copy(DATA / "banks.csv", tmp_path / "banks.csv")
    raw = yaml.safe_load((DATA / "config.yaml").read_text())
    raw.update(overrides)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def test_check(tmp_path, capsys):
    assert main(["check", "--config", config(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "n=8 m=2 D=1 s1=2 s2=1" in out and "config OK" in out


def test_solve_writes_reports(tmp_path, capsys):
    assert main(["solve", "--config", config(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert (tmp_path / "out" / "report.csv").is_file()
    assert (tmp_path / "out" / "report.json").is_file()
    assert "df=3" in out and "lowest crisp" in out


def test_repeated_solve_byte_identical(tmp_path):
    cfg = config(tmp_path)
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "b"), "--jobs", "2"]) == EXIT_OK
    for name in ("report.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_compare(tmp_path, capsys):
    cfg = config(tmp_path)
    main(["solve", "--config", cfg])
    report = str(tmp_path / "out" / "report.json")
    capsys.readouterr()
    assert main(["compare", "--report", report, "--families", "crisp,ellipsoidal,budget", "--column", "stage2"]) == 0
    out = capsys.readouterr().out
    assert "df=2" in out and "stage2" in out
    assert main(["compare", "--report", report, "--families", "crisp,warp"]) == EXIT_CONFIG
    assert main(["compare", "--report", str(tmp_path / "none.json")]) == EXIT_CONFIG
    doc = json.loads(Path(report).read_text())
    assert doc["friedman"]["df"] == 3


def test_config_error_exit(tmp_path, capsys):
    assert main(["solve", "--config", config(tmp_path, families=[])]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert main(["check", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG


def test_family_abort_exit(tmp_path, capsys):
    cfg = config(tmp_path, families=["ellipsoidal"], solver={"max_iter": 1})
    assert main(["solve", "--config", cfg]) == EXIT_ABORT
    assert "ellipsoidal" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "robust_sbm", "check", "--config", config(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "config OK" in res.stdout

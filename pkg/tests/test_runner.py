import json
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st
from scipy import stats

from oracles import friedman_by_hand
import robust_sbm.runner as runner
from robust_sbm.conic_ir import SolveOutcome, Status
from robust_sbm.runner import (ConfigError, FamilyAbort, csv_header, emit_report, format_p_value, friedman_test,
                               load_config, parse_report_json, report_csv, report_friedman, report_json, run_batch)

DATA = Path(runner.__file__).parent / "data"


def write_config(tmp_path, **overrides):
    shutil.copy(DATA / "banks.csv", tmp_path / "banks.csv")
    raw = yaml.safe_load((DATA / "config.yaml").read_text())
    for key, value in overrides.items():
        raw[key] = value
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def small_panel(tmp_path, rows):
    (tmp_path / "small.csv").write_text("dmu,x,z,y\n" + "\n".join(rows) + "\n")
    return {"path": "small.csv", "name_column": "dmu", "roles": {"x": "input", "z": "intermediate", "y": "desirable"}}


def test_three_dmu_crisp(tmp_path):
    panel = small_panel(tmp_path, ["A,1,2,3", "B,2,2,2", "C,3,1,3"])
    rep = run_batch(load_config(write_config(tmp_path, panel=panel, families=["crisp"])))
    assert rep.dmus == ("A", "B", "C") and rep.families == ("crisp",)
    for c in rep.cells:
        assert c.overall == c.stage1.efficiency * c.stage2.efficiency
    assert rep.friedman is None
    lines = report_csv(rep).splitlines()
    assert len(lines) == 4
    assert lines[1].split(",")[2:5] == ["", "", ""]


def test_budget_zero_matches_crisp(tmp_path):
    cfg = load_config(write_config(tmp_path, families=["crisp", "budget"], uncertainty={"budget": {"gamma": 0.0}}))
    rep = run_batch(cfg)
    for col in ("stage1", "stage2", "overall"):
        np.testing.assert_allclose(rep.column("budget", col), rep.column("crisp", col), atol=1e-5)


def test_ellipsoidal_dominates_crisp(tmp_path):
    rep = run_batch(load_config(write_config(tmp_path, families=["crisp", "ellipsoidal"])))
    for col in ("stage1", "stage2"):
        for e, c in zip(rep.column("ellipsoidal", col), rep.column("crisp", col)):
            assert e >= c - 1e-6


def test_report_identities(tmp_path):
    rep = run_batch(load_config(write_config(tmp_path)))
    assert rep.friedman.df == 3
    for c in rep.cells:
        assert c.overall == c.stage1.efficiency * c.stage2.efficiency
        assert c.overall_efficient == (c.stage1.classification == "efficient" and c.stage2.classification == "efficient")
    for fam, cols in rep.lowest().items():
        for col, name in cols.items():
            values = rep.column(fam, col)
            assert rep.cell(name, fam).value(col) == min(values)
    assert any("shifted" in n for n in rep.metadata["panel_notes"])


def test_csv_layout(tmp_path):
    panel = small_panel(tmp_path, ["A,1,2,3", "B,2,2,2"])
    rep = run_batch(load_config(write_config(tmp_path, panel=panel, families=["crisp", "budget"])))
    lines = report_csv(rep).splitlines()
    assert len(lines) == 3
    assert lines[0].split(",") == csv_header()
    assert all(len(line.split(",")) == 13 for line in lines)
    assert lines[0].startswith("dmu,stage1_crisp,stage1_ellipsoidal,stage1_polyhedral,stage1_budget,stage2_crisp")
    row = lines[1].split(",")
    assert row[2] == "" and len(row[1].split(".")[1]) == 6


def test_json_round_trip(tmp_path):
    rep = run_batch(load_config(write_config(tmp_path)))
    again = parse_report_json(report_json(rep))
    assert again == rep
    assert report_json(again) == report_json(rep)
    doc = json.loads(report_json(rep))
    assert "wall_time" not in report_json(rep)
    assert doc["cells"][0]["stage1"]["slacks"]


def test_determinism_and_parallel_equivalence(tmp_path):
    cfg = load_config(write_config(tmp_path))
    a, b = run_batch(cfg), run_batch(cfg)
    c = run_batch(replace(cfg, parallelism=3))
    assert report_csv(a) == report_csv(b) == report_csv(c)
    assert report_json(a) == report_json(b) == report_json(c)
    paths = emit_report(a, tmp_path / "o")
    assert [p.name for p in paths] == ["report.csv", "report.json"]
    assert (tmp_path / "o" / "report.csv").read_text() == report_csv(a)


def test_single_dmu_failure_degrades(tmp_path, monkeypatch):
    real = runner.solve

    def flaky(program, params=None):
        if program.name == "stage2/robust_ready/k=2":
            return SolveOutcome(Status.NUMERICAL_FAILURE, None, None, 0, 0.0, "fake", "forced")
        return real(program, params)

    monkeypatch.setattr(runner, "solve", flaky)
    rep = run_batch(load_config(write_config(tmp_path, families=["crisp", "budget"])))
    bad = rep.cell("CB", "crisp")
    assert bad.stage2.status == "numerical_failure" and bad.overall is None
    assert rep.cell("CB", "budget").overall is not None
    assert rep.friedman.n == len(rep.dmus) - 1
    assert rep.lowest()["crisp"]["stage2"] != "CB"
    row = [line for line in report_csv(rep).splitlines() if line.startswith("CB,")][0].split(",")
    assert row[5] == "NA" and row[9] == "NA" and row[8] != "NA"
    assert parse_report_json(report_json(rep)) == rep


def test_family_abort(tmp_path):
    cfg = load_config(write_config(tmp_path, families=["crisp", "ellipsoidal"], solver={"max_iter": 1}))
    with pytest.raises(FamilyAbort) as err:
        run_batch(cfg)
    assert err.value.family == "ellipsoidal"


@pytest.mark.parametrize("override, match", [
    ({"families": []}, "at least one"),
    ({"families": ["crisp", "fuzzy"]}, "unknown families"),
    ({"panel": {"path": "nowhere.csv", "name_column": "bank", "roles": {"a": "input"}}}, "not found"),
    ({"parallelism": 0}, "parallelism"),
    ({"friedman": {"column": "stage3"}}, "friedman"),
    ({"uncertainty": {"polyhedral": {"H": [[1, 0]]}}}, "box"),
    ({"undesirable_term": "multiply"}, "multiply"),
])
def test_config_errors(tmp_path, override, match):
    with pytest.raises(ConfigError, match=match):
        load_config(write_config(tmp_path, **override))


def test_prepare_errors(tmp_path):
    cfg = load_config(write_config(tmp_path, uncertainty={"budget": {"gamma": 3.0}}))
    with pytest.raises(ConfigError, match="exceeds"):
        runner.prepare(cfg)
    cfg = load_config(write_config(tmp_path, uncertainty={"polyhedral": {"H": [[0, 0]], "q": [1]}}))
    with pytest.raises(ConfigError, match="zero matrix"):
        runner.prepare(cfg)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
    (tmp_path / "bad.yaml").write_text("panel: [unclosed\n")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(tmp_path / "bad.yaml")


def test_per_family_uncertainty_config(tmp_path):
    unc = {"ellipsoidal": {"inputs": 0.5, "intermediates": 1.0, "desirable": [1.0, 0.0], "undesirable": 0.0},
           "polyhedral": {"inputs": {"box": 0.5}, "intermediates": {"H": [[1, 0], [-1, 0], [0, 1], [0, -1]],
                                                                     "q": [1, 1, 1, 1]},
                          "desirable": {"box": 1.0}, "undesirable": {"box": 1.0}},
           "budget": {"inputs": 2.0, "intermediates": 1.0, "desirable": 0.0, "undesirable": 1.5}}
    cfg = load_config(write_config(tmp_path, uncertainty=unc))
    assert cfg.polyhedral.inputs.q.tolist() == [0.5] * 4
    rep = run_batch(cfg)
    assert all(c.overall is not None for c in rep.cells)


# Friedman --------------------------------------------------------------------

def test_friedman_dominance():
    m = np.array([[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]])
    stat, df, p = friedman_test(m)
    assert stat == pytest.approx(3.0, abs=1e-9) and df == 1
    assert friedman_by_hand(m) == pytest.approx(3.0, abs=1e-12)
    assert p == pytest.approx(stats.chi2.sf(3.0, 1))


def test_friedman_against_reference_without_ties(rng):
    for _ in range(20):
        m = rng.uniform(size=(int(rng.integers(2, 10)), int(rng.integers(3, 6))))
        stat, df, p = friedman_test(m)
        ref = stats.friedmanchisquare(*m.T)
        assert stat == pytest.approx(ref.statistic, abs=1e-9)
        assert p == pytest.approx(ref.pvalue, abs=1e-12)
        assert df == m.shape[1] - 1


def test_friedman_identical_and_four_families():
    stat, df, p = friedman_test(np.ones((5, 4)))
    assert (stat, df, p) == (0.0, 3, 1.0)


def test_friedman_errors():
    for bad in (np.ones((5, 1)), np.ones((1, 3)), np.array([[1.0, np.nan], [1, 2]]), np.ones(3)):
        with pytest.raises(ValueError):
            friedman_test(bad)


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 8).flatmap(lambda n: st.integers(2, 5).flatmap(
    lambda c: st.lists(st.lists(st.sampled_from([0.5, 0.75, 1.0, 0.9]), min_size=c, max_size=c),
                       min_size=n, max_size=n))), st.randoms())
def test_friedman_ties_and_row_permutation(rows, rnd):
    m = np.array(rows)
    stat, df, p = friedman_test(m)
    assert stat == pytest.approx(friedman_by_hand(rows), abs=1e-9)
    perm = list(range(len(rows)))
    rnd.shuffle(perm)
    assert friedman_test(m[perm]) == pytest.approx((stat, df, p), abs=1e-12)
    # only within-row ranks matter: a monotone map applied to all cells leaves it unchanged
    assert friedman_test(np.exp(3 * m))[0] == pytest.approx(stat, abs=1e-9)


def test_format_p_value():
    assert format_p_value(1e-9) == "<1e-06"
    assert format_p_value(0.015814) == "0.015814"


def test_report_friedman_selection(tmp_path):
    rep = run_batch(load_config(write_config(tmp_path)))
    r = report_friedman(rep, ["crisp", "budget"], "stage1")
    assert r.df == 1 and r.column == "stage1"
    with pytest.raises(ValueError):
        report_friedman(rep, ["crisp", "nope"])
    assert report_friedman(rep, ["crisp"]) is None

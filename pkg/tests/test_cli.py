import json
from pathlib import Path

import pytest

from crgeo.cli import SCHEMA, main

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


@pytest.mark.parametrize("argv,golden", [
    (["classify", "--n", "2", "--d", "1"], "classify_2_1.json"),
    (["characters", "--cr", "--n", "2", "--d", "1"], "characters_cr_2_1.json"),
    (["tableau-test", "--n", "2", "--d", "2", "--F-zero", "--points", "5"], "tableau_flat_2_2.json"),
])
def test_golden_reports(capsys, argv, golden, monkeypatch):
    monkeypatch.delenv("CRGEO_SEED", raising=False)
    code, report, _ = run(capsys, *argv)
    assert code == 0
    assert report == json.loads((GOLDEN / golden).read_text())


def test_verify_structure(capsys):
    code, rep, err = run(capsys, "verify-structure", "--n", "1", "--d", "1")
    assert code == 0 and rep["result"]["residual_zero"] and rep["schema"] == SCHEMA
    assert "exactly zero" in err


def test_verify_structure_resource_limit(capsys):
    code, rep, err = run(capsys, "verify-structure", "--n", "9", "--d", "9")
    assert code == 2 and rep is None and "resource limit" in err


def test_tableau_test_examples(capsys):
    code, rep, _ = run(capsys, "tableau-test", "--n", "1", "--d", "1", "--F", "p[1,1]^2")
    assert code == 0 and rep["result"]["all_true"]
    code, rep, _ = run(capsys, "tableau-test", "--n", "2", "--d", "1", "--F", "k*pb[1,1]", "--k", "0.3")
    assert code == 1 and rep["result"]["n_true"] == 0 and rep["result"]["max_residual"] > 0


def test_tableau_test_point_file(capsys, tmp_path):
    pt = tmp_path / "pt.json"
    pt.write_text(json.dumps([{"z": ["1/2", [0, 1]], "w": [0], "p": [[0, "1/3"]]},
                              {"z": [0.1, 0.2], "w": [[0.1, 0.3]], "p": [[0.5, 0]]}]))
    code, rep, _ = run(capsys, "tableau-test", "--n", "2", "--d", "1", "--F-zero", "--point", str(pt))
    assert code == 0 and rep["result"]["n_points"] == 2
    assert rep["result"]["verdicts"][0]["exact_residual_squared"] == "0"


def test_tableau_test_jet_file(capsys, tmp_path, rng):
    from samples import cr_jet
    pt = tmp_path / "jets.json"
    pt.write_text(json.dumps([cr_jet(2, 1, rng).to_json() for _ in range(3)]))
    code, rep, _ = run(capsys, "tableau-test", "--n", "2", "--d", "1", "--F-zero", "--point", str(pt))
    assert code == 0 and rep["result"]["n_true"] == 3


def test_off_equation_point(capsys, tmp_path):
    pt = tmp_path / "pt.json"
    pt.write_text(json.dumps({"z": [0], "w": [0], "p": [[0.2]], "pbar": [[0.5]]}))
    code, _, err = run(capsys, "tableau-test", "--n", "1", "--d", "1", "--F", "p[1,1]^2", "--point", str(pt))
    assert code == 2 and "off the equation" in err


def test_parse_error_exit_code(capsys):
    code, _, err = run(capsys, "tableau-test", "--n", "1", "--d", "1", "--F", "p[1,1]^")
    assert code == 2 and "position" in err


def test_classify_labels(capsys):
    assert run(capsys, "classify", "--n", "2", "--d", "2")[1]["result"]["classification"] == "rigid (CR only)"
    rep = run(capsys, "classify", "--n", "1", "--d", "1")[1]["result"]
    assert rep["classification"].startswith("unconstrained at this level")


def test_legendre_commands(capsys, tmp_path):
    code, rep, _ = run(capsys, "legendre", "--flat", "2", "--samples", "10")
    assert code == 0 and rep["result"]["n_true"] == 10 and rep["result"]["invariants_zero"]
    fib = tmp_path / "fib.json"
    fib.write_text(json.dumps({"n": 2, "f": [["Pb[1]", "0"], ["0", "0"]]}))
    code, rep, _ = run(capsys, "legendre", "--fibration", str(fib), "--samples", "10", "--perturb", "0.1")
    assert code == 0 and rep["result"]["n_true"] == 10 and rep["result"]["perturbed_false"] == 10
    assert rep["result"]["max_invariant_norm"] > 0
    fib.write_text(json.dumps({"n": 1, "f": [["zb[1]"]]}))
    code, _, err = run(capsys, "legendre", "--fibration", str(fib))
    assert code == 2 and "holomorphic" in err


def test_characters_moduli(capsys):
    code, rep, err = run(capsys, "characters", "--moduli", "--n", "2")
    res = rep["result"]
    assert res["expected"] == [2, 5]
    assert code == (0 if res["matches"] else 1)
    if not res["matches"]:
        assert "MISMATCH" in err


def test_seed_env_and_determinism(capsys, monkeypatch):
    argv = ["tableau-test", "--n", "2", "--d", "1", "--F", "z[1]*zb[2]", "--points", "4"]
    monkeypatch.setenv("CRGEO_SEED", "7")
    _, a, _ = run(capsys, *argv)
    _, b, _ = run(capsys, *argv, "--seed", "7")
    _, c, _ = run(capsys, *argv, "--jobs", "2")
    assert a == b == c and a["inputs"]["seed"] == 7
    monkeypatch.setenv("CRGEO_SEED", "x")
    assert run(capsys, *argv)[0] == 2


def test_timing_flag(capsys):
    _, rep, _ = run(capsys, "classify", "--n", "2", "--d", "2", "--timing")
    assert "runtime" in rep

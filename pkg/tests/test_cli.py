import csv
import json

from stochsens import EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_OK, main
from utils.model import BUILTIN_MODELS


def _report_lines(capsys):
    return [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.strip()]


def test_simulate_is_deterministic(tmp_path):
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", "birth-death", "--paths", "1", "--seed", "42", "--out", str(first)]) == EXIT_OK
    assert main(["simulate", "birth-death", "--paths", "1", "--seed", "42", "--out", str(second)]) == EXIT_OK
    assert first.read_bytes() == second.read_bytes()
    rows = list(csv.reader(first.open()))
    assert rows[0] == ["t", "reaction", "s_0"]
    assert rows[1] == ["0.0", "", "0"]


def test_simulate_several_paths(tmp_path):
    out = tmp_path / "path.csv"
    assert main(["simulate", "gene-expression", "--paths", "3", "--T", "2", "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in tmp_path.iterdir()) == ["path_0.csv", "path_1.csv", "path_2.csv"]


def test_simulate_zero_horizon(capsys):
    assert main(["simulate", "birth-death", "--T", "0"]) == EXIT_OK
    assert capsys.readouterr().out.splitlines() == ["t,reaction,s_0", "0.0,,0"]


def test_simulate_invalid_model(tmp_path, capsys):
    doc = json.loads(BUILTIN_MODELS["birth-death"].read_text(encoding="utf-8"))
    del doc["species"]
    path = tmp_path / "invalid.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    assert main(["simulate", str(path)]) == EXIT_INVALID
    assert "'species' is a required property" in capsys.readouterr().err


def test_model_violating_conditions_is_refused(tmp_path, capsys):
    doc = {
        "species": ["A"], "x0": [2], "params": {"k": 1.0}, "sensitive": "k",
        "reactions": [{"reactants": {"A": 2}, "products": {"A": 3}, "rate": "k"}],
        "observable": {"coeffs": {"A": 1.0}}, "T": 1.0,
    }
    path = tmp_path / "explosive.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    assert main(["simulate", str(path)]) == EXIT_INVALID
    assert "condition (D)" in capsys.readouterr().err


def test_pure_birth_exact_sensitivity(capsys):
    assert main(["sensitivity", "pure-birth", "--method", "apa-exact", "--T", "3"]) == EXIT_OK
    [report] = _report_lines(capsys)
    assert abs(report["estimate"] - 3.0) < 1e-12
    assert report["n"] == 100
    assert report["method"] == "apa-exact"
    assert report["converged"] is True
    assert "seconds" not in report


def test_girsanov_refuses_theta_zero(capsys):
    code = main(["sensitivity", "birth-death", "--method", "girsanov", "--theta", "0"])
    assert code == EXIT_INVALID
    assert "θ = 0" in capsys.readouterr().err


def test_apa_exact_refused_outside_closed_forms(capsys):
    assert main(["sensitivity", "gene-expression", "--method", "apa-exact"]) == EXIT_INVALID
    assert "apa-exact" in capsys.readouterr().err


def test_non_convergence_exit_code(capsys):
    code = main([
        "sensitivity", "birth-death", "--method", "girsanov", "--rel-ci", "1e-6", "--n-max", "200",
    ])
    assert code == EXIT_NOT_CONVERGED
    [report] = _report_lines(capsys)
    assert report["n"] == 200
    assert report["converged"] is False


def test_parameter_loop_writes_csv(tmp_path):
    out = tmp_path / "reports.csv"
    code = main([
        "sensitivity", "birth-death", "--method", "cfd", "--h", "0.05", "--param", "k_birth", "--param", "k_death",
        "--n-max", "300", "--rel-ci", "0.5", "--out", str(out),
    ])
    assert code in (EXIT_OK, EXIT_NOT_CONVERGED)
    rows = list(csv.DictReader(out.open()))
    assert [row["param"] for row in rows] == ["k_birth", "k_death"]
    assert [float(row["theta"]) for row in rows] == [1.0, 0.1]


def test_sensitivity_output_is_reproducible(tmp_path):
    args = ["sensitivity", "birth-death", "--method", "apa", "--T", "2", "--M", "10", "--seed", "7", "--rel-ci", "0.2"]
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    assert main(args + ["--out", str(first)]) in (EXIT_OK, EXIT_NOT_CONVERGED)
    assert main(args + ["--out", str(second)]) in (EXIT_OK, EXIT_NOT_CONVERGED)
    assert first.read_bytes() == second.read_bytes()


def test_diagnostics_file(tmp_path):
    notes = tmp_path / "diag.jsonl"
    main([
        "sensitivity", "birth-death", "--method", "apa", "--T", "1", "--M", "5", "--n-max", "100",
        "--diagnostics", str(notes), "--out", str(tmp_path / "report.json"),
    ])
    lines = notes.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 100
    assert {"score", "eta", "n_queries", "n_fallbacks", "aux_jump_count"} == set(json.loads(lines[0]))


def test_auto_method_picks_apa_for_slow_reactions(capsys):
    main(["sensitivity", "birth-death", "--method", "auto", "--theta", "0.001", "--T", "1", "--M", "5",
          "--n-max", "100"])
    [report] = _report_lines(capsys)
    assert report["method"] == "apa"


def test_bench_table_one(tmp_path):
    code = main(["bench", "--table", "1", "--scale", "0.001", "--thetas", "0.1", "--Ts", "1", "--out", str(tmp_path)])
    assert code == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "table1.csv").open()))
    assert [row["method"] for row in rows] == ["girsanov", "apa-exact"]
    assert all(row["n"] == "100" for row in rows)
    assert all(row["oracle"] for row in rows)


def test_girsanov_refuses_gene_expression_at_theta_zero(capsys):
    code = main(["sensitivity", "gene-expression", "--method", "girsanov", "--theta", "0"])
    assert code == EXIT_INVALID
    assert "θ = 0" in capsys.readouterr().err

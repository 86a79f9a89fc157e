import csv
import io

from odpfl.cli import main

TINY = [
    "federation.n_clients=11",
    "federation.samples_per_client=30",
    "federation.feature_dim=4",
    "federation.num_classes=3",
    "model.target_hidden=8",
    "model.phi_hidden=8",
    "model.hn_trunk=8",
    "train.rounds=4",
    "train.eval_every=2",
    "train.phase2_epochs=3",
]


def sets(*extra):
    out = []
    for s in TINY + list(extra):
        out += ["--set", s]
    return out


def test_run_then_rerun(tmp_path, capsys):
    assert main(["run", *sets(), "--out", str(tmp_path / "a")]) == 0
    assert "novel_accuracy=" in capsys.readouterr().out
    assert main(["rerun", str(tmp_path / "a"), "--out", str(tmp_path / "b")]) == 0
    assert capsys.readouterr().out.strip().endswith("identical")


def test_rerun_detects_tampering(tmp_path, capsys):
    assert main(["run", *sets("train.method=fedavg"), "--out", str(tmp_path / "a")]) == 0
    path = tmp_path / "a" / "manifest.txt"
    lines = path.read_text().splitlines()
    lines = [ln[:-4] + "0000" if "metrics.csv" in ln else ln for ln in lines]
    path.write_text("\n".join(lines) + "\n")
    assert main(["rerun", str(tmp_path / "a"), "--out", str(tmp_path / "b")]) == 1
    assert "mismatch metrics.csv" in capsys.readouterr().out


def test_config_file_and_override_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("train.method = fedavg\n" + "\n".join(s.replace("=", " = ", 1) for s in TINY) + "\n")
    assert main(["run", "--config", str(cfg), "--set", "train.method=fedprox", "--out", str(tmp_path / "r")]) == 0
    assert "method=fedprox" in capsys.readouterr().out


def test_unknown_method_is_one_line_error(capsys):
    assert main(["run", *sets("train.method=sgd")]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: UnknownMethodError:") and "\n" not in err and "fedavg" in err


def test_unknown_key_and_missing_file(tmp_path, capsys):
    assert main(["run", "--set", "train.nope=1"]) == 1
    assert capsys.readouterr().err.startswith("error: ConfigurationError:")
    assert main(["run", "--config", str(tmp_path / "missing.txt")]) == 1
    assert capsys.readouterr().err.startswith("error: ")


def test_usage_errors_exit_two(capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["corrupt-sweep", "--kind", "blur"]) == 2
    capsys.readouterr()


def test_grid_report_and_best(tmp_path, capsys):
    rep, best = tmp_path / "g.csv", tmp_path / "best.txt"
    code = main(["grid", *sets("train.method=fedavg"), "--grid", "fl_local.lr=0.01|0.1", "--grid", "fl_local.epochs=1|2", "--report", str(rep), "--best", str(best)])
    assert code == 0
    rows = list(csv.reader(io.StringIO(rep.read_text())))
    assert rows[0] == ["fl_local.epochs", "fl_local.lr", "val_accuracy"] and len(rows) == 5
    assert "train.method = fedavg" in best.read_text()
    assert capsys.readouterr().out.startswith("best ")


def test_gradcheck_command(tmp_path):
    out = tmp_path / "g.csv"
    assert main(["gradcheck", "--instances", "2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) >= 16 and all(r["passed"] == "yes" for r in rows)


def test_export_embeddings_command(tmp_path):
    out = tmp_path / "e.csv"
    assert main(["export-embeddings", *sets(), "--include-novel", "--out", str(out)]) == 0
    rows = list(csv.reader(io.StringIO(out.read_text())))
    assert len(rows) == 1 + 11


def test_sweep_commands_write_csv(tmp_path, capsys):
    dp = tmp_path / "dp.csv"
    assert main(["dp-sweep", *sets(), "--epsilons", "1.0", "--sizes", "5", "--repeats", "2", "--out", str(dp)]) == 0
    assert len(dp.read_text().splitlines()) == 3
    cs = tmp_path / "cs.csv"
    assert main(["corrupt-sweep", *sets(), "--methods", "fedavg", "--severities", "0,1", "--out", str(cs)]) == 0
    assert len(cs.read_text().splitlines()) == 3
    kl = tmp_path / "kl.csv"
    assert main(["kl-analysis", *sets(), "--alphas", "0.1,10", "--seeds", "0", "--out", str(kl)]) == 0
    assert "spearman=" in capsys.readouterr().err


def test_kl_analysis_needs_two_alphas(capsys):
    assert main(["kl-analysis", *sets(), "--alphas", "1", "--seeds", "0"]) == 1
    assert capsys.readouterr().err.startswith("error: ConfigurationError:")


def test_export_embeddings_from_results(tmp_path):
    assert main(["run", *sets(), "--out", str(tmp_path / "r")]) == 0
    fresh, saved = tmp_path / "fresh.csv", tmp_path / "saved.csv"
    assert main(["export-embeddings", "--results", str(tmp_path / "r"), "--out", str(saved)]) == 0
    assert main(["export-embeddings", *sets(), "--out", str(fresh)]) == 0
    assert saved.read_bytes() == fresh.read_bytes()

import csv
import io
import json
import os
import re
from pathlib import Path

import pytest

from trafficbench.cli import build_parser, main
from trafficbench.flowdata import load_dataset, parse_arff

GOLDEN = Path(__file__).parent / "golden"
SUBCOMMANDS = ["synth", "ingest", "rank-features", "train", "evaluate", "attack", "experiment"]


@pytest.fixture(autouse=True)
def fixed_width(monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> ingest -> train mlp, shared by the tests below."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "raw.csv"), "--n-per-class", "60", "--classes", "3",
                 "--informative", "4", "--noise", "2", "--seed", "5"]) == 0
    assert main(["ingest", "--data", str(d / "raw.csv"), "--out", str(d / "prep"),
                 "--seed", "1", "--k", "5"]) == 0
    assert main(["train", "--data", str(d / "prep" / "train.csv"), "--model", "mlp",
                 "--out", str(d / "mlp.tbm"), "--seed", "2"]) == 0
    return d


@pytest.mark.parametrize("cmd", [None] + SUBCOMMANDS)
def test_help_matches_golden(cmd, capsys):
    argv = ["--help"] if cmd is None else [cmd, "--help"]
    assert main(argv) == 0
    text = capsys.readouterr().out
    path = GOLDEN / f"help_{cmd or 'main'}.txt"
    if os.environ.get("TRAFFICBENCH_UPDATE_GOLDEN"):
        path.parent.mkdir(exist_ok=True)
        path.write_text(text)
    assert text == path.read_text()


def test_help_lists_every_flag_with_default(capsys):
    parser = build_parser()
    subs = next(a for a in parser._actions if a.dest == "command").choices
    for name, sub in subs.items():
        main([name, "--help"])
        text = capsys.readouterr().out
        # help text flattened so wrapped entries read as one string per flag
        flat = " ".join(text.split("options:", 1)[1].split())
        for action in sub._actions:
            if not action.option_strings or action.dest == "help":
                continue
            flag = max(action.option_strings, key=len)
            m = re.search(rf"(?<!\S){re.escape(flag)}(?=[\s,])", flat)
            assert m, (name, flag)
            entry = flat[m.end():].split(" --", 1)[0]
            assert action.help and action.help.split()[0] in entry, (name, flag)
            if not action.required:
                assert "default" in entry, (name, flag)


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["train", "--data", "x.csv"],
    ["train", "--data", "x.csv", "--model", "svm", "--out", "m"],
    ["attack", "--bogus"],
    ["synth", "--out", "x.csv", "--seed", "-1"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_runtime_error_exit_2(tmp_path, capsys):
    code = main(["rank-features", "--data", str(tmp_path / "missing.csv")])
    assert code == 2
    assert "rank-features" in capsys.readouterr().err


def test_ingest_outputs(workspace):
    prep = workspace / "prep"
    meta = json.loads((prep / "preprocess.json").read_text())
    assert meta["n_train"] + meta["n_test"] == 180
    assert meta["n_train"] == 144
    train = load_dataset(prep / "train.csv")
    assert train.n_features == 5
    assert list(train.schema.feature_names) == meta["selected_features"]


def test_rank_features_to_stdout(workspace, capsys):
    assert main(["rank-features", "--data", str(workspace / "raw.csv"), "--bins", "10"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 6
    assert all(r["feature_name"].startswith("inf_") for r in rows[:4])


def test_train_is_reproducible(workspace, tmp_path):
    args = ["train", "--data", str(workspace / "prep" / "train.csv"), "--model", "mlp",
            "--seed", "2", "--out", str(tmp_path / "again.tbm")]
    assert main(args) == 0
    assert (tmp_path / "again.tbm").read_bytes() == (workspace / "mlp.tbm").read_bytes()


def test_evaluate_formats(workspace, capsys):
    base = ["evaluate", "--model", str(workspace / "mlp.tbm"),
            "--data", str(workspace / "prep" / "test.csv")]
    assert main(base) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1 + 3 + 1
    assert main(base + ["--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["results"][0]["model"] == "mlp"


def test_attack_zero_epsilon_reproduces_input(workspace, tmp_path):
    test_csv = workspace / "prep" / "test.csv"
    out = tmp_path / "adv"
    assert main(["attack", "--model", str(workspace / "mlp.tbm"), "--data", str(test_csv),
                 "--attack", "pgd", "--epsilon", "0", "--out", str(out)]) == 0
    assert (out / "adversarial.csv").read_bytes() == test_csv.read_bytes()


def test_attack_tree_goes_through_surrogate(workspace, tmp_path):
    model = tmp_path / "tree.tbm"
    assert main(["train", "--data", str(workspace / "prep" / "train.csv"), "--model", "c45",
                 "--out", str(model)]) == 0
    out = tmp_path / "adv"
    assert main(["attack", "--model", str(model), "--data", str(workspace / "prep" / "test.csv"),
                 "--attack", "deepfool", "--out", str(out),
                 "--surrogate-data", str(workspace / "prep" / "train.csv")]) == 0
    meta = json.loads((out / "attack.json").read_text())
    assert meta["transfer_target"] == "c45"


def test_synth_arff(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "s.arff"), "--n-per-class", "5"]) == 0
    assert parse_arff((tmp_path / "s.arff").read_text()).n_samples == 10


def write_plan(path, **over):
    plan = {
        "dataset": {"synthetic": {"n_per_class": 40, "n_classes": 2, "n_informative": 3,
                                  "n_noise": 2, "class_separation": 2.0, "seed": 1},
                    "name": "toy"},
        "models": ["c45", "mlp"],
        "attacks": ["pgd", "zoo"],
        "attack_configs": {"zoo": {"iterations": 20}},
        "k_features": 5,
        "seed": 4,
    }
    plan.update(over)
    path.write_text(json.dumps(plan))
    return path


def test_experiment_command(tmp_path, capsys):
    plan = write_plan(tmp_path / "plan.json")
    assert main(["experiment", "--plan", str(plan), "--out", str(tmp_path / "res")]) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "res" / "metrics.csv").read_text())))
    macro = [(r["model"], r["attack"]) for r in rows if r["class"] == "__macro__"]
    assert macro == [(m, a) for m in ("c45", "mlp") for a in ("none", "pgd", "zoo")]
    assert capsys.readouterr().out == (tmp_path / "res" / "metrics.csv").read_text()
    assert (tmp_path / "res" / "manifest.json").is_file()
    assert (tmp_path / "res" / "adv" / "mlp_pgd" / "adversarial.csv").is_file()


def test_experiment_seed_override_changes_manifest(tmp_path):
    plan = write_plan(tmp_path / "plan.json", models=["knn"], attacks=[])
    assert main(["experiment", "--plan", str(plan), "--out", str(tmp_path / "a"), "--seed", "9"]) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["plan"]["seed"] == 9


def test_experiment_failure_leaves_only_partial_files(tmp_path, capsys):
    plan = write_plan(tmp_path / "plan.json", models=["mlp", "cnn1d"], attacks=[], k_features=2)
    out = tmp_path / "res"
    assert main(["experiment", "--plan", str(plan), "--out", str(out)]) == 2
    assert "train:cnn1d" in capsys.readouterr().err
    names = sorted(p.name for p in out.iterdir())
    assert names == ["manifest.json.partial", "metrics.csv.partial", "report.json.partial"]

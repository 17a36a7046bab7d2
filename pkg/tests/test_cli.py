import csv
import io
import json
import os

import pytest

from crossplan import cli


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = str(tmp_path_factory.mktemp("ws"))
    assert cli.main(["--workspace", ws, "--scale", "0.05", "--seed", "3", "gen-data"]) == 0
    assert (
        cli.main(["--workspace", ws, "--seed", "3", "gen-workload", "--count", "4", "--split", "id"])
        == 0
    )
    return ws


def _query_file(workspace, idx=0):
    with open(os.path.join(workspace, "manifest.json")) as f:
        manifest = json.load(f)
    return os.path.join(workspace, manifest["queries"][idx]["file"])


def test_unknown_flag_exits_1(capsys):
    assert cli.main(["--no-such-flag"]) == 1
    assert "error:" in capsys.readouterr().err


def test_missing_command_exits_1():
    assert cli.main([]) == 1


def test_dump_config(capsys):
    assert cli.main(["--dump-config"]) == 0
    out = capsys.readouterr().out
    assert "budget = 100" in out
    assert "theta = 0.95" in out


def test_bad_query_file_exits_2(workspace, capsys):
    assert cli.main(["--workspace", workspace, "run", "/nonexistent.json"]) == 2
    assert "error:" in capsys.readouterr().err


def test_run_strategies_agree_row_for_row(workspace, capsys):
    qf = _query_file(workspace)
    outputs = []
    for strategy in ("unoptimized", "reusable"):
        code = cli.main(
            ["--workspace", workspace, "--budget", "25", "run", qf,
             "--strategy", strategy, "--sort"]
        )
        assert code == 0
        outputs.append(capsys.readouterr().out)
    assert outputs[0] == outputs[1]


def test_explain_byte_stable(workspace, capsys):
    qf = _query_file(workspace, 1)
    dumps = []
    for _ in range(2):
        assert cli.main(
            ["--workspace", workspace, "--budget", "10", "--seed", "4",
             "explain", qf, "--strategy", "heuristic"]
        ) == 0
        dumps.append(capsys.readouterr().out)
    assert dumps[0] == dumps[1]
    assert dumps[0].startswith("-- plan --")


def test_bench_empty_manifest(workspace, tmp_path, capsys):
    manifest = tmp_path / "empty.json"
    manifest.write_text(json.dumps({"queries": []}))
    out = str(tmp_path / "rep")
    assert cli.main(
        ["--workspace", workspace, "bench", str(manifest), "--out", out]
    ) == 0
    with open(out + ".json") as f:
        doc = json.load(f)
    assert doc["rows"] == []


def test_bench_csv_columns_frozen(workspace, tmp_path):
    out = str(tmp_path / "rep")
    assert cli.main(
        ["--workspace", workspace, "--budget", "10", "bench",
         os.path.join(workspace, "manifest.json"),
         "--strategies", "unoptimized,heuristic", "--out", out]
    ) == 0
    with open(out + ".csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == list(cli.BENCH_COLUMNS)
    assert len(rows) == 1 + 2 * 4  # two strategies x four queries


def test_bench_deterministic_json(workspace, tmp_path):
    docs = []
    for run in range(2):
        out = str(tmp_path / f"rep{run}")
        assert cli.main(
            ["--workspace", workspace, "--budget", "15", "--seed", "7", "bench",
             os.path.join(workspace, "manifest.json"),
             "--strategies", "reusable", "--out", out]
        ) == 0
        with open(out + "_det.json") as f:
            docs.append(f.read())
    assert docs[0] == docs[1]  # byte-identical without wall-clock fields


def test_verify_subcommand(capsys):
    assert cli.main(["verify", "--pairs", "3", "--rules", "R1_1,R4_2"]) == 0
    out = capsys.readouterr().out
    assert "R1_1: 3 pairs ok" in out


def test_calibrate_writes_model(workspace, capsys):
    assert cli.main(["--workspace", workspace, "calibrate"]) == 0
    path = os.path.join(workspace, "cost_model.json")
    assert os.path.exists(path)
    with open(path) as f:
        doc = json.load(f)
    assert all(v > 0 for v in doc["per_row"].values())


def test_register_model_roundtrip(workspace, tmp_path, capsys):
    doc = {
        "name": "tiny_gate",
        "graph": {
            "inputs": [["x", [2]]],
            "nodes": {"mm": {"kind": "matmul", "weight": "w"}, "s": {"kind": "sigmoid"}},
            "edges": [["x", "mm", 0], ["mm", "s", 0]],
            "outputs": ["s"],
        },
        "weights": {"w": [[0.5], [-0.5]]},
    }
    path = tmp_path / "model.json"
    path.write_text(json.dumps(doc))
    assert cli.main(["--workspace", workspace, "register-model", str(path)]) == 0
    from crossplan import store

    cat = store.load_catalog(workspace)
    assert "tiny_gate" in cat.models

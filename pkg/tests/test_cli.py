import json
import subprocess
import sys
from pathlib import Path

import pytest

from elastinet import persist
from elastinet.cli import main
from toys import cli, cli_pipeline


def snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    work = tmp_path_factory.mktemp("pipe")
    steps = cli_pipeline(work)
    return work, steps


def test_pipeline_outputs(pipeline):
    work, _ = pipeline
    for name in ("trained/supernet.json", "trained/weights.bin", "trained/report.csv", "table.txt",
                 "search/best.json", "search/history.csv", "search/pool.csv", "search/evals.csv",
                 "flat.csv", "x2.csv"):
        assert (work / name).is_file(), name
        if name.endswith((".csv", ".txt")):
            assert persist.jsonl_path(work / name).is_file(), name
    best = json.loads((work / "search/best.json").read_text())
    oracle = json.loads((work / "oracle/best.json").read_text())
    assert best["latency"] <= best["T_budget"]
    assert oracle["accuracy"] >= best["accuracy"]
    assert oracle["evaluations"] <= 115


def test_rerun_is_byte_identical(pipeline):
    work, steps = pipeline
    before = snapshot(work)
    for argv in steps:
        cli(*argv)
    after = snapshot(work)
    assert before.keys() == after.keys()
    changed = [k for k in before if before[k] != after[k]]
    assert changed == []


def test_flat_serve_has_no_swaps(pipeline):
    work, _ = pipeline
    events = persist.load_events(work / "flat.csv")
    assert len(events) == 20
    assert all(e.action == "keep" for e in events)


def test_profile_is_reproducible(pipeline, tmp_path):
    work, _ = pipeline
    for name in ("a.txt", "b.txt"):
        cli("profile", "--bundle", work / "trained", "--out", tmp_path / name, "--noise", 0.1, "--seed", 4)
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    cli("profile", "--bundle", work / "trained", "--out", tmp_path / "c.txt", "--noise", 0.1, "--seed", 5)
    assert (tmp_path / "a.txt").read_bytes() != (tmp_path / "c.txt").read_bytes()


def test_summary_line(pipeline, capsys):
    work, _ = pipeline
    main(["dataset", "blobs", "--out", str(work / "tiny.csv"), "--n-per-class", "2", "--classes", "3"])
    doc = json.loads(capsys.readouterr().out)
    assert doc["command"] == "dataset" and doc["rows"] == 6


def test_errors_are_json_lines(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["profile", "--bundle", str(tmp_path / "missing"), "--out", str(tmp_path / "t.txt")])
    assert exc.value.code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FormatError" and "file not found" in err["message"]
    bad = tmp_path / "t.txt"
    bad.write_text("0:0 1.0\n0:0 2.0\n")
    with pytest.raises(SystemExit):
        main(["serve", "--bundle", str(tmp_path), "--table", str(bad), "--pool", str(bad), "--out", "x"])
    capsys.readouterr()
    with pytest.raises(SystemExit) as exc:
        main(["search", "sideways"])
    assert exc.value.code == 2
    assert json.loads(capsys.readouterr().err)["error"] == "UsageError"


def test_table_error_points_at_line(pipeline, tmp_path, capsys):
    work, _ = pipeline
    table = tmp_path / "t.txt"
    table.write_text("# device_id: x\n0:0 1.0\n0:0 2.0\n")
    with pytest.raises(SystemExit):
        main(["search", "guided", "--bundle", str(work / "trained"), "--table", str(table),
              "--data", str(work / "edge.csv"), "--out", str(tmp_path / "s")])
    assert ":3: duplicate" in json.loads(capsys.readouterr().err)["message"]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "elastinet", "dataset", "blobs", "--out", str(tmp_path / "d.csv"),
                           "--n-per-class", "3"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["command"] == "dataset"
    proc = subprocess.run([sys.executable, "-m", "elastinet", "pretrain"], capture_output=True, text=True)
    assert proc.returncode == 2 and json.loads(proc.stderr)["error"] == "UsageError"

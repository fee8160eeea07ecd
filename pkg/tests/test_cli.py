import csv
import json

import numpy as np
import pytest

from ceql import expr as ex
from ceql.cli import AGGREGATE_COLUMNS, EXIT_CONFIG, EXIT_FAILED, EXIT_OK, UsageError, main, parse_ids, parse_seeds

from conftest import affine_network


def test_parse_ids():
    assert parse_ids("E-1..E-3") == ["E-1", "E-2", "E-3"]
    assert parse_ids("E-7,E-1..E-2") == ["E-7", "E-1", "E-2"]
    with pytest.raises(UsageError):
        parse_ids("E-11")


def test_parse_seeds():
    assert parse_seeds("3", 10) == [10, 11, 12]
    assert parse_seeds("0,4", 0) == [0, 4]
    assert parse_seeds(None, 0) is None
    for bad in ("x", "0"):
        with pytest.raises(UsageError):
            parse_seeds(bad, 0)


def test_gen_data(tmp_path, capsys):
    assert main(["gen-data", "E-2", "train", "5", "--seed", "1"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "x1,x2,y" and len(lines) == 6
    out = tmp_path / "d.csv"
    assert main(["gen-data", "E-2", "train", "5", "--seed", "1", "--out", str(out)]) == EXIT_OK
    assert out.read_text().strip().splitlines() == lines


def test_usage_errors(tmp_path):
    assert main(["gen-data", "E-42", "train", "5"]) == EXIT_CONFIG
    assert main(["gen-data", "E-1", "sideways", "5"]) == EXIT_CONFIG
    assert main(["bench", "--ids", "E-99"]) == EXIT_CONFIG
    bad = tmp_path / "c.yaml"
    bad.write_text("nonsense: true\n")
    assert main(["bench", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["extract", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["frf"]) == EXIT_CONFIG


def test_extract(tmp_path, capsys):
    path = tmp_path / "net.json"
    affine_network(1.87, 2.01).save(path)
    assert main(["extract", str(path), "--json"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "1.87*x1 + 2.01"
    assert ex.render(ex.loads(out[1])) == "1.87*x1 + 2.01"


def test_extract_imaginary_residue(tmp_path):
    net = affine_network(1.87, 2.01)
    net.params[net.active] += 0.01j
    net.save(tmp_path / "net.json")
    assert main(["extract", str(tmp_path / "net.json")]) == EXIT_FAILED
    assert main(["extract", str(tmp_path / "net.json"), "--im-tolerance", "0.1"]) == EXIT_OK


def test_demo_division(tmp_path, capsys):
    out = tmp_path / "traj.csv"
    assert main(["demo-division", "--steps", "50", "--out", str(out)]) == EXIT_OK
    assert "final a" in capsys.readouterr().out
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["step", "re_a", "im_a", "loss"] and len(rows) == 52


def test_bench_outputs(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("n_test: 256\n")
    out = tmp_path / "run"
    code = main(["bench", "--ids", "E-1", "--seeds", "0,1", "--scale", "0.002",
                 "--config", str(cfg), "--out", str(out)])
    assert code in (EXIT_OK, EXIT_FAILED)
    with (out / "aggregate.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == AGGREGATE_COLUMNS and rows[0]["expression_id"] == "E-1"
    for s in (0, 1):
        run = json.loads((out / "runs" / f"E-1_seed{s}.json").read_text())
        assert run["benchmark"] == "E-1" and run["seed"] == s
        assert (out / "history" / f"E-1_seed{s}.csv").exists()
    assert (out / "config.yaml").exists() and (out / "expressions.txt").exists()
    first = (out / "runs" / "E-1_seed0.json").read_bytes()
    main(["bench", "--ids", "E-1", "--seeds", "1", "--scale", "0.002", "--config", str(cfg),
          "--out", str(tmp_path / "again")])
    assert (tmp_path / "again" / "runs" / "E-1_seed0.json").read_bytes() == first


def test_fit(tmp_path, capsys):
    data = tmp_path / "d.csv"
    main(["gen-data", "E-1", "train", "64", "--out", str(data)])
    code = main(["fit", str(data), "--scale", "0.002", "--out", str(tmp_path / "fit")])
    assert code in (EXIT_OK, EXIT_FAILED)
    assert (tmp_path / "fit" / "history.csv").exists()
    # kept even when extraction fails so it can be retried with a looser tolerance
    assert (tmp_path / "fit" / "network.json").exists()
    assert main(["extract", str(tmp_path / "fit" / "network.json"), "--im-tolerance", "inf"]) == EXIT_OK
    if code == EXIT_OK:
        assert (tmp_path / "fit" / "expression.json").exists()

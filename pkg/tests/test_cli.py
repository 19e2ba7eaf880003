import csv
import json

import pytest

from sguda.cli import build_parser, main, resolve_config, write_resolved
from tiny import tiny_config


def write_config(path, cfg):
    path.write_text(json.dumps(cfg.to_dict()))
    return path


@pytest.fixture
def tiny_json(tmp_path):
    return write_config(tmp_path / "tiny.json", tiny_config())


@pytest.mark.trivial
def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck", "--seed", "7"]) == 0
    assert "FAIL" not in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    ["uda-run", "--bogus"],
    ["uda-run", "--mode", "nope"],
    ["uda-run", "--p", "abc"],
    ["sweep", "--axis", "p"],
    ["nosuchcommand"],
])
def test_usage_errors_exit_two(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)] if argv[0] != "nosuchcommand" else argv) == 2


def test_sweep_bad_values_exit_two(tmp_path, tiny_json):
    assert main(["sweep", "--axis", "p", "--values", "a,b", "--config", str(tiny_json), "--out", str(tmp_path)]) == 2


def test_invalid_config_files_exit_two(tmp_path):
    # an unreadable or invalid config is an invalid value, not a runtime failure
    assert main(["uda-run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dbscan": {"q": 1}}))
    assert main(["uda-run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text(json.dumps({"dbscan": {"p": -1}}))
    assert main(["uda-run", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_runtime_failures_exit_one(tmp_path, tiny_json):
    assert main(["evaluate", "--checkpoint", str(tmp_path / "missing.ckpt"), "--config", str(tiny_json),
                 "--out", str(tmp_path)]) == 1
    # p so small that DBSCAN returns no clusters aborts the run
    assert main(["uda-run", "--config", str(tiny_json), "--p", "1e-9", "--out", str(tmp_path / "abort")]) == 1
    assert (tmp_path / "abort" / "report_iter0.json").exists()


@pytest.mark.trivial
def test_flag_and_file_resolve_identically(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    ap = build_parser()
    flags = ap.parse_args(["uda-run", "--mode", "source_guided", "--clusterer", "dbscan", "--p", "0.0016"])
    write_resolved(resolve_config(flags), a)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mode": "source_guided", "clusterer": "dbscan", "dbscan": {"p": 0.0016}}))
    write_resolved(resolve_config(ap.parse_args(["uda-run", "--config", str(cfg)])), b)
    assert (a / "config_resolved.json").read_bytes() == (b / "config_resolved.json").read_bytes()
    assert json.loads((a / "config_resolved.json").read_text())["dbscan"]["p"] == 0.0016


def test_flags_override_file(tmp_path, tiny_json):
    assert main(["generate", "--config", str(tiny_json), "--seed", "99", "--out", str(tmp_path)]) == 0
    resolved = json.loads((tmp_path / "config_resolved.json").read_text())
    assert resolved["seed"] == 99 and resolved["n_iter"] == 2


@pytest.mark.trivial
def test_sweep_shared_depth(tmp_path):
    cfg = write_config(tmp_path / "four.json", tiny_config(**{"encoder.block_dims": [16, 16, 16, 16]}))
    out = tmp_path / "sweep"
    assert main(["sweep", "--axis", "shared_depth", "--values", "0,1,2,3,4", "--config", str(cfg),
                 "--out", str(out)]) == 0
    with open(out / "sweep.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["value"] for r in rows] == ["0", "1", "2", "3", "4"]
    assert all(r["status"] == "ok" for r in rows)


@pytest.mark.trivial
def test_emit_plot_data(tmp_path, tiny_json):
    out = tmp_path / "sweep"
    assert main(["sweep", "--axis", "p", "--values", "0.02,0.03,0.05", "--config", str(tiny_json),
                 "--out", str(out)]) == 0
    assert main(["emit-plot-data", str(out)]) == 0
    first = (out / "map_vs_axis.csv").read_bytes()
    lines = first.decode().splitlines()
    assert lines[0] == "axis,value,mAP,cmc1,std" and len(lines) == 4
    assert main(["emit-plot-data", str(out)]) == 0
    assert (out / "map_vs_axis.csv").read_bytes() == first


def test_emit_plot_data_single_run(tmp_path, tiny_json):
    out = tmp_path / "run"
    assert main(["uda-run", "--config", str(tiny_json), "--out", str(out)]) == 0
    assert main(["emit-plot-data", str(out)]) == 0
    assert len((out / "map_vs_axis.csv").read_text().splitlines()) == 1 + 3


@pytest.mark.trivial
def test_emit_plot_data_missing(tmp_path):
    assert main(["emit-plot-data", str(tmp_path)]) == 1
    assert main(["emit-plot-data", str(tmp_path / "nope")]) == 1


def test_rerun_from_resolved_config_is_byte_identical(tmp_path, tiny_json):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["uda-run", "--config", str(tiny_json), "--out", str(a)]) == 0
    assert main(["uda-run", "--config", str(a / "config_resolved.json"), "--out", str(b)]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_init_train_then_evaluate(tmp_path, tiny_json):
    init, data, ev = tmp_path / "init", tmp_path / "data", tmp_path / "eval"
    assert main(["init-train", "--config", str(tiny_json), "--out", str(init)]) == 0
    assert main(["generate", "--config", str(tiny_json), "--out", str(data)]) == 0
    assert main(["evaluate", "--checkpoint", str(init / "init.ckpt"), "--data", str(data),
                 "--config", str(tiny_json), "--out", str(ev)]) == 0
    rep = json.loads((ev / "report.json").read_text())
    assert 0.0 < rep["mAP"] <= 1.0 and rep["num_queries"] > 0

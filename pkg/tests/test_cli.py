import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import TINY_SKELETON, TINY_VIDEO
from mctfuse.ablate import AXES, grid_cells, parse_grid
from mctfuse.cli import main
from mctfuse.data import read_dataset
from mctfuse.metrics import EVAL_SPLITS, REPORT_ROWS
from mctfuse.train import TrainConfig

TINY = {"epochs_stage1": 1, "epochs_stage2": 1, "video": TINY_VIDEO, "skeleton": TINY_SKELETON}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["-q", "synth", "--seed", "7", "--archetypes-known", "6", "--archetypes-new", "4",
                 "--samples-per", "8", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "c.json"
    p.write_text(json.dumps(TINY))
    return p


def _mAP_rows(path):
    with open(path) as fh:
        return [r for r in csv.DictReader(fh) if r["metric"] == "mAP"]


def test_synth_train_eval_pipeline(data_dir, config_file, tmp_path):
    run = tmp_path / "run"
    assert main(["-q", "train", "--data", str(data_dir), "--config", str(config_file), "--out", str(run)]) == 0
    assert (run / "final" / "state.json").exists() and (run / "stage2" / "log.csv").exists()
    assert main(["-q", "eval", "--ckpt", str(run / "final"), "--data", str(data_dir),
                 "--report", str(tmp_path / "r.csv")]) == 0
    rows = _mAP_rows(tmp_path / "r.csv")
    assert [r["split"] for r in rows] == list(REPORT_ROWS)
    assert json.loads((tmp_path / "r.json").read_text())["meta"]["phase"] == "joint"


def test_train_stages_and_resume(data_dir, config_file, tmp_path):
    run = tmp_path / "run"
    base = ["-q", "train", "--data", str(data_dir), "--config", str(config_file), "--out", str(run)]
    assert main(base + ["--stage", "1"]) == 0
    assert not (run / "final").exists()
    assert main(base + ["--stage", "2", "--resume"]) == 0
    assert (run / "final").exists()


def test_all_ones_baseline_matches_prevalence(data_dir, tmp_path):
    assert main(["-q", "eval", "--baseline", "all-ones", "--data", str(data_dir),
                 "--report", str(tmp_path / "b.csv")]) == 0
    ds = read_dataset(data_dir)
    rows = {r["split"]: float(r["value"]) for r in _mAP_rows(tmp_path / "b.csv")}
    for split in EVAL_SPLITS:
        lab = ds.labels[ds.indices(split)]
        prev = [c.mean() for c in lab.T if c.any()]
        assert abs(rows[split] - float(np.mean(prev))) < 1e-9


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--data", "d", "--report", "r.csv", "--baseline", "random", "--frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_eval_needs_exactly_one_source():
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--data", "d", "--report", "r.csv"])
    assert exc.value.code == 2


def test_errors_exit_nonzero_with_message(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text(json.dumps({"epochs": 3}))
    assert main(["synth", "--out", str(tmp_path / "d"), "--samples-per", "8", "--archetypes-known", "6",
                 "--archetypes-new", "4"]) == 0
    assert main(["train", "--data", str(tmp_path / "d"), "--config", str(tmp_path / "bad.json"),
                 "--out", str(tmp_path / "o")]) == 1


def test_gradcheck_subcommand(tmp_path, capsys):
    assert main(["gradcheck", "--instances", "3", "--ops", "add", "softmax", "--report",
                 str(tmp_path / "g.json")]) == 0
    out = capsys.readouterr().out
    assert "add" in out and "softmax" in out
    assert all(r["passed"] for r in json.loads((tmp_path / "g.json").read_text())["results"])


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mctfuse", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "ablate" in res.stdout


# -- ablation grid ------------------------------------------------------------

def test_grid_axes_sizes():
    assert len(AXES["toggles"]) == 5
    assert len(AXES["placements"]) == 6
    assert len(AXES["fusions"]) == 8
    with pytest.raises(ValueError):
        parse_grid("toggles x colours")


def test_full_grid_covers_every_variant():
    cells = grid_cells("toggles x placements x fusions", TrainConfig())
    names = [c.name for c in cells]
    assert len(names) == len(set(names)) == 49
    over = [c.overrides for c in cells]
    assert {o.get("kd_placement") for o in over} == {None, "FL", "DE", "SP"}
    assert {o.get("fusion_kind") for o in over} == {None, "mctf", "sum", "multiplication", "self_attention",
                                                     "cross_attention"}
    assert {o["late_fusion"] for o in over} == {None, "sum", "concat", "mul"}
    assert {(o["mct"], o["mctkd"], o["mctf"]) for o in over if o["late_fusion"] is None} == \
        {(False, False, False), (True, False, False), (True, True, False), (True, False, True), (True, True, True)}


def test_ablate_small_grid_writes_reports(data_dir, config_file, tmp_path):
    out = tmp_path / "abl"
    assert main(["-q", "ablate", "--data", str(data_dir), "--config", str(config_file), "--out", str(out),
                 "--grid", "toggles"]) == 0
    index = json.loads((out / "index.json").read_text())
    assert len(index) == 5
    for entry in index:
        assert [r["split"] for r in _mAP_rows(out / entry["report"])] == list(REPORT_ROWS)
    # cells that share stage-1 settings share the cached branch checkpoints
    assert len(list((out / "stage1_cache").iterdir())) == 2

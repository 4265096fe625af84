import csv
import json
import math
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from metacure import cli, config, metaloop
from metacure.cli import EXIT_CHECK, EXIT_OK, EXIT_USAGE, main

SMOKE = """\
# smoke run
[experiment]
family = point-robot-sparse
n_train_tasks = 2
n_test_tasks = 2
seed = 3

[schedule]
env_step_budget = 1280
train_steps = 5
eval_interval = 5
checkpoint_interval = 5

[networks]
agent_hidden = 32
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = base / "smoke.ini"
    cfg.write_text(SMOKE)
    out = base / "run"
    t0 = time.perf_counter()
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    assert time.perf_counter() - t0 < 60
    return out


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.ini"
    assert main(["train", "--config", str(missing), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert str(missing) in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_unknown_key_is_rejected_before_any_output(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[schedule]\nbudget = 5\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "budget" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_invalid_value_reports_field(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[schedule]\nadapt_episodes = 1\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "adapt_episodes" in capsys.readouterr().err


def test_config_round_trip_through_text():
    cfg = config.parse_config_text(SMOKE)
    assert cfg.n_train_tasks == 2 and cfg.agent_hidden == 32 and cfg.seed == 3
    assert config.parse_config_text(config.render_config(cfg)) == cfg


def test_run_directory_contents(run_dir):
    assert (run_dir / "config.ini").read_text() == SMOKE
    with open(run_dir / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0].keys()) == list(metaloop.METRIC_COLUMNS)
    assert len(rows) == 5
    assert [int(r["env_steps"]) for r in rows] == [256 * i for i in range(1, 6)]
    assert cli.list_checkpoints(run_dir) == [1, 5]
    report = json.loads((run_dir / "report.json").read_text())
    assert report["iterations"] == 5 and report["env_steps"] == 1280


def test_nonempty_output_requires_overwrite(run_dir, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMOKE)
    assert main(["train", "--config", str(cfg), "--out", str(run_dir)]) == EXIT_USAGE
    assert (run_dir / "report.json").exists()


def test_eval_is_deterministic_and_appends_one_row(run_dir, capsys):
    args = ["eval", str(run_dir), "--checkpoint", "final", "--n-test-tasks", "1", "--seeds", "1"]
    assert main(args) == EXIT_OK
    first = capsys.readouterr().out
    assert main(args) == EXIT_OK
    second = capsys.readouterr().out
    assert first == second
    table = [line for line in first.splitlines() if line.split() and line.split()[0].isdigit()]
    assert len(table) == 1
    with open(run_dir / "eval.csv") as f:
        rows = list(csv.DictReader(f))
    assert {"mean_final_return", "success_rate"} <= set(rows[0])
    assert rows[-1] == rows[-2]


def test_eval_missing_checkpoint(run_dir):
    assert main(["eval", str(run_dir), "--checkpoint", "3"]) == EXIT_USAGE
    assert main(["eval", str(run_dir / "missing")]) == EXIT_USAGE


def test_heatmap_grid_and_svg(run_dir):
    assert main(["heatmap", str(run_dir), "--checkpoint", "early", "--grid-n", "3"]) == EXIT_OK
    heat = run_dir / "heatmaps"
    xs, ys, vals = cli.read_grid_csv(heat / "r_int_000001.csv")
    assert vals.shape == (3, 3)
    np.testing.assert_array_equal(xs, [-1.5, 0.0, 1.5])
    with open(heat / "r_int_000001.csv") as f:
        assert f.readline().startswith("y\\x,")
    root = ET.parse(heat / "r_int_000001.svg").getroot()
    assert root.tag.endswith("svg")
    assert len([e for e in root.iter() if e.tag.endswith("rect")]) >= 9
    cfg = cli.load_run(run_dir)
    system, _ = cli.restore_system(run_dir, cfg, 1)
    hm = metaloop.heatmap_intrinsic(system, system.train_tasks, 3, seed=cfg.seed)
    np.testing.assert_allclose(vals, hm.r_int, rtol=0, atol=0)
    summary = json.loads((heat / "summary_000001.json").read_text())
    # no cell of a 3x3 grid falls in the goal band
    assert summary["grid_n"] == 3 and summary["goal_band"] is None and math.isfinite(summary["origin"])


def test_ablate_requires_known_variant(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMOKE)
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--variant", "wider"]) == EXIT_USAGE


def test_oracle_passes_and_negative_control_fails(capsys):
    assert main(["oracle", "--instances", "10"]) == EXIT_OK
    assert "worst" in capsys.readouterr().out
    assert main(["oracle", "--instances", "3", "--corrupt-const"]) == EXIT_CHECK
    assert "VIOLATION" in capsys.readouterr().out


def test_gradcheck_passes_and_flipped_tanh_fails(capsys):
    assert main(["gradcheck", "--draws", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 7
    assert main(["gradcheck", "--draws", "1", "--flip-sign"]) == EXIT_CHECK
    assert "FAIL" in capsys.readouterr().out


def test_unknown_subcommand_is_usage_error():
    assert main(["frobnicate"]) == EXIT_USAGE

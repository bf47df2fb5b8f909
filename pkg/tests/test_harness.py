from __future__ import annotations

import importlib.resources
import os

import pytest

from anchor_sim.executive import Ablation
from anchor_sim.harness import (BatchReport, CellStats, report_to_csv,
                                report_to_table, run_batch, write_report)
from anchor_sim.scenario import parse_scenario


def _packaged(name):
    base = importlib.resources.files("anchor_sim") / "scenarios"
    return parse_scenario((base / name).read_text(), name=name)


@pytest.fixture(scope="module")
def small_batch(sim_shell):
    scenarios = {1: _packaged("level1.scn")}
    return run_batch(scenarios, [1], [Ablation.FULL, Ablation.NO_RECOVERY],
                     trials=5, base_seed=100, shell=sim_shell)


def test_batch_shapes_and_counts(small_batch):
    assert len(small_batch.cells) == 2
    for cell in small_batch.cells:
        assert cell.trials == 5
        assert 0 <= cell.successes <= 5
        # stage bookkeeping: successes never exceed attempts
        for stage, n in cell.stage_successes.items():
            assert n <= cell.stage_attempts.get(stage, 0)


def test_rr_accounting(small_batch):
    for cell in small_batch.cells:
        if cell.detected == 0:
            assert cell.rr is None
        else:
            assert 0.0 <= cell.rr <= 1.0
            assert cell.recovered <= cell.detected


def test_batch_deterministic(sim_shell):
    scenarios = {1: _packaged("level1.scn")}
    a = run_batch(scenarios, [1], [Ablation.FULL], trials=4, base_seed=7,
                  shell=sim_shell)
    b = run_batch(scenarios, [1], [Ablation.FULL], trials=4, base_seed=7,
                  shell=sim_shell)
    assert report_to_csv(a) == report_to_csv(b)


def test_missing_scenario_marks_cell_error(sim_shell):
    report = run_batch({1: "/nonexistent/path.scn"}, [1], [Ablation.FULL],
                       trials=1, base_seed=0, shell=sim_shell)
    assert report.cells[0].error is not None
    csv_text = report_to_csv(report)
    assert "nonexistent" in csv_text


def test_csv_excludes_wall_clock(small_batch):
    text = report_to_csv(small_batch)
    assert "wall" not in text.split("\n")[0]
    assert "time" not in text.split("\n")[0]


def test_empty_report_header_only():
    assert report_to_csv(BatchReport(cells=[])).count("\n") == 1


def test_csv_golden_fixture():
    """Frozen bytes for a hand-built report; guards the emission format."""
    cell = CellStats(level=1, ablation="full", trials=2, successes=1,
                     stage_attempts={"Find": 2, "Align": 3, "Grasp": 2, "Place": 1},
                     stage_successes={"Find": 2, "Align": 2, "Grasp": 1, "Place": 1},
                     total_steps=9, wall_clock=1.25)
    cell.anomalies_detected["L1"] = 2
    cell.anomalies_recovered["L1"] = 1
    report = BatchReport(cells=[cell])
    expected = (
        "level,ablation,trials,successes,sr,"
        "find_attempts,find_successes,align_attempts,align_successes,"
        "grasp_attempts,grasp_successes,place_attempts,place_successes,"
        "l1_detected,l1_recovered,l2_detected,l2_recovered,rr,mean_steps,error\n"
        "1,full,2,1,0.5,2,2,3,2,2,1,1,1,2,1,0,0,0.5,4.5,\n"
    )
    assert report_to_csv(report) == expected


def test_table_layout_levels_then_overall(small_batch):
    table = report_to_table(small_batch)
    header = table.splitlines()[0]
    assert "Level 1" in header
    assert header.rstrip().endswith("Overall")
    assert "Find" in table and "Place" in table


def test_rr_dash_for_no_anomalies():
    cell = CellStats(level=1, ablation="full", trials=1, successes=1)
    table = report_to_table(BatchReport(cells=[cell]))
    assert "—" in table


def test_write_report_files(tmp_path, small_batch):
    csv_path = os.path.join(tmp_path, "r.csv")
    table_path = os.path.join(tmp_path, "r.txt")
    write_report(small_batch, csv_path, table_path)
    assert open(csv_path).read() == report_to_csv(small_batch)
    assert open(table_path).read() == report_to_table(small_batch)


def test_pooled_sr(small_batch):
    sr = small_batch.pooled_sr("full")
    cell = small_batch.cell(1, "full")
    assert sr == pytest.approx(cell.sr)
    assert small_batch.pooled_sr("open-loop") is None

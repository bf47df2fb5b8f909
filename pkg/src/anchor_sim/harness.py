"""Batch trial runner, SR/SSR/RR aggregation, and report emission."""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

from .core import RngSeed
from .executive import (Ablation, TrialConfig, TrialTrace, default_shell,
                        run_trial, trace_to_text)
from .reachability import DualEllipsoidShell
from .scenario import Scenario, ScenarioError, load_scenario

STAGES = ("Find", "Align", "Grasp", "Place")
LAYERS = ("L1", "L2")


@dataclass
class CellStats:
    """Aggregated metrics for one (level, ablation) cell."""

    level: int
    ablation: str
    trials: int = 0
    successes: int = 0
    stage_attempts: dict = field(default_factory=dict)
    stage_successes: dict = field(default_factory=dict)
    anomalies_detected: dict = field(default_factory=lambda: {l: 0 for l in LAYERS})
    anomalies_recovered: dict = field(default_factory=lambda: {l: 0 for l in LAYERS})
    total_steps: int = 0
    wall_clock: float = 0.0
    error: str | None = None

    @property
    def sr(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    @property
    def detected(self) -> int:
        return sum(self.anomalies_detected.values())

    @property
    def recovered(self) -> int:
        return sum(self.anomalies_recovered.values())

    @property
    def rr(self) -> float | None:
        """Recovery rate, undefined (None) when no anomalies were detected."""
        return self.recovered / self.detected if self.detected else None

    @property
    def mean_steps(self) -> float:
        return self.total_steps / self.trials if self.trials else 0.0

    def ssr(self, stage: str) -> float | None:
        attempts = self.stage_attempts.get(stage, 0)
        if attempts == 0:
            return None
        return self.stage_successes.get(stage, 0) / attempts

    def add_trial(self, trace: TrialTrace) -> None:
        self.trials += 1
        self.successes += trace.succeeded
        self.total_steps += trace.dispatched
        for stage, n in trace.stage_attempts.items():
            self.stage_attempts[stage] = self.stage_attempts.get(stage, 0) + n
        for stage, n in trace.stage_successes.items():
            self.stage_successes[stage] = self.stage_successes.get(stage, 0) + n
        for ep in trace.episodes:
            self.anomalies_detected[ep.layer] += 1
            if ep.resolved:
                self.anomalies_recovered[ep.layer] += 1


@dataclass
class BatchReport:
    cells: list  # CellStats in (level, ablation) order

    def cell(self, level: int, ablation: str) -> CellStats | None:
        for c in self.cells:
            if c.level == level and c.ablation == ablation:
                return c
        return None

    def pooled_sr(self, ablation: str) -> float | None:
        trials = sum(c.trials for c in self.cells if c.ablation == ablation)
        if trials == 0:
            return None
        wins = sum(c.successes for c in self.cells if c.ablation == ablation)
        return wins / trials


def run_batch(scenarios: dict, levels: list[int], ablations: list[Ablation],
              trials: int, base_seed: int, trace_dir: str | None = None,
              shell: DualEllipsoidShell | None = None) -> BatchReport:
    """Run trials per (level, ablation) cell with seeds base_seed + trial index.

    scenarios maps level -> scenario path or parsed Scenario. Scenario load
    failures mark the cell with an error and skip it.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if shell is None:
        shell = default_shell()
    cells = []
    for level in levels:
        for ablation in ablations:
            stats = CellStats(level=level, ablation=ablation.value)
            cells.append(stats)
            source = scenarios.get(level)
            if source is None:
                stats.error = f"no scenario for level {level}"
                continue
            try:
                scenario = source if isinstance(source, Scenario) else load_scenario(source)
            except (OSError, ScenarioError) as exc:
                stats.error = str(exc)
                continue
            t0 = time.perf_counter()
            for index in range(trials):
                seed = RngSeed((base_seed + index) & ((1 << 64) - 1))
                trace = run_trial(TrialConfig(scenario=scenario, seed=seed,
                                              ablation=ablation, shell=shell))
                stats.add_trial(trace)
                if trace_dir is not None:
                    name = f"level{level}_{ablation.value}_{index}.trace"
                    with open(os.path.join(trace_dir, name), "w", encoding="utf-8") as fh:
                        fh.write(trace_to_text(trace))
            stats.wall_clock = time.perf_counter() - t0
    return BatchReport(cells=cells)


# --------------------------------------------------------------------------
# Report emission (CSV is byte-stable; the text table carries wall-clock)
# --------------------------------------------------------------------------

_CSV_COLUMNS = (
    "level,ablation,trials,successes,sr,"
    "find_attempts,find_successes,align_attempts,align_successes,"
    "grasp_attempts,grasp_successes,place_attempts,place_successes,"
    "l1_detected,l1_recovered,l2_detected,l2_recovered,rr,mean_steps,error"
)


def report_to_csv(report: BatchReport) -> str:
    """One row per cell; full decimal precision; deterministic bytes.

    Wall-clock time is intentionally excluded so identical runs produce
    identical files.
    """
    lines = [_CSV_COLUMNS]
    for c in report.cells:
        if c.error is not None:
            row = [str(c.level), c.ablation, "0", "0", "", "", "", "", "", "",
                   "", "", "", "", "", "", "", "", "", c.error.replace(",", ";")]
        else:
            rr = "" if c.rr is None else repr(c.rr)
            row = [str(c.level), c.ablation, str(c.trials), str(c.successes),
                   repr(c.sr)]
            for stage in STAGES:
                row.append(str(c.stage_attempts.get(stage, 0)))
                row.append(str(c.stage_successes.get(stage, 0)))
            row.extend([str(c.anomalies_detected["L1"]), str(c.anomalies_recovered["L1"]),
                        str(c.anomalies_detected["L2"]), str(c.anomalies_recovered["L2"]),
                        rr, repr(c.mean_steps), ""])
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _fmt_pct(value: float | None) -> str:
    return "—" if value is None else f"{100.0 * value:.1f}%"


def report_to_table(report: BatchReport) -> str:
    """Aligned text tables: per-level SR then overall SR/RR/steps/time and SSR."""
    levels = sorted({c.level for c in report.cells})
    ablations = []
    for c in report.cells:
        if c.ablation not in ablations:
            ablations.append(c.ablation)
    out = []
    header = ["Method".ljust(14)] + [f"Level {l}".rjust(9) for l in levels] + [
        "Overall".rjust(9)]
    out.append("  ".join(header))
    for ab in ablations:
        row = [ab.ljust(14)]
        for level in levels:
            cell = report.cell(level, ab)
            row.append(_fmt_pct(cell.sr if cell and cell.error is None else None).rjust(9))
        row.append(_fmt_pct(report.pooled_sr(ab)).rjust(9))
        out.append("  ".join(row))
    out.append("")
    out.append("  ".join(["Method".ljust(14), "SR".rjust(8), "RR".rjust(8),
                          "Steps".rjust(8), "Time".rjust(9)]))
    for ab in ablations:
        cells = [c for c in report.cells if c.ablation == ab and c.error is None]
        trials = sum(c.trials for c in cells)
        detected = sum(c.detected for c in cells)
        recovered = sum(c.recovered for c in cells)
        steps = sum(c.total_steps for c in cells) / trials if trials else 0.0
        wall = sum(c.wall_clock for c in cells)
        rr = recovered / detected if detected else None
        out.append("  ".join([ab.ljust(14), _fmt_pct(report.pooled_sr(ab)).rjust(8),
                              _fmt_pct(rr).rjust(8), f"{steps:.1f}".rjust(8),
                              f"{wall:.1f}s".rjust(9)]))
    out.append("")
    out.append("  ".join(["Method".ljust(14)] + [s.rjust(8) for s in STAGES]))
    for ab in ablations:
        cells = [c for c in report.cells if c.ablation == ab and c.error is None]
        row = [ab.ljust(14)]
        for stage in STAGES:
            attempts = sum(c.stage_attempts.get(stage, 0) for c in cells)
            wins = sum(c.stage_successes.get(stage, 0) for c in cells)
            row.append(_fmt_pct(wins / attempts if attempts else None).rjust(8))
        out.append("  ".join(row))
    return "\n".join(out) + "\n"


def write_report(report: BatchReport, csv_path: str,
                 table_path: str | None = None) -> None:
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(report_to_csv(report))
    if table_path is not None:
        with open(table_path, "w", encoding="utf-8") as fh:
            fh.write(report_to_table(report))

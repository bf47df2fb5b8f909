from __future__ import annotations

import importlib.resources
from collections import Counter

import pytest

from anchor_sim.core import RngSeed
from anchor_sim.executive import (Ablation, TrialConfig, rederive_states,
                                  replay_terminal_status, run_trial,
                                  trace_to_text)
from anchor_sim.scenario import parse_scenario


def _packaged(name):
    base = importlib.resources.files("anchor_sim") / "scenarios"
    return parse_scenario((base / name).read_text(), name=name)


@pytest.fixture(scope="module")
def level1():
    return _packaged("level1.scn")


@pytest.fixture(scope="module")
def fig1():
    return _packaged("fig1_displaced.scn")


def noiseless_level1():
    """The direct fixture with all stochastic branches pinned."""
    text = (importlib.resources.files("anchor_sim") / "scenarios" / "level1.scn").read_text()
    text = text.replace("p_detect 0.95", "p_detect 1.0")
    text = text.replace("noise_sigma 0.02", "noise_sigma 0.0")
    text = text.replace("p_grasp 0.9", "p_grasp 1.0")
    return parse_scenario(text, name="level1-noiseless")


def test_level1_noiseless_canonical_trace(sim_shell):
    trace = run_trial(TrialConfig(scenario=noiseless_level1(), seed=RngSeed(1),
                                  shell=sim_shell))
    assert trace.succeeded
    dispatched = Counter(rec.action[0] for rec in trace.cycles if rec.action)
    assert dispatched["obj_find"] <= 2
    assert dispatched["align"] == 2
    assert dispatched["grasp"] == 1
    assert dispatched["place"] == 1
    assert len(trace.cycles) <= 8


def test_goal_pre_satisfied_zero_actions(sim_shell):
    scn = noiseless_level1()
    # pre-place the orange inside the bowl
    bowl = next(o for o in scn.objects if o.id == "bowl")
    orange = next(o for o in scn.objects if o.id == "orange")
    orange.position = bowl.position
    trace = run_trial(TrialConfig(scenario=scn, seed=RngSeed(2), shell=sim_shell))
    assert trace.succeeded
    assert trace.dispatched == 0


def test_receding_horizon_one_dispatch_per_cycle(sim_shell, level1):
    trace = run_trial(TrialConfig(scenario=level1, seed=RngSeed(3), shell=sim_shell))
    for rec in trace.cycles:
        assert rec.action is None or len([rec.action]) == 1


def test_full_replans_every_cycle(sim_shell, level1):
    trace = run_trial(TrialConfig(scenario=level1, seed=RngSeed(4), shell=sim_shell))
    for rec in trace.cycles:
        if rec.action is not None:
            assert rec.plan, "dispatched without a recorded plan"
            assert rec.plan[0] == rec.action


def test_trace_determinism(sim_shell, level1):
    a = trace_to_text(run_trial(TrialConfig(scenario=level1, seed=RngSeed(5),
                                            shell=sim_shell)))
    b = trace_to_text(run_trial(TrialConfig(scenario=level1, seed=RngSeed(5),
                                            shell=sim_shell)))
    assert a == b


def test_state_consistency_contract(sim_shell, level1):
    trace = run_trial(TrialConfig(scenario=level1, seed=RngSeed(6), shell=sim_shell))
    text = trace_to_text(trace)
    assert rederive_states(text, sim_shell, level1.predicates)


def test_replay_recomputes_terminal_status(sim_shell, level1):
    for seed in (7, 8):
        trace = run_trial(TrialConfig(scenario=level1, seed=RngSeed(seed),
                                      shell=sim_shell))
        result = replay_terminal_status(trace_to_text(trace))
        assert result["consistent"]
        assert result["status"] == trace.status


def test_fig1_open_loop_fails_full_recovers(sim_shell, fig1):
    open_loop = run_trial(TrialConfig(scenario=fig1, seed=RngSeed(11),
                                      ablation=Ablation.OPEN_LOOP, shell=sim_shell))
    assert not open_loop.succeeded
    full = run_trial(TrialConfig(scenario=fig1, seed=RngSeed(11), shell=sim_shell))
    assert full.succeeded
    # the trace shows a grasp anomaly followed by a fresh search for the target
    cycles = full.cycles
    grasp_anomaly_cycle = None
    for rec in cycles:
        if rec.action and rec.action[0] == "grasp" and rec.outcome == "EmptyGrasp":
            grasp_anomaly_cycle = rec.cycle
            break
    assert grasp_anomaly_cycle is not None
    later_finds = [rec for rec in cycles
                   if rec.cycle > grasp_anomaly_cycle and rec.action
                   and rec.action == ["obj_find", "orange"]]
    assert later_finds, "no re-find after the grasp anomaly"


def test_no_recovery_terminates_on_first_anomaly(sim_shell, fig1):
    trace = run_trial(TrialConfig(scenario=fig1, seed=RngSeed(12),
                                  ablation=Ablation.NO_RECOVERY, shell=sim_shell))
    assert not trace.succeeded
    assert trace.reason.startswith("terminated:")
    directives = [d for rec in trace.cycles for d in rec.directives]
    assert all("RetryLocal" not in d and "EscalateReplan" not in d
               for d in directives)


def test_open_loop_never_replans(sim_shell, level1):
    trace = run_trial(TrialConfig(scenario=level1, seed=RngSeed(13),
                                  ablation=Ablation.OPEN_LOOP, shell=sim_shell))
    plans = [rec.plan for rec in trace.cycles if rec.plan]
    assert len(plans) == 1


def test_budget_exhaustion_reported(sim_shell, level1):
    trace = run_trial(TrialConfig(scenario=level1, seed=RngSeed(14),
                                  max_cycles=2, shell=sim_shell))
    assert not trace.succeeded
    assert trace.reason == "cycle budget exhausted"

"""Closed-loop trial driver: re-anchor, derive state, plan, dispatch the first
action, route anomalies through recovery, repeat until the goal or termination.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

from .alignment import AlignmentObjectiveConfig, ChassisModel
from .anchors import (AnchorStore, PredicateConfig, RobotAnchor, derive_state,
                      store_from_record, store_to_record)
from .core import Point3, RngSeed
from .grasping import GraspScoreConfig
from .planner import Action, Plan, TaskSpec, build_problem, plan
from .reachability import (ArmModel, DualEllipsoidShell, ShellFitConfig,
                           fit_shell, sample_workspace)
from .recovery import (Anomaly, AnomalyKind, Directive, RecoveryConfig,
                       RecoveryState, classify, format_event, handle,
                       note_success)
from .scenario import Scenario, load_scenario
from .sim import (AlignOutcome, AlignSetup, FindOutcome, GraspOutcome,
                  PlaceOutcome, apply_disturbances, perceive, primitive_align,
                  primitive_grasp, primitive_obj_find, primitive_place)

TRACE_FORMAT = "anchor-trace v1"

# Arm used by the simulated platform; the shell is fitted once per
# (arm, fit config) and shared across trials.
SIM_ARM = ArmModel(mount_offset=Point3(0.10, 0.0, 0.30))
SIM_SHELL_CFG = ShellFitConfig(mu_threshold=0.5, ik_trials_per_pose=6,
                               sample_grid_resolution=0.10)
SHELL_SEED = RngSeed(90210)

_shell_cache: dict = {}


def default_shell(arm: ArmModel = SIM_ARM,
                  cfg: ShellFitConfig = SIM_SHELL_CFG) -> DualEllipsoidShell:
    key = (arm, cfg)
    if key not in _shell_cache:
        samples = sample_workspace(arm, cfg, SHELL_SEED)
        _shell_cache[key] = fit_shell(samples, cfg, mount=arm.mount_offset)
    return _shell_cache[key]


class Ablation(Enum):
    FULL = "full"
    NO_ALIGN = "no-align"
    NO_RECOVERY = "no-recovery"
    OPEN_LOOP = "open-loop"


@dataclass(frozen=True)
class TrialConfig:
    scenario: Scenario | str  # parsed scenario or path
    seed: RngSeed
    ablation: Ablation = Ablation.FULL
    max_cycles: int | None = None  # None: scenario default
    task: TaskSpec | None = None  # None: scenario task
    shell: DualEllipsoidShell | None = None  # None: fit/caching default


class Stage(Enum):
    FIND = "Find"
    ALIGN = "Align"
    GRASP = "Grasp"
    PLACE = "Place"


_STAGE_OF_ACTION = {"obj_find": Stage.FIND, "align": Stage.ALIGN,
                    "grasp": Stage.GRASP, "place": Stage.PLACE}


@dataclass
class AnomalyEpisode:
    """One detected failure episode; L1 retries and the escalation that fixes
    them belong to the same episode, so it counts once in the recovery ledger."""

    key: tuple
    layer: str
    opened_at: int
    resolved: bool = False


@dataclass
class CycleRecord:
    cycle: int
    store: dict
    state: list
    plan: list
    action: list | None
    outcome: str | None
    anomalies: list
    directives: list
    events: list


@dataclass
class TrialTrace:
    meta: dict
    cycles: list
    status: str = "failure"
    reason: str = ""
    dispatched: int = 0
    stage_attempts: dict = field(default_factory=dict)
    stage_successes: dict = field(default_factory=dict)
    episodes: list = field(default_factory=list)

    @property
    def succeeded(self) -> bool:
        return self.status == "success"


def _state_to_list(state) -> list:
    return sorted(list(p) for p in state)


def _plan_to_list(p: Plan | None) -> list:
    if p is None:
        return []
    return [[a.name, *a.args] for a in p.actions]


class _TrialRun:
    """Mutable machinery for one trial; run() produces the trace."""

    def __init__(self, cfg: TrialConfig):
        scenario = cfg.scenario
        if isinstance(scenario, str):
            scenario = load_scenario(scenario)
        self.scenario = scenario
        self.cfg = cfg
        self.task = cfg.task or scenario.task
        self.max_cycles = cfg.max_cycles or scenario.max_cycles
        self.seed = cfg.seed
        self.world = scenario.build_world()
        self.beliefs = {oid: scenario.build_belief() for oid in sorted(self.world.objects)}
        self.sensor = scenario.sensor
        self.outcomes = scenario.outcomes
        self.pcfg = scenario.predicates
        self.gcfg = GraspScoreConfig()
        shell = cfg.shell if cfg.shell is not None else default_shell()
        self.setup = AlignSetup(shell=shell, chassis=ChassisModel(radius=scenario.robot_radius),
                                objective=AlignmentObjectiveConfig(), pso=scenario.pso,
                                arm_mount=SIM_ARM.mount_offset)
        recovery_enabled = cfg.ablation not in (Ablation.NO_RECOVERY, Ablation.OPEN_LOOP)
        self.rcfg = RecoveryConfig(l1_retry_limit=scenario.recovery.l1_retry_limit,
                                   enabled=recovery_enabled)
        self.rstate = RecoveryState()
        self.store = AnchorStore(robot=RobotAnchor(chassis_pose=self.world.robot))
        self.trace = TrialTrace(meta={
            "format": TRACE_FORMAT,
            "scenario": scenario.name,
            "task_obj": self.task.task_obj,
            "task_container": self.task.task_container,
            "seed": cfg.seed.seed,
            "ablation": cfg.ablation.value,
            "max_cycles": self.max_cycles,
        }, cycles=[])
        self.episodes: dict = {}
        self.fired_phases: set = set()
        self.goal = ("in", self.task.task_obj, self.task.task_container)

    # -- anomaly episode ledger ------------------------------------------

    def _episode_key(self, anomaly: Anomaly) -> tuple:
        if anomaly.action is not None:
            return (anomaly.action, anomaly.obj or "")
        return (anomaly.kind.value, anomaly.obj or "")

    def _record_anomaly(self, anomaly: Anomaly) -> None:
        key = self._episode_key(anomaly)
        ep = self.episodes.get(key)
        if ep is None or ep.resolved:
            ep = AnomalyEpisode(key=key, layer=classify(anomaly).value,
                                opened_at=self.world.cycle)
            self.episodes[key] = ep
            self.trace.episodes.append(ep)

    def _resolve_action_episodes(self, action: str, obj: str) -> None:
        ep = self.episodes.get((action, obj))
        if ep is not None and not ep.resolved:
            ep.resolved = True

    def _resolve_object_episodes(self, state) -> None:
        for (kind, obj), ep in self.episodes.items():
            if ep.resolved or kind not in (AnomalyKind.TARGET_DISPLACED.value,
                                           AnomalyKind.TARGET_OCCLUDED.value,
                                           AnomalyKind.SCENE_CHANGED.value):
                continue
            if ("found", obj) in state:
                ep.resolved = True

    # -- phases and disturbances ------------------------------------------

    def _fire_phase(self, phase: str) -> list:
        if phase in self.fired_phases:
            return []
        self.fired_phases.add(phase)
        return apply_disturbances(self.world, self.scenario.script, phase=phase)

    # -- dispatch ----------------------------------------------------------

    def _dispatch(self, action: Action) -> tuple[str, list[Anomaly], list]:
        """Run one primitive; returns (outcome label, anomalies, fired events)."""
        seed = self.seed.derive("dispatch", self.trace.dispatched, action.name)
        self.trace.dispatched += 1
        stage = _STAGE_OF_ACTION[action.name]
        self.trace.stage_attempts[stage.value] = self.trace.stage_attempts.get(stage.value, 0) + 1
        anomalies: list[Anomaly] = []
        events: list = []
        success = False
        if action.name == "obj_find":
            target = action.args[0]
            outcome, self.store, anoms = primitive_obj_find(
                self.world, self.sensor, self.store, self.beliefs[target], target,
                self.pcfg, self.outcomes, seed)
            anomalies.extend(anoms)
            label = outcome.value
            if outcome is FindOutcome.FOUND:
                success = True
                events.extend(self._fire_phase("first_find"))
            elif outcome is FindOutcome.SLIPPED:
                anomalies.append(Anomaly(kind=AnomalyKind.GRIPPER_SLIP,
                                         detected_at_cycle=self.world.cycle,
                                         evidence="carried object slipped mid-navigation",
                                         action="grasp", obj=self.world_held_or(target)))
            else:
                anomalies.append(Anomaly(kind=AnomalyKind.UNREACHABLE,
                                         detected_at_cycle=self.world.cycle,
                                         evidence=f"{target} confirmed missing: "
                                                  "all region beliefs exhausted",
                                         obj=target))
        elif action.name == "align":
            target = action.args[0]
            outcome, self.store, anoms = primitive_align(
                self.world, self.sensor, self.store, target, self.setup,
                self.pcfg, self.outcomes, seed,
                skip_refinement=self.cfg.ablation in (Ablation.NO_ALIGN,
                                                      Ablation.OPEN_LOOP))
            anomalies.extend(anoms)
            label = outcome.value
            # "first_align" marks arrival at the alignment endpoint, whether or
            # not re-anchoring confirmed the predicate.
            events.extend(self._fire_phase("first_align"))
            if outcome is AlignOutcome.ALIGNED:
                success = True
            elif outcome is AlignOutcome.SLIPPED:
                anomalies.append(Anomaly(kind=AnomalyKind.GRIPPER_SLIP,
                                         detected_at_cycle=self.world.cycle,
                                         evidence="carried object slipped mid-navigation",
                                         action="grasp", obj=self.world_held_or(target)))
            elif not any(a.kind is AnomalyKind.UNREACHABLE for a in anoms):
                anomalies.append(Anomaly(kind=AnomalyKind.SCENE_CHANGED,
                                         detected_at_cycle=self.world.cycle,
                                         evidence=f"alignment to {target} not confirmed",
                                         obj=target))
        elif action.name == "grasp":
            target = action.args[0]
            outcome, self.store, anoms = primitive_grasp(
                self.world, self.sensor, self.store, target, self.setup,
                self.gcfg, self.outcomes, seed)
            anomalies.extend(anoms)
            label = outcome.value
            if outcome is GraspOutcome.HOLDING:
                success = True
                events.extend(self._fire_phase("first_grasp"))
            else:
                anomalies.append(Anomaly(kind=AnomalyKind.EMPTY_GRASP,
                                         detected_at_cycle=self.world.cycle,
                                         evidence=f"gripper closed on air near {target}",
                                         action="grasp", obj=target))
        elif action.name == "place":
            obj_id, container_id = action.args
            outcome, self.store, anoms = primitive_place(
                self.world, self.sensor, self.store, obj_id, container_id,
                self.setup, self.pcfg, self.outcomes, seed)
            anomalies.extend(anoms)
            label = outcome.value
            if outcome is PlaceOutcome.PLACED:
                success = True
            else:
                anomalies.append(Anomaly(kind=AnomalyKind.PLACEMENT_MISS,
                                         detected_at_cycle=self.world.cycle,
                                         evidence=f"{obj_id} landed outside {container_id}",
                                         action="place", obj=obj_id))
        else:
            raise ValueError(f"unknown primitive {action.name!r}")
        if success:
            self.trace.stage_successes[stage.value] = (
                self.trace.stage_successes.get(stage.value, 0) + 1)
            note_success(self.rstate, action.name, action.args[0])
            self._resolve_action_episodes(action.name, action.args[0])
        return label, anomalies, events

    def world_held_or(self, fallback: str) -> str:
        return self.world.held if self.world.held is not None else fallback

    # -- main loops --------------------------------------------------------

    def run(self) -> TrialTrace:
        if self.cfg.ablation is Ablation.OPEN_LOOP:
            self._run_open_loop()
        else:
            self._run_closed_loop()
        if self.trace.succeeded:
            # Reaching the goal resolves every open episode by definition: the
            # anomaly was handled without terminating the task.
            for ep in self.trace.episodes:
                ep.resolved = True
        return self.trace

    def _finish(self, status: str, reason: str) -> None:
        self.trace.status = status
        self.trace.reason = reason

    def _handle_anomalies(self, anomalies: list[Anomaly], record: CycleRecord) -> bool:
        """Route anomalies through recovery; True when the trial must stop."""
        for anomaly in anomalies:
            self._record_anomaly(anomaly)
            directive = handle(self.rstate, anomaly, self.rcfg)
            attempts = self.rstate.l1_attempts.get(anomaly.key(), 0)
            record.directives.append(format_event(self.world.cycle, anomaly,
                                                  directive, attempts))
            record.anomalies.append({"kind": anomaly.kind.value,
                                     "layer": classify(anomaly).value,
                                     "evidence": anomaly.evidence,
                                     "directive": directive.value})
            if directive is Directive.TERMINATE:
                self._finish("failure", f"terminated: {anomaly.kind.value}: "
                                        f"{anomaly.evidence}")
                return True
        return False

    def _run_closed_loop(self) -> None:
        for cycle in range(self.max_cycles):
            self.world.cycle = cycle
            events = apply_disturbances(self.world, self.scenario.script, cycle=cycle)
            self.store, panoms = perceive(self.world, self.sensor, self.store,
                                          self.seed.derive("tick", cycle),
                                          beliefs=self.beliefs)
            state = derive_state(self.store, self.pcfg, self.setup.shell)
            self._resolve_object_episodes(state)
            record = CycleRecord(cycle=cycle, store=store_to_record(self.store),
                                 state=_state_to_list(state), plan=[], action=None,
                                 outcome=None, anomalies=[], directives=[],
                                 events=[_event_label(e) for e in events])
            self.trace.cycles.append(record)
            if self.goal in state:
                self._finish("success", "goal predicates hold")
                return
            if self._handle_anomalies(panoms, record):
                return
            problem = build_problem(self.task, state)
            pi = plan(problem)
            if pi is None:
                state = self._retract_far_anchors(state)
                record.store = store_to_record(self.store)
                record.state = _state_to_list(state)
                pi = plan(build_problem(self.task, state))
            if pi is None or not pi.actions:
                unreachable = Anomaly(kind=AnomalyKind.UNREACHABLE,
                                      detected_at_cycle=cycle,
                                      evidence="planner found no applicable plan")
                if self._handle_anomalies([unreachable], record):
                    return
                continue
            record.plan = _plan_to_list(pi)
            action = pi.actions[0]
            record.action = [action.name, *action.args]
            label, anomalies, events2 = self._dispatch(action)
            record.outcome = label
            record.events.extend(_event_label(e) for e in events2)
            if self._handle_anomalies(anomalies, record):
                return
        self._finish("failure", "cycle budget exhausted")

    def _retract_far_anchors(self, state) -> frozenset:
        """Task-level refresh: drop anchors of found-but-distant objects so the
        planner can revert to obj_find instead of declaring the goal
        unreachable. The dropped object's search belief concentrates on the
        region it was last seen in."""
        objects = dict(self.store.objects)
        changed = False
        for oid in sorted(objects):
            anchor = objects[oid]
            if anchor.last_observed_cycle is None:
                continue
            d = math.hypot(self.world.robot.x - anchor.expected_position.x,
                           self.world.robot.y - anchor.expected_position.y)
            if d > self.pcfg.eps_near and self.world.held != oid:
                cell = self.world.grid.cell_of(anchor.expected_position.x,
                                               anchor.expected_position.y)
                region = self.world.region_of_cell(cell)
                if region is not None and oid in self.beliefs:
                    self.beliefs[oid].region_belief = {region: 1.0}
                    self.world.scanned_regions.discard(region)
                del objects[oid]
                changed = True
        if changed:
            self.store = self.store.with_objects(objects)
        return derive_state(self.store, self.pcfg, self.setup.shell)

    def _run_open_loop(self) -> None:
        """Single-shot baseline: plan once, execute the whole plan without
        state write-back or replanning; the first anomaly is terminal."""
        self.world.cycle = 0
        apply_disturbances(self.world, self.scenario.script, cycle=0)
        self.store, panoms = perceive(self.world, self.sensor, self.store,
                                      self.seed.derive("tick", 0),
                                      beliefs=self.beliefs)
        state = derive_state(self.store, self.pcfg, self.setup.shell)
        record = CycleRecord(cycle=0, store=store_to_record(self.store),
                             state=_state_to_list(state), plan=[], action=None,
                             outcome=None, anomalies=[], directives=[], events=[])
        self.trace.cycles.append(record)
        if self.goal in state:
            self._finish("success", "goal predicates hold")
            return
        if self._handle_anomalies(panoms, record):
            return
        problem = build_problem(self.task, state)
        pi = plan(problem)
        if pi is None:
            pi = plan(build_problem(self.task, self._retract_far_anchors(state)))
        if pi is None:
            self._finish("failure", "terminated: Unreachable: no initial plan")
            return
        record.plan = _plan_to_list(pi)
        for idx, action in enumerate(pi.actions):
            cycle = idx + 1
            self.world.cycle = cycle
            events = apply_disturbances(self.world, self.scenario.script, cycle=cycle)
            record = CycleRecord(cycle=cycle, store=store_to_record(self.store),
                                 state=[], plan=[], action=[action.name, *action.args],
                                 outcome=None, anomalies=[], directives=[],
                                 events=[_event_label(e) for e in events])
            self.trace.cycles.append(record)
            label, anomalies, events2 = self._dispatch(action)
            record.outcome = label
            record.events.extend(_event_label(e) for e in events2)
            # Alignment is not verified in the open-loop pipeline; every other
            # anomaly terminates because recovery is disabled.
            anomalies = [a for a in anomalies
                         if not (action.name == "align"
                                 and a.kind in (AnomalyKind.SCENE_CHANGED,
                                                AnomalyKind.UNREACHABLE))]
            if self._handle_anomalies(anomalies, record):
                return
        self.store, _ = perceive(self.world, self.sensor, self.store,
                                 self.seed.derive("final"))
        state = derive_state(self.store, self.pcfg, self.setup.shell)
        final = CycleRecord(cycle=self.world.cycle + 1,
                            store=store_to_record(self.store),
                            state=_state_to_list(state), plan=[], action=None,
                            outcome=None, anomalies=[], directives=[], events=[])
        self.trace.cycles.append(final)
        if self.goal in state:
            self._finish("success", "goal predicates hold")
        else:
            self._finish("failure", "plan completed without reaching the goal")


def _event_label(ev) -> str:
    return f"{ev.effect.value}:{ev.target}"


def run_trial(cfg: TrialConfig) -> TrialTrace:
    """Execute one seeded trial and return its replayable trace."""
    return _TrialRun(cfg).run()


# --------------------------------------------------------------------------
# Trace serialization and replay
# --------------------------------------------------------------------------

def trace_to_lines(trace: TrialTrace) -> list[str]:
    lines = [json.dumps({"type": "meta", **trace.meta}, sort_keys=True,
                        separators=(",", ":"))]
    for rec in trace.cycles:
        lines.append(json.dumps({
            "type": "cycle", "cycle": rec.cycle, "store": rec.store,
            "state": rec.state, "plan": rec.plan, "action": rec.action,
            "outcome": rec.outcome, "anomalies": rec.anomalies,
            "directives": rec.directives, "events": rec.events,
        }, sort_keys=True, separators=(",", ":")))
    lines.append(json.dumps({
        "type": "terminal", "status": trace.status, "reason": trace.reason,
        "cycles": len(trace.cycles), "dispatched": trace.dispatched,
        "stage_attempts": trace.stage_attempts,
        "stage_successes": trace.stage_successes,
        "episodes": [{"key": list(ep.key), "layer": ep.layer,
                      "resolved": ep.resolved} for ep in trace.episodes],
    }, sort_keys=True, separators=(",", ":")))
    return lines


def trace_to_text(trace: TrialTrace) -> str:
    return "\n".join(trace_to_lines(trace)) + "\n"


def replay_terminal_status(text: str) -> dict:
    """Re-derive the terminal status of a logged trace from its records.

    Success requires the goal literal in a recorded state; a Terminate
    directive explains a failure; otherwise the budget ran out. The recomputed
    status is checked against the recorded terminal line.
    """
    meta = None
    terminal = None
    goal_hit = False
    terminated = False
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["type"] == "meta":
            meta = rec
        elif rec["type"] == "cycle":
            if meta is not None:
                goal = ["in", meta["task_obj"], meta["task_container"]]
                if goal in rec["state"]:
                    goal_hit = True
            if any("directive=Terminate" in d for d in rec["directives"]):
                terminated = True
        elif rec["type"] == "terminal":
            terminal = rec
    if meta is None or terminal is None:
        raise ValueError("trace is missing meta or terminal records")
    status = "success" if goal_hit else "failure"
    if terminated and not goal_hit:
        status = "failure"
    consistent = status == terminal["status"]
    return {"status": status, "recorded": terminal["status"],
            "consistent": consistent, "meta": meta, "terminal": terminal}


def rederive_states(text: str, shell: DualEllipsoidShell,
                    pcfg: PredicateConfig) -> bool:
    """Check the state-consistency contract: every logged symbolic state is
    recomputable from that cycle's anchor snapshot."""
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["type"] != "cycle" or not rec["state"]:
            continue
        store = store_from_record(rec["store"])
        derived = derive_state(store, pcfg, shell)
        if sorted(list(p) for p in derived) != rec["state"]:
            return False
    return True

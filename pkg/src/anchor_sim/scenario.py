"""Scenario file loader.

Scenarios are plain text, organized in [sections] of whitespace-separated
fields, with # comments. See the packaged scenarios/*.scn files for worked
examples. Sections:

  [grid]          cell_size S | extent W H | origin X Y
  [occupied]      rect X0 Y0 X1 Y1 HEIGHT
  [regions]       region ID X0 Y0 X1 Y1
  [objects]       object ID X Y Z half_extents=W,D [region=R] [graspable=yes|no]
                  [container=yes|no] [surface=Z]
  [robot]         start X Y THETA   and optional   radius R
  [sensor]        fov_radius | fov_halfangle | p_detect | noise_sigma | height
  [belief]        prior REGION MASS  |  lambda_travel L
  [outcomes]      p_grasp | p_grasp_misaligned | p_slip | place_clearance
  [disturbances]  at CYCLE displace ID DX DY | at CYCLE occlude ID DURATION
                  | at CYCLE remove ID | after PHASE <same effects>
                  (phases: first_find, first_align, first_grasp)
  [task]          obj ID | container ID | instruction "TEXT"
  [executive]     max_cycles N | eps_near E | eps_in E | retry_limit N
  [pso]           coarse P I | fine P I  (particles, iterations)

The loader validates as it reads and reports errors with line numbers.
"""
from __future__ import annotations

from dataclasses import dataclass

from .alignment import PsoConfig, PsoStageConfig
from .anchors import PredicateConfig
from .core import BasePose, Point3
from .planner import TaskSpec
from .recovery import RecoveryConfig
from .sim import (Disturbance, DisturbanceEffect, DisturbanceScript,
                  FrontierBelief, OccupancyGrid, OutcomeModel, SensorModel,
                  SimObject, WorldState)

PHASES = ("first_find", "first_align", "first_grasp")


class ScenarioError(ValueError):
    """Malformed scenario file; message carries the offending line number."""


@dataclass
class Scenario:
    name: str
    cell_size: float
    extent: tuple[float, float]
    origin: tuple[float, float]
    occupied_rects: list
    regions: dict  # id -> (x0, y0, x1, y1)
    objects: list
    robot_start: BasePose
    robot_radius: float
    sensor: SensorModel
    outcomes: OutcomeModel
    priors: dict
    lambda_travel: float
    script: DisturbanceScript
    task: TaskSpec
    max_cycles: int
    predicates: PredicateConfig
    recovery: RecoveryConfig
    pso: PsoConfig

    def build_world(self) -> WorldState:
        width = max(1, round(self.extent[0] / self.cell_size))
        height = max(1, round(self.extent[1] / self.cell_size))
        grid = OccupancyGrid(width, height, self.cell_size, self.origin)
        for x0, y0, x1, y1, h in self.occupied_rects:
            grid.mark_occupied_rect(x0, y0, x1, y1, h)
        regions = {}
        for rid, (x0, y0, x1, y1) in self.regions.items():
            cells = set()
            c0 = grid.cell_of(x0 + 1e-9, y0 + 1e-9)
            c1 = grid.cell_of(x1 - 1e-9, y1 - 1e-9)
            for ix in range(max(0, c0[0]), min(width, c1[0] + 1)):
                for iy in range(max(0, c0[1]), min(height, c1[1] + 1)):
                    cells.add((ix, iy))
            regions[rid] = cells
        objects = {o.id: SimObject(id=o.id, position=o.position,
                                   half_extents=o.half_extents, region=o.region,
                                   graspable=o.graspable, container=o.container,
                                   surface_height=o.surface_height)
                   for o in self.objects}
        return WorldState(grid=grid, regions=regions, objects=objects,
                          robot=self.robot_start, robot_radius=self.robot_radius)

    def build_belief(self) -> FrontierBelief:
        priors = dict(self.priors)
        if not priors:
            n = max(1, len(self.regions))
            priors = {rid: 1.0 / n for rid in self.regions}
        return FrontierBelief(region_belief=dict(priors), lambda_travel=self.lambda_travel,
                              priors=dict(priors))


@dataclass
class _ObjSpec:
    id: str
    position: Point3
    half_extents: tuple[float, float]
    region: str = ""
    graspable: bool = True
    container: bool = False
    surface_height: float | None = None


def _err(lineno: int, msg: str) -> ScenarioError:
    return ScenarioError(f"line {lineno}: {msg}")


def _parse_bool(lineno: int, raw: str) -> bool:
    if raw in ("yes", "true", "1"):
        return True
    if raw in ("no", "false", "0"):
        return False
    raise _err(lineno, f"expected yes/no, got {raw!r}")


def _floats(lineno: int, parts: list[str], n: int) -> list[float]:
    if len(parts) != n:
        raise _err(lineno, f"expected {n} numeric fields, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise _err(lineno, f"bad number: {exc}") from exc


def parse_scenario(text: str, name: str = "<scenario>") -> Scenario:
    section = None
    cell_size = 0.10
    extent = (4.0, 3.0)
    origin = (0.0, 0.0)
    occupied: list = []
    regions: dict = {}
    objects: list[_ObjSpec] = []
    robot_start: BasePose | None = None
    robot_radius = 0.35
    sensor_kw: dict = {}
    outcome_kw: dict = {}
    priors: dict = {}
    lambda_travel = 0.01
    events: list[Disturbance] = []
    task_obj = task_container = None
    instruction = ""
    max_cycles = 100
    pred_kw: dict = {}
    retry_limit = 2
    pso_kw: dict = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            known = ("grid", "occupied", "regions", "objects", "robot", "sensor",
                     "belief", "outcomes", "disturbances", "task", "executive", "pso")
            if section not in known:
                raise _err(lineno, f"unknown section [{section}]")
            continue
        parts = line.split()
        key = parts[0]
        if section is None:
            raise _err(lineno, "content before any [section]")
        if section == "grid":
            if key == "cell_size":
                cell_size = _floats(lineno, parts[1:], 1)[0]
                if cell_size <= 0:
                    raise _err(lineno, "cell_size must be positive")
            elif key == "extent":
                w, h = _floats(lineno, parts[1:], 2)
                extent = (w, h)
            elif key == "origin":
                x, y = _floats(lineno, parts[1:], 2)
                origin = (x, y)
            else:
                raise _err(lineno, f"unknown grid field {key!r}")
        elif section == "occupied":
            if key != "rect":
                raise _err(lineno, f"expected 'rect', got {key!r}")
            x0, y0, x1, y1, h = _floats(lineno, parts[1:], 5)
            if h <= 0:
                raise _err(lineno, "obstacle height must be positive")
            occupied.append((x0, y0, x1, y1, h))
        elif section == "regions":
            if key != "region" or len(parts) != 6:
                raise _err(lineno, "expected: region ID X0 Y0 X1 Y1")
            rid = parts[1]
            if rid in regions:
                raise _err(lineno, f"duplicate region {rid!r}")
            x0, y0, x1, y1 = _floats(lineno, parts[2:], 4)
            regions[rid] = (x0, y0, x1, y1)
        elif section == "objects":
            if key != "object" or len(parts) < 5:
                raise _err(lineno, "expected: object ID X Y Z key=value...")
            oid = parts[1]
            if any(o.id == oid for o in objects):
                raise _err(lineno, f"duplicate object {oid!r}")
            x, y, z = _floats(lineno, parts[2:5], 3)
            spec = _ObjSpec(id=oid, position=Point3(x, y, z), half_extents=(0.05, 0.05))
            for kv in parts[5:]:
                if "=" not in kv:
                    raise _err(lineno, f"expected key=value, got {kv!r}")
                k, v = kv.split("=", 1)
                if k == "half_extents":
                    try:
                        w, d = (float(s) for s in v.split(","))
                    except ValueError as exc:
                        raise _err(lineno, f"bad half_extents {v!r}") from exc
                    if w <= 0 or d <= 0:
                        raise _err(lineno, "half_extents must be positive")
                    spec.half_extents = (w, d)
                elif k == "region":
                    spec.region = v
                elif k == "graspable":
                    spec.graspable = _parse_bool(lineno, v)
                elif k == "container":
                    spec.container = _parse_bool(lineno, v)
                elif k == "surface":
                    spec.surface_height = float(v)
                else:
                    raise _err(lineno, f"unknown object field {k!r}")
            objects.append(spec)
        elif section == "robot":
            if key == "start":
                x, y, theta = _floats(lineno, parts[1:], 3)
                robot_start = BasePose(x, y, theta)
            elif key == "radius":
                robot_radius = _floats(lineno, parts[1:], 1)[0]
                if robot_radius <= 0:
                    raise _err(lineno, "robot radius must be positive")
            else:
                raise _err(lineno, f"unknown robot field {key!r}")
        elif section == "sensor":
            fields = {"fov_radius": "fov_radius", "fov_halfangle": "fov_halfangle",
                      "p_detect": "p_detect", "noise_sigma": "position_noise_sigma",
                      "height": "height"}
            if key not in fields:
                raise _err(lineno, f"unknown sensor field {key!r}")
            sensor_kw[fields[key]] = _floats(lineno, parts[1:], 1)[0]
        elif section == "belief":
            if key == "prior":
                if len(parts) != 3:
                    raise _err(lineno, "expected: prior REGION MASS")
                priors[parts[1]] = _floats(lineno, parts[2:], 1)[0]
            elif key == "lambda_travel":
                lambda_travel = _floats(lineno, parts[1:], 1)[0]
            else:
                raise _err(lineno, f"unknown belief field {key!r}")
        elif section == "outcomes":
            fields = {"p_grasp": "p_grasp", "p_grasp_misaligned": "p_grasp_misaligned",
                      "p_slip": "p_slip", "place_clearance": "place_clearance"}
            if key not in fields:
                raise _err(lineno, f"unknown outcome field {key!r}")
            outcome_kw[fields[key]] = _floats(lineno, parts[1:], 1)[0]
        elif section == "disturbances":
            events.append(_parse_disturbance(lineno, parts))
        elif section == "task":
            if key == "obj":
                task_obj = parts[1]
            elif key == "container":
                task_container = parts[1]
            elif key == "instruction":
                instruction = line.split(None, 1)[1].strip().strip('"')
            else:
                raise _err(lineno, f"unknown task field {key!r}")
        elif section == "executive":
            if key == "max_cycles":
                max_cycles = int(_floats(lineno, parts[1:], 1)[0])
                if max_cycles < 1:
                    raise _err(lineno, "max_cycles must be >= 1")
            elif key == "eps_near":
                pred_kw["eps_near"] = _floats(lineno, parts[1:], 1)[0]
            elif key == "eps_in":
                pred_kw["eps_in"] = _floats(lineno, parts[1:], 1)[0]
            elif key == "retry_limit":
                retry_limit = int(_floats(lineno, parts[1:], 1)[0])
            else:
                raise _err(lineno, f"unknown executive field {key!r}")
        elif section == "pso":
            if key not in ("coarse", "fine"):
                raise _err(lineno, f"unknown pso field {key!r}")
            p, i = _floats(lineno, parts[1:], 2)
            pso_kw[key] = (int(p), int(i))

    if robot_start is None:
        raise ScenarioError("missing [robot] start")
    if task_obj is None or task_container is None:
        raise ScenarioError("missing [task] obj/container")
    known_ids = {o.id for o in objects}
    for t, label in ((task_obj, "task obj"), (task_container, "task container")):
        if t not in known_ids:
            raise ScenarioError(f"{label} {t!r} is not a declared object")
    for ev in events:
        if ev.target not in known_ids:
            raise ScenarioError(f"disturbance target {ev.target!r} is not a declared object")
    for o in objects:
        if o.region and o.region not in regions:
            raise ScenarioError(f"object {o.id!r} references unknown region {o.region!r}")
    for rid in priors:
        if rid not in regions:
            raise ScenarioError(f"belief prior references unknown region {rid!r}")

    pso = PsoConfig()
    if pso_kw:
        coarse = PsoStageConfig(particles=pso_kw.get("coarse", (64, 40))[0],
                                iterations=pso_kw.get("coarse", (64, 40))[1])
        fine = PsoStageConfig(particles=pso_kw.get("fine", (32, 30))[0],
                              iterations=pso_kw.get("fine", (32, 30))[1])
        pso = PsoConfig(coarse=coarse, fine=fine)
    return Scenario(
        name=name,
        cell_size=cell_size,
        extent=extent,
        origin=origin,
        occupied_rects=occupied,
        regions=regions,
        objects=objects,
        robot_start=robot_start,
        robot_radius=robot_radius,
        sensor=SensorModel(**sensor_kw),
        outcomes=OutcomeModel(**outcome_kw),
        priors=priors,
        lambda_travel=lambda_travel,
        script=DisturbanceScript(events=tuple(events)),
        task=TaskSpec(task_obj=task_obj, task_container=task_container,
                      instruction_text=instruction),
        max_cycles=max_cycles,
        predicates=PredicateConfig(**pred_kw),
        recovery=RecoveryConfig(l1_retry_limit=retry_limit),
        pso=pso,
    )


def _parse_disturbance(lineno: int, parts: list[str]) -> Disturbance:
    if parts[0] == "at":
        if len(parts) < 3:
            raise _err(lineno, "expected: at CYCLE EFFECT ...")
        try:
            cycle = int(parts[1])
        except ValueError as exc:
            raise _err(lineno, f"bad cycle {parts[1]!r}") from exc
        trigger_cycle, trigger_phase = cycle, None
        rest = parts[2:]
    elif parts[0] == "after":
        if len(parts) < 3:
            raise _err(lineno, "expected: after PHASE EFFECT ...")
        if parts[1] not in PHASES:
            raise _err(lineno, f"unknown phase {parts[1]!r}; expected one of {PHASES}")
        trigger_cycle, trigger_phase = None, parts[1]
        rest = parts[2:]
    else:
        raise _err(lineno, f"expected 'at' or 'after', got {parts[0]!r}")
    effect = rest[0]
    if effect == "displace":
        if len(rest) != 4:
            raise _err(lineno, "expected: displace ID DX DY")
        dx, dy = _floats(lineno, rest[2:], 2)
        return Disturbance(trigger_cycle, trigger_phase, DisturbanceEffect.DISPLACE,
                           rest[1], vector=(dx, dy))
    if effect == "occlude":
        if len(rest) != 3:
            raise _err(lineno, "expected: occlude ID DURATION")
        return Disturbance(trigger_cycle, trigger_phase, DisturbanceEffect.OCCLUDE,
                           rest[1], duration=int(_floats(lineno, rest[2:], 1)[0]))
    if effect == "remove":
        if len(rest) != 2:
            raise _err(lineno, "expected: remove ID")
        return Disturbance(trigger_cycle, trigger_phase, DisturbanceEffect.REMOVE, rest[1])
    raise _err(lineno, f"unknown disturbance effect {effect!r}")


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    import os
    return parse_scenario(text, name=os.path.basename(path))

"""Deterministic 2.5D world simulator: occupancy grid with per-cell heights,
cone-and-raycast perception, frontier search, and the four action primitives.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import ndimage

from .alignment import (AlignmentObjectiveConfig, ChassisModel, PsoConfig,
                        refine_base_pose)
from .anchors import (ROBOT, AnchorStore, ObjectAnchor, PredicateConfig,
                      RobotAnchor, derive_state)
from .core import (BasePose, Box2, EEPose, Frame, Point3, PointCloud, RngSeed,
                   normalize_angle)
from .grasping import GraspCandidate, GraspScoreConfig, match_and_score, tilt_angle
from .recovery import Anomaly, AnomalyKind
from .reachability import DualEllipsoidShell

# Gripper current levels reported by the robot anchor (amperes).
GRIP_CURRENT_LOADED = 0.6
GRIP_CURRENT_EMPTY_CLOSED = 0.05

# Carried objects ride this far ahead of the base at this height.
CARRY_FORWARD = 0.30
CARRY_HEIGHT = 0.55

# A grasp closes on air when the anchor is further than this from the object.
GRASP_CAPTURE_RADIUS = 0.07

# Anchors are invalidated after this many consecutive expected-visible misses;
# a single dropout keeps the previous stability flag.
MISS_INVALIDATE = 2

# Position jump (m) between consecutive observations that flags a scene change.
SCENE_JUMP = 0.20


@dataclass(frozen=True)
class SensorModel:
    fov_radius: float = 2.2
    fov_halfangle: float = 1.05
    p_detect: float = 0.95
    position_noise_sigma: float = 0.02
    height: float = 0.35  # sensor z used for line-of-sight rays

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_detect <= 1.0):
            raise ValueError("p_detect must lie in [0, 1]")


@dataclass(frozen=True)
class OutcomeModel:
    p_grasp: float = 0.9
    p_grasp_misaligned: float = 0.3
    p_slip: float = 0.0
    place_clearance: float = 0.05


class DisturbanceEffect(Enum):
    DISPLACE = "displace"
    OCCLUDE = "occlude"
    REMOVE = "remove"


@dataclass(frozen=True)
class Disturbance:
    trigger_cycle: int | None  # exactly one of cycle/phase is set
    trigger_phase: str | None
    effect: DisturbanceEffect
    target: str
    vector: tuple[float, float] = (0.0, 0.0)  # displace only
    duration: int = 0  # occlude only


@dataclass(frozen=True)
class DisturbanceScript:
    events: tuple[Disturbance, ...] = ()


@dataclass
class FrontierBelief:
    """Per-region target-existence mass; guides frontier and re-scan choice."""

    region_belief: dict
    lambda_travel: float = 0.01
    priors: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if any(v < 0.0 for v in self.region_belief.values()):
            raise ValueError("beliefs must be non-negative")
        if sum(self.region_belief.values()) > 1.0 + 1e-9:
            raise ValueError("beliefs must sum to at most 1")
        if not self.priors:
            self.priors = dict(self.region_belief)

    def total(self) -> float:
        return sum(self.region_belief.values())

    def zero_region(self, region: str) -> None:
        if self.region_belief.get(region, 0.0) > 0.0:
            self.region_belief[region] = 0.0
            self._renormalize()

    def _renormalize(self) -> None:
        total = sum(self.region_belief.values())
        if total > 0.0:
            for k in self.region_belief:
                self.region_belief[k] /= total

    def reset_to_priors(self) -> None:
        self.region_belief = dict(self.priors)


class OccupancyGrid:
    """Static occupancy plus a per-cell height field; tracks what the robot has seen."""

    def __init__(self, width: int, height: int, cell_size: float,
                 origin: tuple[float, float] = (0.0, 0.0)):
        if width < 1 or height < 1 or cell_size <= 0.0:
            raise ValueError("grid dimensions must be positive")
        self.width = width
        self.height = height
        self.cell_size = cell_size
        self.origin = origin
        self.occupied = np.zeros((width, height), dtype=bool)
        self.cell_height = np.zeros((width, height))
        self.known = np.zeros((width, height), dtype=bool)

    def in_bounds(self, cell: tuple[int, int]) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (int(math.floor((x - self.origin[0]) / self.cell_size)),
                int(math.floor((y - self.origin[1]) / self.cell_size)))

    def center_of(self, cell: tuple[int, int]) -> tuple[float, float]:
        return (self.origin[0] + (cell[0] + 0.5) * self.cell_size,
                self.origin[1] + (cell[1] + 0.5) * self.cell_size)

    def mark_occupied_rect(self, x0: float, y0: float, x1: float, y1: float,
                           height: float) -> None:
        c0 = self.cell_of(min(x0, x1) + 1e-9, min(y0, y1) + 1e-9)
        c1 = self.cell_of(max(x0, x1) - 1e-9, max(y0, y1) - 1e-9)
        for ix in range(max(0, c0[0]), min(self.width, c1[0] + 1)):
            for iy in range(max(0, c0[1]), min(self.height, c1[1] + 1)):
                self.occupied[ix, iy] = True
                self.cell_height[ix, iy] = max(self.cell_height[ix, iy], height)

    def clearance_map(self, known_only: bool) -> np.ndarray:
        """Distance (m) from each cell center to the nearest blocked cell."""
        if known_only:
            blocked = self.occupied & self.known
        else:
            blocked = self.occupied
        if not blocked.any():
            return np.full((self.width, self.height), np.inf)
        return ndimage.distance_transform_edt(~blocked) * self.cell_size

    def line_blocked(self, x0: float, y0: float, z0: float,
                     x1: float, y1: float, z1: float) -> bool:
        """2.5D line-of-sight: blocked when an intermediate cell's height
        reaches the interpolated ray height."""
        start = self.cell_of(x0, y0)
        end = self.cell_of(x1, y1)
        dist = math.hypot(x1 - x0, y1 - y0)
        steps = max(1, int(dist / (self.cell_size * 0.5)))
        for i in range(1, steps):
            t = i / steps
            cell = self.cell_of(x0 + t * (x1 - x0), y0 + t * (y1 - y0))
            if cell == start or cell == end or not self.in_bounds(cell):
                continue
            if self.occupied[cell] and self.cell_height[cell] >= z0 + t * (z1 - z0) - 1e-9:
                return True
        return False


@dataclass
class SimObject:
    id: str
    position: Point3  # ground-truth pose (center)
    half_extents: tuple[float, float]
    region: str = ""
    graspable: bool = True
    container: bool = False
    surface_height: float | None = None  # z of the support surface for placing
    removed: bool = False

    def footprint(self) -> Box2:
        return Box2(self.position.x - self.half_extents[0],
                    self.position.y - self.half_extents[1],
                    self.position.x + self.half_extents[0],
                    self.position.y + self.half_extents[1])


class WorldState:
    """Ground truth owned by the executive loop; primitives mutate it."""

    def __init__(self, grid: OccupancyGrid, regions: dict, objects: dict,
                 robot: BasePose, robot_radius: float = 0.35):
        self.grid = grid
        self.regions = regions  # region id -> set of cells
        self.objects = objects  # id -> SimObject
        self.robot = robot
        self.robot_radius = robot_radius
        self.held: str | None = None
        self.gripper_closed = False
        self.cycle = 0
        self.perception_clock = 0  # advances once per perceive call
        self.occluded_until: dict = {}  # object id -> last occluded perception cycle
        self.fired_events: set = set()
        self.scanned_regions: set = set()
        self.recently_manipulated: set = set()  # robot-caused moves, no anomaly
        self._cell_regions = self._build_cell_regions()
        if not self._pose_clear(robot):
            raise ValueError("robot start pose collides with occupied cells")

    def _build_cell_regions(self) -> dict:
        out = {}
        for rid, cells in self.regions.items():
            for c in cells:
                out[c] = rid
        return out

    def region_of_cell(self, cell: tuple[int, int]) -> str | None:
        return self._cell_regions.get(cell)

    def _pose_clear(self, pose: BasePose) -> bool:
        clear = self.grid.clearance_map(known_only=False)
        cell = self.grid.cell_of(pose.x, pose.y)
        if not self.grid.in_bounds(cell):
            return False
        return bool(clear[cell] >= self.robot_radius)

    def set_robot(self, pose: BasePose) -> None:
        if not self._pose_clear(pose):
            raise ValueError(f"robot pose {pose} overlaps occupied space")
        self.robot = pose
        if self.held is not None:
            self._carry_held()

    def _carry_held(self) -> None:
        obj = self.objects[self.held]
        hx = self.robot.x + CARRY_FORWARD * math.cos(self.robot.theta)
        hy = self.robot.y + CARRY_FORWARD * math.sin(self.robot.theta)
        obj.position = Point3(hx, hy, CARRY_HEIGHT)


# --------------------------------------------------------------------------
# A* navigation
# --------------------------------------------------------------------------

_NEIGHBORS = ((1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
              (1, 1, math.sqrt(2)), (1, -1, math.sqrt(2)),
              (-1, 1, math.sqrt(2)), (-1, -1, math.sqrt(2)))


def traversable_mask(world: WorldState, known_only: bool = True) -> np.ndarray:
    """Cells the robot disk can occupy; unknown space is not traversable."""
    clear = world.grid.clearance_map(known_only=False)
    mask = clear >= world.robot_radius
    if known_only:
        mask &= world.grid.known
    return mask


def astar(world: WorldState, start: tuple[int, int], goal: tuple[int, int],
          mask: np.ndarray) -> list[tuple[int, int]] | None:
    """Octile-cost A* over traversable cells; deterministic tie-breaking."""
    if not world.grid.in_bounds(goal) or not mask[goal]:
        return None
    if start == goal:
        return [start]

    def h(c: tuple[int, int]) -> float:
        dx, dy = abs(c[0] - goal[0]), abs(c[1] - goal[1])
        return max(dx, dy) + (math.sqrt(2) - 1.0) * min(dx, dy)

    open_heap: list = [(h(start), 0.0, start)]
    g_score = {start: 0.0}
    came: dict = {}
    closed: set = set()
    while open_heap:
        _, g, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        if cur == goal:
            path = [cur]
            while cur in came:
                cur = came[cur]
                path.append(cur)
            return path[::-1]
        closed.add(cur)
        for dx, dy, cost in _NEIGHBORS:
            nxt = (cur[0] + dx, cur[1] + dy)
            if not world.grid.in_bounds(nxt) or not mask[nxt] or nxt in closed:
                continue
            ng = g + cost
            if ng < g_score.get(nxt, math.inf) - 1e-12:
                g_score[nxt] = ng
                came[nxt] = cur
                heapq.heappush(open_heap, (ng + h(nxt), ng, nxt))
    return None


def path_cost(path: list[tuple[int, int]]) -> float:
    cost = 0.0
    for a, b in zip(path, path[1:]):
        cost += math.hypot(b[0] - a[0], b[1] - a[1])
    return cost


def dijkstra_costs(world: WorldState, start: tuple[int, int],
                   mask: np.ndarray) -> dict:
    """Octile path cost from start to every reachable traversable cell."""
    costs = {start: 0.0}
    heap: list = [(0.0, start)]
    while heap:
        g, cur = heapq.heappop(heap)
        if g > costs.get(cur, math.inf) + 1e-12:
            continue
        for dx, dy, step in _NEIGHBORS:
            nxt = (cur[0] + dx, cur[1] + dy)
            if not world.grid.in_bounds(nxt) or not mask[nxt]:
                continue
            ng = g + step
            if ng < costs.get(nxt, math.inf) - 1e-12:
                costs[nxt] = ng
                heapq.heappush(heap, (ng, nxt))
    return costs


@dataclass(frozen=True)
class NavResult:
    arrived: bool
    slipped: bool = False


def navigate(world: WorldState, goal_cell: tuple[int, int], ocfg: OutcomeModel,
             rng: np.random.Generator, heading: float | None = None,
             mask: np.ndarray | None = None) -> NavResult:
    """Teleport the robot along an A* path; one slip check per carried leg."""
    if mask is None:
        mask = traversable_mask(world)
    start = world.grid.cell_of(world.robot.x, world.robot.y)
    path = astar(world, start, goal_cell, mask)
    if path is None:
        return NavResult(arrived=False)
    carrying = world.held is not None
    if carrying and len(path) > 1 and rng.random() < ocfg.p_slip:
        mid = path[len(path) // 2]
        x, y = world.grid.center_of(mid)
        held = world.held
        theta = _heading_along(path, len(path) // 2, world.robot.theta)
        world.robot = BasePose(x, y, theta)
        world.held = None
        world.gripper_closed = False
        obj = world.objects[held]
        obj.position = Point3(world.robot.x, world.robot.y, 0.0)
        world.recently_manipulated.add(held)  # the drop is self-explained
        return NavResult(arrived=False, slipped=True)
    x, y = world.grid.center_of(path[-1])
    theta = heading if heading is not None else _heading_along(path, len(path) - 1,
                                                               world.robot.theta)
    world.set_robot(BasePose(x, y, theta))
    return NavResult(arrived=True)


def _heading_along(path: list[tuple[int, int]], idx: int, fallback: float) -> float:
    if idx == 0 or len(path) < 2:
        return fallback
    a, b = path[idx - 1], path[idx]
    return math.atan2(b[1] - a[1], b[0] - a[0])


# --------------------------------------------------------------------------
# Perception
# --------------------------------------------------------------------------

def _in_fov(world: WorldState, sensor: SensorModel, x: float, y: float) -> bool:
    dx, dy = x - world.robot.x, y - world.robot.y
    if math.hypot(dx, dy) > sensor.fov_radius:
        return False
    return abs(normalize_angle(math.atan2(dy, dx) - world.robot.theta)) <= sensor.fov_halfangle


def _object_visible(world: WorldState, sensor: SensorModel, pos: Point3) -> bool:
    if not _in_fov(world, sensor, pos.x, pos.y):
        return False
    return not world.grid.line_blocked(world.robot.x, world.robot.y, sensor.height,
                                       pos.x, pos.y, pos.z)


def _anchor_for(obj: SimObject, observed: Point3, cycle: int,
                stable: bool) -> ObjectAnchor:
    hx, hy = obj.half_extents
    corners = (Point3(observed.x - hx, observed.y - hy, observed.z),
               Point3(observed.x - hx, observed.y + hy, observed.z),
               Point3(observed.x + hx, observed.y - hy, observed.z),
               Point3(observed.x + hx, observed.y + hy, observed.z))
    cloud = PointCloud(corners, Frame.WORLD)
    box = Box2(observed.x - hx, observed.y - hy, observed.x + hx, observed.y + hy)
    return ObjectAnchor(id=obj.id, expected_position=observed, cloud=cloud,
                        footprint_xy=box, stable_segmented=stable,
                        last_observed_cycle=cycle, miss_streak=0)


def update_known_space(world: WorldState, sensor: SensorModel) -> None:
    """Mark FoV-swept, line-of-sight-clear cells as known to the robot."""
    grid = world.grid
    r_cells = int(sensor.fov_radius / grid.cell_size) + 1
    cx, cy = grid.cell_of(world.robot.x, world.robot.y)
    for ix in range(max(0, cx - r_cells), min(grid.width, cx + r_cells + 1)):
        for iy in range(max(0, cy - r_cells), min(grid.height, cy + r_cells + 1)):
            if grid.known[ix, iy]:
                continue
            wx, wy = grid.center_of((ix, iy))
            if not _in_fov(world, sensor, wx, wy):
                continue
            target_z = grid.cell_height[ix, iy] if grid.occupied[ix, iy] else 0.05
            if not grid.line_blocked(world.robot.x, world.robot.y, sensor.height,
                                     wx, wy, target_z):
                grid.known[ix, iy] = True


def perceive(world: WorldState, sensor: SensorModel, store: AnchorStore,
             seed: RngSeed, beliefs: dict | None = None,
             ) -> tuple[AnchorStore, list[Anomaly]]:
    """One perception cycle: detect objects in the FoV cone with clear line of
    sight, write noisy anchors, age unseen anchors, and sweep known space.

    Anchor positions are smoothed over consecutive observations. Anchors
    missing at an expected-visible position for two consecutive cycles are
    invalidated (evidence of absence) and flagged as displaced; a large
    position jump between observations is reported as a scene change.
    """
    rng = seed.generator()
    cycle = store.cycle + 1
    world.perception_clock = cycle
    anomalies: list[Anomaly] = []
    update_known_space(world, sensor)
    objects: dict = {}
    for oid in sorted(world.objects):
        obj = world.objects[oid]
        prev = store.objects.get(oid)
        if obj.removed:
            visible = False
        elif world.held == oid:
            visible = True  # the gripper camera always sees the held object
        else:
            occluded = world.occluded_until.get(oid, -1) >= cycle
            visible = (_object_visible(world, sensor, obj.position)
                       and not occluded and rng.random() < sensor.p_detect)
        if visible:
            if world.held == oid:
                observed = obj.position
            else:
                noise = rng.normal(0.0, sensor.position_noise_sigma, size=2)
                observed = Point3(obj.position.x + noise[0], obj.position.y + noise[1],
                                  obj.position.z)
            stable = False
            if prev is not None and prev.last_observed_cycle is not None:
                gap = cycle - prev.last_observed_cycle
                drift = math.hypot(observed.x - prev.expected_position.x,
                                   observed.y - prev.expected_position.y)
                if drift >= SCENE_JUMP:
                    if oid not in world.recently_manipulated and world.held != oid:
                        anomalies.append(Anomaly(kind=AnomalyKind.SCENE_CHANGED,
                                                 detected_at_cycle=world.cycle,
                                                 evidence=f"{oid} moved {drift:.2f} m",
                                                 obj=oid))
                elif gap <= MISS_INVALIDATE:
                    # Exponential smoothing keeps consecutive anchor positions
                    # within the stability threshold despite detection noise.
                    observed = Point3(
                        prev.expected_position.x + 0.3 * (observed.x - prev.expected_position.x),
                        prev.expected_position.y + 0.3 * (observed.y - prev.expected_position.y),
                        observed.z)
                    smoothed_drift = math.hypot(observed.x - prev.expected_position.x,
                                                observed.y - prev.expected_position.y)
                    stable = smoothed_drift < 0.03
            if world.held == oid:
                stable = True
            objects[oid] = _anchor_for(obj, observed, cycle, stable)
        elif prev is not None and prev.last_observed_cycle is not None:
            if _object_visible(world, sensor, prev.expected_position):
                streak = prev.miss_streak + 1
                if streak >= MISS_INVALIDATE:
                    anomalies.append(Anomaly(kind=AnomalyKind.TARGET_DISPLACED,
                                             detected_at_cycle=world.cycle,
                                             evidence=f"{oid} missing at expected position",
                                             obj=oid))
                    continue  # anchor invalidated: drop it from the store
                objects[oid] = replace(prev, miss_streak=streak)
            else:
                objects[oid] = prev  # out of view: carry the stale anchor forward
    robot_anchor = RobotAnchor(
        chassis_pose=world.robot,
        gripper_closed=world.gripper_closed,
        gripper_current=(GRIP_CURRENT_LOADED if world.held is not None
                         else (GRIP_CURRENT_EMPTY_CLOSED if world.gripper_closed else 0.0)),
        roi_object_id=world.held,
    )
    world.recently_manipulated.clear()
    new_store = AnchorStore(robot=robot_anchor, objects=objects, cycle=cycle)
    if beliefs:
        for target, belief in beliefs.items():
            if any(a.obj == target and a.kind is AnomalyKind.TARGET_DISPLACED
                   for a in anomalies):
                # The world changed around the target: exhaustion evidence is stale.
                belief.reset_to_priors()
                world.scanned_regions.clear()
    return new_store, anomalies


# --------------------------------------------------------------------------
# Disturbances
# --------------------------------------------------------------------------

def apply_disturbances(world: WorldState, script: DisturbanceScript,
                       cycle: int | None = None,
                       phase: str | None = None) -> list[Disturbance]:
    """Fire all not-yet-fired events whose trigger matches; returns them."""
    applied = []
    for idx, ev in enumerate(script.events):
        if idx in world.fired_events:
            continue
        hit = ((cycle is not None and ev.trigger_cycle is not None
                and ev.trigger_cycle <= cycle)
               or (phase is not None and ev.trigger_phase == phase))
        if not hit:
            continue
        world.fired_events.add(idx)
        obj = world.objects.get(ev.target)
        if obj is None:
            continue
        if ev.effect is DisturbanceEffect.DISPLACE:
            if world.held == ev.target:
                continue  # cannot displace an object out of the gripper
            obj.position = Point3(obj.position.x + ev.vector[0],
                                  obj.position.y + ev.vector[1], obj.position.z)
        elif ev.effect is DisturbanceEffect.OCCLUDE:
            # Duration counts perception cycles, not executive cycles.
            world.occluded_until[ev.target] = world.perception_clock + ev.duration
        elif ev.effect is DisturbanceEffect.REMOVE:
            obj.removed = True
        applied.append(ev)
    return applied


# --------------------------------------------------------------------------
# Action primitives
# --------------------------------------------------------------------------

class FindOutcome(Enum):
    FOUND = "Found"
    EXHAUSTED = "Exhausted"
    SLIPPED = "Slipped"


class AlignOutcome(Enum):
    ALIGNED = "Aligned"
    FAILED = "Failed"
    SLIPPED = "Slipped"


class GraspOutcome(Enum):
    HOLDING = "Holding"
    EMPTY_GRASP = "EmptyGrasp"


class PlaceOutcome(Enum):
    PLACED = "Placed"
    PLACEMENT_MISS = "PlacementMiss"


def _frontier_cells(world: WorldState, mask: np.ndarray) -> list[tuple[int, int]]:
    grid = world.grid
    known_free = grid.known & ~grid.occupied & mask
    out = []
    for ix in range(grid.width):
        for iy in range(grid.height):
            if not known_free[ix, iy]:
                continue
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nx, ny = ix + dx, iy + dy
                if grid.in_bounds((nx, ny)) and not grid.known[nx, ny]:
                    out.append((ix, iy))
                    break
    return out


def _region_viewpoints(world: WorldState, belief: FrontierBelief,
                       mask: np.ndarray) -> list[tuple[tuple[int, int], str]]:
    """Re-scan targets for explored maps: the most central traversable cell of
    each positive-belief region not yet scanned this search episode."""
    out = []
    for rid in sorted(world.regions):
        if belief.region_belief.get(rid, 0.0) <= 0.0 or rid in world.scanned_regions:
            continue
        cells = [c for c in world.regions[rid] if world.grid.in_bounds(c) and mask[c]]
        if not cells:
            continue
        cx = sum(c[0] for c in cells) / len(cells)
        cy = sum(c[1] for c in cells) / len(cells)
        best = min(cells, key=lambda c: (abs(c[0] - cx) + abs(c[1] - cy), c))
        out.append((best, rid))
    return out


def primitive_obj_find(world: WorldState, sensor: SensorModel, store: AnchorStore,
                       belief: FrontierBelief, target: str, pcfg: PredicateConfig,
                       ocfg: OutcomeModel, seed: RngSeed,
                       max_iters: int = 80) -> tuple[FindOutcome, AnchorStore, list[Anomaly]]:
    """Closed-loop perceive-update-navigate search for the target anchor.

    Frontier cells (and, once the map is explored, per-region re-scan
    viewpoints) are scored by region belief minus travel cost; the loop stops
    when the target anchor stabilizes, ending within near range of it, or when
    evidence is exhausted (no frontier left and every region belief at zero).
    """
    rng = seed.derive("nav").generator()
    beliefs = {target: belief}
    anomalies: list[Anomaly] = []
    world.scanned_regions.clear()
    for it in range(max_iters):
        store, anoms = perceive(world, sensor, store, seed.derive("perceive", it),
                                beliefs=beliefs)
        anomalies.extend(anoms)
        anchor = store.objects.get(target)
        if anchor is not None and anchor.last_observed_cycle is not None:
            if not anchor.stable_segmented:
                # Sighted but not yet stable: face the anchor and re-observe.
                world.set_robot(BasePose(world.robot.x, world.robot.y,
                                         math.atan2(anchor.expected_position.y - world.robot.y,
                                                    anchor.expected_position.x - world.robot.x)))
                continue
            dist = math.hypot(world.robot.x - anchor.expected_position.x,
                              world.robot.y - anchor.expected_position.y)
            if dist > pcfg.eps_near:
                nav = _approach(world, anchor.expected_position, pcfg.eps_near * 0.85,
                                ocfg, rng)
                if nav is not None and nav.slipped:
                    return FindOutcome.SLIPPED, store, anomalies
                store, anoms = perceive(world, sensor, store,
                                        seed.derive("arrive", it), beliefs=beliefs)
                anomalies.extend(anoms)
                anchor = store.objects.get(target)
                if anchor is None or anchor.last_observed_cycle is None:
                    continue
            world.scanned_regions.clear()
            return FindOutcome.FOUND, store, anomalies
        mask = traversable_mask(world)
        frontiers = [(c, world.region_of_cell(c)) for c in _frontier_cells(world, mask)]
        candidates = frontiers if frontiers else _region_viewpoints(world, belief, mask)
        if not candidates or belief.total() <= 0.0:
            return FindOutcome.EXHAUSTED, store, anomalies
        start = world.grid.cell_of(world.robot.x, world.robot.y)
        costs = dijkstra_costs(world, start, mask)
        best = None
        best_score = -math.inf
        for cell, rid in candidates:
            cost = costs.get(cell)
            if cost is None:
                continue
            mass = belief.region_belief.get(rid, 0.0) if rid else 0.0
            score = mass - belief.lambda_travel * cost
            if score > best_score + 1e-12 or (abs(score - best_score) <= 1e-12
                                              and (best is None or cell < best[0])):
                best_score = score
                best = (cell, rid)
        if best is None:
            return FindOutcome.EXHAUSTED, store, anomalies
        nav = navigate(world, best[0], ocfg, rng)
        if nav.slipped:
            return FindOutcome.SLIPPED, store, anomalies
        if best[0] == start:
            # Already standing on the best frontier: face its unknown side so
            # the next sweep actually consumes it.
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nb = (best[0][0] + dx, best[0][1] + dy)
                if world.grid.in_bounds(nb) and not world.grid.known[nb]:
                    wx, wy = world.grid.center_of(nb)
                    world.set_robot(BasePose(world.robot.x, world.robot.y,
                                             math.atan2(wy - world.robot.y,
                                                        wx - world.robot.x)))
                    break
        if not frontiers and best[1]:
            # Viewpoint re-scan: two full in-place sweeps, then write the
            # region off unless the target shows up. Beliefs hit zero only
            # through these explicit sweeps, so one missed detection during
            # passive exploration cannot exhaust the search.
            world.scanned_regions.add(best[1])
            n_headings = max(3, math.ceil(math.pi / sensor.fov_halfangle))
            base_heading = world.robot.theta
            for k in range(2 * n_headings):
                heading = base_heading + (k % n_headings) * 2.0 * math.pi / n_headings
                world.set_robot(BasePose(world.robot.x, world.robot.y,
                                         normalize_angle(heading)))
                store, anoms = perceive(world, sensor, store,
                                        seed.derive("scan", it, k), beliefs=beliefs)
                anomalies.extend(anoms)
                anchor = store.objects.get(target)
                if anchor is not None and anchor.last_observed_cycle is not None:
                    break
            if anchor is None or anchor.last_observed_cycle is None:
                belief.zero_region(best[1])
    return FindOutcome.EXHAUSTED, store, anomalies


def _approach(world: WorldState, target: Point3, stop_range: float,
              ocfg: OutcomeModel, rng: np.random.Generator) -> NavResult | None:
    """Navigate to a traversable cell about stop_range from the target, facing it.

    A robot already inside stop_range just turns in place."""
    cur_dist = math.hypot(world.robot.x - target.x, world.robot.y - target.y)
    if cur_dist <= stop_range:
        world.set_robot(BasePose(world.robot.x, world.robot.y,
                                 math.atan2(target.y - world.robot.y,
                                            target.x - world.robot.x)))
        return NavResult(arrived=True)
    mask = traversable_mask(world)
    grid = world.grid
    best = None
    best_err = math.inf
    r_cells = int((stop_range + 0.6) / grid.cell_size) + 1
    tc = grid.cell_of(target.x, target.y)
    for ix in range(max(0, tc[0] - r_cells), min(grid.width, tc[0] + r_cells + 1)):
        for iy in range(max(0, tc[1] - r_cells), min(grid.height, tc[1] + r_cells + 1)):
            if not mask[ix, iy]:
                continue
            wx, wy = grid.center_of((ix, iy))
            err = abs(math.hypot(wx - target.x, wy - target.y) - stop_range)
            if err < best_err - 1e-12:
                best_err = err
                best = (ix, iy)
    if best is None:
        return None
    bx, by = grid.center_of(best)
    heading = math.atan2(target.y - by, target.x - bx)
    return navigate(world, best, ocfg, rng, heading=heading, mask=mask)


def obstacle_cloud(world: WorldState, around: Point3, radius: float = 1.6) -> PointCloud:
    """Occupied cells near a point lifted into 3D via the per-cell height field."""
    grid = world.grid
    pts: list[Point3] = []
    c = grid.cell_of(around.x, around.y)
    r_cells = int(radius / grid.cell_size) + 1
    z_step = grid.cell_size * 1.5
    for ix in range(max(0, c[0] - r_cells), min(grid.width, c[0] + r_cells + 1)):
        for iy in range(max(0, c[1] - r_cells), min(grid.height, c[1] + r_cells + 1)):
            if not grid.occupied[ix, iy]:
                continue
            wx, wy = grid.center_of((ix, iy))
            if math.hypot(wx - around.x, wy - around.y) > radius:
                continue
            h = grid.cell_height[ix, iy]
            z = z_step * 0.5
            while z < h + z_step * 0.25:
                pts.append(Point3(wx, wy, min(z, h)))
                z += z_step
    return PointCloud(tuple(pts), Frame.WORLD)


@dataclass(frozen=True)
class AlignSetup:
    shell: DualEllipsoidShell
    chassis: ChassisModel
    objective: AlignmentObjectiveConfig
    pso: PsoConfig
    arm_mount: Point3


def _ee_target_for(anchor_pos: Point3, robot: BasePose) -> EEPose:
    """Grasp target pose: approach from the robot's side, tilted down."""
    dx, dy = anchor_pos.x - robot.x, anchor_pos.y - robot.y
    n = math.hypot(dx, dy)
    ux, uy = (dx / n, dy / n) if n > 1e-9 else (1.0, 0.0)
    tilt = math.radians(40.0)
    return EEPose(anchor_pos, (ux * math.cos(tilt), uy * math.cos(tilt), -math.sin(tilt)))


def primitive_align(world: WorldState, sensor: SensorModel, store: AnchorStore,
                    target: str, setup: AlignSetup, pcfg: PredicateConfig,
                    ocfg: OutcomeModel, seed: RngSeed,
                    skip_refinement: bool = False,
                    ) -> tuple[AlignOutcome, AnchorStore, list[Anomaly]]:
    """Refine the base pose for operability, move there, and confirm by
    re-anchoring; succeeds only when the aligned predicate actually holds.

    With skip_refinement the robot just stops at eps_near range facing the
    target (the arrived-but-inoperable baseline behavior).
    """
    rng = seed.derive("nav").generator()
    anchor = store.objects.get(target)
    if anchor is None or anchor.last_observed_cycle is None:
        return AlignOutcome.FAILED, store, [Anomaly(kind=AnomalyKind.TARGET_DISPLACED,
                                                    detected_at_cycle=world.cycle,
                                                    evidence=f"no anchor for {target}",
                                                    obj=target)]
    anomalies: list[Anomaly] = []
    if skip_refinement:
        nav = _approach(world, anchor.expected_position, pcfg.eps_near, ocfg, rng)
        if nav is not None and nav.slipped:
            return AlignOutcome.SLIPPED, store, anomalies
    else:
        ee_target = _ee_target_for(anchor.expected_position, world.robot)
        cloud = obstacle_cloud(world, anchor.expected_position)
        result = refine_base_pose(ee_target, setup.shell, cloud, setup.chassis,
                                  setup.objective, setup.pso, seed.derive("pso"))
        if not result.feasible:
            return AlignOutcome.FAILED, store, [Anomaly(kind=AnomalyKind.UNREACHABLE,
                                                        detected_at_cycle=world.cycle,
                                                        evidence="no operable base pose",
                                                        obj=target)]
        mask = traversable_mask(world)
        goal_cell = _nearest_traversable(world, result.pose, mask)
        if goal_cell is None:
            # Retryable: the next attempt reruns the swarm with a fresh seed.
            return AlignOutcome.FAILED, store, [Anomaly(kind=AnomalyKind.SCENE_CHANGED,
                                                        detected_at_cycle=world.cycle,
                                                        evidence="refined pose not navigable",
                                                        obj=target)]
        # Arrive facing the anchor so the wrist camera keeps it in view; the
        # swarm's heading preference already chose which side to stand on.
        gx, gy = world.grid.center_of(goal_cell)
        face = math.atan2(anchor.expected_position.y - gy,
                          anchor.expected_position.x - gx)
        nav = navigate(world, goal_cell, ocfg, rng, heading=face, mask=mask)
        if nav.slipped:
            return AlignOutcome.SLIPPED, store, anomalies
        if not nav.arrived:
            return AlignOutcome.FAILED, store, [Anomaly(kind=AnomalyKind.SCENE_CHANGED,
                                                        detected_at_cycle=world.cycle,
                                                        evidence="no path to refined pose",
                                                        obj=target)]
    store, anoms = perceive(world, sensor, store, seed.derive("confirm"))
    anomalies.extend(anoms)
    state = derive_state(store, pcfg, setup.shell)
    if ("aligned", ROBOT, target) in state:
        return AlignOutcome.ALIGNED, store, anomalies
    return AlignOutcome.FAILED, store, anomalies


def _nearest_traversable(world: WorldState, pose: BasePose,
                         mask: np.ndarray) -> tuple[int, int] | None:
    grid = world.grid
    cell = grid.cell_of(pose.x, pose.y)
    best = None
    best_d = math.inf
    for ix in range(max(0, cell[0] - 3), min(grid.width, cell[0] + 4)):
        for iy in range(max(0, cell[1] - 3), min(grid.height, cell[1] + 4)):
            if not mask[ix, iy]:
                continue
            wx, wy = grid.center_of((ix, iy))
            d = math.hypot(wx - pose.x, wy - pose.y)
            if d < best_d - 1e-12:
                best_d = d
                best = (ix, iy)
    if best is not None and best_d <= 0.30:
        return best
    return None


def _synthetic_candidates(anchor_pos: Point3, rng: np.random.Generator,
                          frame_index: int, count: int = 5) -> list[GraspCandidate]:
    out = []
    for _ in range(count):
        jitter = rng.normal(0.0, 0.005, size=3)
        tilt = abs(rng.normal(0.0, math.radians(6.0)))
        azim = rng.uniform(-math.pi, math.pi)
        approach = (math.sin(tilt) * math.cos(azim), math.sin(tilt) * math.sin(azim),
                    -math.cos(tilt))
        pos = Point3(anchor_pos.x + jitter[0], anchor_pos.y + jitter[1],
                     anchor_pos.z + jitter[2])
        out.append(GraspCandidate(pose=EEPose(pos, approach),
                                  confidence=float(rng.uniform(0.65, 0.99)),
                                  frame_index=frame_index))
    return out


def primitive_grasp(world: WorldState, sensor: SensorModel, store: AnchorStore,
                    target: str, setup: AlignSetup, gcfg: GraspScoreConfig,
                    ocfg: OutcomeModel, seed: RngSeed,
                    ) -> tuple[GraspOutcome, AnchorStore, list[Anomaly]]:
    """Score synthetic two-frame grasp candidates and attempt the grasp.

    Success probability is p_grasp when the target truly sits in the shell
    from the current base pose and the chosen candidate passes the tilt
    filter, p_grasp_misaligned otherwise. A stale anchor (object moved away)
    closes on air deterministically.
    """
    rng = seed.generator()
    store, anoms = perceive(world, sensor, store, seed.derive("pre"))
    anomalies = list(anoms)
    anchor = store.objects.get(target)
    obj = world.objects.get(target)
    if anchor is None or anchor.last_observed_cycle is None or obj is None or obj.removed:
        world.gripper_closed = True
        return GraspOutcome.EMPTY_GRASP, store, anomalies
    frame_prev = _synthetic_candidates(anchor.expected_position, rng, frame_index=0)
    frame_t = _synthetic_candidates(anchor.expected_position, rng, frame_index=1)
    ranked = match_and_score(frame_t, frame_prev, gcfg)
    if not ranked:
        world.gripper_closed = True
        return GraspOutcome.EMPTY_GRASP, store, anomalies
    top = ranked[0][0][0]
    stale = math.hypot(anchor.expected_position.x - obj.position.x,
                       anchor.expected_position.y - obj.position.y) > GRASP_CAPTURE_RADIUS
    if stale:
        # Closing on air at the expected position is direct evidence the
        # object is no longer there, even when the spot is outside the FoV.
        world.gripper_closed = True
        streak = anchor.miss_streak + 1
        objects = dict(store.objects)
        if streak >= MISS_INVALIDATE:
            del objects[target]
            anomalies.append(Anomaly(kind=AnomalyKind.TARGET_DISPLACED,
                                     detected_at_cycle=world.cycle,
                                     evidence=f"{target} absent at grasp pose",
                                     obj=target))
        else:
            objects[target] = replace(anchor, miss_streak=streak)
        store = store.with_objects(objects)
        return GraspOutcome.EMPTY_GRASP, store, anomalies
    local = _world_point_in_base(world.robot, obj.position)
    physically_aligned = setup.shell.contains(local)
    tilt_ok = tilt_angle(top) <= gcfg.tilt_tolerance
    p = ocfg.p_grasp if (physically_aligned and tilt_ok) else ocfg.p_grasp_misaligned
    world.gripper_closed = True
    if rng.random() < p:
        world.held = target
        world._carry_held()
        world.recently_manipulated.add(target)
        store, anoms = perceive(world, sensor, store, seed.derive("post"))
        anomalies.extend(anoms)
        return GraspOutcome.HOLDING, store, anomalies
    return GraspOutcome.EMPTY_GRASP, store, anomalies


def _world_point_in_base(robot: BasePose, p: Point3) -> Point3:
    c, s = math.cos(robot.theta), math.sin(robot.theta)
    dx, dy = p.x - robot.x, p.y - robot.y
    return Point3(c * dx + s * dy, -s * dx + c * dy, p.z)


def primitive_place(world: WorldState, sensor: SensorModel, store: AnchorStore,
                    obj_id: str, container_id: str, setup: AlignSetup,
                    pcfg: PredicateConfig, ocfg: OutcomeModel, seed: RngSeed,
                    ) -> tuple[PlaceOutcome, AnchorStore, list[Anomaly]]:
    """Release the held object at the anchored container centroid and confirm
    containment by re-anchoring. Stale container anchors miss."""
    store, anoms = perceive(world, sensor, store, seed.derive("pre"))
    anomalies = list(anoms)
    container = store.objects.get(container_id)
    if world.held != obj_id or container is None or container.last_observed_cycle is None:
        return PlaceOutcome.PLACEMENT_MISS, store, anomalies
    drop = container.footprint_xy.center()
    sim_container = world.objects.get(container_id)
    surface = 0.0
    if sim_container is not None and not sim_container.removed:
        surface = (sim_container.surface_height if sim_container.surface_height is not None
                   else sim_container.position.z)
    world.held = None
    world.gripper_closed = False
    obj = world.objects[obj_id]
    # Drop from surface + clearance; the object settles onto the surface.
    obj.position = Point3(float(drop[0]), float(drop[1]), surface)
    world.recently_manipulated.add(obj_id)
    store, anoms = perceive(world, sensor, store, seed.derive("post"))
    anomalies.extend(anoms)
    state = derive_state(store, pcfg, setup.shell)
    if ("in", obj_id, container_id) in state:
        return PlaceOutcome.PLACED, store, anomalies
    return PlaceOutcome.PLACEMENT_MISS, store, anomalies

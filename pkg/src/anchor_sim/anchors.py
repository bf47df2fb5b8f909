"""Physical anchor store and deterministic predicate grounding.

Anchors are sensor-derived evidence records; the symbolic state is re-derived
from them every cycle, so no predicate outlives its physical evidence.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

from .core import BasePose, Box2, Point3, PointCloud, world_to_base
from .reachability import DualEllipsoidShell

ROBOT = "robot"

Predicate = tuple[str, ...]
SymbolicState = frozenset  # frozenset[Predicate]


@dataclass(frozen=True)
class PredicateConfig:
    eps_near: float = 1.0
    eps_in: float = 0.6
    grip_load_threshold: float = 0.3  # amperes confirming a loaded grasp

    def __post_init__(self) -> None:
        if self.eps_near <= 0.0:
            raise ValueError("eps_near must be positive")
        if not (0.0 < self.eps_in <= 1.0):
            raise ValueError("eps_in must lie in (0, 1]")


@dataclass(frozen=True)
class RobotAnchor:
    chassis_pose: BasePose
    gripper_closed: bool = False
    gripper_current: float = 0.0
    roi_object_id: str | None = None  # object confirmed in the gripper ROI

    def __post_init__(self) -> None:
        if self.gripper_current < 0.0:
            raise ValueError("gripper_current must be non-negative")

    @property
    def gripper_roi_object_visible(self) -> bool:
        return self.roi_object_id is not None


@dataclass(frozen=True)
class ObjectAnchor:
    id: str
    expected_position: Point3
    cloud: PointCloud
    footprint_xy: Box2
    stable_segmented: bool = False
    last_observed_cycle: int | None = None
    miss_streak: int = 0  # consecutive expected-visible misses

    def __post_init__(self) -> None:
        if not self.cloud.is_empty:
            bbox = Box2.from_points(self.cloud.xyz[:, :2])
            if (abs(bbox.min_x - self.footprint_xy.min_x) > 1e-9
                    or abs(bbox.min_y - self.footprint_xy.min_y) > 1e-9
                    or abs(bbox.max_x - self.footprint_xy.max_x) > 1e-9
                    or abs(bbox.max_y - self.footprint_xy.max_y) > 1e-9):
                raise ValueError("footprint_xy must be the xy bounding box of the cloud")


@dataclass(frozen=True)
class AnchorStore:
    robot: RobotAnchor
    objects: dict = field(default_factory=dict)  # id -> ObjectAnchor
    cycle: int = 0

    def __post_init__(self) -> None:
        for oid, anchor in self.objects.items():
            if anchor.id != oid:
                raise ValueError(f"object anchor id mismatch: {oid!r} vs {anchor.id!r}")

    def with_objects(self, objects: dict) -> "AnchorStore":
        return replace(self, objects=dict(objects))


def overlap_ratio(obj_box: Box2, container_box: Box2) -> float:
    """Planar containment evidence: area(obj ∩ container) / area(obj)."""
    area = obj_box.area()
    if area <= 0.0:
        raise ValueError("object box has zero area (degenerate segmentation)")
    return obj_box.intersection_area(container_box) / area


def _planar_distance(pose: BasePose, p: Point3) -> float:
    return math.hypot(pose.x - p.x, pose.y - p.y)


def derive_state(store: AnchorStore, cfg: PredicateConfig,
                 shell: DualEllipsoidShell) -> SymbolicState:
    """Ground the predicate set from the anchor store.

    Missing or degenerate anchors make predicates false, never raise. The
    aligned predicate is a conjunction that includes near, so the
    aligned => near axiom holds for every derivable state.
    """
    preds: set[Predicate] = set()
    robot = store.robot
    for oid in sorted(store.objects):
        anchor = store.objects[oid]
        if anchor.last_observed_cycle is not None:
            preds.add(("found", oid))
        near = _planar_distance(robot.chassis_pose, anchor.expected_position) <= cfg.eps_near
        if near:
            preds.add(("near", ROBOT, oid))
        if near and anchor.stable_segmented and anchor.last_observed_cycle is not None:
            local = world_to_base(robot.chassis_pose, anchor.expected_position)
            if shell.contains(local):
                preds.add(("aligned", ROBOT, oid))
    if (robot.gripper_closed and robot.gripper_current >= cfg.grip_load_threshold
            and robot.roi_object_id is not None and robot.roi_object_id in store.objects):
        preds.add(("holding", ROBOT, robot.roi_object_id))
    ids = sorted(store.objects)
    for oid in ids:
        for cid in ids:
            if oid == cid:
                continue
            o, c = store.objects[oid], store.objects[cid]
            if o.cloud.is_empty or c.cloud.is_empty:
                continue
            if o.footprint_xy.area() <= 0.0:
                continue
            if overlap_ratio(o.footprint_xy, c.footprint_xy) >= cfg.eps_in:
                preds.add(("in", oid, cid))
    return frozenset(preds)


def state_holds(state: SymbolicState, pred: Predicate) -> bool:
    return pred in state


def format_state(state: SymbolicState) -> str:
    return " ".join("(" + " ".join(p) + ")" for p in sorted(state))


# --------------------------------------------------------------------------
# Line-oriented snapshot serialization (one record per perception cycle)
# --------------------------------------------------------------------------

def store_to_record(store: AnchorStore) -> dict:
    rec = {
        "cycle": store.cycle,
        "robot": {
            "pose": [store.robot.chassis_pose.x, store.robot.chassis_pose.y,
                     store.robot.chassis_pose.theta],
            "gripper_closed": store.robot.gripper_closed,
            "gripper_current": store.robot.gripper_current,
            "roi_object_id": store.robot.roi_object_id,
        },
        "objects": {},
    }
    for oid in sorted(store.objects):
        a = store.objects[oid]
        rec["objects"][oid] = {
            "position": [a.expected_position.x, a.expected_position.y, a.expected_position.z],
            "footprint": [a.footprint_xy.min_x, a.footprint_xy.min_y,
                          a.footprint_xy.max_x, a.footprint_xy.max_y],
            "cloud_nonempty": not a.cloud.is_empty,
            "stable": a.stable_segmented,
            "last_observed_cycle": a.last_observed_cycle,
            "miss_streak": a.miss_streak,
        }
    return rec


def store_from_record(rec: dict) -> AnchorStore:
    """Rebuild a store snapshot; clouds are reconstructed as footprint corners,
    which preserves every quantity derive_state reads."""
    r = rec["robot"]
    robot = RobotAnchor(chassis_pose=BasePose(*r["pose"]),
                        gripper_closed=r["gripper_closed"],
                        gripper_current=r["gripper_current"],
                        roi_object_id=r["roi_object_id"])
    objects = {}
    for oid, o in rec["objects"].items():
        box = Box2(*o["footprint"])
        z = o["position"][2]
        cloud = PointCloud(())
        if o["cloud_nonempty"]:
            cloud = PointCloud((Point3(box.min_x, box.min_y, z),
                                Point3(box.min_x, box.max_y, z),
                                Point3(box.max_x, box.min_y, z),
                                Point3(box.max_x, box.max_y, z)))
        objects[oid] = ObjectAnchor(id=oid, expected_position=Point3(*o["position"]),
                                    cloud=cloud, footprint_xy=box,
                                    stable_segmented=o["stable"],
                                    last_observed_cycle=o["last_observed_cycle"],
                                    miss_streak=o.get("miss_streak", 0))
    return AnchorStore(robot=robot, objects=objects, cycle=rec["cycle"])


def store_to_line(store: AnchorStore) -> str:
    return json.dumps(store_to_record(store), sort_keys=True, separators=(",", ":"))


def store_from_line(line: str) -> AnchorStore:
    return store_from_record(json.loads(line))

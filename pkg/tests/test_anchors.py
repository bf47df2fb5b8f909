from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from anchor_sim.anchors import (ROBOT, AnchorStore, Box2, ObjectAnchor,
                                PredicateConfig, RobotAnchor, derive_state,
                                overlap_ratio, store_from_line, store_to_line)
from anchor_sim.core import BasePose, Frame, Point3, PointCloud


def _object_anchor(oid, x, y, z=0.5, half=0.05, stable=True, observed=1):
    cloud = PointCloud((Point3(x - half, y - half, z), Point3(x - half, y + half, z),
                        Point3(x + half, y - half, z), Point3(x + half, y + half, z)),
                       Frame.WORLD)
    return ObjectAnchor(id=oid, expected_position=Point3(x, y, z), cloud=cloud,
                        footprint_xy=Box2(x - half, y - half, x + half, y + half),
                        stable_segmented=stable, last_observed_cycle=observed)


def _store(robot_pose=BasePose(0, 0, 0), objects=None, **robot_kw):
    return AnchorStore(robot=RobotAnchor(chassis_pose=robot_pose, **robot_kw),
                       objects=objects or {}, cycle=1)


# -- overlap ratio ---------------------------------------------------------------

def test_overlap_full_containment():
    assert overlap_ratio(Box2(0, 0, 1, 1), Box2(-1, -1, 2, 2)) == pytest.approx(1.0)


def test_overlap_disjoint():
    assert overlap_ratio(Box2(0, 0, 1, 1), Box2(5, 5, 6, 6)) == 0.0


def test_overlap_half():
    assert overlap_ratio(Box2(0, 0, 1, 1), Box2(0.5, 0, 2, 1)) == pytest.approx(0.5, abs=1e-9)


def test_overlap_zero_area_object_raises():
    with pytest.raises(ValueError):
        overlap_ratio(Box2(0, 0, 0, 1), Box2(0, 0, 1, 1))


# -- predicate derivation ---------------------------------------------------------

def test_near_from_planar_distance(sim_shell):
    cfg = PredicateConfig(eps_near=1.0)
    store = _store(objects={"cup": _object_anchor("cup", 0.3, 0.0)})
    state = derive_state(store, cfg, sim_shell)
    assert ("near", ROBOT, "cup") in state
    far = _store(objects={"cup": _object_anchor("cup", 3.0, 0.0)})
    assert ("near", ROBOT, "cup") not in derive_state(far, cfg, sim_shell)


def test_found_requires_observation(sim_shell):
    cfg = PredicateConfig()
    seen = _store(objects={"cup": _object_anchor("cup", 0.5, 0.0, observed=3)})
    assert ("found", "cup") in derive_state(seen, cfg, sim_shell)
    unseen = _store(objects={"cup": _object_anchor("cup", 0.5, 0.0, observed=None)})
    assert ("found", "cup") not in derive_state(unseen, cfg, sim_shell)


def test_aligned_requires_shell_membership(sim_shell):
    cfg = PredicateConfig()
    # in the operable band of the fitted sim shell (probed in conftest terms)
    inside = _store(objects={"cup": _object_anchor("cup", 0.55, 0.0, z=0.5)})
    state = derive_state(inside, cfg, sim_shell)
    assert ("aligned", ROBOT, "cup") in state
    # near but way outside the shell
    outside = _store(objects={"cup": _object_anchor("cup", 0.95, 0.0, z=0.5)})
    assert ("aligned", ROBOT, "cup") not in derive_state(outside, cfg, sim_shell)


def test_aligned_requires_stability(sim_shell):
    cfg = PredicateConfig()
    store = _store(objects={"cup": _object_anchor("cup", 0.55, 0.0, stable=False)})
    state = derive_state(store, cfg, sim_shell)
    assert ("aligned", ROBOT, "cup") not in state
    assert ("near", ROBOT, "cup") in state


def test_holding_requires_loaded_closed_gripper(sim_shell):
    cfg = PredicateConfig()
    objects = {"cup": _object_anchor("cup", 0.3, 0.0)}
    loaded = _store(objects=objects, gripper_closed=True, gripper_current=0.6,
                    roi_object_id="cup")
    assert ("holding", ROBOT, "cup") in derive_state(loaded, cfg, sim_shell)
    # closed with zero current: an empty grasp, not a hold
    empty = _store(objects=objects, gripper_closed=True, gripper_current=0.0,
                   roi_object_id="cup")
    assert ("holding", ROBOT, "cup") not in derive_state(empty, cfg, sim_shell)
    open_grip = _store(objects=objects, gripper_closed=False, gripper_current=0.6,
                       roi_object_id="cup")
    assert ("holding", ROBOT, "cup") not in derive_state(open_grip, cfg, sim_shell)
    no_roi = _store(objects=objects, gripper_closed=True, gripper_current=0.6)
    assert ("holding", ROBOT, "cup") not in derive_state(no_roi, cfg, sim_shell)


def test_in_predicate_from_overlap(sim_shell):
    cfg = PredicateConfig(eps_in=0.6)
    objects = {
        "cup": _object_anchor("cup", 1.0, 1.0, half=0.04),
        "bowl": _object_anchor("bowl", 1.0, 1.0, half=0.12),
    }
    state = derive_state(_store(objects=objects), cfg, sim_shell)
    assert ("in", "cup", "bowl") in state
    # the bowl is not inside the cup: ratio area(bowl ∩ cup)/area(bowl) < 0.6
    assert ("in", "bowl", "cup") not in state


def test_in_requires_nonempty_clouds(sim_shell):
    cfg = PredicateConfig()
    a = _object_anchor("cup", 1.0, 1.0, half=0.04)
    b = ObjectAnchor(id="bowl", expected_position=Point3(1.0, 1.0, 0.5),
                     cloud=PointCloud(()), footprint_xy=Box2(0.9, 0.9, 1.1, 1.1),
                     stable_segmented=True, last_observed_cycle=1)
    state = derive_state(_store(objects={"cup": a, "bowl": b}), cfg, sim_shell)
    assert ("in", "cup", "bowl") not in state


def test_derive_state_pure(sim_shell):
    cfg = PredicateConfig()
    store = _store(objects={"cup": _object_anchor("cup", 0.5, 0.1)})
    assert derive_state(store, cfg, sim_shell) == derive_state(store, cfg, sim_shell)


def test_monotone_evidence(sim_shell):
    cfg = PredicateConfig()
    objects = {"cup": _object_anchor("cup", 0.5, 0.1),
               "bowl": _object_anchor("bowl", 0.6, 0.2, half=0.12)}
    full = derive_state(_store(objects=objects), cfg, sim_shell)
    reduced = derive_state(_store(objects={"bowl": objects["bowl"]}), cfg, sim_shell)
    for pred in reduced:
        if "cup" in pred:
            pytest.fail(f"predicate about removed anchor: {pred}")
    assert all(p in full or "cup" in p for p in reduced)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_axiom_on_random_stores(sim_shell, data):
    cfg = PredicateConfig()
    rng_vals = data.draw(st.lists(st.floats(-2, 2), min_size=8, max_size=8))
    rx, ry, rt, ox, oy, oz, bx, by = rng_vals
    objects = {
        "a": _object_anchor("a", ox, oy, z=abs(oz),
                            stable=data.draw(st.booleans()),
                            observed=data.draw(st.sampled_from([None, 1, 2]))),
        "b": _object_anchor("b", bx, by, half=0.1,
                            stable=data.draw(st.booleans()),
                            observed=data.draw(st.sampled_from([None, 1, 2]))),
    }
    store = _store(BasePose(rx, ry, rt), objects=objects,
                   gripper_closed=data.draw(st.booleans()),
                   gripper_current=data.draw(st.floats(0, 1)),
                   roi_object_id=data.draw(st.sampled_from([None, "a", "b"])))
    state = derive_state(store, cfg, sim_shell)
    for pred in state:
        if pred[0] == "aligned":
            assert ("near", pred[1], pred[2]) in state
    holders = [p for p in state if p[0] == "holding"]
    assert len(holders) <= 1


# -- serialization -----------------------------------------------------------------

def test_store_line_round_trip(sim_shell):
    cfg = PredicateConfig()
    store = _store(BasePose(0.2, -0.4, 1.1),
                   objects={"cup": _object_anchor("cup", 0.5, 0.1),
                            "bowl": _object_anchor("bowl", 0.7, 0.2, half=0.12)},
                   gripper_closed=True, gripper_current=0.6, roi_object_id="cup")
    line = store_to_line(store)
    assert "\n" not in line
    restored = store_from_line(line)
    assert derive_state(restored, cfg, sim_shell) == derive_state(store, cfg, sim_shell)
    assert store_to_line(restored) == line


def test_anchor_footprint_must_match_cloud():
    cloud = PointCloud((Point3(0, 0, 0.5), Point3(1, 1, 0.5)))
    with pytest.raises(ValueError):
        ObjectAnchor(id="x", expected_position=Point3(0.5, 0.5, 0.5), cloud=cloud,
                     footprint_xy=Box2(0, 0, 2, 2))

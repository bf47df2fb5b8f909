from __future__ import annotations

import importlib.resources

import pytest

from anchor_sim.scenario import ScenarioError, parse_scenario

MINIMAL = """
[grid]
cell_size 0.10
extent 3.0 2.0

[occupied]
rect 0.0 0.0 3.0 0.1 2.0
rect 0.0 1.9 3.0 2.0 2.0
rect 0.0 0.0 0.1 2.0 2.0
rect 2.9 0.0 3.0 2.0 2.0

[regions]
region room 0.0 0.0 3.0 2.0

[objects]
object cup 2.0 1.0 0.5 half_extents=0.04,0.04 region=room
object bin 1.0 1.5 0.3 half_extents=0.12,0.12 region=room container=yes surface=0.3

[robot]
start 0.8 0.8 0.4

[task]
obj cup
container bin
instruction "Put the cup in the bin"
"""


def test_parse_minimal_scenario():
    scn = parse_scenario(MINIMAL, name="minimal")
    assert scn.task.task_obj == "cup"
    assert scn.task.task_container == "bin"
    assert scn.task.instruction_text == "Put the cup in the bin"
    world = scn.build_world()
    assert world.grid.width == 30 and world.grid.height == 20
    assert "cup" in world.objects and world.objects["bin"].container
    belief = scn.build_belief()
    assert belief.region_belief == {"room": 1.0}


def test_packaged_scenarios_load():
    base = importlib.resources.files("anchor_sim") / "scenarios"
    for name in ("level1.scn", "level2.scn", "level3.scn", "fig1_displaced.scn"):
        scn = parse_scenario((base / name).read_text(), name=name)
        world = scn.build_world()
        assert scn.task.task_obj in world.objects
        assert scn.task.task_container in world.objects


@pytest.mark.parametrize("mutation, fragment", [
    (lambda t: t.replace("object cup 2.0 1.0 0.5", "object cup 2.0 1.0"),
     "line"),
    (lambda t: t.replace("[grid]", "[grit]"), "unknown section"),
    (lambda t: t.replace("rect 0.0 0.0 3.0 0.1 2.0", "rect 0.0 0.0 3.0 0.1"),
     "expected 5"),
    (lambda t: t.replace("obj cup", "obj missing_thing"), "not a declared object"),
    (lambda t: t.replace("region=room", "region=nowhere"), "unknown region"),
    (lambda t: t.replace("start 0.8 0.8 0.4", ""), "missing [robot] start"),
])
def test_loader_reports_errors(mutation, fragment):
    with pytest.raises(ScenarioError) as err:
        parse_scenario(mutation(MINIMAL))
    assert fragment in str(err.value)


def test_loader_reports_line_numbers():
    bad = MINIMAL.replace("object cup 2.0 1.0 0.5", "object cup 2.0 oops 0.5")
    with pytest.raises(ScenarioError) as err:
        parse_scenario(bad)
    assert str(err.value).startswith("line ")


def test_disturbance_parsing():
    text = MINIMAL + """
[disturbances]
at 3 displace cup 0.5 -0.2
after first_align occlude cup 2
at 9 remove cup
"""
    scn = parse_scenario(text)
    events = scn.script.events
    assert len(events) == 3
    assert events[0].trigger_cycle == 3 and events[0].vector == (0.5, -0.2)
    assert events[1].trigger_phase == "first_align" and events[1].duration == 2
    assert events[2].effect.value == "remove"


def test_disturbance_bad_phase_rejected():
    text = MINIMAL + "\n[disturbances]\nafter teleport displace cup 1 0\n"
    with pytest.raises(ScenarioError) as err:
        parse_scenario(text)
    assert "unknown phase" in str(err.value)

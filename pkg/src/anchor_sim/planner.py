"""Fixed four-action STRIPS domain, exhaustive min-cost planning, and PDDL I/O.

The native domain is planned directly over ground literal sets with
breadth-first search, which yields the true minimum-cost plan with a total
lexicographic tie-break at desk scale. PDDL export/import is kept for
interoperability with external planners; the exported domain encodes the
"hand is free" precondition with an auxiliary carrying flag so the documents
stay inside the STRIPS (+ negative preconditions) subset.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .anchors import ROBOT, SymbolicState

Literal = tuple[str, ...]

ROBOT_TYPE = "agent"
ITEM_TYPE = "item"


class PddlError(ValueError):
    """Raised for malformed PDDL text."""


@dataclass(frozen=True)
class TaskSpec:
    task_obj: str
    task_container: str
    instruction_text: str = ""

    def __post_init__(self) -> None:
        if self.task_obj == self.task_container:
            raise ValueError("task object and container must differ")


@dataclass(frozen=True)
class Action:
    name: str
    args: tuple[str, ...]

    _ARITY = {"obj_find": 1, "align": 1, "grasp": 1, "place": 2}

    def __post_init__(self) -> None:
        object.__setattr__(self, "args", tuple(self.args))
        expected = self._ARITY.get(self.name)
        if expected is not None and len(self.args) != expected:
            raise ValueError(f"{self.name} takes {expected} argument(s), got {self.args}")

    def __str__(self) -> str:
        return "(" + " ".join((self.name,) + self.args) + ")"


@dataclass(frozen=True)
class Plan:
    actions: tuple[Action, ...]

    @property
    def cost(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class GroundAction:
    name: str
    args: tuple[str, ...]
    pre_pos: frozenset
    pre_neg: frozenset
    add: frozenset
    delete: frozenset

    def applicable(self, state: frozenset) -> bool:
        return self.pre_pos <= state and not (self.pre_neg & state)

    def apply(self, state: frozenset) -> frozenset:
        return (state - self.delete) | self.add

    def as_action(self) -> Action:
        return Action(self.name, self.args)


# --------------------------------------------------------------------------
# Lifted domain representation (used by the PDDL path)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LiftedAction:
    name: str
    params: tuple[tuple[str, str], ...]  # (?var, type)
    pre_pos: tuple[Literal, ...]
    pre_neg: tuple[Literal, ...]
    add: tuple[Literal, ...]
    delete: tuple[Literal, ...]


@dataclass(frozen=True)
class Domain:
    name: str
    requirements: tuple[str, ...]
    types: tuple[tuple[str, str], ...]  # (type, parent)
    constants: tuple[tuple[str, str], ...]  # (name, type)
    predicates: tuple[tuple[str, tuple[tuple[str, str], ...]], ...]
    actions: tuple[LiftedAction, ...]


@dataclass(frozen=True)
class PlanningProblem:
    name: str
    objects: tuple[tuple[str, str], ...]  # (name, type), robot excluded
    init: frozenset
    goal: frozenset
    domain: Domain | None = None  # None selects the native fixed domain


# The exported fixed domain stays inside STRIPS + negative preconditions by
# tracking two flags: (carrying ?r) mirrors "holding anything" and (posed ?r)
# mirrors "some alignment is active". Base-moving actions require the stance
# to be free; grasp/place consume the alignment they use. On execution states
# (at most one active alignment) this grounds to the same plan set as the
# native domain.
EXPORT_DOMAIN = Domain(
    name="anchor",
    requirements=(":negative-preconditions", ":strips", ":typing"),
    types=((ITEM_TYPE, "object"), (ROBOT_TYPE, "object")),
    constants=((ROBOT, ROBOT_TYPE),),
    predicates=(
        ("aligned", (("?r", ROBOT_TYPE), ("?o", ITEM_TYPE))),
        ("carrying", (("?r", ROBOT_TYPE),)),
        ("found", (("?o", ITEM_TYPE),)),
        ("holding", (("?r", ROBOT_TYPE), ("?o", ITEM_TYPE))),
        ("in", (("?o", ITEM_TYPE), ("?c", ITEM_TYPE))),
        ("near", (("?r", ROBOT_TYPE), ("?o", ITEM_TYPE))),
        ("posed", (("?r", ROBOT_TYPE),)),
    ),
    actions=(
        LiftedAction("align", (("?o", ITEM_TYPE),),
                     pre_pos=(("found", "?o"), ("near", ROBOT, "?o")),
                     pre_neg=(("posed", ROBOT),),
                     add=(("aligned", ROBOT, "?o"), ("posed", ROBOT)), delete=()),
        LiftedAction("grasp", (("?o", ITEM_TYPE),),
                     pre_pos=(("aligned", ROBOT, "?o"),),
                     pre_neg=(("carrying", ROBOT),),
                     add=(("carrying", ROBOT), ("holding", ROBOT, "?o")),
                     delete=(("aligned", ROBOT, "?o"), ("posed", ROBOT))),
        LiftedAction("obj_find", (("?o", ITEM_TYPE),),
                     pre_pos=(),
                     pre_neg=(("found", "?o"), ("posed", ROBOT)),
                     add=(("found", "?o"), ("near", ROBOT, "?o")), delete=()),
        LiftedAction("place", (("?o", ITEM_TYPE), ("?c", ITEM_TYPE)),
                     pre_pos=(("aligned", ROBOT, "?c"), ("holding", ROBOT, "?o")),
                     pre_neg=(),
                     add=(("in", "?o", "?c"),),
                     delete=(("aligned", ROBOT, "?c"), ("carrying", ROBOT),
                             ("holding", ROBOT, "?o"), ("posed", ROBOT))),
    ),
)


def build_problem(task: TaskSpec, state: SymbolicState) -> PlanningProblem:
    """Deterministic problem construction: init is exactly the derived state,
    the goal is in(task_obj, task_container)."""
    names = {task.task_obj, task.task_container}
    for pred in state:
        for arg in pred[1:]:
            if arg != ROBOT:
                names.add(arg)
    objects = tuple((n, ITEM_TYPE) for n in sorted(names))
    return PlanningProblem(
        name=f"put-{task.task_obj}-in-{task.task_container}",
        objects=objects,
        init=frozenset(state),
        goal=frozenset({("in", task.task_obj, task.task_container)}),
    )


def _ground_native(items: list[str]) -> list[GroundAction]:
    # Base motion destroys any active alignment: obj_find clears every aligned
    # literal and align replaces them with its own target, while grasp/place
    # consume the alignment they use. An SE(2) base cannot keep an operable
    # stance while navigating, and modeling alignment as persistent makes
    # receding-horizon replanning ping-pong between two align targets forever.
    actions: list[GroundAction] = []
    all_holding = frozenset(("holding", ROBOT, o) for o in items)
    all_aligned = frozenset(("aligned", ROBOT, o) for o in items)
    for o in items:
        actions.append(GroundAction("obj_find", (o,),
                                    pre_pos=frozenset(),
                                    pre_neg=frozenset({("found", o)}),
                                    add=frozenset({("found", o), ("near", ROBOT, o)}),
                                    delete=all_aligned))
        actions.append(GroundAction("align", (o,),
                                    pre_pos=frozenset({("found", o), ("near", ROBOT, o)}),
                                    pre_neg=frozenset(),
                                    add=frozenset({("aligned", ROBOT, o)}),
                                    delete=all_aligned - {("aligned", ROBOT, o)}))
        actions.append(GroundAction("grasp", (o,),
                                    pre_pos=frozenset({("aligned", ROBOT, o)}),
                                    pre_neg=all_holding,
                                    add=frozenset({("holding", ROBOT, o)}),
                                    delete=frozenset({("aligned", ROBOT, o)})))
        for c in items:
            if c != o:
                actions.append(GroundAction("place", (o, c),
                                            pre_pos=frozenset({("holding", ROBOT, o),
                                                               ("aligned", ROBOT, c)}),
                                            pre_neg=frozenset(),
                                            add=frozenset({("in", o, c)}),
                                            delete=frozenset({("holding", ROBOT, o),
                                                              ("aligned", ROBOT, c)})))
    actions.sort(key=lambda a: (a.name, a.args))
    return actions


def _substitute(literal: Literal, binding: dict) -> Literal:
    return (literal[0],) + tuple(binding.get(t, t) for t in literal[1:])


def _ground_lifted(domain: Domain, objects: tuple[tuple[str, str], ...]) -> list[GroundAction]:
    by_type: dict[str, list[str]] = {}
    for name, typ in list(domain.constants) + list(objects):
        by_type.setdefault(typ, []).append(name)
    for names in by_type.values():
        names.sort()
    actions: list[GroundAction] = []
    for schema in domain.actions:
        bindings: list[dict] = [{}]
        for var, typ in schema.params:
            pool = by_type.get(typ, [])
            bindings = [dict(b, **{var: v}) for b in bindings for v in pool]
        for b in bindings:
            args = tuple(b[var] for var, _ in schema.params)
            if len(set(args)) != len(args):
                continue  # distinct-argument grounding
            actions.append(GroundAction(
                schema.name, args,
                pre_pos=frozenset(_substitute(l, b) for l in schema.pre_pos),
                pre_neg=frozenset(_substitute(l, b) for l in schema.pre_neg),
                add=frozenset(_substitute(l, b) for l in schema.add),
                delete=frozenset(_substitute(l, b) for l in schema.delete)))
    actions.sort(key=lambda a: (a.name, a.args))
    return actions


def ground_actions(problem: PlanningProblem) -> list[GroundAction]:
    if problem.domain is None:
        items = sorted(n for n, t in problem.objects if t == ITEM_TYPE)
        return _ground_native(items)
    return _ground_lifted(problem.domain, problem.objects)


def plan(problem: PlanningProblem) -> Plan | None:
    """Shortest plan by breadth-first search; None when the goal is unreachable.

    Expanding actions in sorted (name, args) order makes the returned plan the
    lexicographically least among all minimum-cost plans.
    """
    actions = ground_actions(problem)
    start = frozenset(problem.init)
    goal = frozenset(problem.goal)
    if goal <= start:
        return Plan(actions=())
    seen = {start}
    queue: deque = deque([(start, ())])
    while queue:
        state, path = queue.popleft()
        for ga in actions:
            if not ga.applicable(state):
                continue
            nxt = ga.apply(state)
            if nxt in seen:
                continue
            nxt_path = path + (ga.as_action(),)
            if goal <= nxt:
                return Plan(actions=nxt_path)
            seen.add(nxt)
            queue.append((nxt, nxt_path))
    return None


def simulate_plan(problem: PlanningProblem, the_plan: Plan) -> frozenset:
    """Apply the plan's schema effects from init; raises on inapplicable steps."""
    actions = {(a.name, a.args): a for a in ground_actions(problem)}
    state = frozenset(problem.init)
    for step in the_plan.actions:
        ga = actions.get((step.name, step.args))
        if ga is None or not ga.applicable(state):
            raise ValueError(f"plan step {step} is not applicable")
        state = ga.apply(state)
    return state


# --------------------------------------------------------------------------
# PDDL serialization (canonical formatting) and parsing
# --------------------------------------------------------------------------

def _fmt_literal(literal: Literal) -> str:
    return "(" + " ".join(literal) + ")"


def _fmt_condition(pos: tuple[Literal, ...], neg: tuple[Literal, ...]) -> str:
    parts = sorted([_fmt_literal(l) for l in pos] + [f"(not {_fmt_literal(l)})" for l in neg])
    return "(and " + " ".join(parts) + ")" if parts else "(and )"


def _fmt_typed_group(pairs: tuple[tuple[str, str], ...]) -> str:
    groups: dict[str, list[str]] = {}
    for name, typ in pairs:
        groups.setdefault(typ, []).append(name)
    chunks = []
    for typ in sorted(groups):
        chunks.append(" ".join(sorted(groups[typ])) + " - " + typ)
    return " ".join(chunks)


def serialize_domain(domain: Domain) -> str:
    lines = [f"(define (domain {domain.name})"]
    lines.append("  (:requirements " + " ".join(sorted(domain.requirements)) + ")")
    lines.append("  (:types " + _fmt_typed_group(domain.types) + ")")
    if domain.constants:
        lines.append("  (:constants " + _fmt_typed_group(domain.constants) + ")")
    lines.append("  (:predicates")
    for name, params in sorted(domain.predicates):
        sig = "".join(f" {v} - {t}" for v, t in params)
        lines.append(f"    ({name}{sig})")
    lines.append("  )")
    for act in sorted(domain.actions, key=lambda a: a.name):
        lines.append(f"  (:action {act.name}")
        sig = " ".join(f"{v} - {t}" for v, t in act.params)
        lines.append(f"    :parameters ({sig})")
        lines.append(f"    :precondition {_fmt_condition(act.pre_pos, act.pre_neg)}")
        lines.append(f"    :effect {_fmt_condition(act.add, act.delete)}")
        lines.append("  )")
    lines.append(")")
    return "\n".join(lines) + "\n"


def serialize_problem(problem: PlanningProblem, domain_name: str) -> str:
    lines = [f"(define (problem {problem.name})"]
    lines.append(f"  (:domain {domain_name})")
    if problem.objects:
        lines.append("  (:objects " + _fmt_typed_group(problem.objects) + ")")
    init = " ".join(sorted(_fmt_literal(l) for l in problem.init))
    lines.append(f"  (:init {init})")
    goal = " ".join(sorted(_fmt_literal(l) for l in problem.goal))
    lines.append(f"  (:goal (and {goal}))")
    lines.append(")")
    return "\n".join(lines) + "\n"


def export_pddl(domain: Domain | None, problem: PlanningProblem) -> tuple[str, str]:
    """Render (domain, problem) as canonical PDDL text.

    A native problem (domain None) is exported against the carrying-encoded
    fixed domain; the carrying flag is added to :init exactly when some
    holding literal is present, which preserves the plan set.
    """
    if domain is None or domain is EXPORT_DOMAIN:
        out_domain = EXPORT_DOMAIN
        init = set(problem.init)
        if problem.domain is None:
            if any(l[0] == "holding" for l in init):
                init.add(("carrying", ROBOT))
            if any(l[0] == "aligned" for l in init):
                init.add(("posed", ROBOT))
        out_problem = PlanningProblem(problem.name, problem.objects, frozenset(init),
                                      problem.goal, EXPORT_DOMAIN)
    else:
        out_domain = domain
        out_problem = problem
    return serialize_domain(out_domain), serialize_problem(out_problem, out_domain.name)


def _tokenize(text: str) -> list[str]:
    out: list[str] = []
    token = ""
    for ch in text:
        if ch in "()":
            if token:
                out.append(token)
                token = ""
            out.append(ch)
        elif ch.isspace():
            if token:
                out.append(token)
                token = ""
        elif ch == ";":
            if token:
                out.append(token)
                token = ""
            out.append(ch)
        else:
            token += ch
    if token:
        out.append(token)
    # strip ;-comments to end of line is handled before tokenizing
    return out


def _strip_comments(text: str) -> str:
    return "\n".join(line.split(";", 1)[0] for line in text.splitlines())


def _read_sexpr(tokens: list[str], pos: int) -> tuple[object, int]:
    if pos >= len(tokens):
        raise PddlError("unexpected end of input")
    tok = tokens[pos]
    if tok == "(":
        items = []
        pos += 1
        while pos < len(tokens) and tokens[pos] != ")":
            item, pos = _read_sexpr(tokens, pos)
            items.append(item)
        if pos >= len(tokens):
            raise PddlError("unbalanced parentheses")
        return items, pos + 1
    if tok == ")":
        raise PddlError("unexpected ')'")
    return tok.lower(), pos + 1


def _parse_sexpr(text: str) -> list:
    tokens = _tokenize(_strip_comments(text))
    expr, pos = _read_sexpr(tokens, 0)
    if pos != len(tokens):
        raise PddlError("trailing tokens after top-level form")
    if not isinstance(expr, list):
        raise PddlError("expected a parenthesized form")
    return expr


def _parse_typed_list(items: list) -> tuple[tuple[str, str], ...]:
    out: list[tuple[str, str]] = []
    pending: list[str] = []
    i = 0
    while i < len(items):
        tok = items[i]
        if tok == "-":
            if i + 1 >= len(items):
                raise PddlError("dangling '-' in typed list")
            typ = items[i + 1]
            out.extend((name, typ) for name in pending)
            pending = []
            i += 2
        else:
            pending.append(tok)
            i += 1
    out.extend((name, "object") for name in pending)
    return tuple(out)


def _parse_condition(expr: object) -> tuple[tuple[Literal, ...], tuple[Literal, ...]]:
    pos: list[Literal] = []
    neg: list[Literal] = []

    def walk(e: object, negated: bool) -> None:
        if not isinstance(e, list) or not e:
            raise PddlError(f"malformed condition: {e!r}")
        head = e[0]
        if head == "and":
            if negated:
                raise PddlError("negated conjunctions are outside the STRIPS subset")
            for sub in e[1:]:
                walk(sub, False)
        elif head == "not":
            if len(e) != 2:
                raise PddlError("(not ...) takes exactly one literal")
            walk(e[1], not negated)
        else:
            if any(isinstance(t, list) for t in e):
                raise PddlError(f"nested term in literal: {e!r}")
            (neg if negated else pos).append(tuple(e))

    walk(expr, False)
    return tuple(pos), tuple(neg)


def parse_domain(text: str) -> Domain:
    expr = _parse_sexpr(text)
    if expr[:1] != ["define"]:
        raise PddlError("domain must start with (define ...)")
    header = expr[1]
    if not (isinstance(header, list) and header[:1] == ["domain"] and len(header) == 2):
        raise PddlError("missing (domain <name>)")
    name = header[1]
    requirements: tuple[str, ...] = ()
    types: tuple[tuple[str, str], ...] = ()
    constants: tuple[tuple[str, str], ...] = ()
    predicates: list = []
    actions: list[LiftedAction] = []
    for section in expr[2:]:
        if not isinstance(section, list) or not section:
            raise PddlError(f"malformed section: {section!r}")
        head = section[0]
        if head == ":requirements":
            requirements = tuple(section[1:])
        elif head == ":types":
            types = _parse_typed_list(section[1:])
        elif head == ":constants":
            constants = _parse_typed_list(section[1:])
        elif head == ":predicates":
            for p in section[1:]:
                if not isinstance(p, list) or not p:
                    raise PddlError(f"malformed predicate: {p!r}")
                predicates.append((p[0], _parse_typed_list(p[1:])))
        elif head == ":action":
            if len(section) < 2:
                raise PddlError("action missing name")
            body = dict(zip(section[2::2], section[3::2]))
            params = _parse_typed_list(body.get(":parameters", []))
            pre_pos, pre_neg = _parse_condition(body.get(":precondition", ["and"]))
            add, delete = _parse_condition(body.get(":effect", ["and"]))
            actions.append(LiftedAction(section[1], params, pre_pos, pre_neg, add, delete))
        else:
            raise PddlError(f"unsupported domain section {head!r}")
    return Domain(name=name, requirements=requirements, types=types,
                  constants=constants, predicates=tuple(predicates),
                  actions=tuple(actions))


def parse_problem(text: str, domain: Domain) -> PlanningProblem:
    expr = _parse_sexpr(text)
    if expr[:1] != ["define"]:
        raise PddlError("problem must start with (define ...)")
    header = expr[1]
    if not (isinstance(header, list) and header[:1] == ["problem"] and len(header) == 2):
        raise PddlError("missing (problem <name>)")
    name = header[1]
    objects: tuple[tuple[str, str], ...] = ()
    init: frozenset = frozenset()
    goal: frozenset = frozenset()
    for section in expr[2:]:
        if not isinstance(section, list) or not section:
            raise PddlError(f"malformed section: {section!r}")
        head = section[0]
        if head == ":domain":
            if len(section) != 2 or section[1] != domain.name:
                raise PddlError(f"problem references domain {section[1:]!r}, "
                                f"expected {domain.name!r}")
        elif head == ":objects":
            objects = _parse_typed_list(section[1:])
        elif head == ":init":
            literals = []
            for lit in section[1:]:
                if not isinstance(lit, list) or any(isinstance(t, list) for t in lit):
                    raise PddlError(f"malformed init literal: {lit!r}")
                literals.append(tuple(lit))
            init = frozenset(literals)
        elif head == ":goal":
            if len(section) != 2:
                raise PddlError("goal must contain a single condition")
            pos, neg = _parse_condition(section[1])
            if neg:
                raise PddlError("negative goals are outside the STRIPS subset")
            goal = frozenset(pos)
        else:
            raise PddlError(f"unsupported problem section {head!r}")
    return PlanningProblem(name=name, objects=objects, init=init, goal=goal, domain=domain)


def plan_to_text(the_plan: Plan) -> str:
    return "\n".join(str(a) for a in the_plan.actions) + ("\n" if the_plan.actions else "")

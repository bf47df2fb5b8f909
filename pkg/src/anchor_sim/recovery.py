"""Minimum-responsible-layer recovery: local retries before task-level replanning.

Manipulation slips are retried in place up to a limit; larger state shifts go
straight to re-anchoring plus replanning; the task only terminates when the
goal is unreachable or the target is confirmed missing.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


class AnomalyKind(Enum):
    EMPTY_GRASP = "EmptyGrasp"
    GRIPPER_SLIP = "GripperSlip"
    PLACEMENT_MISS = "PlacementMiss"
    TARGET_DISPLACED = "TargetDisplaced"
    TARGET_OCCLUDED = "TargetOccluded"
    SCENE_CHANGED = "SceneChanged"
    UNREACHABLE = "Unreachable"


class Layer(Enum):
    L1 = "L1"
    L2 = "L2"


class Directive(Enum):
    RETRY_LOCAL = "RetryLocal"
    ESCALATE_REPLAN = "EscalateReplan"
    TERMINATE = "Terminate"


class Mode(Enum):
    NOMINAL = "Nominal"
    L1_RETRY = "L1Retry"
    L2_REPLAN = "L2Replan"
    TERMINAL_FAILURE = "TerminalFailure"


_L1_KINDS = frozenset({AnomalyKind.EMPTY_GRASP, AnomalyKind.GRIPPER_SLIP,
                       AnomalyKind.PLACEMENT_MISS})


@dataclass(frozen=True)
class Anomaly:
    kind: AnomalyKind
    detected_at_cycle: int
    evidence: str = ""
    action: str | None = None  # keyed primitive for L1 retry accounting
    obj: str | None = None

    def key(self) -> tuple[str, str]:
        return (self.action or self.kind.value, self.obj or "")


@dataclass(frozen=True)
class RecoveryConfig:
    l1_retry_limit: int = 2
    enabled: bool = True

    def __post_init__(self) -> None:
        if self.l1_retry_limit < 0:
            raise ValueError("l1_retry_limit must be >= 0")


@dataclass
class RecoveryState:
    l1_attempts: dict = field(default_factory=dict)  # (action, object) -> count
    mode: Mode = Mode.NOMINAL


def classify(anomaly: Anomaly) -> Layer:
    """Manipulation-level slips are L1; task-state shifts are L2."""
    return Layer.L1 if anomaly.kind in _L1_KINDS else Layer.L2


def handle(state: RecoveryState, anomaly: Anomaly, cfg: RecoveryConfig) -> Directive:
    """Route an anomaly to the minimum responsible layer.

    Disabled recovery terminates on the first anomaly (open-loop baseline).
    L1 anomalies retry locally until the limit, then escalate; L2 anomalies
    escalate immediately; an unreachable goal or confirmed-missing target
    terminates the task.
    """
    if not cfg.enabled:
        state.mode = Mode.TERMINAL_FAILURE
        return Directive.TERMINATE
    if anomaly.kind is AnomalyKind.UNREACHABLE:
        state.mode = Mode.TERMINAL_FAILURE
        return Directive.TERMINATE
    layer = classify(anomaly)
    if layer is Layer.L2:
        state.mode = Mode.L2_REPLAN
        state.l1_attempts.clear()  # fresh plan, fresh retry budget
        return Directive.ESCALATE_REPLAN
    key = anomaly.key()
    attempts = state.l1_attempts.get(key, 0)
    if attempts < cfg.l1_retry_limit:
        state.l1_attempts[key] = attempts + 1
        state.mode = Mode.L1_RETRY
        return Directive.RETRY_LOCAL
    state.mode = Mode.L2_REPLAN
    state.l1_attempts.clear()
    return Directive.ESCALATE_REPLAN


def note_success(state: RecoveryState, action: str, obj: str) -> None:
    """Reset the retry counter for a key after its action succeeds."""
    state.l1_attempts.pop((action, obj or ""), None)
    if state.mode in (Mode.L1_RETRY, Mode.L2_REPLAN):
        state.mode = Mode.NOMINAL


def format_event(cycle: int, anomaly: Anomaly, directive: Directive,
                 attempts: int) -> str:
    """One structured log line per recovery directive."""
    layer = classify(anomaly)
    return (f"cycle={cycle} kind={anomaly.kind.value} layer={layer.value} "
            f"directive={directive.value} attempts={attempts}")

"""Temporal-consistency grasp candidate scoring over two-frame candidate sets."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .core import EEPose

# Pose-distance angle weight: meters of distance per radian of approach change.
_ANGLE_WEIGHT = 0.1


@dataclass(frozen=True)
class GraspCandidate:
    pose: EEPose
    confidence: float
    frame_index: int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError("confidence must lie in [0, 1]")


@dataclass(frozen=True)
class GraspScoreConfig:
    tilt_tolerance: float = math.radians(15.0)
    tilt_decay: float = 5.0  # per radian beyond the tolerance
    match_translation_tol: float = 0.02
    match_rotation_tol: float = math.radians(10.0)
    consistency_sigma: float = 0.02

    def __post_init__(self) -> None:
        if min(self.tilt_tolerance, self.tilt_decay, self.match_translation_tol,
               self.match_rotation_tol, self.consistency_sigma) <= 0.0:
            raise ValueError("all grasp scoring parameters must be positive")


def tilt_angle(candidate: GraspCandidate) -> float:
    """Angle between the approach direction and straight down."""
    _, _, az = candidate.pose.approach_dir
    return math.acos(max(-1.0, min(1.0, -az)))


def tilt_penalty(candidate: GraspCandidate, cfg: GraspScoreConfig) -> float:
    """1 inside the tilt tolerance, exponential falloff beyond it."""
    delta = tilt_angle(candidate)
    if delta <= cfg.tilt_tolerance:
        return 1.0
    return math.exp(-cfg.tilt_decay * (delta - cfg.tilt_tolerance))


def _pose_delta(a: GraspCandidate, b: GraspCandidate) -> tuple[float, float]:
    da = a.pose.position.as_array() - b.pose.position.as_array()
    trans = float(math.sqrt(da @ da))
    dot = sum(x * y for x, y in zip(a.pose.approach_dir, b.pose.approach_dir))
    rot = math.acos(max(-1.0, min(1.0, dot)))
    return trans, rot


def match_and_score(frame_t: list[GraspCandidate], frame_prev: list[GraspCandidate],
                    cfg: GraspScoreConfig) -> list[tuple[tuple[GraspCandidate, GraspCandidate], float]]:
    """Match current-frame candidates to their nearest previous-frame mate and
    rank the temporally consistent pairs.

    Each current candidate pairs with the previous candidate minimizing
    ||dp|| + 0.1 * dangle; pairs beyond the translation or rotation tolerance
    are discarded. Score = tilt_penalty(g_t) * confidence(g_t) *
    exp(-||dp|| / sigma). An empty result means no stable grasp exists.
    """
    scored: list[tuple[tuple[GraspCandidate, GraspCandidate], float]] = []
    for g in frame_t:
        best = None
        best_d = math.inf
        for p in frame_prev:
            trans, rot = _pose_delta(g, p)
            d = trans + _ANGLE_WEIGHT * rot
            if d < best_d:
                best_d = d
                best = (p, trans, rot)
        if best is None:
            continue
        mate, trans, rot = best
        if trans > cfg.match_translation_tol or rot > cfg.match_rotation_tol:
            continue
        score = tilt_penalty(g, cfg) * g.confidence * math.exp(-trans / cfg.consistency_sigma)
        scored.append(((g, mate), score))
    # Descending by score; stable sort keeps frame-t order on ties.
    scored.sort(key=lambda item: -item[1])
    return scored

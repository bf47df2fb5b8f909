"""Operability-aware base-pose refinement.

Scores candidate SE(2) base poses by heading alignment, smooth shell-intrusion
risk, and chassis footprint risk, then minimizes the weighted sum with a
two-stage (coarse-to-fine) particle swarm.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .core import BasePose, EEPose, PointCloud, RngSeed, normalize_angle
from .reachability import DualEllipsoidShell

# Additive penalty ranking infeasible candidates (target outside shell) below
# every in-range objective value while keeping them comparable for the swarm.
INFEASIBLE_PENALTY = 10.0

# The search cost also shapes candidates away from the shell boundary: targets
# parked at d_out ~ 1 flip in and out of the shell under anchor noise, so the
# swarm prefers poses with some depth margin.
_MARGIN_D_OUT = 0.80
_MARGIN_D_IN = 1.30
_MARGIN_WEIGHT = 2.0

# Hard standoff below which a candidate is effectively not navigable: chassis
# radius plus half a grid cell of clearance quantization.
_CLEARANCE_BUFFER = 0.08
_CLEARANCE_WEIGHT = 10.0


@dataclass(frozen=True)
class AlignmentObjectiveConfig:
    w_align: float = 1.0
    w_shell: float = 2.0
    w_chassis: float = 2.0
    alpha: float = 10.0
    chassis_margin: float = 0.05
    softplus_beta: float = 10.0

    def __post_init__(self) -> None:
        if min(self.w_align, self.w_shell, self.w_chassis) < 0.0:
            raise ValueError("weights must be non-negative")
        if self.alpha <= 0.0 or self.softplus_beta <= 0.0:
            raise ValueError("alpha and softplus_beta must be positive")
        if self.chassis_margin < 0.0:
            raise ValueError("chassis_margin must be non-negative")


@dataclass(frozen=True)
class ChassisModel:
    """Disk chassis footprint: center offset from the base origin plus radius."""

    center_offset: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.35

    def __post_init__(self) -> None:
        if self.radius <= 0.0:
            raise ValueError("chassis radius must be positive")


@dataclass(frozen=True)
class PsoStageConfig:
    particles: int = 64
    iterations: int = 40
    inertia: float = 0.72
    cognitive: float = 1.49
    social: float = 1.49
    r_min: float = 0.25
    r_max: float = 1.2

    def __post_init__(self) -> None:
        if self.particles < 4:
            raise ValueError("need at least 4 particles")
        if self.iterations < 1:
            raise ValueError("need at least 1 iteration")
        if not (0.0 < self.inertia < 1.0):
            raise ValueError("inertia must lie in (0, 1)")
        if self.r_min >= self.r_max:
            raise ValueError("search annulus must have r_min < r_max")


@dataclass(frozen=True)
class PsoConfig:
    coarse: PsoStageConfig = field(default_factory=PsoStageConfig)
    fine: PsoStageConfig = field(default_factory=lambda: PsoStageConfig(particles=32, iterations=30))
    fine_stage_shrink: float = 0.25


@dataclass(frozen=True)
class AlignmentResult:
    pose: BasePose
    objective: float
    term_breakdown: tuple[float, float, float]  # (J_align, J_shell, J_chassis)
    feasible: bool
    # Penalized global-best value per PSO iteration; empty for plain objective calls.
    history: tuple[float, ...] = ()

    @property
    def penalized_objective(self) -> float:
        return self.objective + (0.0 if self.feasible else INFEASIBLE_PENALTY)


def j_align(base: BasePose, ee_target: EEPose) -> float:
    """1 - cos(angle between base heading and the planar approach direction).

    A vertical approach leaves the heading unconstrained and scores 0.
    """
    ax, ay, _ = ee_target.approach_dir
    n = math.hypot(ax, ay)
    if n < 1e-12:
        return 0.0
    v = math.cos(base.theta) * (ax / n) + math.sin(base.theta) * (ay / n)
    return min(2.0, max(0.0, 1.0 - v))


def j_shell(base: BasePose, shell: DualEllipsoidShell, cloud: PointCloud,
            cfg: AlignmentObjectiveConfig) -> float:
    """Mean smooth shell membership of the cloud seen from the candidate base."""
    if cloud.is_empty:
        return 0.0
    return float(_shell_term_batch(_pose_array(base), shell, cloud.xyz, cfg)[0])


def j_chassis(base: BasePose, chassis: ChassisModel, cloud: PointCloud,
              cfg: AlignmentObjectiveConfig) -> float:
    """Mean softplus excess of the inflated chassis disk over cloud clearance."""
    if cloud.is_empty:
        return 0.0
    return float(_chassis_term_batch(_pose_array(base), chassis, cloud.xyz, cfg)[0])


def objective(base: BasePose, ee_target: EEPose, shell: DualEllipsoidShell,
              cloud: PointCloud, chassis: ChassisModel,
              cfg: AlignmentObjectiveConfig) -> AlignmentResult:
    """Weighted objective with per-term breakdown and shell-feasibility flag."""
    total, terms, feas = objective_batch(_pose_array(base), ee_target, shell, cloud, chassis, cfg)
    return AlignmentResult(pose=base, objective=float(total[0]),
                           term_breakdown=(float(terms[0, 0]), float(terms[0, 1]), float(terms[0, 2])),
                           feasible=bool(feas[0]))


# --------------------------------------------------------------------------
# Vectorized evaluation over pose batches
# --------------------------------------------------------------------------

def _pose_array(base: BasePose) -> np.ndarray:
    return np.array([[base.x, base.y, base.theta]])


def _softplus(u: np.ndarray, beta: float) -> np.ndarray:
    bu = beta * u
    return np.where(bu > 30.0, u + np.log1p(np.exp(-np.abs(bu))) / beta,
                    np.log1p(np.exp(np.minimum(bu, 30.0))) / beta)


def _cloud_in_base_frames(poses: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """(P, 3) poses x (M, 3) world points -> (P, M, 3) base-frame points."""
    c = np.cos(poses[:, 2])[:, None]
    s = np.sin(poses[:, 2])[:, None]
    dx = pts[None, :, 0] - poses[:, 0][:, None]
    dy = pts[None, :, 1] - poses[:, 1][:, None]
    out = np.empty((len(poses), len(pts), 3))
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = pts[None, :, 2]
    return out


def _quad_many(center: np.ndarray, shape: np.ndarray, pts: np.ndarray) -> np.ndarray:
    d = pts - center
    return ((d @ shape) * d).sum(axis=-1)


def _shell_term_batch(poses: np.ndarray, shell: DualEllipsoidShell, pts: np.ndarray,
                      cfg: AlignmentObjectiveConfig) -> np.ndarray:
    local = _cloud_in_base_frames(poses, pts)
    do = _quad_many(shell.outer.center.as_array(), shell.outer.shape, local)
    di = _quad_many(shell.inner.center.as_array(), shell.inner.shape, local)
    return np.mean(expit(cfg.alpha * (1.0 - do)) * expit(cfg.alpha * (di - 1.0)), axis=-1)


def _chassis_term_batch(poses: np.ndarray, chassis: ChassisModel, pts: np.ndarray,
                        cfg: AlignmentObjectiveConfig) -> np.ndarray:
    c = np.cos(poses[:, 2])
    s = np.sin(poses[:, 2])
    ox, oy = chassis.center_offset
    cx = poses[:, 0] + c * ox - s * oy
    cy = poses[:, 1] + s * ox + c * oy
    dist = np.hypot(pts[None, :, 0] - cx[:, None], pts[None, :, 1] - cy[:, None])
    u = (chassis.radius + cfg.chassis_margin) - dist
    return np.mean(_softplus(u, cfg.softplus_beta), axis=-1)


def objective_batch(poses: np.ndarray, ee_target: EEPose, shell: DualEllipsoidShell,
                    cloud: PointCloud, chassis: ChassisModel, cfg: AlignmentObjectiveConfig,
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate (total, per-term, feasible) for an (N, 3) array of [x, y, theta].

    Feasibility means the target position falls inside the shell when viewed
    from the candidate base pose.
    """
    poses = np.atleast_2d(np.asarray(poses, dtype=float))
    n = len(poses)
    ax, ay, _ = ee_target.approach_dir
    norm = math.hypot(ax, ay)
    if norm < 1e-12:
        ja = np.zeros(n)
    else:
        ja = 1.0 - (np.cos(poses[:, 2]) * (ax / norm) + np.sin(poses[:, 2]) * (ay / norm))
        ja = np.clip(ja, 0.0, 2.0)
    target_local = _cloud_in_base_frames(poses, ee_target.position.as_array()[None, :])[:, 0, :]
    feas = ((_quad_many(shell.outer.center.as_array(), shell.outer.shape, target_local) <= 1.0)
            & (_quad_many(shell.inner.center.as_array(), shell.inner.shape, target_local) >= 1.0))
    if cloud.is_empty:
        js = np.zeros(n)
        jc = np.zeros(n)
    else:
        js = _shell_term_batch(poses, shell, cloud.xyz, cfg)
        jc = _chassis_term_batch(poses, chassis, cloud.xyz, cfg)
    total = cfg.w_align * ja + cfg.w_shell * js + cfg.w_chassis * jc
    return total, np.stack([ja, js, jc], axis=1), feas


def search_cost_batch(poses: np.ndarray, ee_target: EEPose, shell: DualEllipsoidShell,
                      cloud: PointCloud, chassis: ChassisModel,
                      cfg: AlignmentObjectiveConfig) -> np.ndarray:
    """The cost the swarm actually minimizes: the weighted objective, plus the
    infeasibility penalty, a small boundary-depth margin on the target, and a
    hinge keeping the chassis clear of the cloud by a navigable standoff."""
    poses = np.atleast_2d(np.asarray(poses, dtype=float))
    total, _, feas = objective_batch(poses, ee_target, shell, cloud, chassis, cfg)
    target_local = _cloud_in_base_frames(poses, ee_target.position.as_array()[None, :])[:, 0, :]
    do = _quad_many(shell.outer.center.as_array(), shell.outer.shape, target_local)
    di = _quad_many(shell.inner.center.as_array(), shell.inner.shape, target_local)
    margin = (np.maximum(0.0, do - _MARGIN_D_OUT)
              + np.maximum(0.0, _MARGIN_D_IN - np.minimum(di, _MARGIN_D_IN)))
    cost = total + INFEASIBLE_PENALTY * (~feas) + _MARGIN_WEIGHT * margin
    if not cloud.is_empty:
        pts = cloud.xyz
        dist = np.hypot(pts[None, :, 0] - poses[:, 0][:, None],
                        pts[None, :, 1] - poses[:, 1][:, None]).min(axis=1)
        standoff = chassis.radius + _CLEARANCE_BUFFER
        cost = cost + _CLEARANCE_WEIGHT * np.maximum(0.0, standoff - dist)
    return cost


# --------------------------------------------------------------------------
# Two-stage particle swarm refinement
# --------------------------------------------------------------------------

def _clamp_annulus(poses: np.ndarray, center: np.ndarray, r_min: float, r_max: float) -> None:
    d = poses[:, :2] - center
    r = np.hypot(d[:, 0], d[:, 1])
    zero = r < 1e-12
    if np.any(zero):
        d[zero] = np.array([r_min, 0.0])
        r[zero] = r_min
    scale = np.clip(r, r_min, r_max) / r
    poses[:, :2] = center + d * scale[:, None]
    poses[:, 2] = np.arctan2(np.sin(poses[:, 2]), np.cos(poses[:, 2]))


def _pso_stage(evaluate, init_poses: np.ndarray, stage: PsoStageConfig,
               target_xy: np.ndarray, rng: np.random.Generator,
               history: list[float]) -> tuple[np.ndarray, float]:
    poses = init_poses.copy()
    _clamp_annulus(poses, target_xy, stage.r_min, stage.r_max)
    vel = rng.uniform(-1.0, 1.0, size=poses.shape) * np.array([0.1, 0.1, 0.3])
    cost = evaluate(poses)
    pbest = poses.copy()
    pbest_cost = cost.copy()
    g = int(np.argmin(cost))
    gbest = poses[g].copy()
    gbest_cost = float(cost[g])
    history.append(gbest_cost)
    for _ in range(stage.iterations):
        r1 = rng.uniform(size=poses.shape)
        r2 = rng.uniform(size=poses.shape)
        # Heading difference taken along the wrapped shortest arc.
        dp = pbest - poses
        dg = gbest[None, :] - poses
        dp[:, 2] = np.arctan2(np.sin(dp[:, 2]), np.cos(dp[:, 2]))
        dg[:, 2] = np.arctan2(np.sin(dg[:, 2]), np.cos(dg[:, 2]))
        vel = stage.inertia * vel + stage.cognitive * r1 * dp + stage.social * r2 * dg
        poses = poses + vel
        _clamp_annulus(poses, target_xy, stage.r_min, stage.r_max)
        cost = evaluate(poses)
        improved = cost < pbest_cost
        pbest[improved] = poses[improved]
        pbest_cost[improved] = cost[improved]
        g = int(np.argmin(pbest_cost))
        if pbest_cost[g] < gbest_cost:
            gbest_cost = float(pbest_cost[g])
            gbest = pbest[g].copy()
        history.append(gbest_cost)
    return gbest, gbest_cost


def refine_base_pose(ee_target: EEPose, shell: DualEllipsoidShell, cloud: PointCloud,
                     chassis: ChassisModel, cfg: AlignmentObjectiveConfig,
                     pso: PsoConfig, seed: RngSeed) -> AlignmentResult:
    """Two-stage PSO over the annulus around the target's planar position.

    Stage one searches the full annulus and heading range; stage two re-seeds
    a shrunken neighborhood of the stage-one best. Infeasible candidates carry
    an additive penalty so the swarm still ranks them. Deterministic per seed.
    """
    rng = seed.generator()
    target_xy = np.array([ee_target.position.x, ee_target.position.y])

    def evaluate(poses: np.ndarray) -> np.ndarray:
        return search_cost_batch(poses, ee_target, shell, cloud, chassis, cfg)

    history: list[float] = []
    st = pso.coarse
    r = rng.uniform(st.r_min, st.r_max, st.particles)
    phi = rng.uniform(-math.pi, math.pi, st.particles)
    theta = rng.uniform(-math.pi, math.pi, st.particles)
    init = np.column_stack([target_xy[0] + r * np.cos(phi),
                            target_xy[1] + r * np.sin(phi), theta])
    best1, _ = _pso_stage(evaluate, init, st, target_xy, rng, history)

    st = pso.fine
    span = pso.fine_stage_shrink * (st.r_max - st.r_min)
    init = np.empty((st.particles, 3))
    init[:, 0] = best1[0] + rng.uniform(-span, span, st.particles)
    init[:, 1] = best1[1] + rng.uniform(-span, span, st.particles)
    init[:, 2] = best1[2] + rng.uniform(-pso.fine_stage_shrink * math.pi,
                                        pso.fine_stage_shrink * math.pi, st.particles)
    init[0] = best1  # keep the stage-one best in the swarm: global best stays monotone
    best2, _ = _pso_stage(evaluate, init, st, target_xy, rng, history)

    pose = BasePose(float(best2[0]), float(best2[1]), normalize_angle(float(best2[2])))
    result = objective(pose, ee_target, shell, cloud, chassis, cfg)
    feasible = result.feasible
    if feasible and not cloud.is_empty:
        # A refined pose must also be physically placeable: the chassis disk
        # has to clear the observed cloud.
        pts = cloud.xyz
        clearance = float(np.hypot(pts[:, 0] - pose.x, pts[:, 1] - pose.y).min())
        feasible = clearance >= chassis.radius
    return AlignmentResult(pose=pose, objective=result.objective,
                           term_breakdown=result.term_breakdown,
                           feasible=feasible, history=tuple(history))

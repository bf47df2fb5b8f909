"""Offline workspace characterization for a parametric 4-DOF serial arm.

Samples end-effector poses over the workspace, scores each by the fraction of
randomized IK attempts that converge collision-free, and fits a dual-ellipsoid
shell (outer/inner minimum-volume enclosing ellipsoids) to the high-score set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import EEPose, Point3, PointCloud, RngSeed

# Joint order: base yaw, shoulder pitch, elbow pitch, wrist pitch.
_DEFAULT_LIMITS = ((-math.pi, math.pi), (-1.8, 1.8), (-2.6, 2.6), (-2.2, 2.2))


class ShellFitError(RuntimeError):
    """Raised when the sampled workspace cannot support a shell fit."""


@dataclass(frozen=True)
class ArmModel:
    """Yaw + three-pitch serial arm with per-joint limits and a mount offset."""

    link_lengths: tuple[float, float, float] = (0.30, 0.25, 0.15)
    joint_limits: tuple[tuple[float, float], ...] = _DEFAULT_LIMITS
    mount_offset: Point3 = field(default_factory=lambda: Point3(0.0, 0.0, 0.0))
    self_collision_radius: float = 0.04

    def __post_init__(self) -> None:
        if any(l <= 0.0 for l in self.link_lengths):
            raise ValueError("link lengths must be positive")
        if len(self.joint_limits) != 4 or any(lo >= hi for lo, hi in self.joint_limits):
            raise ValueError("joint limits must be four (min < max) pairs")

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))


DEFAULT_ARM = ArmModel()


@dataclass(frozen=True)
class ReachabilitySample:
    pose: EEPose
    trials: int
    successes: int

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not (0 <= self.successes <= self.trials):
            raise ValueError("successes must be in [0, trials]")

    @property
    def mu(self) -> float:
        return self.successes / self.trials


@dataclass(frozen=True)
class ShellFitConfig:
    mu_threshold: float = 0.5
    ik_trials_per_pose: int = 20
    sample_grid_resolution: float = 0.05
    mvee_tolerance: float = 1e-7

    def __post_init__(self) -> None:
        if not (0.0 < self.mu_threshold < 1.0):
            raise ValueError("mu_threshold must lie in (0, 1)")
        if self.sample_grid_resolution <= 0.0:
            raise ValueError("sample_grid_resolution must be positive")
        if self.ik_trials_per_pose < 1:
            raise ValueError("ik_trials_per_pose must be >= 1")


@dataclass(frozen=True)
class Ellipsoid:
    """Quadratic-form ellipsoid: d(p) = (p - c)^T E (p - c), boundary at d = 1."""

    center: Point3
    shape: np.ndarray

    def __post_init__(self) -> None:
        shape = np.asarray(self.shape, dtype=float)
        if shape.shape != (3, 3):
            raise ValueError("shape matrix must be 3x3")
        if not np.allclose(shape, shape.T, atol=1e-9):
            raise ValueError("shape matrix must be symmetric")
        eigvals = np.linalg.eigvalsh(shape)
        if np.any(eigvals <= 0.0):
            raise ValueError("shape matrix must be positive definite")
        shape = 0.5 * (shape + shape.T)
        shape.flags.writeable = False
        object.__setattr__(self, "shape", shape)

    def distance(self, p: Point3) -> float:
        d = p.as_array() - self.center.as_array()
        return float(d @ self.shape @ d)

    def distance_many(self, pts: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(pts) - self.center.as_array()
        return np.einsum("ni,ij,nj->n", d, self.shape, d)

    def semi_axes(self) -> np.ndarray:
        """Semi-axis lengths, descending."""
        return np.sort(1.0 / np.sqrt(np.linalg.eigvalsh(self.shape)))[::-1]


@dataclass(frozen=True)
class DualEllipsoidShell:
    """Operable region between an outer cover and an inner dead-zone ellipsoid."""

    outer: Ellipsoid
    inner: Ellipsoid

    def __post_init__(self) -> None:
        if self.outer.distance(self.inner.center) >= 1.0:
            raise ValueError("inner center must lie strictly inside the outer ellipsoid")

    @property
    def offset(self) -> np.ndarray:
        """Inner-minus-outer center offset capturing kinematic anisotropy."""
        return self.inner.center.as_array() - self.outer.center.as_array()

    def contains(self, p: Point3) -> bool:
        return self.outer.distance(p) <= 1.0 and self.inner.distance(p) >= 1.0

    def contains_many(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return (self.outer.distance_many(pts) <= 1.0) & (self.inner.distance_many(pts) >= 1.0)


def d_out(shell: DualEllipsoidShell, p: Point3) -> float:
    return shell.outer.distance(p)


def d_in(shell: DualEllipsoidShell, p: Point3) -> float:
    return shell.inner.distance(p)


# --------------------------------------------------------------------------
# Forward kinematics and damped-least-squares IK
# --------------------------------------------------------------------------

def forward_kinematics(arm: ArmModel, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (tip position, approach direction) in the base frame."""
    yaw, q2, q3, q4 = q
    l1, l2, l3 = arm.link_lengths
    p1, p2, p3 = q2, q2 + q3, q2 + q3 + q4
    radial = l1 * math.cos(p1) + l2 * math.cos(p2) + l3 * math.cos(p3)
    height = l1 * math.sin(p1) + l2 * math.sin(p2) + l3 * math.sin(p3)
    cy, sy = math.cos(yaw), math.sin(yaw)
    m = arm.mount_offset
    pos = np.array([m.x + cy * radial, m.y + sy * radial, m.z + height])
    app = np.array([cy * math.cos(p3), sy * math.cos(p3), math.sin(p3)])
    return pos, app


def link_points(arm: ArmModel, q: np.ndarray) -> np.ndarray:
    """Base-frame positions of mount, elbow, wrist, and tip (4, 3)."""
    yaw, q2, q3, q4 = q
    l1, l2, l3 = arm.link_lengths
    cy, sy = math.cos(yaw), math.sin(yaw)
    pts = [arm.mount_offset.as_array()]
    r = z = 0.0
    for length, pitch in ((l1, q2), (l2, q2 + q3), (l3, q2 + q3 + q4)):
        r += length * math.cos(pitch)
        z += length * math.sin(pitch)
        pts.append(np.array([arm.mount_offset.x + cy * r,
                             arm.mount_offset.y + sy * r,
                             arm.mount_offset.z + z]))
    return np.array(pts)


def _jacobian(arm: ArmModel, q: np.ndarray) -> np.ndarray:
    """Analytic 6x4 Jacobian of (position, approach direction)."""
    yaw, q2, q3, q4 = q
    l1, l2, l3 = arm.link_lengths
    p1, p2, p3 = q2, q2 + q3, q2 + q3 + q4
    c1, s1 = math.cos(p1), math.sin(p1)
    c2, s2 = math.cos(p2), math.sin(p2)
    c3, s3 = math.cos(p3), math.sin(p3)
    cy, sy = math.cos(yaw), math.sin(yaw)
    radial = l1 * c1 + l2 * c2 + l3 * c3
    u = np.array([cy, sy, 0.0])
    uperp = np.array([-sy, cy, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    J = np.zeros((6, 4))
    J[:3, 0] = uperp * radial
    J[:3, 1] = u * (-l1 * s1 - l2 * s2 - l3 * s3) + ez * (l1 * c1 + l2 * c2 + l3 * c3)
    J[:3, 2] = u * (-l2 * s2 - l3 * s3) + ez * (l2 * c2 + l3 * c3)
    J[:3, 3] = u * (-l3 * s3) + ez * (l3 * c3)
    J[3:, 0] = uperp * c3
    dapp = u * (-s3) + ez * c3
    J[3:, 1] = J[3:, 2] = J[3:, 3] = dapp
    return J


def _heuristic_guess(arm: ArmModel, target: EEPose) -> np.ndarray:
    rel = target.position.as_array() - arm.mount_offset.as_array()
    yaw = math.atan2(rel[1], rel[0]) if np.hypot(rel[0], rel[1]) > 1e-9 else 0.0
    elev = math.atan2(rel[2], np.hypot(rel[0], rel[1]))
    q = np.array([yaw, elev, 0.0, 0.0])
    lo = np.array([l for l, _ in arm.joint_limits])
    hi = np.array([h for _, h in arm.joint_limits])
    return np.clip(q, lo, hi)

# IK acceptance tolerances: 5 mm position, 5 degrees on the approach direction.
_IK_POS_TOL = 5e-3
_IK_ANG_TOL = math.radians(5.0)
_IK_DAMPING = 0.05
_IK_MAX_ITERS = 200
_IK_DIR_WEIGHT = 0.2


def _ik_error(arm: ArmModel, q: np.ndarray, target: EEPose) -> tuple[np.ndarray, float, float]:
    pos, app = forward_kinematics(arm, q)
    e_pos = target.position.as_array() - pos
    e_app = target.approach_array() - app
    err = np.concatenate([e_pos, _IK_DIR_WEIGHT * e_app])
    ang = math.acos(float(np.clip(np.dot(app, target.approach_array()), -1.0, 1.0)))
    return err, float(np.linalg.norm(e_pos)), ang


def solve_ik(arm: ArmModel, target: EEPose, seed: RngSeed, restarts: int = 20) -> np.ndarray | None:
    """Damped-least-squares IK with seeded randomized restarts.

    Returns a joint vector matching the target within 5 mm / 5 deg approach,
    or None when no attempt converges. Each restart perturbs a straight-at-
    target initial guess, so the convergence rate over restarts grades how
    forgiving the target pose is.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rel = target.position.as_array() - arm.mount_offset.as_array()
    if np.linalg.norm(rel) > arm.reach + _IK_POS_TOL:
        return None
    lo = np.array([l for l, _ in arm.joint_limits])
    hi = np.array([h for _, h in arm.joint_limits])
    base_guess = _heuristic_guess(arm, target)
    for attempt in range(restarts):
        rng = seed.derive("ik-restart", attempt).generator()
        q = np.clip(base_guess + rng.normal(0.0, 0.35, size=4), lo, hi)
        best_err = math.inf
        stall = 0
        for _ in range(_IK_MAX_ITERS):
            err, pos_err, ang_err = _ik_error(arm, q, target)
            if pos_err <= _IK_POS_TOL and ang_err <= _IK_ANG_TOL:
                return q
            n = float(np.linalg.norm(err))
            if n < best_err - 1e-7:
                best_err = n
                stall = 0
            else:
                stall += 1
                if stall > 15:
                    break
            J = _jacobian(arm, q)
            H = J.T @ J + (_IK_DAMPING ** 2) * np.eye(4)
            dq = np.linalg.solve(H, J.T @ err)
            q = np.clip(q + dq, lo, hi)
        err, pos_err, ang_err = _ik_error(arm, q, target)
        if pos_err <= _IK_POS_TOL and ang_err <= _IK_ANG_TOL:
            return q
    return None


def _config_collides(arm: ArmModel, q: np.ndarray, obstacles: PointCloud) -> bool:
    """True when any obstacle point comes within self_collision_radius of a link."""
    if obstacles.is_empty:
        return False
    pts = obstacles.xyz
    segs = link_points(arm, q)
    for a, b in zip(segs[:-1], segs[1:]):
        ab = b - a
        denom = float(ab @ ab)
        t = np.clip((pts - a) @ ab / denom, 0.0, 1.0) if denom > 1e-12 else np.zeros(len(pts))
        closest = a + t[:, None] * ab
        if np.any(np.linalg.norm(pts - closest, axis=1) < arm.self_collision_radius):
            return True
    return False


def manipulability_score(arm: ArmModel, pose: EEPose, obstacles: PointCloud,
                         cfg: ShellFitConfig, seed: RngSeed) -> ReachabilitySample:
    """Score a pose by the fraction of seeded single-restart IK attempts that
    converge with all links clearing the obstacle cloud.

    Trial i uses exactly solve_ik(arm, pose, seed.derive("trial", i), restarts=1),
    so the score can be cross-checked by independent solve_ik calls.
    """
    successes = 0
    for i in range(cfg.ik_trials_per_pose):
        q = solve_ik(arm, pose, seed.derive("trial", i), restarts=1)
        if q is not None and not _config_collides(arm, q, obstacles):
            successes += 1
    return ReachabilitySample(pose=pose, trials=cfg.ik_trials_per_pose, successes=successes)


# Downward approach tilts cycled across each cell's trials (tabletop grasping).
_APPROACH_TILTS = (0.0, math.radians(30.0), math.radians(60.0))


def _tilted_approach(mount: np.ndarray, position: np.ndarray, tilt: float) -> tuple[float, float, float]:
    planar = position[:2] - mount[:2]
    n = float(np.hypot(planar[0], planar[1]))
    ux, uy = (planar / n) if n > 1e-9 else (1.0, 0.0)
    c, s = math.cos(tilt), math.sin(tilt)
    return (ux * c, uy * c, -s)


def sample_workspace(arm: ArmModel, cfg: ShellFitConfig, seed: RngSeed) -> list[ReachabilitySample]:
    """Score a regular grid over the workspace bounding box of radius reach.

    Each cell is scored by manipulability_score with the downward-tilt approach
    family split across its trials; cells are visited in sorted index order.
    """
    mount = arm.mount_offset.as_array()
    extent = 2.0 * arm.reach
    n = max(1, math.ceil(extent / cfg.sample_grid_resolution))
    step = extent / n
    samples: list[ReachabilitySample] = []
    # Split the trial budget over the tilt family as evenly as possible.
    base, rem = divmod(cfg.ik_trials_per_pose, len(_APPROACH_TILTS))
    tilt_trials = [base + (1 if k < rem else 0) for k in range(len(_APPROACH_TILTS))]
    for ix in range(n):
        for iy in range(n):
            for iz in range(n):
                pos = mount - arm.reach + (np.array([ix, iy, iz]) + 0.5) * step
                position = Point3(*pos)
                total = succ = 0
                for k, (tilt, trials) in enumerate(zip(_APPROACH_TILTS, tilt_trials)):
                    if trials == 0:
                        continue
                    pose = EEPose(position, _tilted_approach(mount, pos, tilt))
                    sub_cfg = ShellFitConfig(cfg.mu_threshold, trials,
                                             cfg.sample_grid_resolution, cfg.mvee_tolerance)
                    s = manipulability_score(arm, pose, PointCloud(()), sub_cfg,
                                             seed.derive("cell", ix, iy, iz, k))
                    total += s.trials
                    succ += s.successes
                rep = EEPose(position, _tilted_approach(mount, pos, _APPROACH_TILTS[1]))
                samples.append(ReachabilitySample(pose=rep, trials=total, successes=succ))
    return samples


# --------------------------------------------------------------------------
# Minimum-volume enclosing ellipsoid (Khachiyan) and shell fitting
# --------------------------------------------------------------------------

def mvee(points: np.ndarray, tol: float = 1e-7, max_iters: int = 50000) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-volume enclosing ellipsoid of (N, d) points.

    Khachiyan's barycentric ascent; returns (center, E) with boundary at
    (p - c)^T E (p - c) = 1. E is rescaled so every input point satisfies
    d(p) <= 1 exactly. Points are canonicalized (unique + lexicographic sort)
    first, making the result invariant to input order.
    """
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    n, d = pts.shape
    if n <= d:
        raise ShellFitError("degenerate sample set: too few distinct points for an ellipsoid")
    if n > 2 * (d + 1):
        # Only hull vertices can support the MVEE; unique+sort keeps the
        # reduced set canonical so the fit stays order-invariant.
        from scipy.spatial import ConvexHull, QhullError
        try:
            hull = ConvexHull(pts)
            pts = np.unique(pts[hull.vertices], axis=0)
            n = len(pts)
        except QhullError:
            pass
    all_pts = np.unique(np.asarray(points, dtype=float), axis=0)
    Q = np.vstack([pts.T, np.ones(n)])
    u = np.full(n, 1.0 / n)
    for _ in range(max_iters):
        X = Q @ (u[:, None] * Q.T)
        try:
            M = np.einsum("ij,jk,ik->i", Q.T, np.linalg.inv(X), Q.T)
        except np.linalg.LinAlgError as exc:
            raise ShellFitError("degenerate sample set: rank-deficient point cloud") from exc
        j = int(np.argmax(M))
        maximum = M[j]
        step = (maximum - d - 1.0) / ((d + 1.0) * (maximum - 1.0))
        new_u = (1.0 - step) * u
        new_u[j] += step
        if np.linalg.norm(new_u - u) <= tol:
            u = new_u
            break
        u = new_u
    center = pts.T @ u
    cov = pts.T @ (u[:, None] * pts) - np.outer(center, center)
    try:
        E = np.linalg.inv(cov) / d
    except np.linalg.LinAlgError as exc:
        raise ShellFitError("degenerate sample set: rank-deficient point cloud") from exc
    E = 0.5 * (E + E.T)
    diff = all_pts - center
    dmax = float(np.max(np.einsum("ni,ij,nj->n", diff, E, diff)))
    if dmax > 0.0:
        E = E / dmax
    return center, E


def _affine_rank(points: np.ndarray, tol: float = 1e-4) -> int:
    if len(points) == 0:
        return 0
    centered = points - points.mean(axis=0)
    return int(np.linalg.matrix_rank(centered, tol=tol))


def fit_shell(samples: list[ReachabilitySample], cfg: ShellFitConfig,
              mount: Point3 = Point3(0.0, 0.0, 0.0)) -> DualEllipsoidShell:
    """Fit the dual-ellipsoid shell to scored workspace samples.

    Outer: MVEE of all high-score positions. Inner: MVEE of the interior dead
    zone (low-score positions strictly inside the outer ellipsoid and inside
    the convex hull of the high-score set); falls back to a 1 cm sphere at the
    mount when that set is affinely degenerate.
    """
    positions = np.array([s.pose.position.as_array() for s in samples]).reshape(-1, 3)
    mus = np.array([s.mu for s in samples])
    high = positions[mus >= cfg.mu_threshold]
    if len(high) < 10:
        raise ShellFitError("workspace too constrained: fewer than 10 high-score samples")
    if _affine_rank(high) < 3:
        raise ShellFitError("degenerate sample set: high-score samples are not full rank")
    c_out, e_out = mvee(high, tol=cfg.mvee_tolerance)
    outer = Ellipsoid(Point3(*c_out), e_out)

    low = positions[mus < cfg.mu_threshold]
    dead = np.zeros((0, 3))
    if len(low) > 0:
        inside_outer = outer.distance_many(low) < 1.0 - 1e-9
        candidates = low[inside_outer]
        if len(candidates) > 0:
            from scipy.spatial import Delaunay, QhullError
            try:
                hull = Delaunay(np.unique(high, axis=0))
                dead = candidates[hull.find_simplex(candidates) >= 0]
            except QhullError:
                dead = np.zeros((0, 3))
    if len(dead) >= 4 and _affine_rank(dead) == 3:
        c_in, e_in = mvee(dead, tol=cfg.mvee_tolerance)
        inner = Ellipsoid(Point3(*c_in), e_in)
    else:
        center = mount if outer.distance(mount) < 1.0 else outer.center
        inner = Ellipsoid(center, np.eye(3) / (0.01 ** 2))
    return DualEllipsoidShell(outer=outer, inner=inner)


# --------------------------------------------------------------------------
# Shell persistence: plain text, one value per line
# --------------------------------------------------------------------------

SHELL_FORMAT_HEADER = "anchor-shell v1"


def shell_to_text(shell: DualEllipsoidShell) -> str:
    lines = [SHELL_FORMAT_HEADER]
    for ell in (shell.outer, shell.inner):
        lines.extend(repr(float(v)) for v in ell.center.as_array())
        lines.extend(repr(float(v)) for v in ell.shape.reshape(-1))
    return "\n".join(lines) + "\n"


def shell_from_text(text: str) -> DualEllipsoidShell:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != SHELL_FORMAT_HEADER:
        raise ValueError(f"expected header {SHELL_FORMAT_HEADER!r}")
    if len(lines) != 1 + 2 * 12:
        raise ValueError(f"expected {1 + 24} lines, got {len(lines)}")
    try:
        values = [float(v) for v in lines[1:]]
    except ValueError as exc:
        raise ValueError(f"malformed shell value: {exc}") from exc
    ells = []
    for k in range(2):
        chunk = values[k * 12:(k + 1) * 12]
        center = Point3(*chunk[:3])
        shape = np.array(chunk[3:]).reshape(3, 3)
        ells.append(Ellipsoid(center, shape))  # Ellipsoid rejects non-SPD matrices
    return DualEllipsoidShell(outer=ells[0], inner=ells[1])


def save_shell(shell: DualEllipsoidShell, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(shell_to_text(shell))


def load_shell(path: str) -> DualEllipsoidShell:
    with open(path, "r", encoding="utf-8") as fh:
        return shell_from_text(fh.read())

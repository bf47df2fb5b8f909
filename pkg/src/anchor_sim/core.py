"""Shared geometric and random-stream primitives used across the stack."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]; the boundary is assigned to +pi."""
    if not math.isfinite(a):
        raise ValueError(f"angle must be finite, got {a!r}")
    r = math.fmod(a, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    elif r > math.pi:
        r -= TWO_PI
    return r


def _require_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class BasePose:
    """Planar robot base pose (x, y, heading); heading normalized to (-pi, pi]."""

    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        _require_finite("BasePose", self.x, self.y, self.theta)
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def heading_vector(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta)])


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        _require_finite("Point3", self.x, self.y, self.z)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


class Frame(Enum):
    WORLD = "world"
    BASE = "base"


@dataclass(frozen=True)
class PointCloud:
    """Ordered set of 3D points tagged with the frame they live in."""

    points: tuple[Point3, ...]
    frame: Frame = Frame.WORLD

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", tuple(self.points))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    @cached_property
    def xyz(self) -> np.ndarray:
        """(N, 3) array view of the points; empty clouds give shape (0, 3)."""
        if not self.points:
            return np.zeros((0, 3))
        arr = np.array([[p.x, p.y, p.z] for p in self.points])
        arr.flags.writeable = False
        return arr

    @staticmethod
    def from_array(arr: np.ndarray, frame: Frame = Frame.WORLD) -> "PointCloud":
        pts = tuple(Point3(float(x), float(y), float(z)) for x, y, z in np.atleast_2d(arr))
        return PointCloud(pts, frame)


@dataclass(frozen=True)
class EEPose:
    """Desired end-effector pose: position, unit approach direction, roll."""

    position: Point3
    approach_dir: tuple[float, float, float]
    roll: float = 0.0

    def __post_init__(self) -> None:
        ax, ay, az = self.approach_dir
        _require_finite("EEPose.approach_dir", ax, ay, az)
        _require_finite("EEPose.roll", self.roll)
        n = math.sqrt(ax * ax + ay * ay + az * az)
        if n < 1e-12:
            raise ValueError("approach_dir must be nonzero")
        object.__setattr__(self, "approach_dir", (ax / n, ay / n, az / n))

    def approach_array(self) -> np.ndarray:
        return np.array(self.approach_dir)


@dataclass(frozen=True)
class Box2:
    """Axis-aligned planar box [min_x, max_x] x [min_y, max_y]."""

    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self) -> None:
        _require_finite("Box2", self.min_x, self.min_y, self.max_x, self.max_y)
        if self.max_x < self.min_x or self.max_y < self.min_y:
            raise ValueError("Box2 max must be >= min on both axes")

    def area(self) -> float:
        return (self.max_x - self.min_x) * (self.max_y - self.min_y)

    def center(self) -> np.ndarray:
        return np.array([(self.min_x + self.max_x) / 2.0, (self.min_y + self.max_y) / 2.0])

    def intersection_area(self, other: "Box2") -> float:
        w = min(self.max_x, other.max_x) - max(self.min_x, other.min_x)
        h = min(self.max_y, other.max_y) - max(self.min_y, other.min_y)
        if w <= 0.0 or h <= 0.0:
            return 0.0
        return w * h

    def translated(self, dx: float, dy: float) -> "Box2":
        return Box2(self.min_x + dx, self.min_y + dy, self.max_x + dx, self.max_y + dy)

    @staticmethod
    def from_points(xy: np.ndarray) -> "Box2":
        xy = np.atleast_2d(xy)
        return Box2(float(xy[:, 0].min()), float(xy[:, 1].min()),
                    float(xy[:, 0].max()), float(xy[:, 1].max()))


def se2_transform(pose: BasePose, p_local: Point3) -> Point3:
    """Map a point from the pose's local frame into the world frame (z unchanged)."""
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return Point3(pose.x + c * p_local.x - s * p_local.y,
                  pose.y + s * p_local.x + c * p_local.y,
                  p_local.z)


def se2_inverse(pose: BasePose) -> BasePose:
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return BasePose(-(c * pose.x + s * pose.y), -(-s * pose.x + c * pose.y), -pose.theta)


def world_to_base(pose: BasePose, p_world: Point3) -> Point3:
    """Map a world-frame point into the frame of `pose`."""
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    dx, dy = p_world.x - pose.x, p_world.y - pose.y
    return Point3(c * dx + s * dy, -s * dx + c * dy, p_world.z)


def world_to_base_many(pose: BasePose, pts: np.ndarray) -> np.ndarray:
    """Vectorized world->base for an (N, 3) array."""
    pts = np.atleast_2d(pts)
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    dx = pts[:, 0] - pose.x
    dy = pts[:, 1] - pose.y
    out = np.empty_like(pts, dtype=float)
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    out[:, 2] = pts[:, 2]
    return out


_SEED_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class RngSeed:
    """Explicit 64-bit seed; every random draw in the stack flows from one of these."""

    seed: int

    def __post_init__(self) -> None:
        if not isinstance(self.seed, int) or not (0 <= self.seed <= _SEED_MASK):
            raise ValueError("seed must be a 64-bit unsigned integer")

    def derive(self, *parts: int | str) -> "RngSeed":
        """Derive an independent named substream, stable across runs and platforms."""
        h = hashlib.sha256()
        h.update(b"anchor-sim")
        h.update(self.seed.to_bytes(8, "little"))
        for p in parts:
            if isinstance(p, int):
                h.update(b"i" + p.to_bytes(16, "little", signed=True))
            else:
                b = str(p).encode("utf-8")
                h.update(b"s" + len(b).to_bytes(4, "little") + b)
        return RngSeed(int.from_bytes(h.digest()[:8], "little"))

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed))

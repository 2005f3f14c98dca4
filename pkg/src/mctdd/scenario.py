"""Deployment geometry: fixed bodies, the deployment box and randomized
nanomachine placement under minimum-distance constraints.

Lengths are micrometers throughout.
"""

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Vec3",
    "Body",
    "Box",
    "Scenario",
    "PlacementError",
    "place_dgns",
    "distance",
    "validate",
]


class PlacementError(RuntimeError):
    """No valid placement was found within the attempt budget."""


@dataclass(frozen=True, slots=True)
class Vec3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError(f"coordinates must be finite, got {(self.x, self.y, self.z)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True, slots=True)
class Body:
    """A spherical body; radius 0 models a point source."""

    center: Vec3
    radius: float
    role: str  # "controller" | "tissue" | "dgn"

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if self.role not in ("controller", "tissue", "dgn"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "controller" and self.radius != 0:
            raise ValueError("controller is a point source (radius 0)")


@dataclass(frozen=True, slots=True)
class Box:
    """Axis-aligned box given by two opposite corners."""

    lo: Vec3
    hi: Vec3

    def __post_init__(self):
        if not (self.lo.x < self.hi.x and self.lo.y < self.hi.y and self.lo.z < self.hi.z):
            raise ValueError("box is degenerate: lo must be strictly below hi on every axis")

    def contains(self, p: Vec3) -> bool:
        return (
            self.lo.x <= p.x <= self.hi.x
            and self.lo.y <= p.y <= self.hi.y
            and self.lo.z <= p.z <= self.hi.z
        )


@dataclass(frozen=True)
class Scenario:
    """One deployment: fixed controller and tissue, randomized DgNs, physics."""

    controller: Body
    tissue: Body
    dgns: tuple  # tuple[Body, ...]
    region: Box
    diffusion_coefficient: float  # um^2/s
    min_dgn_pair_distance: float = 6.0
    min_fixed_distance: float = 10.0

    def __post_init__(self):
        if self.diffusion_coefficient <= 0:
            raise ValueError("diffusion coefficient must be > 0")
        object.__setattr__(self, "dgns", tuple(self.dgns))

    def dgn_centers(self) -> np.ndarray:
        return np.array([[b.center.x, b.center.y, b.center.z] for b in self.dgns], dtype=np.float64)


def distance(a: Vec3, b: Vec3) -> float:
    """Euclidean distance between two points, in micrometers."""
    return math.sqrt((a.x - b.x) ** 2 + (a.y - b.y) ** 2 + (a.z - b.z) ** 2)


def place_dgns(
    region: Box,
    count: int,
    min_pair: float,
    fixed_bodies: list,
    min_fixed: float,
    rng: np.random.Generator,
    attempt_budget: int = 1_000_000,
) -> list:
    """Sample `count` DgN centers uniformly in `region` by rejection.

    Distances are measured center to center. Raises PlacementError once
    `attempt_budget` candidate draws have been rejected, which signals an
    over-constrained packing rather than looping forever.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if min_pair < 0 or min_fixed < 0:
        raise ValueError("minimum distances must be >= 0")

    fixed = np.array(
        [[b.center.x, b.center.y, b.center.z] for b in fixed_bodies], dtype=np.float64
    ).reshape(len(fixed_bodies), 3)
    lo = region.lo.as_array()
    span = region.hi.as_array() - lo

    placed = np.empty((count, 3), dtype=np.float64)
    n_placed = 0
    draws = 0
    while n_placed < count:
        if draws >= attempt_budget:
            raise PlacementError(
                f"placed {n_placed}/{count} DgNs after {draws} candidate draws; "
                f"constraints (min_pair={min_pair}, min_fixed={min_fixed}) look over-constrained"
            )
        cand = lo + span * rng.random(3)
        draws += 1
        if fixed.size and np.min(np.linalg.norm(fixed - cand, axis=1)) < min_fixed:
            continue
        if n_placed and np.min(np.linalg.norm(placed[:n_placed] - cand, axis=1)) < min_pair:
            continue
        placed[n_placed] = cand
        n_placed += 1
    return [Vec3(*placed[i]) for i in range(count)]


def validate(scenario: Scenario) -> list:
    """Check every Scenario invariant; returns one message per violation."""
    out = []
    for i, b in enumerate(scenario.dgns):
        if not scenario.region.contains(b.center):
            out.append(f"dgn {i} at {b.center} lies outside the deployment region")
    for i, b in enumerate(scenario.dgns):
        for name, fixed in (("controller", scenario.controller), ("tissue", scenario.tissue)):
            d = distance(b.center, fixed.center)
            if d < scenario.min_fixed_distance:
                out.append(
                    f"dgn {i} is {d:.6g} um from the {name} center "
                    f"(minimum {scenario.min_fixed_distance})"
                )
    n = len(scenario.dgns)
    for i in range(n):
        for j in range(i + 1, n):
            d = distance(scenario.dgns[i].center, scenario.dgns[j].center)
            if d < scenario.min_dgn_pair_distance:
                out.append(
                    f"dgn pair ({i}, {j}) at distance {d:.6g} um "
                    f"(minimum {scenario.min_dgn_pair_distance})"
                )
    return out

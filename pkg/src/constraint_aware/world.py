"""Quasi-static model of a composite body on a prismatic or revolute joint.

The hand and the grasped object move as one body. A commanded displacement is
split into the part the joint admits and the part it rejects; the body follows
the admissible part and the joint pushes back on the rejected part with a
linear stiffness ``k_c``. Inertia is ignored, so the reaction is exactly
``-k_c * rejected_displacement`` at every step.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .geom import EPS_ZERO, GeometryError, norm, normalize

DEFAULT_STIFFNESS = 1000.0  # N/m
DEFAULT_DEAD_ZONE = 0.5  # N


class OnAxis(GeometryError):
    """Revolute body position lies on the rotation axis; tangent undefined."""


class JointKind(str, enum.Enum):
    PRISMATIC = "prismatic"
    REVOLUTE = "revolute"


class ClosureType(str, enum.Enum):
    ACTIVE = "active"
    PASSIVE = "passive"
    LAZY = "lazy"


@dataclass(frozen=True)
class JointConstraint:
    kind: JointKind
    axis: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", JointKind(self.kind))
        object.__setattr__(self, "axis", normalize(np.asarray(self.axis, dtype=np.float64)))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if self.kind is JointKind.REVOLUTE and not self.radius > 0:
            raise ValueError(f"revolute joint needs radius > 0, got {self.radius}")

    @classmethod
    def prismatic(cls, axis) -> JointConstraint:
        return cls(JointKind.PRISMATIC, np.asarray(axis, dtype=np.float64))

    @classmethod
    def revolute(cls, center, axis, radius: float) -> JointConstraint:
        return cls(JointKind.REVOLUTE, np.asarray(axis, dtype=np.float64),
                   np.asarray(center, dtype=np.float64), float(radius))

    def radial(self, pos: np.ndarray) -> np.ndarray:
        """Component of ``pos - center`` perpendicular to the rotation axis."""
        r = pos - self.center
        return r - np.dot(r, self.axis) * self.axis


@dataclass(frozen=True)
class BodyState:
    position: np.ndarray
    travel: float = 0.0
    on_constraint: bool = True
    # revolute only: accumulated rotation about the joint axis, radians
    angle: float = 0.0


@dataclass(frozen=True)
class StepOutcome:
    new_state: BodyState
    constraint_force: np.ndarray
    admissible_dir: np.ndarray
    friction_force: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def total_force(self) -> np.ndarray:
        return self.constraint_force + self.friction_force


@dataclass(frozen=True)
class GraspModel:
    closure_type: ClosureType
    scale: float
    slip_force: float
    slip_torque: float
    rigid_orientation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "closure_type", ClosureType(self.closure_type))
        if not self.scale > 0:
            raise ValueError("grasp scale must be positive")
        if not (self.slip_force > 0 and self.slip_torque > 0):
            raise ValueError("slip thresholds must be positive")


def admissible_direction(joint: JointConstraint, pos: np.ndarray, sense: float = 1.0) -> np.ndarray:
    sgn = 1.0 if sense >= 0 else -1.0
    if joint.kind is JointKind.PRISMATIC:
        return sgn * joint.axis
    r = joint.radial(np.asarray(pos, dtype=np.float64))
    if norm(r) <= EPS_ZERO:
        raise OnAxis(f"position {pos} is on the rotation axis")
    return sgn * normalize(np.cross(joint.axis, r))


def initial_state(joint: JointConstraint, position) -> BodyState:
    pos = np.asarray(position, dtype=np.float64).reshape(3)
    if joint.kind is JointKind.REVOLUTE:
        pos = _snap(joint, pos)
    return BodyState(position=pos)


def _snap(joint: JointConstraint, pos: np.ndarray) -> np.ndarray:
    r = joint.radial(pos)
    if norm(r) <= EPS_ZERO:
        raise OnAxis(f"position {pos} is on the rotation axis")
    h = np.dot(pos - joint.center, joint.axis)
    return joint.center + h * joint.axis + joint.radius * normalize(r)


def step(
    joint: JointConstraint,
    state: BodyState,
    d: np.ndarray,
    step_len: float,
    stiffness: float = DEFAULT_STIFFNESS,
    friction: float = 0.0,
) -> StepOutcome:
    """Advance the body by ``step_len`` along commanded direction ``d``.

    ``friction`` is an optional Coulomb coefficient on the constraint reaction;
    it acts along the joint, against the motion.
    """
    if not step_len > 0:
        raise ValueError("step_len must be positive")
    t = admissible_direction(joint, state.position)
    delta = step_len * np.asarray(d, dtype=np.float64)
    along = float(np.dot(delta, t))
    rejected = delta - along * t
    force = -stiffness * rejected

    pos = state.position + along * t
    angle = state.angle
    if joint.kind is JointKind.REVOLUTE:
        pos = _snap(joint, pos)
        r0, r1 = joint.radial(state.position), joint.radial(pos)
        angle += float(np.arctan2(np.dot(np.cross(r0, r1), joint.axis), np.dot(r0, r1)))

    fric = np.zeros(3)
    if friction > 0 and abs(along) > EPS_ZERO:
        fric = -friction * norm(force) * np.sign(along) * t

    new = BodyState(position=pos, travel=state.travel + along, on_constraint=True, angle=angle)
    return StepOutcome(new_state=new, constraint_force=force, admissible_dir=t, friction_force=fric)


def sensed_force(
    outcome: StepOutcome,
    grasp: GraspModel,
    rng: np.random.Generator | None = None,
    sigma: float = 0.0,
    preload=None,
) -> np.ndarray:
    """Wrist reading: scaled reaction plus contact preload plus sensor noise."""
    f = grasp.scale * outcome.total_force
    if preload is not None:
        f = f + np.asarray(preload, dtype=np.float64)
    if sigma > 0:
        if rng is None:
            raise ValueError("sensor noise requested without an rng")
        f = f + rng.normal(0.0, sigma, size=3)
    return f


def dead_zone(force: np.ndarray, f_min: float) -> np.ndarray | None:
    """Return ``force`` if its norm exceeds ``f_min``; ``None`` flags zero."""
    if f_min < 0:
        raise ValueError("f_min must be non-negative")
    n = norm(force)
    if n <= f_min or n <= EPS_ZERO:
        return None
    return force


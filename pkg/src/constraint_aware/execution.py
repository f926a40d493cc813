"""Running a trained policy on a constrained object.

One control tick moves the hand ``step_len`` along the current motion
direction, reads the wrist force and lets the policy pick the next direction.
On revolute joints the hand also turns: either by the change in motion
direction (free relative orientation), or, when the grasp fixes the relative
orientation, by a per-tick rotation amount that a torque-threshold rule keeps
matched to the object.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import geom, world
from .geom import Quat
from .nn import PolicyNet, load_weights
from .ppo import observe


class WeightsMissing(FileNotFoundError):
    pass


class ZeroRadius(ValueError):
    pass


class SlipFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class ExecConfig:
    workplane_normal: np.ndarray
    initial_dir: np.ndarray
    constraint_kind: world.JointKind = world.JointKind.PRISMATIC
    rotation_radius: float = 0.0
    step_len: float = 0.01  # m per tick
    control_period: float = 0.1  # s, bookkeeping only
    f_min: float = world.DEFAULT_DEAD_ZONE
    preload: np.ndarray = field(default_factory=lambda: np.zeros(3))
    torque_alpha: float = 0.1  # N m
    torque_beta_deg: float = 1.0
    max_additional_iters: int = 90

    def __post_init__(self):
        n = geom.normalize(np.asarray(self.workplane_normal, dtype=np.float64))
        d = geom.normalize(np.asarray(self.initial_dir, dtype=np.float64))
        object.__setattr__(self, "workplane_normal", n)
        object.__setattr__(self, "initial_dir", d)
        object.__setattr__(self, "constraint_kind", world.JointKind(self.constraint_kind))
        object.__setattr__(self, "preload", np.asarray(self.preload, dtype=np.float64).reshape(3))
        if not self.step_len > 0:
            raise ValueError("step_len must be positive")
        if abs(float(np.dot(d, n))) > 1e-6:
            raise ValueError("initial direction must lie in the workplane")
        if not self.torque_beta_deg > 0:
            raise ValueError("torque_beta_deg must be positive")

    @property
    def beta(self) -> float:
        return math.radians(self.torque_beta_deg)


@dataclass(frozen=True)
class HandState:
    orientation: Quat = field(default_factory=Quat.identity)
    rotation_amount: float = 0.0  # rad per tick
    fingertip_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # accumulated signed rotation about the workplane normal, rad
    angle: float = 0.0


class Policy:
    """Deterministic (mean-action) wrapper around trained weights."""

    def __init__(self, net: PolicyNet, params: np.ndarray):
        self.net = net
        self.params = params

    @classmethod
    def load(cls, path: str | Path | None) -> Policy:
        if path is None or not Path(path).is_file():
            raise WeightsMissing(f"weights file not found: {path}")
        return cls(*load_weights(path))

    def action(self, obs: np.ndarray) -> np.ndarray:
        return np.tanh(self.net.forward(self.params, obs).mean[0])


def policy_step(policy: Policy | None, f_sensed: np.ndarray, d: np.ndarray, cfg: ExecConfig) -> np.ndarray:
    """Next motion direction from the sensed wrist force.

    Forces inside the dead zone leave ``d`` unchanged. Otherwise the policy
    correction is applied and the result is projected back onto the workplane.
    """
    if policy is None:
        raise WeightsMissing("no policy weights loaded")
    f = np.asarray(f_sensed, dtype=np.float64) - cfg.preload
    if world.dead_zone(f, cfg.f_min) is None:
        return d
    d_new = geom.update_direction(d, policy.action(observe(f, d, cfg.f_min)))
    in_plane = geom.project_onto_plane(d_new, cfg.workplane_normal)
    if geom.norm(in_plane) <= geom.EPS_ZERO:
        return d
    return geom.normalize(in_plane)


def orient_step(hand: HandState, d_prev: np.ndarray, d_new: np.ndarray, normal: np.ndarray) -> HandState:
    """Turn the hand by the rotation that took ``d_prev`` to ``d_new``."""
    dq = geom.rotation_between(d_prev, d_new)
    return replace(
        hand,
        orientation=geom.quat_compose(dq, hand.orientation),
        angle=hand.angle + geom.signed_angle(d_prev, d_new, normal),
    )


def rotate_hand(hand: HandState, angle: float, normal: np.ndarray) -> HandState:
    dq = Quat.from_axis_angle(normal, angle)
    return replace(hand, orientation=geom.quat_compose(dq, hand.orientation), angle=hand.angle + angle)


def rotation_adjustment(tau: float, alpha: float, beta: float) -> float:
    """Threshold rule for the per-tick rotation correction.

    Zero inside ``|tau| <= alpha``; ``+beta`` when the hand lags
    (``tau > alpha``); ``-beta`` when it leads (``tau < -alpha``).
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    if abs(tau) <= alpha:
        return 0.0
    return beta if tau > alpha else -beta


def additional_rotation_step(w: float, tau: float, alpha: float, beta: float) -> float:
    return w + rotation_adjustment(tau, alpha, beta)


def init_rotation_amount(step_len: float, radius: float) -> float:
    if not radius > 0:
        raise ZeroRadius(f"rotation radius must be positive, got {radius}")
    return step_len / radius


@dataclass
class TickResult:
    """What happened during one control tick."""

    d_used: np.ndarray
    outcome: world.StepOutcome
    f_sensed: np.ndarray
    d_next: np.ndarray
    hand: HandState
    torque_pre: float = 0.0
    torque: float = 0.0
    additional_iters: int = 0
    slip: str | None = None


def combined_policy_tick(
    joint: world.JointConstraint,
    body: world.BodyState,
    hand: HandState,
    d: np.ndarray,
    direction_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    sense_fn: Callable[[world.StepOutcome], np.ndarray],
    torque_fn: Callable[[HandState, world.BodyState], float],
    cfg: ExecConfig,
    step_len: float,
    stiffness: float,
    slip_torque: float,
    sense: float = 1.0,
    friction: float = 0.0,
) -> TickResult:
    """Translate and rotate together, then run the torque rule until settled.

    The hand turns by ``sense * w`` with the translation. While the torque
    about the workplane normal exceeds ``torque_alpha`` the hand turns by the
    correction alone and ``w`` absorbs it. ``direction_fn`` then picks the
    next motion direction.
    """
    n = cfg.workplane_normal
    out = world.step(joint, body, d, step_len, stiffness, friction)
    hand = rotate_hand(hand, sense * hand.rotation_amount, n)
    tau = torque_fn(hand, out.new_state)
    res = TickResult(d_used=d, outcome=out, f_sensed=sense_fn(out), d_next=d, hand=hand,
                     torque_pre=tau, torque=tau)
    iters = 0
    while abs(tau) > cfg.torque_alpha:
        if abs(tau) > slip_torque:
            res.slip = "torque"
            break
        if iters >= cfg.max_additional_iters:
            res.slip = "additional-policy-cap"
            break
        dw = rotation_adjustment(sense * tau, cfg.torque_alpha, cfg.beta)
        hand = rotate_hand(hand, sense * dw, n)
        hand = replace(hand, rotation_amount=hand.rotation_amount + dw)
        tau = torque_fn(hand, out.new_state)
        iters += 1
    res.hand, res.torque, res.additional_iters = hand, tau, iters
    if res.slip is None:
        res.d_next = direction_fn(res.f_sensed, d)
    return res

"""Desk-scale manipulation scenarios and the episode runner.

Five built-in scenarios cover three prismatic tasks (drawer, plate, pole) with
different grasps and two revolute tasks (door, handle). Grasp scales, slip
thresholds and radii are harness constants chosen for this simulator.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import geom, world
from .baseline import LABEL as BASELINE_LABEL
from .baseline import BaselineGains, baseline_step
from .config import ConfigError, dump_toml, read_toml
from .execution import (
    ExecConfig,
    HandState,
    Policy,
    WeightsMissing,
    combined_policy_tick,
    init_rotation_amount,
    orient_step,
    policy_step,
)
from .world import ClosureType, GraspModel, JointConstraint, JointKind

SUCCESS, SLIP, TIMEOUT = "Success", "Slip", "Timeout"

TRACE_COLUMNS = [
    "tick", "time_s", "pos_x", "pos_y", "pos_z", "d_x", "d_y", "d_z",
    "f_x", "f_y", "f_z", "force_norm", "angle_err_deg", "torque", "torque_pre",
    "reward_equiv", "travel", "object_angle_deg", "hand_angle_deg",
    "rotation_amount_deg", "additional_iters", "outcome",
]
SUMMARY_COLUMNS = [
    "scenario", "controller", "offset_deg", "seed", "outcome", "reason", "ticks",
    "final_angle_err_deg", "progress", "ticks_to_success",
]


@dataclass(frozen=True)
class Scenario:
    name: str
    joint: JointConstraint
    grasp: GraspModel
    initial_offset_deg: float
    max_ticks: int
    success_travel: float | None = None  # m
    success_angle: float | None = None  # rad
    workplane_normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    start_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sense: float = 1.0
    initial_dir: np.ndarray | None = None
    step_len: float = 0.01
    control_period: float = 0.1
    f_min: float = world.DEFAULT_DEAD_ZONE
    preload: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sensor_sigma: float = 0.01  # N per axis
    stiffness: float = world.DEFAULT_STIFFNESS
    friction: float = 0.0
    torque_stiffness: float = 10.0  # N m / rad
    torque_alpha: float = 0.1  # N m
    torque_beta_deg: float = 1.0
    additional_policy: bool = True
    max_additional_iters: int = 90

    def __post_init__(self):
        for name in ("workplane_normal", "start_position", "preload"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        object.__setattr__(self, "workplane_normal", geom.normalize(self.workplane_normal))
        if self.initial_dir is not None:
            object.__setattr__(self, "initial_dir", geom.normalize(np.asarray(self.initial_dir, dtype=np.float64)))
        if (self.success_travel is None) == (self.success_angle is None):
            raise ValueError(f"{self.name}: set exactly one of success_travel / success_angle")
        if self.max_ticks < 1:
            raise ValueError("max_ticks must be positive")
        if self.revolute:
            if self.success_angle is None:
                raise ValueError(f"{self.name}: revolute scenarios use success_angle")
            if abs(abs(float(np.dot(self.joint.axis, self.workplane_normal))) - 1.0) > 1e-9:
                raise ValueError(f"{self.name}: workplane normal must equal the rotation axis")
        else:
            if self.success_travel is None:
                raise ValueError(f"{self.name}: prismatic scenarios use success_travel")
            if abs(float(np.dot(self.joint.axis, self.workplane_normal))) > 1e-9:
                raise ValueError(f"{self.name}: prismatic axis must lie in the workplane")

    @property
    def revolute(self) -> bool:
        return self.joint.kind is JointKind.REVOLUTE

    @property
    def combined(self) -> bool:
        return self.revolute and self.grasp.rigid_orientation and self.additional_policy

    def with_(self, **changes) -> Scenario:
        return replace(self, **changes)

    def with_grasp(self, **changes) -> Scenario:
        return replace(self, grasp=replace(self.grasp, **changes))

    def opening_sense(self) -> float:
        if self.initial_dir is not None:
            t = world.admissible_direction(self.joint, self._start(), 1.0)
            return 1.0 if float(np.dot(self.initial_dir, t)) >= 0 else -1.0
        return 1.0 if self.sense >= 0 else -1.0

    def _start(self) -> np.ndarray:
        return world.initial_state(self.joint, self.start_position).position

    def initial_direction(self, offset_deg: float | None = None) -> np.ndarray:
        """Start direction: admissible direction turned by ``offset_deg`` in-plane.

        Without an explicit offset a configured ``initial_dir`` is used as is.
        """
        if offset_deg is None and self.initial_dir is not None:
            return geom.normalize(geom.project_onto_plane(self.initial_dir, self.workplane_normal))
        off = self.initial_offset_deg if offset_deg is None else offset_deg
        t = world.admissible_direction(self.joint, self._start(), self.opening_sense())
        return geom.normalize(geom.rotate_about(t, self.workplane_normal, math.radians(off)))

    def exec_config(self, d0: np.ndarray) -> ExecConfig:
        return ExecConfig(
            workplane_normal=self.workplane_normal,
            initial_dir=d0,
            constraint_kind=self.joint.kind,
            rotation_radius=self.joint.radius,
            step_len=self.step_len,
            control_period=self.control_period,
            f_min=self.f_min,
            preload=self.preload,
            torque_alpha=self.torque_alpha,
            torque_beta_deg=self.torque_beta_deg,
            max_additional_iters=self.max_additional_iters,
        )

    # -- config file round trip ---------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        joint = {"kind": self.joint.kind.value, "axis": self.joint.axis.tolist()}
        if self.revolute:
            joint.update(center=self.joint.center.tolist(), radius=self.joint.radius)
        out = {
            "name": self.name,
            "max_ticks": self.max_ticks,
            "initial_offset_deg": self.initial_offset_deg,
            "success": ({"travel": self.success_travel} if self.success_travel is not None
                        else {"angle_deg": math.degrees(self.success_angle)}),
            "joint": joint,
            "grasp": {
                "closure_type": self.grasp.closure_type.value,
                "scale": self.grasp.scale,
                "slip_force": self.grasp.slip_force,
                "slip_torque": self.grasp.slip_torque,
                "rigid_orientation": self.grasp.rigid_orientation,
            },
            "motion": {
                "workplane_normal": self.workplane_normal.tolist(),
                "start_position": self.start_position.tolist(),
                "sense": self.sense,
            },
            "execution": {
                "step_len": self.step_len,
                "control_period": self.control_period,
                "f_min": self.f_min,
                "preload": self.preload.tolist(),
                "sensor_sigma": self.sensor_sigma,
                "stiffness": self.stiffness,
                "friction": self.friction,
                "torque_stiffness": self.torque_stiffness,
                "torque_alpha": self.torque_alpha,
                "torque_beta_deg": self.torque_beta_deg,
                "additional_policy": self.additional_policy,
                "max_additional_iters": self.max_additional_iters,
            },
        }
        if self.initial_dir is not None:
            out["motion"]["initial_dir"] = self.initial_dir.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any], base: Scenario | None = None) -> Scenario:
        """Build from a config mapping; missing keys come from ``base``."""
        known = {"name", "max_ticks", "initial_offset_deg", "success", "joint", "grasp", "motion", "execution", "base"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario key(s): {', '.join(sorted(unknown))}")
        ref = base.to_dict() if base is not None else {}

        def section(key):
            merged = dict(ref.get(key, {}))
            if key == "success" and key in data:
                merged = {}
            merged.update(data.get(key, {}))
            return merged

        sections = ("joint", "grasp", "motion", "execution", "success")
        joint_d, grasp_d, motion_d, exec_d, succ = (section(k) for k in sections)
        try:
            kind = JointKind(joint_d.get("kind", "prismatic"))
            if kind is JointKind.REVOLUTE:
                joint = JointConstraint.revolute(joint_d.get("center", [0.0, 0.0, 0.0]),
                                                 joint_d.get("axis", [0.0, 0.0, 1.0]), joint_d["radius"])
            else:
                joint = JointConstraint.prismatic(joint_d.get("axis", [1.0, 0.0, 0.0]))
            grasp = GraspModel(
                closure_type=ClosureType(grasp_d.get("closure_type", "lazy")),
                scale=float(grasp_d.get("scale", 1.0)),
                slip_force=float(grasp_d.get("slip_force", DEFAULT_SLIP_FORCE)),
                slip_torque=float(grasp_d.get("slip_torque", DEFAULT_SLIP_TORQUE)),
                rigid_orientation=bool(grasp_d.get("rigid_orientation", False)),
            )
            _check_keys(motion_d, {"workplane_normal", "start_position", "sense", "initial_dir"}, "motion")
            _check_keys(exec_d, set(_EXEC_KEYS), "execution")
            _check_keys(succ, {"travel", "angle_deg"}, "success")
            _check_keys(joint_d, {"kind", "axis", "center", "radius"}, "joint")
            _check_keys(grasp_d, {"closure_type", "scale", "slip_force", "slip_torque", "rigid_orientation"}, "grasp")
            default_start = [0.0, 0.0, 0.0]
            if kind is JointKind.REVOLUTE:
                default_start = (joint.center + joint.radius * _any_perpendicular(joint.axis)).tolist()
            default_normal = joint.axis.tolist() if kind is JointKind.REVOLUTE else [0.0, 0.0, 1.0]
            normal = motion_d.get("workplane_normal", default_normal)
            return cls(
                name=str(data.get("name", ref.get("name", "custom"))),
                joint=joint,
                grasp=grasp,
                initial_offset_deg=float(data.get("initial_offset_deg", ref.get("initial_offset_deg", 0.0))),
                max_ticks=int(data.get("max_ticks", ref.get("max_ticks", 100))),
                success_travel=None if "travel" not in succ else float(succ["travel"]),
                success_angle=None if "angle_deg" not in succ else math.radians(float(succ["angle_deg"])),
                workplane_normal=np.asarray(normal, dtype=np.float64),
                start_position=np.asarray(motion_d.get("start_position", default_start), dtype=np.float64),
                sense=float(motion_d.get("sense", 1.0)),
                initial_dir=(np.asarray(motion_d["initial_dir"], dtype=np.float64)
                             if "initial_dir" in motion_d else None),
                **{k: _EXEC_KEYS[k](v) for k, v in exec_d.items()},
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid scenario config: {e!r}") from e


_EXEC_KEYS = {
    "step_len": float, "control_period": float, "f_min": float,
    "preload": lambda v: np.asarray(v, dtype=np.float64), "sensor_sigma": float,
    "stiffness": float, "friction": float, "torque_stiffness": float,
    "torque_alpha": float, "torque_beta_deg": float, "additional_policy": bool,
    "max_additional_iters": int,
}


def _check_keys(d: dict, allowed: set, where: str):
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(extra))}")


def _any_perpendicular(axis: np.ndarray) -> np.ndarray:
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    return geom.normalize(geom.project_onto_plane(ref, axis))


DEFAULT_SLIP_FORCE = 40.0  # N
DEFAULT_SLIP_TORQUE = 2.0  # N m
# the active pole grasp squeezes hard and amplifies wrist force 2.5x; the
# fingertips give way at a lower sensed force than the lazy drawer grasp
POLE_SLIP_FORCE = 15.0  # N


def builtin_scenarios() -> list[Scenario]:
    z = np.array([0.0, 0.0, 1.0])
    deg90 = math.radians(90.0)

    def grasp(closure, scale, rigid=False, slip_force=DEFAULT_SLIP_FORCE):
        return GraspModel(closure, scale, slip_force, DEFAULT_SLIP_TORQUE, rigid)

    return [
        Scenario("drawer", JointConstraint.prismatic([-1.0, 0.0, 0.0]), grasp(ClosureType.LAZY, 1.0),
                 initial_offset_deg=30.0, max_ticks=60, success_travel=0.25),
        Scenario("plate", JointConstraint.prismatic([0.0, 1.0, 0.0]), grasp(ClosureType.PASSIVE, 0.3),
                 initial_offset_deg=-30.0, max_ticks=60, success_travel=0.25),
        Scenario("pole", JointConstraint.prismatic([1.0, 0.0, 0.0]),
                 grasp(ClosureType.ACTIVE, 2.5, slip_force=POLE_SLIP_FORCE),
                 initial_offset_deg=-30.0, max_ticks=60, success_travel=0.25),
        Scenario("door", JointConstraint.revolute([0.0, 0.0, 0.0], z, 0.4), grasp(ClosureType.LAZY, 1.0),
                 initial_offset_deg=15.0, max_ticks=150, success_angle=deg90,
                 start_position=np.array([0.4, 0.0, 0.0])),
        Scenario("handle", JointConstraint.revolute([0.0, 0.0, 0.0], z, 0.1),
                 grasp(ClosureType.PASSIVE, 0.3, rigid=True),
                 initial_offset_deg=15.0, max_ticks=60, success_angle=deg90,
                 start_position=np.array([0.1, 0.0, 0.0])),
    ]


def builtin(name: str) -> Scenario:
    for s in builtin_scenarios():
        if s.name == name:
            return s
    raise KeyError(name)


def builtin_names() -> list[str]:
    return [s.name for s in builtin_scenarios()]


def load_scenario(path: str | Path) -> Scenario:
    data = read_toml(path)
    base = None
    if "base" in data:
        try:
            base = builtin(data["base"])
        except KeyError:
            raise ConfigError(f"unknown base scenario {data['base']!r}; built-ins: {', '.join(builtin_names())}")
    return Scenario.from_dict(data, base=base)


def resolve_scenario(name_or_path: str) -> Scenario:
    if name_or_path in builtin_names():
        return builtin(name_or_path)
    p = Path(name_or_path)
    if p.suffix == ".toml" or p.is_file():
        return load_scenario(p)
    raise ConfigError(f"unknown scenario {name_or_path!r}; built-ins: {', '.join(builtin_names())}")


def save_scenario(path: str | Path, scenario: Scenario) -> Path:
    path = Path(path)
    path.write_text(dump_toml(scenario.to_dict()))
    return path


# -- controllers ---------------------------------------------------------------


class PolicyController:
    label = "policy"

    def __init__(self, policy: Policy | None):
        if policy is None:
            raise WeightsMissing("no policy weights loaded")
        self.policy = policy

    def direction(self, f_sensed: np.ndarray, d: np.ndarray, cfg: ExecConfig) -> np.ndarray:
        return policy_step(self.policy, f_sensed, d, cfg)


class BaselineController:
    label = BASELINE_LABEL

    def __init__(self, gains: BaselineGains):
        self.gains = gains

    def direction(self, f_sensed: np.ndarray, d: np.ndarray, cfg: ExecConfig) -> np.ndarray:
        return baseline_step(f_sensed - cfg.preload, d, self.gains, cfg.workplane_normal)


# -- episodes --------------------------------------------------------------------


def torque_model(scenario: Scenario, hand: HandState, body: world.BodyState) -> float:
    """Torque about the workplane normal from hand/object angle mismatch.

    Positive when the hand lags the object's rotation.
    """
    if not scenario.grasp.rigid_orientation:
        raise ValueError("torque model applies to rigid-orientation grasps only")
    sign = 1.0 if float(np.dot(scenario.joint.axis, scenario.workplane_normal)) >= 0 else -1.0
    return scenario.torque_stiffness * (sign * body.angle - hand.angle)


@dataclass
class EpisodeTrace:
    scenario: str
    controller: str
    seed: int
    offset_deg: float
    rows: list[dict] = field(default_factory=list)
    outcome: str = TIMEOUT
    reason: str = ""
    progress: float = 0.0  # m for prismatic, deg for revolute

    @property
    def ticks(self) -> int:
        return len(self.rows)

    @property
    def final_angle_err_deg(self) -> float:
        return abs(self.rows[-1]["angle_err_deg"]) if self.rows else float("nan")

    def settle_tick(self, tol_deg: float = 5.0) -> int:
        """Ticks until |angle error| stays below ``tol_deg`` for the rest of the episode."""
        err = np.abs(self.column("angle_err_deg"))
        bad = np.nonzero(err >= tol_deg)[0]
        return 0 if len(bad) == 0 else int(bad[-1]) + 1

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def directions(self) -> np.ndarray:
        return np.array([[r["d_x"], r["d_y"], r["d_z"]] for r in self.rows])

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "controller": self.controller,
            "offset_deg": self.offset_deg,
            "seed": self.seed,
            "outcome": self.outcome,
            "reason": self.reason,
            "ticks": self.ticks,
            "final_angle_err_deg": self.final_angle_err_deg,
            "progress": self.progress,
            "ticks_to_success": self.ticks if self.outcome == SUCCESS else "",
        }


def run_episode(scenario: Scenario, controller, seed: int, offset_deg: float | None = None) -> EpisodeTrace:
    """Tick until success, slip or ``max_ticks``.

    Revolute joints with a rigid-orientation grasp go through the combined
    policy unless ``scenario.additional_policy`` is off, in which case the hand
    turns with the motion direction like any revolute execution.
    """
    rng = np.random.default_rng(seed)
    d = scenario.initial_direction(offset_deg)
    cfg = scenario.exec_config(d)
    normal = cfg.workplane_normal
    sense = scenario.opening_sense()
    joint = scenario.joint
    body = world.initial_state(joint, scenario.start_position)
    t0 = world.admissible_direction(joint, body.position, sense)
    trace = EpisodeTrace(scenario.name, controller.label, seed,
                         geom.signed_angle(t0, d, normal) * 180.0 / math.pi)
    hand = HandState(fingertip_origin=body.position.copy())
    if scenario.revolute and scenario.grasp.rigid_orientation:
        hand = HandState(rotation_amount=init_rotation_amount(scenario.step_len, joint.radius),
                         fingertip_origin=body.position.copy())
    rigid = scenario.revolute and scenario.grasp.rigid_orientation

    def sense_fn(out):
        return world.sensed_force(out, scenario.grasp, rng, scenario.sensor_sigma, scenario.preload)

    def direction_fn(f, dd):
        return controller.direction(f, dd, cfg)

    def torque_fn(h, b):
        return torque_model(scenario, h, b)

    for tick in range(scenario.max_ticks):
        t_adm = world.admissible_direction(joint, body.position, sense)
        err = geom.signed_angle(t_adm, d, normal)
        slip = None
        iters = 0
        if scenario.combined:
            res = combined_policy_tick(joint, body, hand, d, direction_fn, sense_fn, torque_fn, cfg,
                                       scenario.step_len, scenario.stiffness, scenario.grasp.slip_torque,
                                       sense, scenario.friction)
            out, fs, d_next, hand = res.outcome, res.f_sensed, res.d_next, res.hand
            tau_pre, tau, iters, slip = res.torque_pre, res.torque, res.additional_iters, res.slip
        else:
            out = world.step(joint, body, d, scenario.step_len, scenario.stiffness, scenario.friction)
            fs = sense_fn(out)
            tau_pre = tau = torque_fn(hand, out.new_state) if rigid else 0.0
            if rigid and abs(tau) > scenario.grasp.slip_torque:
                slip = "torque"
            d_next = direction_fn(fs, d)
            if scenario.revolute:
                hand = orient_step(hand, d, d_next, normal)
        f_net = fs - scenario.preload
        f_norm = geom.norm(f_net)
        if slip is None and f_norm > scenario.grasp.slip_force:
            slip = "force"
        body = out.new_state
        progress = _progress(scenario, body, sense)
        trace.rows.append({
            "tick": tick,
            "time_s": round(tick * scenario.control_period, 10),
            "pos_x": body.position[0], "pos_y": body.position[1], "pos_z": body.position[2],
            "d_x": d[0], "d_y": d[1], "d_z": d[2],
            "f_x": fs[0], "f_y": fs[1], "f_z": fs[2],
            "force_norm": f_norm,
            "angle_err_deg": math.degrees(err),
            "torque": tau,
            "torque_pre": tau_pre,
            "reward_equiv": -geom.norm(out.constraint_force),
            "travel": sense * body.travel,
            "object_angle_deg": math.degrees(sense * body.angle) if scenario.revolute else 0.0,
            "hand_angle_deg": math.degrees(hand.angle),
            "rotation_amount_deg": math.degrees(hand.rotation_amount),
            "additional_iters": iters,
            "outcome": "",
        })
        trace.progress = progress
        if slip is not None:
            trace.outcome, trace.reason = SLIP, slip
            break
        target = scenario.success_travel if not scenario.revolute else math.degrees(scenario.success_angle)
        if progress >= target - 1e-12:
            trace.outcome = SUCCESS
            break
        d = d_next
    else:
        trace.outcome, trace.reason = TIMEOUT, "max_ticks"
    trace.rows[-1]["outcome"] = trace.outcome
    return trace


def _progress(scenario: Scenario, body: world.BodyState, sense: float) -> float:
    if scenario.revolute:
        return math.degrees(sense * body.angle)
    return sense * body.travel


# -- sweeps and files -------------------------------------------------------------


@dataclass
class SweepResult:
    traces: list[EpisodeTrace]

    @property
    def rows(self) -> list[dict]:
        return [t.summary() for t in self.traces]

    @property
    def success_rate(self) -> float:
        return sum(t.outcome == SUCCESS for t in self.traces) / len(self.traces)


def _run_one(args):
    scenario, controller, seed, offset = args
    return run_episode(scenario, controller, seed, offset)


def sweep(scenario: Scenario, controller, offsets: Iterable[float], seeds: Iterable[int], jobs: int = 1) -> SweepResult:
    offsets, seeds = list(offsets), list(seeds)
    if not offsets or not seeds:
        raise ValueError("sweep needs at least one offset and one seed")
    if isinstance(controller, PolicyController) and controller.policy is None:
        raise WeightsMissing("no policy weights loaded")
    work = [(scenario, controller, int(s), float(o)) for o in offsets for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            traces = list(ex.map(_run_one, work))
    else:
        traces = [_run_one(w) for w in work]
    return SweepResult(traces)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_trace(path: str | Path, trace: EpisodeTrace) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in trace.rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    return path


def write_summary(path: str | Path, result: SweepResult) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in result.rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    return path


def trace_filename(trace: EpisodeTrace) -> str:
    ctrl = "policy" if trace.controller == "policy" else "baseline"
    return f"trace_{trace.scenario}_{ctrl}_off{trace.offset_deg:+.1f}_seed{trace.seed}.csv"

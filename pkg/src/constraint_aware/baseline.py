"""Least-force proxy controller used as the classical comparison.

The controller turns the motion direction toward the in-plane part of the raw
wrist force by an angle proportional to the force magnitude. Because the gain
multiplies a raw magnitude, a gain tuned on one grasp over- or under-reacts
on grasps that transmit force differently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom

LABEL = "least-force proxy"


@dataclass(frozen=True)
class BaselineGains:
    k_f: float  # rad per newton per tick
    theta_cap_deg: float = 90.0

    def __post_init__(self):
        if not self.k_f > 0:
            raise ValueError("k_f must be positive")
        if not self.theta_cap_deg > 0:
            raise ValueError("theta_cap_deg must be positive")

    def to_toml(self) -> str:
        return (f'label = "{LABEL}"\n'
                f"k_f = {self.k_f!r}\n"
                f"theta_cap_deg = {self.theta_cap_deg!r}\n")

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_toml())
        return path

    @classmethod
    def load(cls, path: str | Path) -> BaselineGains:
        from .config import read_toml

        data = read_toml(path)
        return cls(k_f=float(data["k_f"]), theta_cap_deg=float(data.get("theta_cap_deg", 90.0)))


def baseline_step(f_raw: np.ndarray, d: np.ndarray, gains: BaselineGains, normal: np.ndarray) -> np.ndarray:
    f_plane = geom.project_onto_plane(np.asarray(f_raw, dtype=np.float64), normal)
    if geom.norm(f_plane) <= geom.EPS_ZERO:
        return d
    turn = min(gains.k_f * geom.norm(f_raw), math.radians(gains.theta_cap_deg))
    side = np.sign(np.dot(np.cross(d, f_plane), normal))
    if side == 0:
        # force exactly along d or against it: no preferred side
        return d
    return geom.normalize(geom.rotate_about(d, normal, side * turn))

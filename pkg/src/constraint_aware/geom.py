"""Vector and quaternion primitives.

Vectors are plain ``numpy`` arrays of shape ``(3,)`` in float64. Quaternions
are stored scalar-first ``(w, x, y, z)`` and multiplied with the Hamilton
convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS_ZERO = 1e-12


class GeometryError(ValueError):
    pass


class ZeroVector(GeometryError):
    pass


class DegenerateUpdate(GeometryError):
    pass


class AntiparallelInput(GeometryError):
    pass


def vec3(x, y=None, z=None) -> np.ndarray:
    if y is None:
        v = np.asarray(x, dtype=np.float64).reshape(3)
    else:
        v = np.array([x, y, z], dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise GeometryError(f"non-finite vector {v}")
    return v


def norm(v: np.ndarray) -> float:
    return float(np.sqrt(np.dot(v, v)))


def normalize(v: np.ndarray) -> np.ndarray:
    n = norm(v)
    if not n > EPS_ZERO:
        raise ZeroVector(f"cannot normalize vector of norm {n:g}")
    return np.asarray(v, dtype=np.float64) / n


def update_direction(d: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Return ``(d + a) / |d + a|``, the action-driven direction update."""
    s = np.asarray(d, dtype=np.float64) + np.asarray(a, dtype=np.float64)
    n = norm(s)
    if not n > EPS_ZERO:
        raise DegenerateUpdate(f"|d + a| = {n:g} is below {EPS_ZERO:g}")
    return s / n


def angle_between(u: np.ndarray, v: np.ndarray) -> float:
    """Unsigned angle in radians, robust near 0 and pi."""
    return float(np.arctan2(norm(np.cross(u, v)), np.dot(u, v)))


def signed_angle(u: np.ndarray, v: np.ndarray, axis: np.ndarray) -> float:
    """Angle from ``u`` to ``v`` measured counter-clockwise about ``axis``."""
    c = np.cross(u, v)
    return float(np.arctan2(np.dot(c, axis), np.dot(u, v)))


def project_onto_plane(v: np.ndarray, normal: np.ndarray) -> np.ndarray:
    return v - np.dot(v, normal) * normal


def rotate_about(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation of ``v`` about unit ``axis``."""
    c, s = np.cos(angle), np.sin(angle)
    return v * c + np.cross(axis, v) * s + axis * np.dot(axis, v) * (1.0 - c)


@dataclass(frozen=True)
class Quat:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    @classmethod
    def identity(cls) -> Quat:
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, axis: np.ndarray, angle: float) -> Quat:
        u = normalize(axis)
        h = 0.5 * angle
        s = np.sin(h)
        return cls(float(np.cos(h)), float(u[0] * s), float(u[1] * s), float(u[2] * s))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def norm(self) -> float:
        return float(np.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2))

    def normalized(self) -> Quat:
        n = self.norm()
        if not n > EPS_ZERO:
            raise ZeroVector("zero quaternion")
        return Quat(self.w / n, self.x / n, self.y / n, self.z / n)

    def conj(self) -> Quat:
        return Quat(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: Quat) -> Quat:
        # Hamilton product, not renormalized
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quat(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def rotate(self, v: np.ndarray) -> np.ndarray:
        qv = Quat(0.0, float(v[0]), float(v[1]), float(v[2]))
        r = self * qv * self.conj()
        return np.array([r.x, r.y, r.z])

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        vn = np.sqrt(self.x**2 + self.y**2 + self.z**2)
        return float(2.0 * np.arctan2(vn, abs(self.w)))

    def angle_about(self, axis: np.ndarray) -> float:
        """Signed rotation angle about ``axis`` (twist component), in (-pi, pi]."""
        u = normalize(axis)
        proj = self.x * u[0] + self.y * u[1] + self.z * u[2]
        return float(2.0 * np.arctan2(proj, self.w)) if self.w >= 0 else float(
            2.0 * np.arctan2(-proj, -self.w)
        )

    def isclose(self, other: Quat, tol: float = 1e-9) -> bool:
        """Equality up to the double cover (q and -q are the same rotation)."""
        a, b = self.as_array(), other.as_array()
        return bool(min(np.max(np.abs(a - b)), np.max(np.abs(a + b))) <= tol)


def rotation_between(d_from: np.ndarray, d_to: np.ndarray) -> Quat:
    """Shortest-arc rotation taking unit ``d_from`` onto unit ``d_to``.

    The axis is ``d_from x d_to``; the angle is the angle between the two
    directions. Parallel inputs give the identity.
    """
    dot = float(np.dot(d_from, d_to))
    if dot <= -1.0 + EPS_ZERO:
        raise AntiparallelInput("rotation axis undefined for antiparallel directions")
    c = np.cross(d_from, d_to)
    cn = norm(c)
    if cn <= EPS_ZERO:
        if dot > 0:
            return Quat.identity()
        raise AntiparallelInput("rotation axis undefined for antiparallel directions")
    angle = np.arctan2(cn, dot)
    return Quat.from_axis_angle(c / cn, float(angle))


def quat_compose(dq: Quat, q: Quat) -> Quat:
    """``dq (x) q`` renormalized: apply ``q`` first, then ``dq``."""
    return (dq * q).normalized()

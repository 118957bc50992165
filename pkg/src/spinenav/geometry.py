"""Rigid 3D transforms, frame graphs, and seeded randomness.

Conventions (fixed once, tested everywhere):
  * A transform named ``A_from_B`` maps point coordinates FROM frame B TO
    frame A.
  * ``compose(a, b)`` applies ``b`` first, then ``a`` (matrix order ``a @ b``).
  * Units are millimeters and radians throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9
DRIFT_TOL = 1e-12


class NoPath(Exception):
    """The frame graph has no path between the requested frames."""


class DuplicateEdge(Exception):
    """An edge between the same pair of frames was added twice."""


def make_rng(seed) -> np.random.Generator:
    """Single entry point for all randomness so studies replay bit-for-bit."""
    return np.random.default_rng(seed)


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize zero vector")
    return v / n


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest proper rotation via SVD (projects out accumulated drift)."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: rotation (3x3, det=+1) plus translation (mm)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        drift = np.linalg.norm(r.T @ r - np.eye(3))
        if drift > DRIFT_TOL:
            r = _orthonormalize(r)
        if np.linalg.det(r) < 0:
            raise ValueError("reflection is not a rigid transform")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return RigidTransform(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        """Map points (shape (3,) or (N,3)) from the source to target frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Result applies ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def is_close(self, other: "RigidTransform", tol: float = ORTHO_TOL) -> bool:
        return (
            np.linalg.norm(self.rotation - other.rotation) <= tol
            and np.linalg.norm(self.translation - other.translation) <= tol
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def rotation_about(axis, angle: float) -> RigidTransform:
    """Rotation by ``angle`` rad about ``axis`` through the origin (Rodrigues)."""
    k = unit(axis)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    r = np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)
    return RigidTransform(r, np.zeros(3))


def translation(t) -> RigidTransform:
    return RigidTransform(np.eye(3), np.asarray(t, dtype=float))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix (QR of a Gaussian matrix, sign-fixed)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def random_transform(rng: np.random.Generator, max_translation: float = 100.0) -> RigidTransform:
    return RigidTransform(
        random_rotation(rng),
        rng.uniform(-max_translation, max_translation, size=3),
    )


def rotation_angle(r: np.ndarray) -> float:
    """Minimal rotation angle of a rotation matrix, in radians."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_log(r: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (minimal-angle branch).

    At exactly pi the axis is recovered from the largest diagonal entry of
    (R + I)/2, which removes the sign ambiguity of the skew part.
    """
    angle = rotation_angle(r)
    if angle < 1e-12:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        m = (r + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(m)))
        axis = m[:, k] / np.sqrt(max(m[k, k], 1e-300))
        return np.pi * unit(axis)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return angle / (2.0 * np.sin(angle)) * w


# Canonical frame ids used across the stack; FrameGraph accepts any strings.
TRACKER = "TRACKER"
DRB = "DRB"
CT_IMAGE = "CT_IMAGE"
CARM_AP = "CARM_AP"
CARM_LAT = "CARM_LAT"
ROBOT_BASE = "ROBOT_BASE"
TOOL = "TOOL"
JIG = "JIG"


@dataclass(frozen=True)
class FrameGraph:
    """Immutable directed graph of named frames; edges carry transforms.

    An edge (a, b) stores the transform mapping coordinates from a to b.
    Resolution follows the unique shortest path, inverting reversed edges.
    """

    edges: dict = field(default_factory=dict)

    def with_edge(self, frm: str, to: str, t: RigidTransform) -> "FrameGraph":
        if (frm, to) in self.edges or (to, frm) in self.edges:
            raise DuplicateEdge(f"edge {frm}<->{to} already present")
        new = dict(self.edges)
        new[(frm, to)] = t
        return FrameGraph(new)

    def frames(self):
        out = set()
        for a, b in self.edges:
            out.add(a)
            out.add(b)
        return out

    def resolve(self, frm: str, to: str) -> RigidTransform:
        """Transform mapping coordinates from ``frm`` to ``to``."""
        if frm == to:
            return RigidTransform.identity()
        adj = {}
        for (a, b), t in self.edges.items():
            adj.setdefault(a, []).append((b, t))
            adj.setdefault(b, []).append((a, t.inverse()))
        if frm not in adj or to not in adj:
            raise NoPath(f"no path {frm} -> {to}")
        # BFS: shortest path in edge count
        prev = {frm: None}
        queue = [frm]
        while queue:
            node = queue.pop(0)
            if node == to:
                break
            for nxt, t in adj.get(node, []):
                if nxt not in prev:
                    prev[nxt] = (node, t)
                    queue.append(nxt)
        if to not in prev:
            raise NoPath(f"no path {frm} -> {to}")
        chain = []
        node = to
        while prev[node] is not None:
            node, t = prev[node]
            chain.append(t)
        out = RigidTransform.identity()
        for t in reversed(chain):
            out = t.compose(out)
        return out


def resolve(g: FrameGraph, frm: str, to: str) -> RigidTransform:
    return g.resolve(frm, to)

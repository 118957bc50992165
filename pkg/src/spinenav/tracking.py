"""Simulated optical tracker: marker observations, tool pose estimation,
pivot (tip) calibration, and dynamic-reference-base relative tracking.

All navigation output is patient-relative: poses are re-expressed in the
DRB frame so a rigid motion of the whole patient-side scene cancels out.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .geometry import RigidTransform
from .registration import FiducialSet, fit_rigid

RESIDUAL_REJECT_MM = 1.0
MIN_PIVOT_SPAN_RAD = np.radians(30.0)


class InsufficientMarkers(Exception):
    pass


class ResidualTooHigh(Exception):
    """Marker fit residual beyond the occlusion/misidentification guard."""


class IllConditioned(Exception):
    """Pivot poses span too little orientation for a stable tip solve."""


class TimestampMismatch(Exception):
    pass


class DrbOcclusion(Exception):
    """DRB not sufficiently visible; navigation output withheld."""


@dataclass(frozen=True)
class ToolDefinition:
    """Marker geometry in the tool body frame plus optional calibrated tip."""

    tool_id: str
    marker_positions: np.ndarray  # (M, 3), mm, body frame
    tip_offset: np.ndarray | None = None  # mm, body frame; None until pivoted

    def __post_init__(self):
        pts = np.asarray(self.marker_positions, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "marker_positions", pts)
        if self.tip_offset is not None:
            object.__setattr__(
                self, "tip_offset", np.asarray(self.tip_offset, dtype=float).reshape(3)
            )
        if len(pts) < 3:
            raise ValueError("tool needs >= 3 markers")
        centered = pts - pts.mean(axis=0)
        s = np.linalg.svd(centered, compute_uv=False)
        if s[1] < 1e-6 * s[0]:
            raise ValueError("tool markers are collinear")
        iu = np.triu_indices(len(pts), k=1)
        d = np.linalg.norm(pts[iu[0]] - pts[iu[1]], axis=1)
        if np.min(np.abs(d[:, None] - d[None, :]) + np.eye(len(d)) * 1e9) <= 0.5:
            raise ValueError("marker pairwise distances not distinct by > 0.5 mm")


@dataclass(frozen=True)
class ToolObservation:
    tool_id: str
    markers: np.ndarray  # (M, 3) tracker-frame positions
    visible: np.ndarray  # (M,) bool


@dataclass(frozen=True)
class TrackerFrame:
    timestamp_ms: float
    observations: tuple  # ToolObservation per tool


def default_stylus() -> ToolDefinition:
    pts = np.array(
        [[0.0, 0.0, 0.0], [56.0, 0.0, 0.0], [23.0, 37.0, 0.0], [11.0, 14.0, 29.0]]
    )
    return ToolDefinition("stylus", pts)


def default_drb() -> ToolDefinition:
    pts = np.array(
        [[0.0, 0.0, 0.0], [44.0, 3.0, 0.0], [17.0, 33.0, 2.0], [38.0, 21.0, 27.0]]
    )
    return ToolDefinition("drb", pts)


def estimate_tool_pose(
    frame: TrackerFrame,
    tool: ToolDefinition,
    max_residual_mm: float = RESIDUAL_REJECT_MM,
) -> RigidTransform:
    """Body->tracker pose from the tool's visible markers in one frame."""
    obs = next((o for o in frame.observations if o.tool_id == tool.tool_id), None)
    if obs is None:
        raise InsufficientMarkers(f"tool {tool.tool_id} not observed")
    vis = np.asarray(obs.visible, dtype=bool)
    if vis.sum() < 3:
        raise InsufficientMarkers(
            f"tool {tool.tool_id}: {int(vis.sum())} markers visible"
        )
    labels = tuple(str(i) for i in np.flatnonzero(vis))
    res = fit_rigid(
        FiducialSet(labels, obs.markers[vis], frame="TRACKER"),
        FiducialSet(labels, tool.marker_positions[vis], frame=tool.tool_id),
    )
    if res.fre_rms > max_residual_mm:
        raise ResidualTooHigh(
            f"fit residual {res.fre_rms:.2f} mm > {max_residual_mm} mm"
        )
    return res.transform


def pivot_calibrate(poses: list[RigidTransform]):
    """Solve for the tool tip offset and the fixed pivot point.

    Each pose satisfies R_i t + p_i = pivot, i.e. [R_i  -I] [t; pivot] = -p_i.
    Returns (tip_offset, pivot_point, residual_rms_mm).
    """
    if len(poses) < 10:
        raise IllConditioned(f"need >= 10 poses, got {len(poses)}")
    _check_orientation_span(poses)
    n = len(poses)
    a = np.zeros((3 * n, 6))
    b = np.zeros(3 * n)
    for i, p in enumerate(poses):
        a[3 * i : 3 * i + 3, :3] = p.rotation
        a[3 * i : 3 * i + 3, 3:] = -np.eye(3)
        b[3 * i : 3 * i + 3] = -p.translation
    sol, _, _, sv = np.linalg.lstsq(a, b, rcond=None)
    if sv[-1] < 1e-3 * sv[0]:
        raise IllConditioned("pivot system singular-value ratio below 1e-3")
    tip, pivot = sol[:3], sol[3:]
    res = a @ sol - b
    rms = float(np.sqrt(np.mean(np.sum(res.reshape(-1, 3) ** 2, axis=1))))
    return tip, pivot, rms


def _check_orientation_span(poses):
    """Require >= 30 deg of rotation about at least 2 independent axes."""
    r0 = poses[0].rotation
    logs = np.array([geo.rotation_log(p.rotation @ r0.T) for p in poses])
    s = np.linalg.svd(logs, compute_uv=False)
    if len(s) < 2 or s[1] < MIN_PIVOT_SPAN_RAD / 2:
        raise IllConditioned("orientation span too small for pivot calibration")


def patient_relative(
    tool_pose: RigidTransform,
    drb_pose: RigidTransform,
    tool_timestamp: float | None = None,
    drb_timestamp: float | None = None,
) -> RigidTransform:
    """Tool pose re-expressed in the DRB frame (patient-motion invariant)."""
    if tool_timestamp is not None and drb_timestamp is not None:
        if tool_timestamp != drb_timestamp:
            raise TimestampMismatch(
                f"tool at {tool_timestamp} ms, DRB at {drb_timestamp} ms"
            )
    return drb_pose.inverse().compose(tool_pose)


@dataclass
class ScriptedTool:
    """Trajectory script for one tool: pose as a function of time."""

    tool: ToolDefinition
    pose_fn: object  # t_seconds -> RigidTransform (body -> tracker)
    occlusions: tuple = ()  # ((t_start_s, t_end_s, marker_index or None), ...)


def simulate_stream(
    tools: list[ScriptedTool],
    duration_s: float,
    rate_hz: float = 30.0,
    noise_mm: float = 0.0,
    seed=0,
):
    """Deterministic tracker stream: scripted poses, noise, occlusions."""
    rng = geo.make_rng(seed)
    n_frames = int(round(duration_s * rate_hz))
    dt_ms = 1000.0 / rate_hz
    frames = []
    for k in range(n_frames):
        t_s = k / rate_hz
        obs = []
        for st in tools:
            pose = st.pose_fn(t_s)
            markers = pose.apply(st.tool.marker_positions)
            if noise_mm > 0:
                markers = markers + rng.normal(
                    0.0, noise_mm / np.sqrt(3), size=markers.shape
                )
            visible = np.ones(len(markers), dtype=bool)
            for t0, t1, idx in st.occlusions:
                if t0 <= t_s < t1:
                    if idx is None:
                        visible[:] = False
                    else:
                        visible[idx] = False
            obs.append(ToolObservation(st.tool.tool_id, markers, visible))
        frames.append(TrackerFrame(k * dt_ms, tuple(obs)))
    return frames


def navigation_outputs(frames, tool: ToolDefinition, drb: ToolDefinition):
    """Patient-relative tool poses for a stream; DRB-occluded frames yield None.

    No stale DRB pose is ever reused: a frame with fewer than 3 visible DRB
    markers produces no navigation output at all.
    """
    out = []
    for f in frames:
        try:
            drb_pose = estimate_tool_pose(f, drb)
            tool_pose = estimate_tool_pose(f, tool)
        except (InsufficientMarkers, ResidualTooHigh):
            out.append((f.timestamp_ms, None))
            continue
        out.append((f.timestamp_ms, patient_relative(tool_pose, drb_pose)))
    return out


def serialize_stream(frames) -> str:
    """Structured log: one line per marker, 6 fractional digits."""
    buf = io.StringIO()
    for f in frames:
        for o in f.observations:
            for i, (m, v) in enumerate(zip(o.markers, o.visible)):
                buf.write(
                    f"{f.timestamp_ms:.6f} {o.tool_id} {i} "
                    f"{m[0]:.6f} {m[1]:.6f} {m[2]:.6f} {int(v)}\n"
                )
    return buf.getvalue()


def deserialize_stream(text: str):
    """Rebuild TrackerFrames from a serialized stream log."""
    by_ts: dict = {}
    order: list = []
    for line in text.strip().splitlines():
        ts_s, tool_id, idx, x, y, z, vis = line.split()
        ts = float(ts_s)
        if ts not in by_ts:
            by_ts[ts] = {}
            order.append(ts)
        by_ts[ts].setdefault(tool_id, []).append(
            (int(idx), [float(x), float(y), float(z)], bool(int(vis)))
        )
    frames = []
    for ts in order:
        obs = []
        for tool_id, rows in by_ts[ts].items():
            rows.sort()
            markers = np.array([r[1] for r in rows])
            visible = np.array([r[2] for r in rows])
            obs.append(ToolObservation(tool_id, markers, visible))
        frames.append(TrackerFrame(ts, tuple(obs)))
    return frames

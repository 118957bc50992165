"""HTTP service exposing sessions, planning, registration, navigation
streaming, robot alignment, shot accounting, and reports.

The service is the only interface the console UI consumes. All payloads
carry an explicit schema_version. Navigation poses are pushed over a
streaming NDJSON channel at a configurable rate (default 30 Hz).
"""

from __future__ import annotations

import json
import math
import pathlib
import time
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import StreamingResponse
from pydantic import BaseModel

from . import carm as cs
from . import geometry as geo
from . import planning as pl
from . import robot as rb
from . import tracking as tk
from . import workflow as wf
from .geometry import CT_IMAGE, DRB, JIG, ROBOT_BASE, TRACKER, FrameGraph, RigidTransform
from .registration import (
    DegenerateConfiguration,
    FiducialSet,
    LabelMismatch,
    fit_rigid,
)

SCHEMA_VERSION = 1
DEFAULT_POSE_RATE_HZ = 30.0
MODES = ("NAVIGATION_ONLY", "ROBOT_ASSISTED")
MODALITIES = ("POINT_BASED_PREOP_CT", "AUTOMATIC_INTRAOP_2D", "INTRAOP_3D_STUB")
TECHNIQUES = ("OPEN", "MIS")
CONFIGURABLE_STATES = frozenset(
    {
        wf.WorkflowState.PREOP_IMAGING,
        wf.WorkflowState.PATIENT_INPUT,
        wf.WorkflowState.PLANNING,
    }
)


def _transform_to_wire(t: RigidTransform) -> dict:
    return {
        "rotation": [[float(x) for x in row] for row in t.rotation],
        "translation": [float(x) for x in t.translation],
    }


def _transform_from_wire(d: dict) -> RigidTransform:
    return RigidTransform(
        np.asarray(d["rotation"], float), np.asarray(d["translation"], float)
    )


class SessionCreate(BaseModel):
    session_id: str | None = None
    mode: str = "NAVIGATION_ONLY"
    modality: str = "POINT_BASED_PREOP_CT"
    technique: str = "OPEN"
    verify_threshold_mm: float = wf.DEFAULT_VERIFY_THRESHOLD_MM


class SessionConfigure(BaseModel):
    mode: str | None = None
    modality: str | None = None
    technique: str | None = None


class EventIn(BaseModel):
    type: str
    payload: dict = {}
    timestamp: float = 0.0


class PlanIn(BaseModel):
    plan_id: str | None = None
    plan: dict


class PointRegistrationIn(BaseModel):
    # labeled fiducials: probed in the DRB frame vs known in image space
    fixed_drb: list[dict]
    moving_image: list[dict]


class ViewIn(BaseModel):
    view_tag: str
    shot_index: int
    detections: list[list]  # [label, u, v]
    carm: dict


class AutoRegistrationIn(BaseModel):
    ap: ViewIn
    lat: ViewIn
    frames: list[dict]  # [{source, target, rotation, translation}]


class ProbesIn(BaseModel):
    probes: list[dict]  # [{probed: [x,y,z], landmark: [x,y,z]}]
    threshold_mm: float | None = None


class PoseLogIn(BaseModel):
    stream: str  # serialized tracker stream


class NavigationStart(BaseModel):
    rate_hz: float = DEFAULT_POSE_RATE_HZ
    duration_s: float = 2.0


class AlignIn(BaseModel):
    plan_id: str


class SessionEntry:
    """Per-session server-side state beyond the event-sourced core."""

    def __init__(self, session: wf.Session):
        self.session = session
        self.pose_log: list | None = None
        self.trajectory: list | None = None
        self.trajectory_dt: float = 0.02
        self.guide: rb.GuidePose | None = None
        self.trajectory_executed = False
        self.nav_active = False
        self.nav_rate_hz = DEFAULT_POSE_RATE_HZ
        self.nav_duration_s = 2.0


def create_app(
    data_dir: str | None = None,
    seed: int = 0,
    pose_rate_hz: float = DEFAULT_POSE_RATE_HZ,
    robot_base_from_tracker: RigidTransform | None = None,
) -> FastAPI:
    app = FastAPI(title="spinenav service")
    store: dict[str, SessionEntry] = {}
    arm = rb.default_arm()
    arm_home = np.array([0.0, -1.2, 1.2, 0.0, 0.8, 0.0])
    base_edge = robot_base_from_tracker or geo.translation([400.0, 50.0, 250.0])
    data_path = pathlib.Path(data_dir) if data_dir else None
    if data_path:
        data_path.mkdir(parents=True, exist_ok=True)
        for f in sorted(data_path.glob("*.jsonl")):
            s = wf.load_session(f)
            store[s.session_id] = SessionEntry(s)

    def persist(entry: SessionEntry):
        if data_path:
            wf.save_session(entry.session, data_path / f"{entry.session.session_id}.jsonl")

    def get_entry(sid: str) -> SessionEntry:
        entry = store.get(sid)
        if entry is None:
            raise HTTPException(404, f"unknown session {sid!r}")
        return entry

    def session_view(s: wf.Session) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "session_id": s.session_id,
            "mode": s.mode,
            "modality": s.modality,
            "technique": s.technique,
            "state": s.state.value,
            "n_events": len(s.events),
            "n_plans": len(s.plans),
            "registration_present": s.registration is not None,
            "verification_rms_mm": s.verification_rms,
            "shots_total": s.ledger.total,
            "verify_threshold_mm": s.verify_threshold_mm,
        }

    def apply_or_409(entry: SessionEntry, event: str, payload=None, ts=0.0):
        try:
            entry.session.apply(event, payload, ts)
        except (wf.IllegalTransition, wf.IllegalState) as exc:
            raise HTTPException(409, str(exc))
        persist(entry)

    # -- sessions -----------------------------------------------------------

    @app.post("/api/v1/sessions")
    def create_session(body: SessionCreate):
        if body.mode not in MODES:
            raise HTTPException(422, f"mode must be one of {MODES}")
        if body.modality not in MODALITIES:
            raise HTTPException(422, f"modality must be one of {MODALITIES}")
        if body.technique not in TECHNIQUES:
            raise HTTPException(422, f"technique must be one of {TECHNIQUES}")
        sid = body.session_id or uuid.uuid4().hex[:12]
        if sid in store:
            raise HTTPException(409, f"session {sid!r} already exists")
        entry = SessionEntry(
            wf.Session(sid, mode=body.mode, modality=body.modality,
                       technique=body.technique,
                       verify_threshold_mm=body.verify_threshold_mm)
        )
        store[sid] = entry
        persist(entry)
        return session_view(entry.session)

    @app.get("/api/v1/sessions")
    def list_sessions():
        return {
            "schema_version": SCHEMA_VERSION,
            "sessions": [session_view(e.session) for e in store.values()],
        }

    @app.get("/api/v1/sessions/{sid}")
    def read_session(sid: str):
        return session_view(get_entry(sid).session)

    @app.post("/api/v1/sessions/{sid}/configure")
    def configure_session(sid: str, body: SessionConfigure):
        entry = get_entry(sid)
        s = entry.session
        if s.state not in CONFIGURABLE_STATES:
            raise HTTPException(
                409, f"mode/modality/technique frozen in state {s.state.value}"
            )
        if body.mode is not None:
            if body.mode not in MODES:
                raise HTTPException(422, f"mode must be one of {MODES}")
            s.mode = body.mode
        if body.modality is not None:
            if body.modality not in MODALITIES:
                raise HTTPException(422, f"modality must be one of {MODALITIES}")
            s.modality = body.modality
        if body.technique is not None:
            if body.technique not in TECHNIQUES:
                raise HTTPException(422, f"technique must be one of {TECHNIQUES}")
            s.technique = body.technique
        persist(entry)
        return session_view(s)

    @app.post("/api/v1/sessions/{sid}/events")
    def post_event(sid: str, body: EventIn):
        entry = get_entry(sid)
        apply_or_409(entry, body.type, body.payload, body.timestamp)
        return session_view(entry.session)

    # -- screw plans --------------------------------------------------------

    def plan_preview(plan_dict: dict):
        """Breach/grade preview against the parametric vertebra model."""
        try:
            plan = pl.ScrewPlan.from_dict(plan_dict)
            vert = pl.build_vertebra(plan.vertebra)
            rep = pl.validate_trajectory(plan, vert)
        except (KeyError, ValueError, pl.UnknownLevel, pl.SideMismatch):
            return None
        return {
            "grade": rep.grade,
            "max_breach_depth_mm": float(rep.max_breach_depth),
            "anterior_perforation": bool(rep.anterior_perforation),
        }

    def validate_plan_payload(plan_dict: dict) -> dict:
        try:
            return pl.ScrewPlan.from_dict(plan_dict).as_dict()
        except (KeyError, TypeError) as exc:
            raise HTTPException(422, f"malformed plan: {exc}")
        except ValueError as exc:
            raise HTTPException(422, f"invalid plan: {exc}")

    @app.get("/api/v1/sessions/{sid}/plans")
    def list_plans(sid: str):
        s = get_entry(sid).session
        return {
            "schema_version": SCHEMA_VERSION,
            "plans": {
                pid: {"plan": p, "preview": plan_preview(p)}
                for pid, p in s.plans.items()
            },
        }

    @app.get("/api/v1/sessions/{sid}/plans/{pid}")
    def read_plan(sid: str, pid: str):
        s = get_entry(sid).session
        if pid not in s.plans:
            raise HTTPException(404, f"unknown plan {pid!r}")
        return {
            "schema_version": SCHEMA_VERSION,
            "plan_id": pid,
            "plan": s.plans[pid],
            "preview": plan_preview(s.plans[pid]),
        }

    @app.post("/api/v1/sessions/{sid}/plans")
    def add_plan(sid: str, body: PlanIn):
        entry = get_entry(sid)
        pid = body.plan_id or uuid.uuid4().hex[:8]
        if pid in entry.session.plans:
            raise HTTPException(409, f"plan {pid!r} already exists")
        plan = validate_plan_payload(body.plan)
        apply_or_409(entry, "PLAN_ADDED", {"plan_id": pid, "plan": plan})
        return {
            "schema_version": SCHEMA_VERSION,
            "plan_id": pid,
            "plan": plan,
            "preview": plan_preview(plan),
        }

    @app.put("/api/v1/sessions/{sid}/plans/{pid}")
    def update_plan(sid: str, pid: str, body: PlanIn):
        entry = get_entry(sid)
        if pid not in entry.session.plans:
            raise HTTPException(404, f"unknown plan {pid!r}")
        plan = validate_plan_payload(body.plan)
        apply_or_409(entry, "PLAN_UPDATED", {"plan_id": pid, "plan": plan})
        return {
            "schema_version": SCHEMA_VERSION,
            "plan_id": pid,
            "plan": plan,
            "preview": plan_preview(plan),
        }

    @app.delete("/api/v1/sessions/{sid}/plans/{pid}")
    def delete_plan(sid: str, pid: str):
        entry = get_entry(sid)
        if pid not in entry.session.plans:
            raise HTTPException(404, f"unknown plan {pid!r}")
        apply_or_409(entry, "PLAN_DELETED", {"plan_id": pid})
        return {"schema_version": SCHEMA_VERSION, "deleted": pid}

    # -- registration -------------------------------------------------------

    def record_registration(entry, transform: RigidTransform, fre: float):
        apply_or_409(
            entry,
            "REGISTRATION_COMPUTED",
            {"transform": _transform_to_wire(transform), "fre_rms_mm": float(fre)},
        )
        return {
            "schema_version": SCHEMA_VERSION,
            "transform_image_to_drb": _transform_to_wire(transform),
            "fre_rms_mm": float(fre),
            "state": entry.session.state.value,
        }

    @app.post("/api/v1/sessions/{sid}/registration/point-based")
    def register_point_based(sid: str, body: PointRegistrationIn):
        entry = get_entry(sid)

        def to_set(rows, frame):
            try:
                labels = tuple(r["label"] for r in rows)
                pts = np.array([r["position_mm"] for r in rows], float)
            except (KeyError, TypeError, ValueError) as exc:
                raise HTTPException(422, f"malformed fiducials: {exc}")
            return FiducialSet(labels, pts, frame=frame)

        try:
            result = fit_rigid(
                to_set(body.fixed_drb, DRB), to_set(body.moving_image, CT_IMAGE)
            )
        except (LabelMismatch, DegenerateConfiguration, ValueError) as exc:
            raise HTTPException(422, str(exc))
        return record_registration(entry, result.transform, result.fre_rms)

    @app.post("/api/v1/sessions/{sid}/registration/automatic-2d")
    def register_automatic_2d(sid: str, body: AutoRegistrationIn):
        entry = get_entry(sid)

        def to_image(view: ViewIn) -> cs.ProjectionImage:
            try:
                carm = cs.CArmModel(
                    source_detector_distance=view.carm["source_detector_distance"],
                    pixel_pitch=view.carm["pixel_pitch"],
                    detector_size=tuple(view.carm["detector_size"]),
                    principal_point=tuple(view.carm["principal_point"]),
                    pose=_transform_from_wire(view.carm["pose"]),
                )
                dets = tuple(
                    (str(lab), float(u), float(v)) for lab, u, v in view.detections
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise HTTPException(422, f"malformed view: {exc}")
            return cs.ProjectionImage(dets, view.view_tag, view.shot_index, carm)

        graph = FrameGraph()
        try:
            for edge in body.frames:
                graph = graph.with_edge(
                    edge["source"], edge["target"], _transform_from_wire(edge)
                )
        except (KeyError, TypeError, ValueError, geo.DuplicateEdge) as exc:
            raise HTTPException(422, f"malformed frames: {exc}")
        try:
            result = cs.register_patient_2d(
                to_image(body.ap), to_image(body.lat), cs.default_jig(), graph
            )
        except (cs.ViewsTooClose, cs.TooFewDetections, geo.NoPath) as exc:
            raise HTTPException(422, str(exc))
        return record_registration(entry, result.transform, result.fre_rms)

    @app.post("/api/v1/sessions/{sid}/registration/stub-3d")
    def register_stub_3d(sid: str):
        entry = get_entry(sid)
        if entry.session.modality != "INTRAOP_3D_STUB":
            raise HTTPException(409, "session modality is not INTRAOP_3D_STUB")
        return record_registration(entry, RigidTransform.identity(), 0.0)

    @app.post("/api/v1/sessions/{sid}/verification")
    def submit_probes(sid: str, body: ProbesIn):
        entry = get_entry(sid)
        try:
            probes = [(p["probed_mm"], p["landmark_mm"]) for p in body.probes]
        except (KeyError, TypeError) as exc:
            raise HTTPException(422, f"malformed probes: {exc}")
        try:
            decision = wf.verify_registration(
                entry.session, probes, threshold_mm=body.threshold_mm
            )
        except (wf.NoRegistration, wf.TooFewProbes) as exc:
            raise HTTPException(409, str(exc))
        except (wf.IllegalTransition, wf.IllegalState) as exc:
            raise HTTPException(409, str(exc))
        persist(entry)
        return {
            "schema_version": SCHEMA_VERSION,
            "decision": decision,
            "rms_mm": entry.session.verification_rms,
            "state": entry.session.state.value,
        }

    # -- navigation streaming ----------------------------------------------

    @app.post("/api/v1/sessions/{sid}/navigation/pose-log")
    def upload_pose_log(sid: str, body: PoseLogIn):
        entry = get_entry(sid)
        try:
            entry.pose_log = tk.deserialize_stream(body.stream)
        except (ValueError, IndexError) as exc:
            raise HTTPException(422, f"malformed stream: {exc}")
        return {"schema_version": SCHEMA_VERSION,
                "frames": len(entry.pose_log)}

    @app.post("/api/v1/sessions/{sid}/navigation/start")
    def start_navigation(sid: str, body: NavigationStart):
        entry = get_entry(sid)
        if entry.session.state is not wf.WorkflowState.NAVIGATION:
            raise HTTPException(
                409, f"navigation stream requires NAVIGATION state, "
                     f"got {entry.session.state.value}"
            )
        if body.rate_hz <= 0 or body.duration_s <= 0:
            raise HTTPException(422, "rate_hz and duration_s must be > 0")
        entry.nav_active = True
        entry.nav_rate_hz = body.rate_hz
        entry.nav_duration_s = body.duration_s
        return {"schema_version": SCHEMA_VERSION, "streaming": True,
                "rate_hz": body.rate_hz}

    @app.post("/api/v1/sessions/{sid}/navigation/stop")
    def stop_navigation(sid: str):
        entry = get_entry(sid)
        entry.nav_active = False
        return {"schema_version": SCHEMA_VERSION, "streaming": False}

    def _nav_frames(entry: SessionEntry):
        """Per-frame navigation outputs: tool pose in DRB and image space."""
        s = entry.session
        image_from_drb = None
        if s.registration and s.registration.get("transform"):
            image_from_drb = _transform_from_wire(
                s.registration["transform"]
            ).inverse()
        if entry.pose_log is not None:
            outputs = tk.navigation_outputs(
                entry.pose_log, tk.default_stylus(), tk.default_drb()
            )
        else:  # deterministic synthetic sweep when no log was uploaded
            n = max(1, int(round(entry.nav_rate_hz * entry.nav_duration_s)))
            outputs = []
            for i in range(n):
                t = i / entry.nav_rate_hz
                pose = geo.rotation_about([0, 0, 1], 0.2 * math.sin(t)).compose(
                    geo.translation(
                        [30 * math.cos(t), 30 * math.sin(t), 10 * math.sin(2 * t)]
                    )
                )
                outputs.append((1000.0 * t, pose))
        for ts, pose in outputs:
            frame = {
                "schema_version": SCHEMA_VERSION,
                "t_ms": float(ts),
                "visible": pose is not None,
                "tool_in_drb": None,
                "tool_in_image": None,
                "plans": s.plans,
            }
            if pose is not None:
                frame["tool_in_drb"] = _transform_to_wire(pose)
                if image_from_drb is not None:
                    frame["tool_in_image"] = _transform_to_wire(
                        image_from_drb.compose(pose)
                    )
            yield frame

    @app.get("/api/v1/sessions/{sid}/navigation/stream")
    def navigation_stream(sid: str, pace: bool = Query(default=True)):
        entry = get_entry(sid)
        if not entry.nav_active:
            raise HTTPException(409, "navigation stream not started")

        def gen():
            period = 1.0 / entry.nav_rate_hz
            for frame in _nav_frames(entry):
                if not entry.nav_active:
                    break
                yield json.dumps(frame) + "\n"
                if pace:
                    time.sleep(period)

        return StreamingResponse(gen(), media_type="application/x-ndjson")

    # -- robot --------------------------------------------------------------

    def _robot_frames(entry: SessionEntry) -> FrameGraph:
        s = entry.session
        if not s.registration or not s.registration.get("transform"):
            raise HTTPException(409, "no registration transform on session")
        return (
            FrameGraph()
            .with_edge(CT_IMAGE, DRB,
                       _transform_from_wire(s.registration["transform"]))
            .with_edge(DRB, TRACKER, RigidTransform.identity())
            .with_edge(TRACKER, ROBOT_BASE, base_edge)
        )

    @app.post("/api/v1/sessions/{sid}/robot/align")
    def robot_align(sid: str, body: AlignIn):
        entry = get_entry(sid)
        s = entry.session
        if body.plan_id not in s.plans:
            raise HTTPException(404, f"unknown plan {body.plan_id!r}")
        plan = pl.ScrewPlan.from_dict(s.plans[body.plan_id])
        frames = _robot_frames(entry)
        # workflow gate first: rejects wrong state or NAVIGATION_ONLY mode
        apply_or_409(entry, "ROBOT_ALIGNED", {"plan_id": body.plan_id})
        try:
            guide, path = rb.align_to_plan(plan, frames, arm, arm_home)
        except (rb.Unreachable, rb.LimitViolation, rb.CollisionOnPath) as exc:
            raise HTTPException(409, f"alignment failed: {exc}")
        entry.guide = guide
        entry.trajectory = [np.asarray(q, float) for q in path]
        entry.trajectory_executed = False
        persist(entry)
        return {
            "schema_version": SCHEMA_VERSION,
            "plan_id": body.plan_id,
            "guide_pose_robot_base": _transform_to_wire(guide.pose),
            "standoff_mm": guide.standoff_mm,
            "waypoints": len(entry.trajectory),
            "state": s.state.value,
        }

    @app.get("/api/v1/sessions/{sid}/robot/trajectory")
    def robot_trajectory(sid: str):
        entry = get_entry(sid)
        if entry.trajectory is None:
            raise HTTPException(404, "no trajectory: request alignment first")
        return {
            "schema_version": SCHEMA_VERSION,
            "dt_s": entry.trajectory_dt,
            "joints_rad": [[float(x) for x in q] for q in entry.trajectory],
            "serialized": rb.serialize_trajectory(
                entry.trajectory, entry.trajectory_dt
            ),
            "executed": entry.trajectory_executed,
        }

    @app.post("/api/v1/sessions/{sid}/robot/confirm")
    def robot_confirm(sid: str):
        entry = get_entry(sid)
        if entry.trajectory is None:
            raise HTTPException(409, "nothing to confirm: no planned trajectory")
        if entry.session.state is not wf.WorkflowState.ROBOT_ALIGNED:
            raise HTTPException(
                409, f"confirm requires ROBOT_ALIGNED state, "
                     f"got {entry.session.state.value}"
            )
        if entry.trajectory_executed:
            raise HTTPException(409, "trajectory already executed")
        entry.trajectory_executed = True
        return {
            "schema_version": SCHEMA_VERSION,
            "executed": True,
            "final_joints_rad": [float(x) for x in entry.trajectory[-1]],
        }

    # -- shots and report ---------------------------------------------------

    @app.post("/api/v1/sessions/{sid}/shots")
    def post_shot(sid: str, body: dict):
        entry = get_entry(sid)
        screw_id = body.get("screw_id")
        phase = body.get("phase")
        if not screw_id or phase not in ("placement", "verification"):
            raise HTTPException(
                422, "need screw_id and phase in {placement, verification}"
            )
        apply_or_409(entry, "SHOT_RECORDED",
                     {"screw_id": screw_id, "phase": phase})
        return {
            "schema_version": SCHEMA_VERSION,
            "screw_id": screw_id,
            "screw_total": entry.session.ledger.screw_total(screw_id),
            "session_total": entry.session.ledger.total,
        }

    @app.get("/api/v1/sessions/{sid}/report")
    def get_report(sid: str):
        return wf.report(get_entry(sid).session)

    return app

"""Procedure workflow: enforced state machine, event-sourced sessions,
registration verification gate, radiation ledger, and metrics reports.

Sessions are append-only event logs; the live state is always a pure
function of the log, so any scenario can be replayed deterministically.
The edge table is data, not code: a corrected workflow graph drops in
without touching the engine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .registration import rmse_stats

SCHEMA_VERSION = 1
DEFAULT_VERIFY_THRESHOLD_MM = 2.0
GRADES = ("A", "B", "C", "D", "E")


class IllegalTransition(Exception):
    pass


class IllegalState(Exception):
    pass


class NoRegistration(Exception):
    pass


class TooFewProbes(Exception):
    pass


class WorkflowState(str, Enum):
    PREOP_IMAGING = "PREOP_IMAGING"
    PATIENT_INPUT = "PATIENT_INPUT"
    PLANNING = "PLANNING"
    INTRAOP_PREP = "INTRAOP_PREP"
    INSTRUMENT_CALIBRATION = "INSTRUMENT_CALIBRATION"
    DRB_ATTACHED = "DRB_ATTACHED"
    ROBOT_CART_POSITIONED = "ROBOT_CART_POSITIONED"
    CARM_CALIBRATOR_MOUNTED = "CARM_CALIBRATOR_MOUNTED"
    INTRAOP_IMAGING = "INTRAOP_IMAGING"
    REGISTRATION = "REGISTRATION"
    REGISTRATION_VERIFIED = "REGISTRATION_VERIFIED"
    REGISTRATION_REJECTED = "REGISTRATION_REJECTED"
    NAVIGATION = "NAVIGATION"
    ROBOT_ALIGNED = "ROBOT_ALIGNED"
    SCREW_PLACED = "SCREW_PLACED"
    VERIFICATION_IMAGING = "VERIFICATION_IMAGING"
    COMPLETE = "COMPLETE"


S = WorkflowState

# event -> list of (from_state, to_state, guard name or None)
# guard "robot_mode": session must be ROBOT_ASSISTED
EDGE_TABLE = {
    "PREOP_IMAGES_ACQUIRED": [(S.PREOP_IMAGING, S.PATIENT_INPUT, None)],
    "PATIENT_INFO_SUBMITTED": [(S.PATIENT_INPUT, S.PLANNING, None)],
    "PLANNING_DONE": [(S.PLANNING, S.INTRAOP_PREP, None)],
    "PREP_DONE": [(S.INTRAOP_PREP, S.INSTRUMENT_CALIBRATION, None)],
    "DRB_ATTACHED": [(S.INSTRUMENT_CALIBRATION, S.DRB_ATTACHED, None)],
    "ROBOT_CART_POSITIONED": [(S.DRB_ATTACHED, S.ROBOT_CART_POSITIONED, "robot_mode")],
    "CARM_CALIBRATOR_MOUNTED": [
        (S.DRB_ATTACHED, S.CARM_CALIBRATOR_MOUNTED, None),
        (S.ROBOT_CART_POSITIONED, S.CARM_CALIBRATOR_MOUNTED, None),
    ],
    "INTRAOP_IMAGES_ACQUIRED": [(S.CARM_CALIBRATOR_MOUNTED, S.INTRAOP_IMAGING, None)],
    "REGISTRATION_COMPUTED": [
        (S.INTRAOP_IMAGING, S.REGISTRATION, None),
        (S.REGISTRATION_REJECTED, S.REGISTRATION, None),
    ],
    "REGISTRATION_ACCEPTED": [(S.REGISTRATION, S.REGISTRATION_VERIFIED, None)],
    "REGISTRATION_REJECTED": [(S.REGISTRATION, S.REGISTRATION_REJECTED, None)],
    "NAVIGATION_STARTED": [(S.REGISTRATION_VERIFIED, S.NAVIGATION, None)],
    "ROBOT_ALIGNED": [(S.NAVIGATION, S.ROBOT_ALIGNED, "robot_mode")],
    "SCREW_PLACED": [
        (S.NAVIGATION, S.SCREW_PLACED, None),
        (S.ROBOT_ALIGNED, S.SCREW_PLACED, None),
    ],
    "VERIFICATION_IMAGES_ACQUIRED": [(S.SCREW_PLACED, S.VERIFICATION_IMAGING, None)],
    "NEXT_SCREW": [(S.VERIFICATION_IMAGING, S.NAVIGATION, None)],
    "PROCEDURE_COMPLETE": [(S.VERIFICATION_IMAGING, S.COMPLETE, None)],
}

# events that never change state but are only legal in certain states
SHOT_LEGAL_STATES = frozenset(
    {
        S.INTRAOP_IMAGING,
        S.REGISTRATION,
        S.NAVIGATION,
        S.ROBOT_ALIGNED,
        S.SCREW_PLACED,
        S.VERIFICATION_IMAGING,
    }
)
PLAN_EDIT_STATES = frozenset({S.PLANNING, S.NAVIGATION})

EVENT_TYPES = tuple(EDGE_TABLE) + (
    "SHOT_RECORDED",
    "PLAN_ADDED",
    "PLAN_UPDATED",
    "PLAN_DELETED",
)


@dataclass
class RadiationLedger:
    """Exact integer shot accounting, per screw and per phase."""

    per_screw: dict = field(default_factory=dict)  # screw_id -> {phase: count}

    def record(self, screw_id: str, phase: str):
        if phase not in ("placement", "verification"):
            raise ValueError(f"unknown phase {phase!r}")
        entry = self.per_screw.setdefault(screw_id, {"placement": 0, "verification": 0})
        entry[phase] += 1

    def screw_total(self, screw_id: str) -> int:
        entry = self.per_screw.get(screw_id, {})
        return sum(entry.values())

    @property
    def total(self) -> int:
        return sum(self.screw_total(s) for s in self.per_screw)

    def mean_shots_per_screw(self) -> float:
        if not self.per_screw:
            return 0.0
        return self.total / len(self.per_screw)


@dataclass
class Session:
    """Event-sourced procedure session. Mutate only through apply()."""

    session_id: str
    mode: str = "NAVIGATION_ONLY"  # or ROBOT_ASSISTED
    modality: str = "POINT_BASED_PREOP_CT"  # or AUTOMATIC_INTRAOP_2D, INTRAOP_3D_STUB
    technique: str = "OPEN"  # or MIS
    state: WorkflowState = WorkflowState.PREOP_IMAGING
    events: list = field(default_factory=list)
    plans: dict = field(default_factory=dict)  # plan_id -> plan payload
    registration: dict | None = None  # latest registration summary payload
    verification_rms: float | None = None
    ledger: RadiationLedger = field(default_factory=RadiationLedger)
    verify_threshold_mm: float = DEFAULT_VERIFY_THRESHOLD_MM

    def apply(self, event_type: str, payload: dict | None = None,
              timestamp: float = 0.0) -> WorkflowState:
        """Validate, transition, and append. Illegal events change nothing."""
        payload = payload or {}
        new_state = self._transition(event_type, payload)
        self.events.append(
            {
                "seq": len(self.events),
                "timestamp": timestamp,
                "type": event_type,
                "payload": payload,
                "schema_version": SCHEMA_VERSION,
            }
        )
        self._apply_effects(event_type, payload)
        self.state = new_state
        return new_state

    def _transition(self, event_type: str, payload: dict) -> WorkflowState:
        if event_type == "SHOT_RECORDED":
            if self.state not in SHOT_LEGAL_STATES:
                raise IllegalState(
                    f"SHOT_RECORDED illegal in {self.state.value}; imaging states only"
                )
            return self.state
        if event_type in ("PLAN_ADDED", "PLAN_UPDATED", "PLAN_DELETED"):
            if self.state not in PLAN_EDIT_STATES:
                raise IllegalState(
                    f"{event_type} requires PLANNING or NAVIGATION, got {self.state.value}"
                )
            return self.state
        edges = EDGE_TABLE.get(event_type)
        if edges is None:
            raise IllegalTransition(f"unknown event {event_type!r}")
        for frm, to, guard in edges:
            if frm != self.state:
                continue
            if guard == "robot_mode" and self.mode != "ROBOT_ASSISTED":
                raise IllegalTransition(
                    f"{event_type} requires mode ROBOT_ASSISTED (session is {self.mode})"
                )
            if to is S.NAVIGATION and frm is S.REGISTRATION_VERIFIED:
                if self.registration is None:
                    raise IllegalTransition(
                        "NAVIGATION requires an accepted registration"
                    )
            return to
        raise IllegalTransition(
            f"{event_type} illegal in state {self.state.value}"
        )

    def _apply_effects(self, event_type: str, payload: dict):
        if event_type == "SHOT_RECORDED":
            self.ledger.record(payload["screw_id"], payload["phase"])
        elif event_type in ("PLAN_ADDED", "PLAN_UPDATED"):
            self.plans[payload["plan_id"]] = payload["plan"]
        elif event_type == "PLAN_DELETED":
            self.plans.pop(payload["plan_id"], None)
        elif event_type == "REGISTRATION_COMPUTED":
            self.registration = dict(payload)
        elif event_type == "REGISTRATION_ACCEPTED":
            self.verification_rms = payload.get("rms_mm")
        elif event_type == "REGISTRATION_REJECTED":
            self.verification_rms = payload.get("rms_mm")


def advance(session: Session, event_type: str, payload=None,
            timestamp: float = 0.0) -> WorkflowState:
    return session.apply(event_type, payload, timestamp)


def verify_registration(session: Session, probes,
                        threshold_mm: float | None = None) -> str:
    """Landmark probe check of the active registration.

    ``probes``: iterable of (probed_in_drb, landmark_in_image) pairs. The
    image landmark is mapped through the registration transform and compared
    with the probed position; accept iff RMS error < threshold.
    """
    if session.registration is None:
        raise NoRegistration("no registration result on session")
    probes = list(probes)
    if len(probes) < 3:
        raise TooFewProbes(f"need >= 3 probes, got {len(probes)}")
    threshold = (
        threshold_mm if threshold_mm is not None else session.verify_threshold_mm
    )
    transform = session.registration.get("transform")
    if transform is not None:
        r = np.asarray(transform["rotation"], float)
        t = np.asarray(transform["translation"], float)
        errs = [
            np.linalg.norm(np.asarray(probed, float) - (r @ np.asarray(lm, float) + t))
            for probed, lm in probes
        ]
    else:  # stub modality: probes carry their own error
        errs = [float(np.linalg.norm(np.asarray(p, float) - np.asarray(l, float)))
                for p, l in probes]
    rms = float(np.sqrt(np.mean(np.square(errs))))
    if rms < threshold:
        session.apply("REGISTRATION_ACCEPTED", {"rms_mm": rms})
        return "accept"
    session.apply("REGISTRATION_REJECTED", {"rms_mm": rms})
    return "reject"


def record_shot(session: Session, screw_id: str, phase: str,
                timestamp: float = 0.0):
    session.apply(
        "SHOT_RECORDED", {"screw_id": screw_id, "phase": phase}, timestamp
    )


def replay(session_id: str, events, **session_kwargs) -> Session:
    """Rebuild a session by replaying its event log from scratch."""
    s = Session(session_id, **session_kwargs)
    for ev in events:
        s.apply(ev["type"], ev.get("payload") or {}, ev.get("timestamp", 0.0))
    return s


def report(session: Session) -> dict:
    """Metrics document: grade mix, depths, shots per screw, RMSE stats."""
    placed = [e["payload"] for e in session.events if e["type"] == "SCREW_PLACED"]
    grades = [p.get("grade") for p in placed if p.get("grade")]
    n = len(grades)
    grade_pct = {
        g: (100.0 * grades.count(g) / n if n else 0.0) for g in GRADES
    }
    depths = {
        p["screw_id"]: p.get("breach_depth_mm")
        for p in placed
        if "screw_id" in p
    }
    rmse_values = [
        e["payload"]["fre_rms_mm"]
        for e in session.events
        if e["type"] == "REGISTRATION_COMPUTED" and "fre_rms_mm" in e["payload"]
    ]
    rmse = rmse_stats(rmse_values).as_dict() if len(rmse_values) >= 2 else (
        {"mean_mm": rmse_values[0]} if rmse_values else None
    )
    return {
        "schema_version": SCHEMA_VERSION,
        "session_id": session.session_id,
        "mode": session.mode,
        "modality": session.modality,
        "technique": session.technique,
        "state": session.state.value,
        "screws_placed": n,
        "grade_percent": grade_pct,
        "breach_depths_mm": depths,
        "shots": {
            "total": session.ledger.total,
            "per_screw": {
                s: session.ledger.screw_total(s) for s in session.ledger.per_screw
            },
            "mean_per_screw": session.ledger.mean_shots_per_screw(),
        },
        "registration_rmse": rmse,
    }


def save_session(session: Session, path):
    """Persist as a JSON-lines event log with a header record."""
    with open(path, "w") as fh:
        fh.write(
            json.dumps(
                {
                    "schema_version": SCHEMA_VERSION,
                    "session_id": session.session_id,
                    "mode": session.mode,
                    "modality": session.modality,
                    "technique": session.technique,
                    "verify_threshold_mm": session.verify_threshold_mm,
                }
            )
            + "\n"
        )
        for ev in session.events:
            fh.write(json.dumps(ev) + "\n")


def load_session(path) -> Session:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    header, events = lines[0], lines[1:]
    return replay(
        header["session_id"],
        events,
        mode=header["mode"],
        modality=header["modality"],
        technique=header["technique"],
        verify_threshold_mm=header.get(
            "verify_threshold_mm", DEFAULT_VERIFY_THRESHOLD_MM
        ),
    )

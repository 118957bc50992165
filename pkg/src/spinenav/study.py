"""Study harness: phantom accuracy study, cadaver-style placement study,
and noise calibration.

Desk-scale statistical reproduction: measured hardware accuracy is replaced
by calibrated noise magnitudes (see calibrate_noise), after which the rest
of each distribution's shape and the downstream grade mix must emerge from
the simulated pipelines, not from tuning.
"""

from __future__ import annotations

import csv
import io
import json
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import carm as cs
from . import geometry as geo
from . import planning as pl
from . import robot as rb
from . import workflow as wf
from .geometry import CT_IMAGE, DRB, JIG, ROBOT_BASE, TRACKER, FrameGraph, RigidTransform
from .registration import FiducialSet, fit_rigid, rmse_stats

SCHEMA_VERSION = 1

POINT_BASED = "point_based"
AUTOMATIC_2D = "automatic_2d"
METHODS = (POINT_BASED, AUTOMATIC_2D)

# Frozen by scripts/calibrate_defaults.py (bisection against this simulator,
# targets 0.99 mm point-based and 1.04 mm automatic-2D, 500 samples each).
DEFAULT_POINT_FLE_MM = 0.875
DEFAULT_PIXEL_SIGMA_PX = 2.0625

# Reference factor levels; noise scales linearly with distance ratios.
REF_TRACKER_DISTANCE_MM = 1500.0
REF_DETECTOR_DISTANCE_MM = 300.0
ANGLE_NOISE_GAIN = 0.15  # extra jitter fraction at 60 deg tool inclination

# Six implanted fiducials around a one-level phantom (mm, image frame).
PHANTOM_FIDUCIALS = np.array(
    [
        [40.0, 0.0, 10.0],
        [-40.0, 5.0, -5.0],
        [10.0, 35.0, 25.0],
        [-15.0, -30.0, 30.0],
        [25.0, -20.0, -25.0],
        [-20.0, 25.0, -20.0],
    ]
)
PHANTOM_LABELS = tuple(f"F{i}" for i in range(len(PHANTOM_FIDUCIALS)))


class ConfigError(Exception):
    pass


class NonMonotoneBracket(Exception):
    pass


@dataclass(frozen=True)
class StudyConfig:
    samples: int = 150
    user_group_multipliers: tuple = (1.0, 1.15, 1.3)
    tool_angles_deg: tuple = (0.0, 30.0, 60.0)
    tracker_distances_mm: tuple = (1500.0, 2000.0)
    detector_distances_mm: tuple = (300.0, 400.0)
    seed: int = 20240
    point_fle_mm: float = DEFAULT_POINT_FLE_MM
    pixel_sigma_px: float = DEFAULT_PIXEL_SIGMA_PX
    # cadaver-style execution error (per mode): entry sigma mm/axis,
    # direction sigma rad/axis
    robot_entry_sigma_mm: float = 1.25
    robot_direction_sigma_rad: float = 0.012
    nav_entry_sigma_mm: float = 1.30
    nav_direction_sigma_rad: float = 0.022
    screw_count: int = 150
    levels: tuple = ("L1", "L2", "L3", "L4", "L5")
    placement_shots: int = 1
    verification_shots: int = 2
    kinematic_stride: int = 25  # full robot IK feasibility check every Nth screw

    def __post_init__(self):
        if self.samples < 2:
            raise ConfigError(f"samples must be >= 2, got {self.samples}")
        for m in self.user_group_multipliers:
            if m <= 0:
                raise ConfigError("user group multipliers must be > 0")
        if self.screw_count < 1:
            raise ConfigError("screw_count must be >= 1")
        if self.placement_shots < 0 or self.verification_shots < 0:
            raise ConfigError("shot counts must be >= 0")


def _stream_seed(seed: int, *tags: str):
    """Independent, reproducible sub-seed per named random stream."""
    return [int(seed)] + [zlib.crc32(t.encode()) for t in tags]


def _factor_levels(cfg: StudyConfig, i: int):
    """Deterministic cyclic factor assignment for sample i."""
    groups = cfg.user_group_multipliers
    angles = cfg.tool_angles_deg
    trackers = cfg.tracker_distances_mm
    detectors = cfg.detector_distances_mm
    g = i % len(groups)
    a = (i // len(groups)) % len(angles)
    t = (i // (len(groups) * len(angles))) % len(trackers)
    d = (i // (len(groups) * len(angles) * len(trackers))) % len(detectors)
    return g, a, t, d


def _noise_scale(cfg: StudyConfig, method: str, g: int, a: int, t: int, d: int):
    scale = cfg.user_group_multipliers[g]
    scale *= 1.0 + ANGLE_NOISE_GAIN * cfg.tool_angles_deg[a] / 60.0
    if method == POINT_BASED:
        scale *= cfg.tracker_distances_mm[t] / REF_TRACKER_DISTANCE_MM
    else:
        scale *= cfg.detector_distances_mm[d] / REF_DETECTOR_DISTANCE_MM
    return scale


def _point_based_sample(rng, fle_mm: float):
    """One point-based registration trial.

    Returns (fre_rms, delta) where delta maps planned image-frame coordinates
    to where they actually land given the registration error (identity when
    noiseless).
    """
    truth = geo.random_transform(rng, max_translation=80.0)
    moving = PHANTOM_FIDUCIALS
    sigma = fle_mm / np.sqrt(3.0)  # per-axis so the 3D RMS equals fle_mm
    fixed = truth.apply(moving) + rng.normal(0.0, sigma, size=moving.shape)
    result = fit_rigid(
        FiducialSet(PHANTOM_LABELS, fixed, frame=DRB),
        FiducialSet(PHANTOM_LABELS, moving, frame=CT_IMAGE),
    )
    delta = truth.inverse().compose(result.transform)
    return result.fre_rms, delta


def _look_at(source, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World->camera pose for a source at ``source`` aimed at ``target``."""
    z = geo.unit(np.asarray(target, float) - np.asarray(source, float))
    x = np.cross(np.asarray(up, float), z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross([0.0, 1.0, 0.0], z)
    x = geo.unit(x)
    y = np.cross(z, x)
    r = np.vstack([x, y, z])
    return RigidTransform(r, -r @ np.asarray(source, float))


def _automatic_2d_sample(rng, pixel_sigma: float, detector_distance_mm: float):
    """One automatic two-view registration trial; returns fre_rms (mm)."""
    jig = cs.default_jig()
    jig_pose = geo.rotation_about([0, 0, 1], rng.uniform(-0.3, 0.3)).compose(
        geo.translation(rng.uniform(-20.0, 20.0, 3))
    )
    world_pts = jig_pose.apply(jig.beads.points)
    center = world_pts.mean(axis=0)
    src_dist = 1000.0 - detector_distance_mm  # ROI sits this far from source
    ap_src = center + src_dist * np.array([0.0, -1.0, 0.0])
    lat_src = center + src_dist * np.array([-1.0, 0.0, 0.0])
    carm_ap = cs.CArmModel(pose=_look_at(ap_src, center))
    carm_lat = cs.CArmModel(pose=_look_at(lat_src, center))

    counter = cs.ShotCounter()
    noise_rng = rng if pixel_sigma > 0 else None
    ap = cs.acquire_shot(world_pts, jig.beads.labels, carm_ap, counter,
                         noise_px=pixel_sigma, rng=noise_rng, view_tag="AP")
    lat = cs.acquire_shot(world_pts, jig.beads.labels, carm_lat, counter,
                          noise_px=pixel_sigma, rng=noise_rng, view_tag="LATERAL")

    drb_from_world = geo.rotation_about([0, 1, 0], 0.2).compose(
        geo.translation([-40.0, 25.0, 10.0])
    )
    frames = (
        FrameGraph()
        .with_edge("WORLD", DRB, drb_from_world)
        .with_edge(JIG, "WORLD", jig_pose)
    )
    return cs.register_patient_2d(ap, lat, jig, frames).fre_rms


def run_phantom_study(cfg: StudyConfig, methods=METHODS) -> dict:
    """Phantom accuracy study: per-sample registration RMSE under cycled
    factors (user group, tool angle, tracker/detector distance)."""
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    rows = []
    per_method = {}
    for method in methods:
        rng = geo.make_rng(_stream_seed(cfg.seed, method))
        values = []
        for i in range(cfg.samples):
            g, a, t, d = _factor_levels(cfg, i)
            scale = _noise_scale(cfg, method, g, a, t, d)
            if method == POINT_BASED:
                rmse, _ = _point_based_sample(rng, cfg.point_fle_mm * scale)
            else:
                rmse = _automatic_2d_sample(
                    rng, cfg.pixel_sigma_px * scale, cfg.detector_distances_mm[d]
                )
            rows.append(
                {
                    "sample": i,
                    "method": method,
                    "user_group": g,
                    "tool_angle_deg": cfg.tool_angles_deg[a],
                    "tracker_distance_mm": cfg.tracker_distances_mm[t],
                    "detector_distance_mm": cfg.detector_distances_mm[d],
                    "rmse_mm": float(rmse),
                }
            )
            values.append(float(rmse))
        per_method[method] = {
            "stats": rmse_stats(values).as_dict(),
            "factors": _factor_breakdown(rows, method),
        }
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "phantom",
        "seed": cfg.seed,
        "config": asdict(cfg),
        "methods": per_method,
        "rows": rows,
    }


def _factor_breakdown(rows, method):
    """Mean RMSE per level of each experimental factor."""
    out = {}
    for key in ("user_group", "tool_angle_deg", "tracker_distance_mm",
                "detector_distance_mm"):
        buckets = {}
        for r in rows:
            if r["method"] != method:
                continue
            buckets.setdefault(r[key], []).append(r["rmse_mm"])
        out[key] = {
            str(level): float(np.mean(vals)) for level, vals in sorted(buckets.items())
        }
    return out


# --- cadaver-style placement study -----------------------------------------

ROBOT_ASSISTED = "ROBOT_ASSISTED"
NAVIGATION_ONLY = "NAVIGATION_ONLY"

# places the spine inside the default arm's workspace for feasibility checks
_ROBOT_BASE_FROM_TRACKER = geo.translation([400.0, 50.0, 250.0])


def _perturbed_plan(plan: pl.ScrewPlan, delta: RigidTransform) -> pl.ScrewPlan:
    return replace(
        plan,
        entry=delta.apply(plan.entry),
        direction=geo.unit(delta.rotation @ plan.direction),
    )


def run_cadaver_style_study(cfg: StudyConfig, mode: str = ROBOT_ASSISTED) -> dict:
    """Simulated pedicle screw series through the full stack.

    Per screw: ideal axis plan -> point-based registration (calibrated noise)
    -> navigation or robot alignment -> execution noise -> analytic grading.
    A workflow session enforces state legality and accounts every shot.
    """
    if mode not in (ROBOT_ASSISTED, NAVIGATION_ONLY):
        raise ConfigError(f"unknown mode {mode!r}")
    rng = geo.make_rng(_stream_seed(cfg.seed, "cadaver", mode))
    if mode == ROBOT_ASSISTED:
        entry_sigma = cfg.robot_entry_sigma_mm
        dir_sigma = cfg.robot_direction_sigma_rad
    else:
        entry_sigma = cfg.nav_entry_sigma_mm
        dir_sigma = cfg.nav_direction_sigma_rad

    session = wf.Session(f"cadaver-{cfg.seed}-{mode}", mode=mode)
    session.apply("PREOP_IMAGES_ACQUIRED")
    session.apply("PATIENT_INFO_SUBMITTED")
    session.apply("PLANNING_DONE")
    session.apply("PREP_DONE")
    session.apply("DRB_ATTACHED")
    if mode == ROBOT_ASSISTED:
        session.apply("ROBOT_CART_POSITIONED")
    session.apply("CARM_CALIBRATOR_MOUNTED")
    session.apply("INTRAOP_IMAGES_ACQUIRED")

    # one workflow-level registration for the procedure; per-screw spatial
    # error is re-sampled below to model per-vertebra variation
    fre0, _ = _point_based_sample(rng, cfg.point_fle_mm)
    session.apply(
        "REGISTRATION_COMPUTED",
        {"transform": {"rotation": np.eye(3).tolist(),
                       "translation": [0.0, 0.0, 0.0]},
         "fre_rms_mm": float(fre0)},
    )
    probe_err = min(float(fre0), 1.0)
    wf.verify_registration(session, [([probe_err, 0, 0], [0, 0, 0])] * 3)
    session.apply("NAVIGATION_STARTED")

    arm = rb.default_arm() if mode == ROBOT_ASSISTED else None
    arm_home = np.array([0.0, -1.2, 1.2, 0.0, 0.8, 0.0])
    frames = (
        FrameGraph()
        .with_edge(CT_IMAGE, DRB, RigidTransform.identity())
        .with_edge(DRB, TRACKER, RigidTransform.identity())
        .with_edge(TRACKER, ROBOT_BASE, _ROBOT_BASE_FROM_TRACKER)
    )

    rows = []
    reg_rmse = [float(fre0)]
    vertebrae = {lvl: pl.build_vertebra(lvl) for lvl in cfg.levels}
    for i in range(cfg.screw_count):
        level = cfg.levels[i % len(cfg.levels)]
        side = "left" if i % 2 == 0 else "right"
        vert = vertebrae[level]
        plan = pl.axis_plan(vert, side)
        screw_id = f"{level}-{side}-{i}"

        # registration error with calibrated tracking noise, carried into
        # the executed trajectory
        fre, delta = _point_based_sample(rng, cfg.point_fle_mm)
        reg_rmse.append(float(fre))
        registered = _perturbed_plan(plan, delta)
        if mode == ROBOT_ASSISTED:
            session.apply("ROBOT_ALIGNED", {"plan_id": screw_id})
            if cfg.kinematic_stride and i % cfg.kinematic_stride == 0:
                rb.align_to_plan(registered, frames, arm, arm_home)
        for _ in range(cfg.placement_shots):
            wf.record_shot(session, screw_id, "placement")

        executed = pl.simulate_execution(
            registered, entry_sigma, dir_sigma, seed=int(rng.integers(2**63))
        )
        report = pl.validate_trajectory(executed, vert)
        session.apply(
            "SCREW_PLACED",
            {"screw_id": screw_id, "grade": report.grade,
             "breach_depth_mm": float(report.max_breach_depth),
             "anterior_perforation": bool(report.anterior_perforation)},
        )
        session.apply("VERIFICATION_IMAGES_ACQUIRED")
        for _ in range(cfg.verification_shots):
            wf.record_shot(session, screw_id, "verification")
        if i < cfg.screw_count - 1:
            session.apply("NEXT_SCREW")
        rows.append(
            {
                "screw": i,
                "screw_id": screw_id,
                "level": level,
                "side": side,
                "grade": report.grade,
                "breach_depth_mm": float(report.max_breach_depth),
                "anterior_perforation": bool(report.anterior_perforation),
                "registration_rmse_mm": float(fre),
                "shots": session.ledger.screw_total(screw_id),
            }
        )
    session.apply("PROCEDURE_COMPLETE")

    session_report = wf.report(session)
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "cadaver",
        "mode": mode,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "grade_percent": session_report["grade_percent"],
        "shots": session_report["shots"],
        "registration_rmse": rmse_stats(reg_rmse).as_dict()
        if len(reg_rmse) >= 2 else None,
        "final_state": session.state.value,
        "rows": rows,
    }


# --- noise calibration ------------------------------------------------------

def _mean_rmse(scalar: float, method: str, cfg: StudyConfig, samples: int) -> float:
    if method == POINT_BASED:
        probe = replace(cfg, samples=samples, point_fle_mm=scalar)
    else:
        probe = replace(cfg, samples=samples, pixel_sigma_px=scalar)
    rep = run_phantom_study(probe, methods=(method,))
    return rep["methods"][method]["stats"]["mean_mm"]


def calibrate_noise(
    target_mu_mm: float,
    method: str = POINT_BASED,
    cfg: StudyConfig | None = None,
    samples: int = 500,
    tolerance: float = 0.02,
    max_iter: int = 60,
) -> dict:
    """Bisection on the dominant noise scalar (tracking FLE for point-based,
    pixel sigma for automatic-2D) until the simulated mean RMSE is within
    ``tolerance`` (relative) of the target."""
    if target_mu_mm < 0:
        raise ValueError("target must be >= 0")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    key = "point_fle_mm" if method == POINT_BASED else "pixel_sigma_px"
    if target_mu_mm == 0.0:
        return {"method": method, key: 0.0, "achieved_mu_mm": 0.0}
    cfg = cfg or StudyConfig()

    lo, f_lo = 0.0, _mean_rmse(0.0, method, cfg, samples)
    if f_lo > target_mu_mm:
        raise NonMonotoneBracket(
            f"mean at zero noise ({f_lo:.3g}) already exceeds target"
        )
    hi = 1.0
    f_hi = _mean_rmse(hi, method, cfg, samples)
    expansions = 0
    while f_hi < target_mu_mm:
        hi *= 2.0
        expansions += 1
        if expansions > 20:
            raise NonMonotoneBracket("could not bracket target from above")
        f_hi = _mean_rmse(hi, method, cfg, samples)

    mid, f_mid = hi, f_hi
    for _ in range(max_iter):
        if abs(f_mid - target_mu_mm) <= tolerance * target_mu_mm:
            break
        mid = 0.5 * (lo + hi)
        f_mid = _mean_rmse(mid, method, cfg, samples)
        if f_mid < target_mu_mm:
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
    else:
        raise NonMonotoneBracket(
            f"bisection failed to reach {target_mu_mm} within {max_iter} steps"
        )
    return {"method": method, key: float(mid), "achieved_mu_mm": float(f_mid)}


# --- report output ----------------------------------------------------------

def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


def rows_to_csv(rows) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def save_report(report: dict, directory, stem: str, formats=("json", "csv")):
    """Write the structured report and/or the flat raw-row table."""
    import pathlib

    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = directory / f"{stem}.json"
        p.write_text(report_to_json(report) + "\n")
        written.append(p)
    if "csv" in formats:
        p = directory / f"{stem}_rows.csv"
        p.write_text(rows_to_csv(report["rows"]))
        written.append(p)
    return written

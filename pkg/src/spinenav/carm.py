"""Simulated 2D fluoroscope: projection model, calibration jig, bead
identification, pose calibration, and two-view patient-to-image registration.

The camera model is a pinhole with focal length equal to the
source-detector distance; detector coordinates are pixels with the
principal point at the central ray. No distortion model.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import geometry as geo
from .geometry import DRB, JIG, FrameGraph, RigidTransform
from .registration import FiducialSet, RegistrationResult, fit_rigid

MIN_DEPTH_MM = 1.0
MIN_VIEW_SEPARATION_DEG = 30.0


class BehindSource(Exception):
    """A point to project is at or behind the X-ray source."""


class TooFewDetections(Exception):
    pass


class AmbiguousMatch(Exception):
    """Two label assignments are indistinguishable within the noise floor."""


class NonConvergence(Exception):
    pass


class DegenerateBeads(Exception):
    """Beads coplanar or otherwise unusable for pose recovery."""


class ViewsTooClose(Exception):
    """AP/lateral viewing directions separated by less than the minimum."""


@dataclass(frozen=True)
class CArmModel:
    """Intrinsics plus the world->camera pose of a simulated C-Arm.

    Camera frame: +z along the central ray from source toward detector,
    origin at the source.
    """

    source_detector_distance: float = 1000.0  # mm
    pixel_pitch: float = 0.4  # mm per pixel
    detector_size: tuple = (768, 768)  # (u, v) pixels
    principal_point: tuple = (384.0, 384.0)  # pixels
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.source_detector_distance <= 0:
            raise ValueError("source_detector_distance must be > 0")
        u0, v0 = self.principal_point
        nu, nv = self.detector_size
        if not (0 <= u0 <= nu and 0 <= v0 <= nv):
            raise ValueError("principal point outside detector")

    def view_direction(self) -> np.ndarray:
        """Central-ray direction in world coordinates."""
        return self.pose.rotation.T @ np.array([0.0, 0.0, 1.0])

    def source_position(self) -> np.ndarray:
        """X-ray source position in world coordinates."""
        return self.pose.inverse().translation


@dataclass(frozen=True)
class CalibrationJig:
    """Radio-opaque beads in the jig body frame, tracked via its own markers.

    Bead geometry must allow order-free identification: pairwise distances
    distinct and the set non-coplanar.
    """

    beads: FiducialSet
    tool_id: str = "jig"

    def __post_init__(self):
        pts = self.beads.points
        if len(pts) < 6:
            raise ValueError("jig needs >= 6 beads")
        if _coplanarity_depth(pts) <= 5.0:
            raise ValueError("jig beads too close to coplanar")
        d = _pairwise_distances(pts)
        if np.min(np.abs(d[:, None] - d[None, :]) + np.eye(len(d)) * 1e9) <= 1.0:
            raise ValueError("jig bead pairwise distances not distinct by > 1 mm")


def _pairwise_distances(pts):
    iu = np.triu_indices(len(pts), k=1)
    return np.linalg.norm(pts[iu[0]] - pts[iu[1]], axis=1)


def _coplanarity_depth(pts):
    """Max distance of any bead from the best-fit plane of the others."""
    best = 0.0
    for i in range(len(pts)):
        rest = np.delete(pts, i, axis=0)
        c = rest.mean(axis=0)
        _, _, vt = np.linalg.svd(rest - c)
        n = vt[2]
        best = max(best, abs(float(np.dot(pts[i] - c, n))))
    return best


def default_jig(scale: float = 1.0) -> CalibrationJig:
    """8-bead jig in a ~150 mm envelope; all 28 pairwise distances distinct
    by > 1.4 mm at scale 1 (found by randomized search, frozen here)."""
    pts = scale * np.array(
        [
            [3.4, 141.6, 131.6],
            [147.4, 19.9, 32.9],
            [148.9, 58.4, 13.3],
            [142.9, 88.9, 37.5],
            [58.3, 124.3, 28.2],
            [27.1, 68.7, 11.9],
            [95.7, 129.2, 101.0],
            [137.1, 59.7, 72.8],
        ]
    )
    labels = tuple(f"b{i}" for i in range(len(pts)))
    return CalibrationJig(FiducialSet(labels, pts, frame=JIG))


@dataclass(frozen=True)
class ProjectionImage:
    """Labeled bead detections from one exposure, with the C-Arm snapshot."""

    detections: tuple  # ((label, u, v), ...)
    view_tag: str  # AP | LATERAL | OTHER
    shot_index: int
    carm: CArmModel

    def detection_array(self):
        labels = tuple(d[0] for d in self.detections)
        uv = np.array([[d[1], d[2]] for d in self.detections], dtype=float)
        return labels, uv


def project(carm: CArmModel, points) -> np.ndarray:
    """Pinhole projection of world points to detector pixels, shape (N, 2)."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    cam = carm.pose.apply(p)
    z = cam[:, 2]
    if np.any(z <= MIN_DEPTH_MM):
        raise BehindSource(f"point depth {z.min():.3f} mm <= {MIN_DEPTH_MM} mm")
    f = carm.source_detector_distance
    mm = f * cam[:, :2] / z[:, None]
    return mm / carm.pixel_pitch + np.asarray(carm.principal_point)


class ShotCounter:
    """Strictly monotonic per-session exposure counter."""

    def __init__(self):
        self._count = 0

    def next(self) -> int:
        self._count += 1
        return self._count

    @property
    def count(self) -> int:
        return self._count


def acquire_shot(
    bead_positions_world,
    labels,
    carm: CArmModel,
    counter: ShotCounter,
    noise_px: float = 0.0,
    rng: np.random.Generator | None = None,
    view_tag: str = "OTHER",
) -> ProjectionImage:
    """Project the visible beads, add pixel noise, bump the shot counter.

    Beads at or behind the source are dropped rather than erroring, matching
    real detector behavior.
    """
    pts = np.atleast_2d(np.asarray(bead_positions_world, dtype=float))
    cam = carm.pose.apply(pts)
    visible = cam[:, 2] > MIN_DEPTH_MM
    uv = np.empty((0, 2))
    kept = []
    if visible.any():
        uv = project(carm, pts[visible])
        kept = [lab for lab, v in zip(labels, visible) if v]
    if noise_px > 0:
        if rng is None:
            raise ValueError("noise requested without an rng")
        uv = uv + rng.normal(0.0, noise_px, size=uv.shape)
    dets = tuple((lab, float(u), float(v)) for lab, (u, v) in zip(kept, uv))
    return ProjectionImage(dets, view_tag, counter.next(), carm)


def identify_beads(
    detections_uv,
    jig: CalibrationJig,
    carm_guess: CArmModel,
    jig_pose_guess: RigidTransform,
    max_residual_px: float = 40.0,
    ambiguity_px: float = 2.0,
):
    """Assign jig bead labels to unlabeled detections.

    Projects the beads under the pose guess and matches by minimum-cost
    assignment; matches worse than ``max_residual_px`` are dropped as
    spurious. A pairwise-distance signature check rejects assignments that
    a label swap would explain nearly as well.
    """
    uv = np.atleast_2d(np.asarray(detections_uv, dtype=float))
    if len(uv) < 6:
        raise TooFewDetections(f"need >= 6 detections, got {len(uv)}")
    world = jig_pose_guess.apply(jig.beads.points)
    predicted = project(carm_guess, world)
    cost = np.linalg.norm(predicted[:, None, :] - uv[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(r, c) for r, c in zip(rows, cols) if cost[r, c] <= max_residual_px]
    if len(pairs) < 6:
        raise TooFewDetections("fewer than 6 detections matched the jig")
    total = sum(cost[r, c] for r, c in pairs)
    # swap test: any two-label exchange within ambiguity_px of the optimum
    for i in range(len(pairs)):
        for j in range(i + 1, len(pairs)):
            ri, ci = pairs[i]
            rj, cj = pairs[j]
            swapped = total - cost[ri, ci] - cost[rj, cj] + cost[ri, cj] + cost[rj, ci]
            if swapped - total < ambiguity_px:
                raise AmbiguousMatch(
                    f"labels {jig.beads.labels[ri]}/{jig.beads.labels[rj]} ambiguous"
                )
    return tuple(
        (jig.beads.labels[r], float(uv[c, 0]), float(uv[c, 1])) for r, c in pairs
    )


def _detections_to_rays(carm: CArmModel, uv):
    """Unit ray directions in camera frame for pixel detections."""
    mm = (uv - np.asarray(carm.principal_point)) * carm.pixel_pitch
    d = np.column_stack([mm, np.full(len(mm), carm.source_detector_distance)])
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def calibrate_pose(
    image: ProjectionImage,
    jig: CalibrationJig,
    max_iter: int = 100,
    max_residual_px: float = 5.0,
) -> tuple[RigidTransform, float]:
    """Recover the jig->camera pose from labeled bead detections.

    Direct linear initialization on the projection equations, then damped
    Gauss-Newton on the reprojection residual. Returns (pose, rms_px).
    """
    labels, uv = image.detection_array()
    order = {lab: i for i, lab in enumerate(jig.beads.labels)}
    try:
        idx = [order[lab] for lab in labels]
    except KeyError as e:
        raise ValueError(f"unknown bead label {e}") from e
    if len(idx) < 6:
        raise DegenerateBeads("need >= 6 labeled beads")
    obj = jig.beads.points[idx]
    if _coplanarity_depth(obj) <= 5.0:
        raise DegenerateBeads("beads coplanar")
    carm = image.carm
    # normalized image coordinates
    mm = (uv - np.asarray(carm.principal_point)) * carm.pixel_pitch
    xn = mm / carm.source_detector_distance  # (N, 2)

    pose = _dlt_pose(obj, xn)
    pose, rms_px = _refine_pose(obj, xn, pose, carm, max_iter)
    if rms_px > max_residual_px:
        raise NonConvergence(f"residual {rms_px:.2f} px > {max_residual_px} px")
    return pose, rms_px


def _dlt_pose(obj, xn) -> RigidTransform:
    """Direct linear solve of x * (r3.X + t3) = r1.X + t1 (and y row)."""
    n = len(obj)
    a = np.zeros((2 * n, 12))
    for i in range(n):
        x, y = xn[i]
        X = np.append(obj[i], 1.0)
        a[2 * i, 0:4] = X
        a[2 * i, 8:12] = -x * X
        a[2 * i + 1, 4:8] = X
        a[2 * i + 1, 8:12] = -y * X
    _, _, vt = np.linalg.svd(a)
    p = vt[-1].reshape(3, 4)
    r, t = p[:, :3], p[:, 3]
    # fix scale and sign so points sit in front of the camera
    scale = np.cbrt(abs(np.linalg.det(r)))
    if scale < 1e-12:
        raise DegenerateBeads("rank-deficient projection system")
    r, t = r / scale, t / scale
    if np.mean(obj @ r[2] + t[2]) < 0:
        r, t = -r, -t
    u, _, vt2 = np.linalg.svd(r)
    r = u @ np.diag([1, 1, np.sign(np.linalg.det(u @ vt2))]) @ vt2
    return RigidTransform(r, t)


def _refine_pose(obj, xn, pose, carm, max_iter):
    """Damped Gauss-Newton on normalized reprojection error."""
    f_px = carm.source_detector_distance / carm.pixel_pitch

    def residual(p: RigidTransform):
        cam = p.apply(obj)
        z = np.maximum(cam[:, 2], 1e-6)
        return (cam[:, :2] / z[:, None] - xn).ravel()

    lam = 1e-2
    r = residual(pose)
    err = float(r @ r)
    for _ in range(max_iter):
        jac = _projection_jacobian(obj, pose)
        jtj = jac.T @ jac
        jtr = jac.T @ r
        try:
            step = np.linalg.solve(jtj + lam * np.eye(6), -jtr)
        except np.linalg.LinAlgError:
            lam *= 10
            continue
        cand = _apply_twist(pose, step)
        rc = residual(cand)
        errc = float(rc @ rc)
        if errc < err:
            pose, r, err = cand, rc, errc
            lam = max(lam / 3.0, 1e-12)
            if np.linalg.norm(step) < 1e-14:
                break
        else:
            lam *= 10
            if lam > 1e12:
                break
    # RMS over residual components (u and v separately), in pixels
    return pose, float(np.sqrt(np.mean((residual(pose) * f_px) ** 2)))


def _projection_jacobian(obj, pose: RigidTransform):
    """d(normalized projection)/d(rotation twist, translation)."""
    cam = pose.apply(obj)
    n = len(obj)
    jac = np.zeros((2 * n, 6))
    for i in range(n):
        x, y, z = cam[i]
        z = max(z, 1e-6)
        # d(proj)/d(cam point)
        dp = np.array([[1 / z, 0, -x / z**2], [0, 1 / z, -y / z**2]])
        # cam = exp(w) R X + t + dt  ->  d/dw = -[R X]x, d/dt = I
        rx = cam[i] - pose.translation
        skew = np.array(
            [[0, -rx[2], rx[1]], [rx[2], 0, -rx[0]], [-rx[1], rx[0], 0]]
        )
        jac[2 * i : 2 * i + 2, :3] = dp @ (-skew)
        jac[2 * i : 2 * i + 2, 3:] = dp
    return jac


def _apply_twist(pose: RigidTransform, step):
    w, dt = step[:3], step[3:]
    angle = np.linalg.norm(w)
    if angle < 1e-300:
        rot = RigidTransform.identity()
    else:
        rot = geo.rotation_about(w / angle, angle)
    return RigidTransform(rot.rotation @ pose.rotation, pose.translation + dt)


def triangulate(carm_a: CArmModel, uv_a, carm_b: CArmModel, uv_b) -> np.ndarray:
    """Midpoint of the common perpendicular of the two back-projected rays."""
    uv_a = np.atleast_2d(uv_a)
    uv_b = np.atleast_2d(uv_b)
    inv_a = carm_a.pose.inverse()
    inv_b = carm_b.pose.inverse()
    oa = inv_a.translation
    ob = inv_b.translation
    da = _detections_to_rays(carm_a, uv_a) @ inv_a.rotation.T
    db = _detections_to_rays(carm_b, uv_b) @ inv_b.rotation.T
    out = np.empty((len(uv_a), 3))
    for i in range(len(uv_a)):
        u, v = da[i], db[i]
        w0 = oa - ob
        a, b, c = u @ u, u @ v, v @ v
        d, e = u @ w0, v @ w0
        denom = a * c - b * b
        if abs(denom) < 1e-12:
            raise ViewsTooClose("rays are parallel")
        s = (b * e - c * d) / denom
        t = (a * e - b * d) / denom
        out[i] = ((oa + s * u) + (ob + t * v)) / 2.0
    return out


def view_separation_deg(carm_a: CArmModel, carm_b: CArmModel) -> float:
    cosang = float(np.clip(carm_a.view_direction() @ carm_b.view_direction(), -1, 1))
    return float(np.degrees(np.arccos(cosang)))


def register_patient_2d(
    ap: ProjectionImage,
    lat: ProjectionImage,
    jig: CalibrationJig,
    frames: FrameGraph,
) -> RegistrationResult:
    """Automatic fiducial-based patient-to-image registration from two views.

    Triangulates each jig bead in the C-Arm world frame (the stand-in for
    intra-op image space), maps the tracked jig's beads into the DRB frame,
    and rigid-fits image-space beads onto DRB-space beads. Returns the
    image->DRB transform with residuals.
    """
    sep = view_separation_deg(ap.carm, lat.carm)
    if sep < MIN_VIEW_SEPARATION_DEG:
        raise ViewsTooClose(f"views separated by {sep:.1f} deg < {MIN_VIEW_SEPARATION_DEG} deg")
    labels_a, uv_a = ap.detection_array()
    labels_b, uv_b = lat.detection_array()
    common = [lab for lab in labels_a if lab in labels_b]
    if len(common) < 3:
        raise TooFewDetections("fewer than 3 beads visible in both views")
    ia = [labels_a.index(lab) for lab in common]
    ib = [labels_b.index(lab) for lab in common]
    image_pts = triangulate(ap.carm, uv_a[ia], lat.carm, uv_b[ib])

    drb_from_jig = frames.resolve(JIG, DRB)
    order = {lab: i for i, lab in enumerate(jig.beads.labels)}
    jig_pts = jig.beads.points[[order[lab] for lab in common]]
    drb_pts = drb_from_jig.apply(jig_pts)

    return fit_rigid(
        FiducialSet(tuple(common), drb_pts, frame=DRB),
        FiducialSet(tuple(common), image_pts, frame="IMAGE"),
    )


def serialize_projection(image: ProjectionImage) -> str:
    """Plain-text serialization; decimals fixed at 6 digits (round-half-even)."""
    buf = io.StringIO()
    c = image.carm
    buf.write(f"view {image.view_tag}\n")
    buf.write(f"shot {image.shot_index}\n")
    buf.write(
        "intrinsics "
        f"{c.source_detector_distance:.6f} {c.pixel_pitch:.6f} "
        f"{c.detector_size[0]} {c.detector_size[1]} "
        f"{c.principal_point[0]:.6f} {c.principal_point[1]:.6f}\n"
    )
    for lab, u, v in image.detections:
        buf.write(f"det {lab} {u:.6f} {v:.6f}\n")
    return buf.getvalue()


def deserialize_projection(text: str, carm: CArmModel | None = None) -> ProjectionImage:
    view = "OTHER"
    shot = 0
    dets = []
    intr = None
    for line in text.strip().splitlines():
        parts = line.split()
        if parts[0] == "view":
            view = parts[1]
        elif parts[0] == "shot":
            shot = int(parts[1])
        elif parts[0] == "intrinsics":
            intr = [float(x) for x in parts[1:]]
        elif parts[0] == "det":
            dets.append((parts[1], float(parts[2]), float(parts[3])))
    if carm is None:
        if intr is None:
            raise ValueError("no intrinsics line")
        carm = CArmModel(
            source_detector_distance=intr[0],
            pixel_pitch=intr[1],
            detector_size=(int(intr[2]), int(intr[3])),
            principal_point=(intr[4], intr[5]),
        )
    return ProjectionImage(tuple(dets), view, shot, carm)

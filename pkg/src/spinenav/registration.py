"""Rigid point-based registration and closed-form error prediction.

Least-squares rigid fit between labeled fiducial sets (SVD of the
cross-covariance, reflection branch corrected), fiducial registration error
statistics, and the classic closed-form expectations

    E[FRE^2] = (1 - 2/N) * FLE^2
    E[TRE^2(r)] ~= (FLE^2 / N) * (1 + (1/3) * sum_k d_k^2 / f_k^2)

where d_k is the target's distance from principal axis k of the fiducial
configuration and f_k the RMS fiducial spread about that axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform

COLLINEARITY_RATIO = 1e-6


class DegenerateConfiguration(Exception):
    """Fewer than 3 points, or points (near-)collinear."""


class LabelMismatch(Exception):
    """The two fiducial sets do not carry the same labels."""


class InvalidN(Exception):
    """Fiducial count below the minimum for a rigid fit."""


class InsufficientData(Exception):
    """Too few results to aggregate."""


@dataclass(frozen=True)
class FiducialSet:
    """Labeled 3D fiducials expressed in a named frame (mm)."""

    labels: tuple
    points: np.ndarray  # (N, 3)
    frame: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) != len(pts):
            raise ValueError("label/point count mismatch")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate fiducial labels")

    def __len__(self):
        return len(self.labels)

    def check_nondegenerate(self):
        if len(self) < 3:
            raise DegenerateConfiguration(f"need >=3 fiducials, got {len(self)}")
        centered = self.points - self.points.mean(axis=0)
        s = np.linalg.svd(centered, compute_uv=False)
        if s[1] < COLLINEARITY_RATIO * s[0]:
            raise DegenerateConfiguration("fiducials are collinear")


@dataclass(frozen=True)
class RegistrationResult:
    """Fitted transform (moving frame -> fixed frame) plus residuals in mm."""

    transform: RigidTransform
    fre_rms: float
    per_point_residuals: np.ndarray
    n_points: int


@dataclass(frozen=True)
class TrePrediction:
    expected_tre_rms: float
    fle_rms: float
    principal_axis_spreads: np.ndarray  # f_k, mm


def _solve_rigid(fixed: np.ndarray, moving: np.ndarray) -> RigidTransform:
    """SVD rigid fit mapping moving points onto fixed points."""
    cf = fixed.mean(axis=0)
    cm = moving.mean(axis=0)
    h = (moving - cm).T @ (fixed - cf)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cf - r @ cm
    return RigidTransform(r, t)


def fit_rigid(fixed: FiducialSet, moving: FiducialSet) -> RegistrationResult:
    """Least-squares rigid transform taking ``moving`` onto ``fixed``.

    Correspondence is by label. The returned transform maps moving-frame
    coordinates into the fixed frame; fre_rms is the post-fit residual RMS.
    """
    if set(fixed.labels) != set(moving.labels):
        raise LabelMismatch(
            f"labels differ: {sorted(set(fixed.labels) ^ set(moving.labels))}"
        )
    fixed.check_nondegenerate()
    moving.check_nondegenerate()
    order = {lab: i for i, lab in enumerate(moving.labels)}
    mv = moving.points[[order[lab] for lab in fixed.labels]]
    t = _solve_rigid(fixed.points, mv)
    residuals = np.linalg.norm(fixed.points - t.apply(mv), axis=1)
    return RegistrationResult(
        transform=t,
        fre_rms=float(np.sqrt(np.mean(residuals**2))),
        per_point_residuals=residuals,
        n_points=len(fixed),
    )


def predict_fre_rms(n: int, fle_rms: float) -> float:
    """Expected FRE RMS for n fiducials with localization error fle_rms."""
    if n < 3:
        raise InvalidN(f"need n >= 3, got {n}")
    if fle_rms < 0:
        raise ValueError("fle_rms must be >= 0")
    return float(fle_rms * np.sqrt(1.0 - 2.0 / n))


def principal_axes(config: FiducialSet):
    """Centroid, principal axis directions, and RMS spreads f_k (mm)."""
    config.check_nondegenerate()
    c = config.points.mean(axis=0)
    centered = config.points - c
    # covariance eigenvectors = principal axes; f_k = RMS spread about axis k
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    n = len(config)
    # distance from axis k involves the two complementary components; f_k is
    # the RMS of fiducial distances FROM axis k
    comp_rms = s / np.sqrt(n)  # RMS of coordinates along each axis
    f = np.sqrt(np.maximum((comp_rms**2).sum() - comp_rms**2, 0.0))
    return c, vt, f


def predict_tre_rms(config: FiducialSet, target, fle_rms: float) -> TrePrediction:
    """Closed-form expected TRE RMS at ``target`` for the given fiducials."""
    if fle_rms < 0:
        raise ValueError("fle_rms must be >= 0")
    c, axes, f = principal_axes(config)
    rel = np.asarray(target, dtype=float) - c
    coords = axes @ rel  # components along each principal axis
    d = np.sqrt(np.maximum((coords**2).sum() - coords**2, 0.0))
    n = len(config)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(f > 0, (d / np.where(f > 0, f, 1.0)) ** 2, 0.0)
    tre2 = (fle_rms**2 / n) * (1.0 + ratio.sum() / 3.0)
    return TrePrediction(
        expected_tre_rms=float(np.sqrt(tre2)),
        fle_rms=float(fle_rms),
        principal_axis_spreads=f,
    )


@dataclass(frozen=True)
class StudyStats:
    """Mean/SD of RMSE values plus the three candidate upper bounds."""

    mean: float
    sd: float
    mean_plus_1sd: float
    mean_plus_196sd: float
    mean_plus_2sd: float
    n: int

    def as_dict(self):
        return {
            "mean_mm": self.mean,
            "sd_mm": self.sd,
            "mean_plus_1sd_mm": self.mean_plus_1sd,
            "mean_plus_1.96sd_mm": self.mean_plus_196sd,
            "mean_plus_2sd_mm": self.mean_plus_2sd,
            "n": self.n,
        }


def rmse_stats(values) -> StudyStats:
    """Aggregate RMSE values: mean, sample SD, and mu+{1, 1.96, 2} sigma."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise InsufficientData(f"need >=2 values, got {v.size}")
    mu = float(v.mean())
    sd = float(v.std(ddof=1))
    return StudyStats(mu, sd, mu + sd, mu + 1.96 * sd, mu + 2 * sd, int(v.size))


def rmse_report(results) -> StudyStats:
    return rmse_stats([r.fre_rms for r in results])

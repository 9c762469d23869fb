"""Lens distortion and single-view plane rectification primitives.

Conventions used across the package:

* Image points live in *normalized* coordinates: pixel coordinates are
  shifted by the image center and scaled by 1/(width + height).  The
  distortion center is pinned to the image center, i.e. the normalized
  origin.
* Radial lens distortion follows the one-parameter division model.  A
  distorted normalized point p = (x, y) back-projects to the homogeneous
  pinhole point (x, y, 1 + lam*(x^2 + y^2)).  The division-model parameter
  `lam` is quoted in normalized units; wide-angle cameras sit around
  lam = -4, lam = 0 is the pinhole.
* The vanishing line of the scene plane is stored in the affine chart
  l = (l1, l2, 1).  Affine rectification maps the undistorted homogeneous
  point q through H = [[1, 0, 0], [0, 1, 0], [l1, l2, 1]], i.e. divides by
  alpha = l1*x + l2*y + 1 + lam*(x^2 + y^2).
* An affine frame is an ordered triple of image points (y-end, origin,
  x-end) describing a local affine basis; its parameterization determinant
  is the doubled signed area of the triple.

All public functions accept numpy arrays with points in the trailing axis
of size 2 and broadcast over leading axes where documented.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Shared numeric guards, in normalized units.
EPS_DENOM = 1e-9
EPS_COLLINEAR = 1e-12


class NoRealRoot(ValueError):
    """Forward distortion has no real radius for the requested point."""


class NearVanishingLine(ValueError):
    """A rectification denominator is too close to zero to divide by."""


class Collinear(ValueError):
    """An affine frame's points are (nearly) collinear."""


class NoRealLocus(ValueError):
    """The distorted vanishing line has no real image locus."""


@dataclass(frozen=True)
class RectifyModel:
    """Joint undistortion + affine rectification model (l1, l2, lam)."""

    l1: float
    l2: float
    lam: float

    @classmethod
    def identity(cls) -> "RectifyModel":
        return cls(0.0, 0.0, 0.0)

    def line(self) -> np.ndarray:
        """Vanishing line in the affine chart, as (l1, l2, 1)."""
        return np.array([self.l1, self.l2, 1.0])

    def as_array(self) -> np.ndarray:
        return np.array([self.l1, self.l2, self.lam])


@dataclass(frozen=True)
class Normalizer:
    """Affine map between pixel and normalized image coordinates."""

    cx: float
    cy: float
    scale: float

    @classmethod
    def from_image_size(cls, width: float, height: float) -> "Normalizer":
        if width <= 0 or height <= 0:
            raise ValueError("image size must be positive")
        return cls(0.5 * width, 0.5 * height, 1.0 / (width + height))

    def to_normalized(self, pts_px: np.ndarray) -> np.ndarray:
        pts_px = np.asarray(pts_px, dtype=float)
        return (pts_px - np.array([self.cx, self.cy])) * self.scale

    def to_pixels(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts / self.scale + np.array([self.cx, self.cy])

    def sigma_to_normalized(self, sigma_px: float) -> float:
        return sigma_px * self.scale


@dataclass(frozen=True)
class AffineFrame:
    """Ordered point triple (y-end, origin, x-end) of a local affine basis."""

    pts: np.ndarray  # (3, 2)

    def __post_init__(self):
        pts = np.asarray(self.pts, dtype=float)
        if pts.shape != (3, 2):
            raise ValueError("an affine frame is exactly three 2D points")
        object.__setattr__(self, "pts", pts)

    def det(self) -> float:
        return float(parameterization_det(self.pts))

    def centroid(self) -> np.ndarray:
        return self.pts.mean(axis=0)


@dataclass(frozen=True)
class ScaleObservation:
    """A region reduced to its center point and directly observed scale."""

    center: np.ndarray  # (2,)
    scale: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float)
        if center.shape != (2,):
            raise ValueError("center must be a single 2D point")
        object.__setattr__(self, "center", center)
        if not self.scale > 0:
            raise ValueError("observed scale must be positive")


@dataclass(frozen=True)
class RectifiedFrame:
    """Rectified frame points together with the denominators used."""

    points: np.ndarray  # (3, 2)
    alphas: np.ndarray  # (3,)


@dataclass(frozen=True)
class ScaleField:
    """Relative change-of-scale samples over a point grid."""

    points: np.ndarray  # (n, 2)
    values: np.ndarray  # (n,)
    valid: np.ndarray  # (n,) bool


@dataclass(frozen=True)
class VanishingLocus:
    """Image of the vanishing line under forward distortion.

    kind is "circle" (center/radius set) or "line" (line set, as the locus
    of l1*x + l2*y + 1 = 0 when lam = 0).
    """

    kind: str
    center: np.ndarray | None = None
    radius: float | None = None
    line: np.ndarray | None = None


def parameterization_det(pts: np.ndarray) -> np.ndarray:
    """Doubled signed area of point triples, shape (..., 3, 2) -> (...)."""
    pts = np.asarray(pts, dtype=float)
    a, b, c = pts[..., 0, :], pts[..., 1, :], pts[..., 2, :]
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (
        c[..., 0] - a[..., 0]
    ) * (b[..., 1] - a[..., 1])


def undistort(pts: np.ndarray, lam: float) -> np.ndarray:
    """Lift distorted normalized points (..., 2) to homogeneous (..., 3).

    The third coordinate is 1 + lam*r^2; it may be zero or negative for
    points at or beyond the distorted vanishing locus.
    """
    pts = np.asarray(pts, dtype=float)
    r2 = np.sum(pts * pts, axis=-1)
    return np.concatenate([pts, (1.0 + lam * r2)[..., None]], axis=-1)


def undistort_euclidean(pts: np.ndarray, lam: float) -> np.ndarray:
    """Undistorted points in the Euclidean chart (..., 2).

    Raises NearVanishingLine when the homogeneous third coordinate is too
    close to zero to divide by.
    """
    q = undistort(pts, lam)
    w = q[..., 2]
    if np.any(np.abs(w) <= EPS_DENOM):
        raise NearVanishingLine("undistorted point at infinity")
    return q[..., :2] / w[..., None]


def distort(pts: np.ndarray, lam: float) -> np.ndarray:
    """Forward distortion of pinhole points (..., 2), inverse of undistort.

    Uses the division-model branch that is continuous in lam at lam = 0.
    Raises NoRealRoot when 1 - 4*lam*r^2 < 0 (only possible for lam > 0).
    """
    pts = np.asarray(pts, dtype=float)
    r2 = np.sum(pts * pts, axis=-1)
    disc = 1.0 - 4.0 * lam * r2
    if np.any(disc < 0):
        raise NoRealRoot("no real distorted radius for this lambda")
    # (1 - sqrt(1 - 4 lam r^2)) / (2 lam r) rewritten to avoid cancellation.
    factor = 2.0 / (1.0 + np.sqrt(disc))
    return pts * factor[..., None]


def alphas(pts: np.ndarray, model: RectifyModel) -> np.ndarray:
    """Rectification denominators l1*x + l2*y + 1 + lam*r^2, (..., 2) -> (...)."""
    pts = np.asarray(pts, dtype=float)
    x, y = pts[..., 0], pts[..., 1]
    return model.l1 * x + model.l2 * y + 1.0 + model.lam * (x * x + y * y)


def rectify(pts: np.ndarray, model: RectifyModel) -> np.ndarray:
    """Jointly undistort and affinely rectify points (..., 2) -> (..., 2)."""
    pts = np.asarray(pts, dtype=float)
    a = alphas(pts, model)
    if np.any(np.abs(a) <= EPS_DENOM):
        raise NearVanishingLine("point too close to the vanishing line")
    return pts / a[..., None]


def orient(frame: AffineFrame) -> AffineFrame:
    """Return the frame with positive parameterization determinant.

    Swaps the first and third point when the determinant is negative, so
    reflected detections join direct ones in one constraint system.  Raises
    Collinear when |det| <= EPS_COLLINEAR.
    """
    d = frame.det()
    if abs(d) <= EPS_COLLINEAR:
        raise Collinear("frame points are collinear")
    if d < 0:
        return AffineFrame(frame.pts[::-1].copy())
    return frame


def rectified_scale(
    frame: AffineFrame, model: RectifyModel
) -> tuple[float, RectifiedFrame]:
    """Signed doubled area of the rectified frame, with the intermediate.

    Equals det of the rectified point triple: the frame determinant built
    from the three rectified points, computed as
    (a1*M31 - a2*M32 + a3*M33) / (a1*a2*a3) with M3k the point-triple
    minors.  Raises NearVanishingLine when any denominator is tiny.
    """
    pts = frame.pts
    a = alphas(pts, model)
    if np.any(np.abs(a) <= EPS_DENOM):
        raise NearVanishingLine("frame touches the vanishing line")
    x, y = pts[:, 0], pts[:, 1]
    m31 = x[1] * y[2] - x[2] * y[1]
    m32 = x[0] * y[2] - x[2] * y[0]
    m33 = x[0] * y[1] - x[1] * y[0]
    num = a[0] * m31 - a[1] * m32 + a[2] * m33
    scale = num / (a[0] * a[1] * a[2])
    return float(scale), RectifiedFrame(pts / a[:, None], a.copy())


def frame_scales(frames: np.ndarray, model: RectifyModel) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized rectified scales for frames (n, 3, 2) -> (values, valid)."""
    frames = np.asarray(frames, dtype=float)
    x, y = frames[..., 0], frames[..., 1]
    a = model.l1 * x + model.l2 * y + 1.0 + model.lam * (x * x + y * y)
    m31 = x[..., 1] * y[..., 2] - x[..., 2] * y[..., 1]
    m32 = x[..., 0] * y[..., 2] - x[..., 2] * y[..., 0]
    m33 = x[..., 0] * y[..., 1] - x[..., 1] * y[..., 0]
    num = a[..., 0] * m31 - a[..., 1] * m32 + a[..., 2] * m33
    den = a[..., 0] * a[..., 1] * a[..., 2]
    valid = (np.abs(a) > EPS_DENOM).all(axis=-1)
    safe = np.where(valid, den, 1.0)
    values = np.where(valid, num / safe, np.nan)
    return values, valid


def change_of_scale(pt: np.ndarray, model: RectifyModel) -> float:
    """Jacobian determinant of the rectification map at one point.

    Closed form (1 - lam*r^2) / alpha^3.  Raises NearVanishingLine when
    |alpha| <= EPS_DENOM.
    """
    pt = np.asarray(pt, dtype=float)
    a = float(alphas(pt, model))
    if abs(a) <= EPS_DENOM:
        raise NearVanishingLine("change of scale undefined this close to the line")
    r2 = float(pt[0] * pt[0] + pt[1] * pt[1])
    return (1.0 - model.lam * r2) / a**3


def change_of_scale_many(
    pts: np.ndarray, model: RectifyModel
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized change_of_scale with validity mask instead of raising."""
    pts = np.asarray(pts, dtype=float)
    a = alphas(pts, model)
    r2 = np.sum(pts * pts, axis=-1)
    valid = np.abs(a) > EPS_DENOM
    safe = np.where(valid, a, 1.0)
    values = np.where(valid, (1.0 - model.lam * r2) / safe**3, np.nan)
    return values, valid


def dense_change_of_scale_map(
    grid_pts: np.ndarray, model: RectifyModel, ref: np.ndarray
) -> ScaleField:
    """Change of scale over a grid, relative to a reference point.

    Each value is change_of_scale(p) / change_of_scale(ref); grid points
    whose denominator fails the EPS_DENOM guard are marked invalid.  The
    reference must itself be valid (NearVanishingLine otherwise).
    """
    ref_value = change_of_scale(np.asarray(ref, dtype=float), model)
    values, valid = change_of_scale_many(grid_pts, model)
    rel = np.where(valid, values / ref_value, np.nan)
    return ScaleField(np.asarray(grid_pts, dtype=float), rel, valid)


def mask_by_scale(field: ScaleField, threshold: float) -> np.ndarray:
    """Boolean mask: valid field points with relative scale >= 1/threshold."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    with np.errstate(invalid="ignore"):
        keep = field.values >= 1.0 / threshold
    return field.valid & keep


def distorted_vanishing_circle(model: RectifyModel) -> VanishingLocus:
    """Image of the vanishing line in the distorted image.

    For lam != 0 the locus lam*r^2 + l1*x + l2*y + 1 = 0 is the circle with
    center (-l1/(2 lam), -l2/(2 lam)) and squared radius
    (l1^2 + l2^2)/(4 lam^2) - 1/lam; for lam = 0 it is the line
    l1*x + l2*y + 1 = 0.  Raises NoRealLocus when the squared radius is
    negative or when lam = 0 with l1 = l2 = 0 (empty locus).
    """
    l1, l2, lam = model.l1, model.l2, model.lam
    if lam == 0.0:
        if np.hypot(l1, l2) <= EPS_DENOM:
            raise NoRealLocus("identity-like model: the locus is empty")
        return VanishingLocus(kind="line", line=np.array([l1, l2, 1.0]))
    r2 = (l1 * l1 + l2 * l2) / (4.0 * lam * lam) - 1.0 / lam
    if r2 < 0:
        raise NoRealLocus("distorted vanishing locus is imaginary")
    center = np.array([-l1 / (2.0 * lam), -l2 / (2.0 * lam)])
    return VanishingLocus(kind="circle", center=center, radius=float(np.sqrt(r2)))

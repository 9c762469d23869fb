"""Synthetic ground-truth scenes with planted coplanar repeated frames.

A scene is a pinhole camera over the world plane z = 0 plus one-parameter
division-model lens distortion.  Groups of congruent (rigid motion) or
translated triangle frames are planted on the visible part of the plane by
rejection sampling and stored as distorted pixel triples; the ground truth
records the plane-to-pixel pinhole homography, the division-model parameter
and the scene plane's vanishing line in the normalized affine chart.

Cameras are drawn until at least 80% of a plane probe grid is visible and
every group fits fully inside the image bounds; placement is uniform
rejection sampling over the visible region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    AffineFrame,
    Normalizer,
    RectifyModel,
    ScaleObservation,
    change_of_scale,
    frame_scales,
    parameterization_det,
    rectified_scale,
)

PLACEMENT = "uniform_rejection"


class RetryExhausted(RuntimeError):
    """No camera hosting the requested scene was found within the budget."""


@dataclass(frozen=True)
class NoiseSpec:
    """Isotropic Gaussian point noise, standard deviation in pixels."""

    sigma_px: float

    def __post_init__(self):
        if self.sigma_px < 0:
            raise ValueError("noise sigma must be non-negative")


@dataclass(eq=False)
class GroundTruthScene:
    """A synthetic scene: camera, plane, distortion and planted frames.

    frames_px holds the planted frame groups as distorted pixel triples
    (the serialization-native unit); normalized frames are derived on
    demand so that save/load round trips are exact.  sigma records the
    pixel noise baked into frames_px (0 for freshly generated scenes).
    """

    image_size: tuple[int, int]
    normalizer: Normalizer
    lambda_gt: float
    vline_gt: np.ndarray  # (3,), l3 = 1
    plane_to_image: np.ndarray  # (3, 3) pixel pinhole homography
    motion: str
    frames_px: tuple
    seed: int
    sigma: float = 0.0
    placement: str = PLACEMENT
    _probe: tuple | None = field(default=None, repr=False)

    def model(self) -> RectifyModel:
        return RectifyModel(float(self.vline_gt[0]), float(self.vline_gt[1]),
                            float(self.lambda_gt))

    def h_norm(self) -> np.ndarray:
        """Plane to normalized pinhole homography (third row = plane depth)."""
        s, cx, cy = self.normalizer.scale, self.normalizer.cx, self.normalizer.cy
        T = np.array([[s, 0.0, -s * cx], [0.0, s, -s * cy], [0.0, 0.0, 1.0]])
        return T @ self.plane_to_image

    def frame_groups(self) -> list[list[AffineFrame]]:
        """Planted frames in normalized distorted coordinates."""
        return [
            [AffineFrame(self.normalizer.to_normalized(px)) for px in group]
            for group in self.frames_px
        ]

    def image_from_plane(self, pts: np.ndarray):
        """Plane points -> normalized distorted points, with validity mask."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        P = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1) @ self.h_norm().T
        depth = P[:, 2]
        valid = depth > 1e-9
        safe = np.where(valid, depth, 1.0)
        u = P[:, :2] / safe[:, None]
        r2 = np.sum(u * u, axis=1)
        disc = 1.0 - 4.0 * self.lambda_gt * r2
        valid &= disc >= 0.0
        factor = 2.0 / (1.0 + np.sqrt(np.where(valid, disc, 1.0)))
        return u * factor[:, None], valid

    def plane_from_image(self, pts: np.ndarray):
        """Normalized distorted points -> plane points, with validity mask."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        r2 = np.sum(pts * pts, axis=1)
        lift = np.concatenate([pts, (1.0 + self.lambda_gt * r2)[:, None]], axis=1)
        X = lift @ np.linalg.inv(self.h_norm()).T
        valid = np.abs(X[:, 2]) > 1e-12
        safe = np.where(valid, X[:, 2], 1.0)
        Xe = X[:, :2] / safe[:, None]
        depth = Xe @ self.h_norm()[2, :2] + self.h_norm()[2, 2]
        valid &= depth > 1e-9
        return Xe, valid

    def plane_probe(self, n: int = 13, margin: float = 0.02):
        """Plane preimages of a pixel grid; caches the default grid."""
        if n == 13 and margin == 0.02 and self._probe is not None:
            return self._probe
        w, h = self.image_size
        xs = np.linspace(margin * w, (1.0 - margin) * w, n)
        ys = np.linspace(margin * h, (1.0 - margin) * h, n)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        px = np.stack([gx.ravel(), gy.ravel()], axis=1)
        pn = self.normalizer.to_normalized(px)
        Xe, valid = self.plane_from_image(pn)
        if n == 13 and margin == 0.02:
            object.__setattr__(self, "_probe", (Xe, valid))
        return Xe, valid


def _camera(rng: np.random.Generator, image_size) -> np.ndarray:
    w, h = image_size
    f = rng.uniform(0.5, 2.5) * w
    K = np.array([[f, 0.0, 0.5 * w], [0.0, f, 0.5 * h], [0.0, 0.0, 1.0]])
    # oblique but realistic captures; steeper tilts make the plane barely
    # visible and are rejected by the probe-visibility loop anyway
    tilt = rng.uniform(np.deg2rad(15.0), np.deg2rad(45.0))
    azim = rng.uniform(0.0, 2.0 * np.pi)
    roll = rng.uniform(-np.pi, np.pi)
    center = 3.0 * np.array(
        [np.sin(tilt) * np.cos(azim), np.sin(tilt) * np.sin(azim), np.cos(tilt)]
    )
    target = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), 0.0])
    zc = target - center
    zc = zc / np.linalg.norm(zc)
    x0 = np.cross(zc, np.array([0.0, 0.0, 1.0]))
    nx = np.linalg.norm(x0)
    x0 = np.array([1.0, 0.0, 0.0]) if nx < 1e-9 else x0 / nx
    y0 = np.cross(zc, x0)
    ca, sa = np.cos(roll), np.sin(roll)
    xc = ca * x0 + sa * y0
    yc = -sa * x0 + ca * y0
    R = np.stack([xc, yc, zc], axis=0)
    t = -R @ center
    return K @ np.stack([R[:, 0], R[:, 1], t], axis=1)


def _triangle(rng: np.random.Generator, extent: float) -> np.ndarray:
    """Centered generic triangle (y-end, origin, x-end), positively oriented."""
    side = rng.uniform(0.01, 0.05) * extent
    theta = rng.uniform(0.0, 2.0 * np.pi)
    ratio = rng.uniform(0.7, 1.3)
    ang = rng.uniform(np.deg2rad(50.0), np.deg2rad(130.0))
    e1 = side * np.array([np.cos(theta), np.sin(theta)])
    e2 = side * ratio * np.array([np.cos(theta + ang), np.sin(theta + ang)])
    pts = np.stack([e2, np.zeros(2), e1], axis=0)
    return pts - pts.mean(axis=0)


def _rot(phi: float) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s], [s, c]])


def gen_scene(
    seed: int,
    lambda_gt: float = -4.0,
    motion: str = "rigid",
    n_groups: int = 6,
    group_size: int = 4,
    image_size: tuple[int, int] = (1000, 1000),
    max_attempts: int = 100,
) -> GroundTruthScene:
    """Draw a random scene with planted repeated frames.

    Deterministic in the seed.  Raises RetryExhausted when no camera
    hosting all groups (with >= 80% of the plane probe grid visible and
    every planted point inside the image bounds) is found.
    """
    if motion not in ("rigid", "translation"):
        raise ValueError("motion must be 'rigid' or 'translation'")
    w, h = image_size
    rng = np.random.default_rng(seed)
    normalizer = Normalizer.from_image_size(w, h)

    for _ in range(max_attempts):
        H_pix = _camera(rng, image_size)
        scene = GroundTruthScene(
            image_size=image_size,
            normalizer=normalizer,
            lambda_gt=lambda_gt,
            vline_gt=np.array([0.0, 0.0, 1.0]),
            plane_to_image=H_pix,
            motion=motion,
            frames_px=(),
            seed=seed,
        )
        l = np.linalg.inv(scene.h_norm())[2, :]
        if abs(l[2]) < 1e-8 * np.linalg.norm(l):
            continue
        vline = l / l[2]
        object.__setattr__(scene, "vline_gt", vline)

        cloud, valid = scene.plane_probe()
        if valid.mean() < 0.8:
            continue
        pts = cloud[valid]
        extent = float(np.hypot(np.ptp(pts[:, 0]), np.ptp(pts[:, 1])))
        if extent <= 0:
            continue

        groups = _plant_groups(
            rng, scene, pts, extent, motion, n_groups, group_size
        )
        if groups is None:
            continue
        object.__setattr__(scene, "frames_px", groups)
        if _equal_scale_spread(scene) < 1e-8:
            return scene
    raise RetryExhausted(f"no valid camera in {max_attempts} attempts")


def _plant_groups(rng, scene, cloud_pts, extent, motion, n_groups, group_size):
    w, h = scene.image_size
    margin = 0.01 * min(w, h)
    groups = []
    for _ in range(n_groups):
        base = None
        frames = []
        for j in range(group_size):
            placed = None
            for _ in range(60):
                anchor = cloud_pts[rng.integers(cloud_pts.shape[0])]
                center = anchor + rng.uniform(-0.02, 0.02, 2) * extent
                if j == 0:
                    local = _triangle(rng, extent)
                elif motion == "rigid":
                    local = base @ _rot(rng.uniform(0.0, 2.0 * np.pi)).T
                else:
                    local = base
                plane_pts = center + local
                img, ok = scene.image_from_plane(plane_pts)
                if not ok.all():
                    continue
                px = scene.normalizer.to_pixels(img)
                if not (
                    (px[:, 0] > margin).all()
                    and (px[:, 0] < w - margin).all()
                    and (px[:, 1] > margin).all()
                    and (px[:, 1] < h - margin).all()
                ):
                    continue
                if abs(parameterization_det(px)) < 1e-6:
                    continue
                if j == 0:
                    base = local
                placed = px
                break
            if placed is None:
                return None
            if parameterization_det(placed) < 0:
                placed = placed[::-1].copy()
            frames.append(placed)
        groups.append(tuple(frames))
    return tuple(groups)


def _equal_scale_spread(scene: GroundTruthScene) -> float:
    """Max in-group relative spread of rectified scales at ground truth."""
    model = scene.model()
    worst = 0.0
    for group in scene.frame_groups():
        vals, ok = frame_scales(np.stack([f.pts for f in group]), model)
        if not ok.all():
            return np.inf
        spread = float(np.ptp(vals) / max(np.max(np.abs(vals)), 1e-300))
        worst = max(worst, spread)
    return worst


def add_noise(scene: GroundTruthScene, noise, seed: int) -> list[list[AffineFrame]]:
    """Frame groups of the scene with Gaussian pixel noise added.

    Noise is drawn per coordinate at the pixel sigma of `noise` (a NoiseSpec
    or a float) and returned in normalized coordinates; the scene itself is
    untouched.  Deterministic in the seed.
    """
    sigma_px = noise.sigma_px if isinstance(noise, NoiseSpec) else float(noise)
    if sigma_px < 0:
        raise ValueError("noise sigma must be non-negative")
    sig = scene.normalizer.sigma_to_normalized(sigma_px)
    rng = np.random.default_rng(seed)
    out = []
    for group in scene.frame_groups():
        noisy = []
        for f in group:
            noisy.append(AffineFrame(f.pts + rng.normal(0.0, sig, (3, 2))))
        out.append(noisy)
    return out


def scene_with_noise(scene: GroundTruthScene, noise, seed: int) -> GroundTruthScene:
    """Copy of the scene with noise baked into the stored pixel frames."""
    sigma_px = noise.sigma_px if isinstance(noise, NoiseSpec) else float(noise)
    groups = add_noise(scene, sigma_px, seed)
    frames_px = tuple(
        tuple(scene.normalizer.to_pixels(f.pts) for f in g) for g in groups
    )
    return GroundTruthScene(
        image_size=scene.image_size,
        normalizer=scene.normalizer,
        lambda_gt=scene.lambda_gt,
        vline_gt=scene.vline_gt.copy(),
        plane_to_image=scene.plane_to_image.copy(),
        motion=scene.motion,
        frames_px=frames_px,
        seed=scene.seed,
        sigma=float(np.hypot(scene.sigma, sigma_px)),
        placement=scene.placement,
    )


def cs_observations(groups) -> list[list[ScaleObservation]]:
    """Reduce frame groups to (centroid, |determinant|) scale observations."""
    out = []
    for group in groups:
        obs = []
        for f in group:
            obs.append(ScaleObservation(f.centroid(), abs(f.det())))
        out.append(obs)
    return out


def cs_observations_exact(scene: GroundTruthScene) -> list[list[ScaleObservation]]:
    """Scale observations exactly consistent with the ground-truth model.

    The observed scale is the frame's rectified scale divided by the change
    of scale at its centroid, so the equal Jacobian-scaled-scale equations
    hold to machine precision on noiseless scenes (the geometric
    determinant observation of `cs_observations` only satisfies them up to
    a frame-size-squared linearization bias).
    """
    model = scene.model()
    out = []
    for group in scene.frame_groups():
        obs = []
        for f in group:
            s, _ = rectified_scale(f, model)
            c = f.centroid()
            obs.append(ScaleObservation(c, s / change_of_scale(c, model)))
        out.append(obs)
    return out


def cs_observations_with_noise(
    scene: GroundTruthScene, noise, seed: int
) -> list[list[ScaleObservation]]:
    """Exact scale observations perturbed consistently with frame noise.

    The benchmark stand-in for a scale-covariant detector on a noisy image:
    centers are the centroids of the noise-perturbed frames, and each exact
    scale is modulated by the ratio of the noisy to the clean frame
    determinant, i.e. by the same relative error a determinant measurement
    would pick up.  sigma = 0 reduces to `cs_observations_exact`.
    """
    noisy = add_noise(scene, noise, seed)
    exact = cs_observations_exact(scene)
    out = []
    for group_n, group_c, group_e in zip(noisy, scene.frame_groups(), exact):
        obs = []
        for fn, fc, oe in zip(group_n, group_c, group_e):
            ratio = abs(fn.det()) / abs(fc.det())
            obs.append(ScaleObservation(fn.centroid(), oe.scale * ratio))
        out.append(obs)
    return out


def plane_grid(scene: GroundTruthScene, n: int = 10) -> np.ndarray:
    """n x n plane-point grid over the bulk of the visible plane region.

    The grid spans inter-quantile boxes of the probe cloud, widening the
    trim until every grid point images validly under the ground truth.
    """
    cloud, valid = scene.plane_probe()
    pts = cloud[valid]
    grid = None
    for q in (0.05, 0.10, 0.15, 0.20, 0.30):
        lox, hix = np.quantile(pts[:, 0], [q, 1.0 - q])
        loy, hiy = np.quantile(pts[:, 1], [q, 1.0 - q])
        gx, gy = np.meshgrid(
            np.linspace(lox, hix, n), np.linspace(loy, hiy, n), indexing="ij"
        )
        grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
        _, ok = scene.image_from_plane(grid)
        if ok.all():
            return grid
    return grid

"""Polynomial systems encoding equal rectified scale of repeated regions.

Two families of constraints are built, both in the unknowns (l1, l2, lam):

* directly-encoded scale ("des"): corresponded affine frames inside a group
  must have equal rectified scale.  With alpha_{i,k} the rectification
  denominator of point k of frame i, the scale of frame i is
  N_i / (alpha_{i,1} alpha_{i,2} alpha_{i,3}) where
  N_i = alpha_{i,1} M31 - alpha_{i,2} M32 + alpha_{i,3} M33 and the M3k are
  the constant point-triple minors.  N_i is linear in lam alone (the l1, l2
  contributions cancel because they are linear combinations of the x and y
  rows).  Cross-multiplying s_i = s_j gives the degree-4 equation
  N_i P_j - N_j P_i = 0 with P_i the denominator product.
* change of scale ("cs"): regions reduced to (center, scale) observations;
  the rectified scale is s_i (1 - lam r_i^2) / D_i^3 with D_i the denominator
  at the center, so equality cross-multiplies to the degree-4 equation
  s_i (lam r_i^2 - 1) D_j^3 - s_j (lam r_j^2 - 1) D_i^3 = 0.

Fixing lam turns the des equations into degree-3 equations in (l1, l2).

Polynomials are stored sparsely as {exponent tuple: coefficient} and are
built twice: once in rescaled variables (coordinates and squared radii
scaled to unit average magnitude, a variable rescaling of (l1, l2, lam)
that conditions the solve) and once plainly for residual checks.  Every
equation is normalized to unit maximum absolute coefficient.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    EPS_COLLINEAR,
    AffineFrame,
    ScaleObservation,
    orient,
    parameterization_det,
)

EPS_VLINE = 1e-6
EPS_CIRCLE = 1e-6

FLAG_COLLINEAR = "collinear"
FLAG_CONCENTRIC = "concentric_points"
FLAG_VL_ORIGIN = "vl_through_origin"

# group sizes per configuration
CONFIG_SIZES = {
    "222": (2, 2, 2),
    "32": (3, 2),
    "4": (4,),
    "22-fixed": (2, 2),
}

Poly = dict[tuple[int, ...], float]


class DegenerateSample(ValueError):
    """The sample cannot constrain a model (see .flags for the reasons)."""

    def __init__(self, flags: set[str]):
        super().__init__(f"degenerate sample: {sorted(flags)}")
        self.flags = set(flags)


@dataclass(frozen=True)
class MinimalSample:
    """Grouped repeated-region measurements for one minimal problem.

    groups holds AffineFrame lists for des configs or ScaleObservation
    lists for cs configs; group sizes must match the config as a multiset.
    """

    groups: tuple
    config: str

    def __post_init__(self):
        if self.config not in CONFIG_SIZES:
            raise ValueError(f"unknown config {self.config!r}")
        groups = tuple(tuple(g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        sizes = sorted(len(g) for g in groups)
        if sizes != sorted(CONFIG_SIZES[self.config]):
            raise ValueError(
                f"group sizes {sizes} do not match config {self.config!r}"
            )


@dataclass(frozen=True)
class VariableScaling:
    """Variable rescaling of (l1, l2, lam) induced by data rescaling.

    Coordinates are multiplied by coord_scale and squared radii by
    radius_scale before building the system; a root (l1', l2', lam') of the
    scaled system maps back as l1 = l1'*coord_scale, l2 = l2'*coord_scale,
    lam = lam'*radius_scale.
    """

    coord_scale: float
    radius_scale: float

    @classmethod
    def identity(cls) -> "VariableScaling":
        return cls(1.0, 1.0)

    @classmethod
    def from_points(cls, pts: np.ndarray) -> "VariableScaling":
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        mean_abs = float(np.mean(np.abs(pts)))
        mean_r2 = float(np.mean(np.sum(pts * pts, axis=-1)))
        cs = 1.0 / mean_abs if mean_abs > 0 else 1.0
        rs = 1.0 / mean_r2 if mean_r2 > 0 else 1.0
        return cls(cs, rs)

    def factors(self, nvars: int) -> np.ndarray:
        if nvars == 3:
            return np.array([self.coord_scale, self.coord_scale, self.radius_scale])
        return np.array([self.coord_scale, self.coord_scale])

    def unscale_root(self, root: np.ndarray) -> np.ndarray:
        root = np.asarray(root)
        return root * self.factors(root.shape[-1])

    def scale_root(self, root: np.ndarray) -> np.ndarray:
        root = np.asarray(root)
        return root / self.factors(root.shape[-1])


@dataclass(frozen=True)
class DesCoefficients:
    """Per-frame building blocks: constant minors and denominator rows.

    alpha_rows[k] holds the coefficients (c_l1, c_l2, c_lam, c_1) of the
    rectification denominator of point k as a linear form in (l1, l2, lam).
    """

    minors: np.ndarray  # (3,)
    alpha_rows: np.ndarray  # (3, 4)


@dataclass
class PolySystem:
    """A square-able polynomial system plus its unscaled twin.

    polys are in rescaled variables and drive the numeric solve;
    polys_plain are in the original variables and define residuals.  Both
    are normalized to unit max coefficient.  square_idx selects a square
    subsystem (chain pairing inside groups); the remaining equations act as
    consistency filters on candidate roots.
    """

    polys: list[Poly]
    polys_plain: list[Poly]
    nvars: int
    degree: int
    scaling: VariableScaling
    square_idx: tuple[int, ...]
    pair_labels: tuple[tuple[int, int, int], ...]
    kind: str  # "des" | "cs" | "des-fixed"
    config: str
    fixed_lambda: float | None = None
    anchored_idx: tuple[int, ...] = field(default=())


def _pmul(a: Poly, b: Poly) -> Poly:
    out: Poly = {}
    for ea, ca in a.items():
        for eb, cb in b.items():
            e = tuple(x + y for x, y in zip(ea, eb))
            out[e] = out.get(e, 0.0) + ca * cb
    return out


def _paxpy(out: Poly, a: Poly, c: float) -> None:
    for e, v in a.items():
        out[e] = out.get(e, 0.0) + c * v


def _pnormalize(p: Poly) -> tuple[Poly, float]:
    m = max((abs(v) for v in p.values()), default=0.0)
    if m == 0.0:
        return dict(p), 0.0
    return {e: v / m for e, v in p.items() if v != 0.0}, m


def poly_eval(p: Poly, z: np.ndarray) -> np.ndarray:
    """Evaluate a sparse polynomial at points z of shape (..., nvars)."""
    z = np.asarray(z)
    out = np.zeros(z.shape[:-1], dtype=z.dtype)
    for e, c in p.items():
        term = np.full(z.shape[:-1], c, dtype=z.dtype)
        for k, ek in enumerate(e):
            if ek:
                term = term * z[..., k] ** ek
        out = out + term
    return out


def _chain_pairs(n: int) -> list[tuple[int, int]]:
    return [(k, k + 1) for k in range(n - 1)]


def _pair_index(sizes: tuple[int, ...]) -> list[tuple[int, int, int]]:
    labels = []
    for g, n in enumerate(sizes):
        for a, b in itertools.combinations(range(n), 2):
            labels.append((g, a, b))
    return labels


def _square_indices(sizes: tuple[int, ...], labels) -> tuple[int, ...]:
    wanted = set()
    for g, n in enumerate(sizes):
        for pair in _chain_pairs(n):
            wanted.add((g,) + pair)
    return tuple(i for i, lab in enumerate(labels) if lab in wanted)


def _anchored_indices(sizes: tuple[int, ...], labels) -> tuple[int, ...]:
    # anchor every equation of a group on its first frame: s1=s2, s1=s3, ...
    wanted = set()
    for g, n in enumerate(sizes):
        for b in range(1, n):
            wanted.add((g, 0, b))
    return tuple(i for i, lab in enumerate(labels) if lab in wanted)


def des_coefficients(frame: AffineFrame, scaling: VariableScaling) -> DesCoefficients:
    """Minors and denominator linear forms of one frame, in scaled variables."""
    pts = frame.pts
    cs, rs = scaling.coord_scale, scaling.radius_scale
    x = cs * pts[:, 0]
    y = cs * pts[:, 1]
    r2 = rs * np.sum(pts * pts, axis=1)
    m31 = x[1] * y[2] - x[2] * y[1]
    m32 = x[0] * y[2] - x[2] * y[0]
    m33 = x[0] * y[1] - x[1] * y[0]
    rows = np.stack([x, y, r2, np.ones(3)], axis=1)
    return DesCoefficients(np.array([m31, m32, m33]), rows)


def _des_group_polys(frames, scaling: VariableScaling) -> list[tuple[Poly, Poly]]:
    """(N_i, P_i) polynomials in (l1, l2, lam) per frame of one group."""
    out = []
    for f in frames:
        co = des_coefficients(f, scaling)
        alpha = [
            {
                (1, 0, 0): co.alpha_rows[k, 0],
                (0, 1, 0): co.alpha_rows[k, 1],
                (0, 0, 1): co.alpha_rows[k, 2],
                (0, 0, 0): co.alpha_rows[k, 3],
            }
            for k in range(3)
        ]
        # N = a1*M31 - a2*M32 + a3*M33 collapses to a linear poly in lam:
        # the l1 and l2 parts cancel because x and y are rows of the minors.
        n_poly: Poly = {}
        _paxpy(n_poly, alpha[0], co.minors[0])
        _paxpy(n_poly, alpha[1], -co.minors[1])
        _paxpy(n_poly, alpha[2], co.minors[2])
        n_poly = {e: v for e, v in n_poly.items() if abs(v) > 1e-300}
        p_poly = _pmul(_pmul(alpha[0], alpha[1]), alpha[2])
        out.append((n_poly, p_poly))
    return out


def _build_des_equations(sample: MinimalSample, scaling: VariableScaling) -> list[Poly]:
    polys = []
    for group in sample.groups:
        frames = [orient(f) for f in group]
        nps = _des_group_polys(frames, scaling)
        for a, b in itertools.combinations(range(len(frames)), 2):
            eq: Poly = {}
            _paxpy(eq, _pmul(nps[a][0], nps[b][1]), 1.0)
            _paxpy(eq, _pmul(nps[b][0], nps[a][1]), -1.0)
            polys.append(eq)
    return polys


def _finish_system(
    polys_scaled, polys_plain, nvars, degree, scaling, sample, kind, fixed_lambda=None
) -> PolySystem:
    normed, norms = [], []
    for p in polys_scaled:
        q, m = _pnormalize(p)
        normed.append(q)
        norms.append(m)
    plain_normed = [_pnormalize(p)[0] for p in polys_plain]
    # an identically-zero equation means the pair carries no constraint
    scale_ref = max(norms) if norms else 0.0
    if any(m <= 1e-14 * max(scale_ref, 1e-300) for m in norms):
        raise DegenerateSample({"duplicate_measurement"})
    sizes = tuple(len(g) for g in sample.groups)
    labels = tuple(_pair_index(sizes))
    return PolySystem(
        polys=normed,
        polys_plain=plain_normed,
        nvars=nvars,
        degree=degree,
        scaling=scaling,
        square_idx=_square_indices(sizes, labels),
        pair_labels=labels,
        kind=kind,
        config=sample.config,
        fixed_lambda=fixed_lambda,
        anchored_idx=_anchored_indices(sizes, labels),
    )


def build_des(sample: MinimalSample) -> PolySystem:
    """Equal-rectified-scale system from corresponded affine frames.

    Produces one degree-4 equation in (l1, l2, lam) per in-group frame pair:
    3 equations for 222, 4 for 32, 6 for 4.  Raises DegenerateSample when
    pre-checks fire (collinear frame, concentric sample).
    """
    if sample.config not in ("222", "32", "4"):
        raise ValueError(f"build_des does not handle config {sample.config!r}")
    flags = degeneracy_flags(sample)
    if flags:
        raise DegenerateSample(flags)
    pts = np.concatenate([f.pts for g in sample.groups for f in g], axis=0)
    scaling = VariableScaling.from_points(pts)
    scaled = _build_des_equations(sample, scaling)
    plain = _build_des_equations(sample, VariableScaling.identity())
    return _finish_system(scaled, plain, 3, 4, scaling, sample, "des")


def _build_cs_equations(sample: MinimalSample, scaling: VariableScaling) -> list[Poly]:
    polys = []
    for group in sample.groups:
        dq = []
        for obs in group:
            cs, rs = scaling.coord_scale, scaling.radius_scale
            x, y = cs * obs.center[0], cs * obs.center[1]
            r2 = rs * float(obs.center @ obs.center)
            d: Poly = {(1, 0, 0): x, (0, 1, 0): y, (0, 0, 1): r2, (0, 0, 0): 1.0}
            q: Poly = {(0, 0, 1): r2, (0, 0, 0): -1.0}
            dq.append((d, q, obs.scale))
        for a, b in itertools.combinations(range(len(group)), 2):
            da, qa, sa = dq[a]
            db, qb, sb = dq[b]
            db3 = _pmul(_pmul(db, db), db)
            da3 = _pmul(_pmul(da, da), da)
            eq: Poly = {}
            _paxpy(eq, _pmul(qa, db3), sa)
            _paxpy(eq, _pmul(qb, da3), -sb)
            polys.append(eq)
    return polys


def build_cs(sample: MinimalSample) -> PolySystem:
    """Equal Jacobian-scaled-scale system from (center, scale) observations.

    One degree-4 equation in (l1, l2, lam) per in-group observation pair.
    """
    if sample.config not in ("222", "32", "4"):
        raise ValueError(f"build_cs does not handle config {sample.config!r}")
    flags = degeneracy_flags(sample)
    if flags:
        raise DegenerateSample(flags)
    centers = np.stack([o.center for g in sample.groups for o in g], axis=0)
    scaling = VariableScaling.from_points(centers)
    scaled = _build_cs_equations(sample, scaling)
    plain = _build_cs_equations(sample, VariableScaling.identity())
    return _finish_system(scaled, plain, 3, 4, scaling, sample, "cs")


def _build_fixed_equations(
    sample: MinimalSample, lam: float, scaling: VariableScaling
) -> list[Poly]:
    polys = []
    for group in sample.groups:
        frames = [orient(f) for f in group]
        nps = []
        for f in frames:
            co = des_coefficients(f, scaling)
            # with lam fixed the third coordinate is a constant per point
            lam_scaled = lam / scaling.radius_scale
            w = co.alpha_rows[:, 2] * lam_scaled + co.alpha_rows[:, 3]
            alpha = [
                {(1, 0): co.alpha_rows[k, 0], (0, 1): co.alpha_rows[k, 1], (0, 0): w[k]}
                for k in range(3)
            ]
            n_const = float(
                w[0] * co.minors[0] - w[1] * co.minors[1] + w[2] * co.minors[2]
            )
            p_poly = _pmul(_pmul(alpha[0], alpha[1]), alpha[2])
            nps.append((n_const, p_poly))
        for a, b in itertools.combinations(range(len(frames)), 2):
            eq: Poly = {}
            _paxpy(eq, nps[b][1], nps[a][0])
            _paxpy(eq, nps[a][1], -nps[b][0])
            polys.append(eq)
    return polys


def build_des_fixed_lambda(sample: MinimalSample, lam: float) -> PolySystem:
    """Equal-scale system with the distortion parameter held fixed.

    Two groups of two frames give 2 degree-3 equations in (l1, l2).
    """
    if sample.config != "22-fixed":
        raise ValueError("fixed-lambda solving uses the 22-fixed config")
    flags = degeneracy_flags(sample)
    if flags:
        raise DegenerateSample(flags)
    pts = np.concatenate([f.pts for g in sample.groups for f in g], axis=0)
    scaling = VariableScaling.from_points(pts)
    scaled = _build_fixed_equations(sample, lam, scaling)
    plain = _build_fixed_equations(sample, lam, VariableScaling.identity())
    return _finish_system(scaled, plain, 2, 3, scaling, sample, "des-fixed", lam)


def _sample_radii(sample: MinimalSample) -> list[np.ndarray]:
    """Per group: (n_members, n_points_per_member) radii from the origin."""
    out = []
    for group in sample.groups:
        if isinstance(group[0], AffineFrame):
            r = np.stack(
                [np.sqrt(np.sum(f.pts * f.pts, axis=1)) for f in group], axis=0
            )
        else:
            r = np.stack(
                [np.array([float(np.hypot(*o.center))]) for o in group], axis=0
            )
        out.append(r)
    return out


def degeneracy_flags(sample: MinimalSample, model=None) -> set[str]:
    """Structural degeneracies of a sample (and optionally a model).

    * collinear: some affine frame has |det| <= EPS_COLLINEAR.
    * concentric_points: all sample points lie on one origin-centered circle,
      or corresponding points of every group lie on matched such circles
      (radius spread below EPS_CIRCLE); in both cases the distortion
      parameter is unobservable.
    * vl_through_origin: the model's vanishing line renormalizes to the
      through-the-origin chart, 1/hypot(l1, l2) < EPS_VLINE.
    """
    flags: set[str] = set()
    is_frames = isinstance(sample.groups[0][0], AffineFrame)
    if is_frames:
        for group in sample.groups:
            for f in group:
                if abs(f.det()) <= EPS_COLLINEAR:
                    flags.add(FLAG_COLLINEAR)
    radii = _sample_radii(sample)
    all_r = np.concatenate([r.ravel() for r in radii])
    if all_r.size and np.ptp(all_r) < EPS_CIRCLE:
        flags.add(FLAG_CONCENTRIC)
    else:
        matched = all(
            np.all(np.ptp(r, axis=0) < EPS_CIRCLE) and r.shape[0] > 1 for r in radii
        )
        if matched:
            flags.add(FLAG_CONCENTRIC)
    if model is not None:
        h = float(np.hypot(model.l1, model.l2))
        if h > 0 and 1.0 / h < EPS_VLINE:
            flags.add(FLAG_VL_ORIGIN)
    return flags

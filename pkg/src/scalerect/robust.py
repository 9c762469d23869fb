"""Robust estimation over the minimal solvers, plus evaluation metrics.

A pool of corresponded region groups (affine frames for the directly-encoded
scale solvers, center/scale observations for the change-of-scale ones) is
sampled by group-size-proportional selection into minimal configurations,
each sample is solved, and every feasible root is scored.  Two scorings are
supported: the affine-invariant equal-scale consensus (a correspondence pair
is an inlier when its rectified scales agree within a relative tolerance)
and the ground-truth-referenced warp error used by the synthetic benchmark.

The warp error measures a round trip: a 10x10 grid of scene-plane points is
imaged by the ground truth, rectified by the estimated model, aligned to the
plane by a least-squares affine transform (the rectification is only defined
up to an affinity), re-imaged by the ground truth, and compared in pixels.

Scoring is pure and the sample sequence depends only on the seed, so runs
are reproducible and extending the iteration count can only improve the
best score.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import scipy.optimize

from . import synth
from .constraints import (
    CONFIG_SIZES,
    DegenerateSample,
    FLAG_VL_ORIGIN,
    MinimalSample,
    build_cs,
    build_des,
    build_des_fixed_lambda,
    degeneracy_flags,
)
from .geometry import (
    EPS_DENOM,
    AffineFrame,
    RectifyModel,
    alphas,
    change_of_scale_many,
    frame_scales,
)
from .polysolve import DEFAULT_CONFIG, SolverConfig, solve_many
from .synth import GroundTruthScene

TAU_EQUAL_SCALE = 0.15

# variant name -> (equation family, group-size configuration)
VARIANTS = {
    "des222": ("des", "222"),
    "des32": ("des", "32"),
    "des4": ("des", "4"),
    "des22-fixed": ("des-fixed", "22-fixed"),
    "cs222": ("cs", "222"),
    "cs32": ("cs", "32"),
    "cs4": ("cs", "4"),
}


class NoFeasibleModel(RuntimeError):
    """No sample produced a feasible, scoreable model."""


class GroundTruthZero(ValueError):
    """Relative error is undefined for a zero ground-truth parameter."""


@dataclass(frozen=True)
class WarpErrorReport:
    """Round-trip pixel error of a model against a ground-truth scene."""

    rms: float
    per_point: np.ndarray  # (n,) pixel distances
    affine_ambiguity: np.ndarray  # (2, 3) rectified -> plane alignment


@dataclass(frozen=True)
class EstimationResult:
    model: RectifyModel
    consensus_size: int
    samples_tried: int
    best_score: float
    refined: bool
    # diagnostics of the winning sample's solve and of the whole run
    n_real: int = 0
    n_feasible: int = 0
    solve_millis: float = 0.0
    residual: float = float("nan")


def warp_error(
    model: RectifyModel, scene: GroundTruthScene, n: int = 10
) -> WarpErrorReport:
    """RMS pixel round-trip error over an n x n scene-plane grid.

    Grid points are imaged by the ground truth, rectified by `model`,
    aligned to the plane coordinates by the least-squares affinity, then
    re-imaged by the ground truth; per_point holds the pixel distances to
    the original images.  A grid point unrectifiable under the model (or
    unimageable after alignment) makes the rms infinite.
    """
    grid = synth.plane_grid(scene, n)
    obs_n, ok = scene.image_from_plane(grid)
    bad = WarpErrorReport(
        float("inf"), np.full(grid.shape[0], np.inf), np.zeros((2, 3))
    )
    if not ok.all():
        return bad
    a = alphas(obs_n, model)
    if np.any(np.abs(a) <= EPS_DENOM):
        return bad
    rect = obs_n / a[:, None]

    D = np.concatenate([rect, np.ones((rect.shape[0], 1))], axis=1)
    coef, *_ = np.linalg.lstsq(D, grid, rcond=None)
    aligned = D @ coef
    back_n, ok2 = scene.image_from_plane(aligned)
    if not ok2.all():
        return bad
    d = np.hypot(
        *(scene.normalizer.to_pixels(back_n) - scene.normalizer.to_pixels(obs_n)).T
    )
    rms = float(np.sqrt(np.mean(d * d)))
    return WarpErrorReport(rms, d, coef.T.copy())


def rel_lambda_error(model: RectifyModel, scene: GroundTruthScene) -> float:
    """|lam_est - lam_gt| / |lam_gt|; GroundTruthZero when lam_gt = 0."""
    if scene.lambda_gt == 0.0:
        raise GroundTruthZero("ground-truth distortion parameter is zero")
    return abs(model.lam - scene.lambda_gt) / abs(scene.lambda_gt)


def lambda_error(model: RectifyModel, scene: GroundTruthScene) -> tuple[float, bool]:
    """(error, is_relative): relative when defined, absolute otherwise."""
    try:
        return rel_lambda_error(model, scene), True
    except GroundTruthZero:
        return abs(model.lam - scene.lambda_gt), False


def _pool_arrays(pool):
    """Flatten a pool into scale-evaluation arrays and within-group pairs.

    Returns (evaluate, pairs_a, pairs_b) where evaluate(model) gives the
    rectified scale and validity of every region, and the index arrays list
    all within-group region pairs.
    """
    sizes = [len(g) for g in pool]
    if any(s < 1 for s in sizes):
        raise ValueError("pool groups must be non-empty")
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    pa, pb = [], []
    for gi, size in enumerate(sizes):
        for i, j in zip(*np.triu_indices(size, k=1)):
            pa.append(offsets[gi] + i)
            pb.append(offsets[gi] + j)
    pairs_a = np.array(pa, dtype=np.int64)
    pairs_b = np.array(pb, dtype=np.int64)

    if isinstance(pool[0][0], AffineFrame):
        F = np.stack([f.pts for g in pool for f in g], axis=0)

        def evaluate(model):
            return frame_scales(F, model)

    else:
        centers = np.stack([o.center for g in pool for o in g], axis=0)
        meas = np.array([o.scale for g in pool for o in g])

        def evaluate(model):
            chos, valid = change_of_scale_many(centers, model)
            return np.where(valid, meas * chos, np.nan), valid

    return evaluate, pairs_a, pairs_b


def equal_scale_consensus(
    model: RectifyModel, pool, tau: float = TAU_EQUAL_SCALE
) -> tuple[int, int]:
    """(inlier pairs, total pairs) of the equal-rectified-scale test.

    A within-group correspondence pair is an inlier when both scales are
    defined and |s_i - s_j| / max(|s_i|, |s_j|) < tau.
    """
    evaluate, pa, pb = _pool_arrays(pool)
    s, valid = evaluate(model)
    si, sj = s[pa], s[pb]
    denom = np.maximum(np.abs(si), np.abs(sj))
    ok = valid[pa] & valid[pb] & (denom > 0)
    safe = np.where(ok, denom, 1.0)
    with np.errstate(invalid="ignore"):
        inlier = ok & (np.abs(si - sj) / safe < tau)
    return int(np.sum(inlier)), int(pa.size)


def draw_minimal_sample(
    rng: np.random.Generator, pool, config: str
) -> MinimalSample:
    """Sample groups with probability proportional to size, then members.

    Groups are drawn without replacement for the configuration's slots
    (largest requirement first); member regions are drawn uniformly without
    replacement within each chosen group.
    """
    sizes = CONFIG_SIZES[config]
    avail = list(range(len(pool)))
    chosen = []
    for need in sizes:
        eligible = [i for i in avail if len(pool[i]) >= need]
        if not eligible:
            raise ValueError(f"pool cannot fill a size-{need} group for {config!r}")
        w = np.array([len(pool[i]) for i in eligible], dtype=float)
        gi = eligible[rng.choice(len(eligible), p=w / w.sum())]
        avail.remove(gi)
        members = np.sort(rng.choice(len(pool[gi]), size=need, replace=False))
        chosen.append(tuple(pool[gi][k] for k in members))
    return MinimalSample(tuple(chosen), config)


def _build_system(sample: MinimalSample, kind: str, fixed_lambda):
    if kind == "des":
        return build_des(sample)
    if kind == "cs":
        return build_cs(sample)
    if kind == "des-fixed":
        return build_des_fixed_lambda(sample, fixed_lambda)
    raise ValueError(f"unknown equation family {kind!r}")


def _root_model(root: np.ndarray, fixed_lambda) -> RectifyModel:
    if root.shape[0] == 2:
        return RectifyModel(float(root[0]), float(root[1]), float(fixed_lambda))
    return RectifyModel(float(root[0]), float(root[1]), float(root[2]))


def ransac(
    pool,
    variant: str,
    iterations: int = 25,
    scoring: str = "equal-scale",
    scene: GroundTruthScene | None = None,
    seed: int = 0,
    cfg: SolverConfig | None = None,
    tau: float = TAU_EQUAL_SCALE,
    fixed_lambda: float | None = None,
    refine_result: bool = False,
) -> EstimationResult:
    """Best model over `iterations` minimal samples.

    scoring="equal-scale" maximizes the inlier-pair consensus over the
    pool; scoring="warp-gt" minimizes the ground-truth warp error (the
    synthetic-benchmark protocol) and requires `scene`.  Samples whose
    build degenerates are consumed without producing candidates; candidate
    models flagged as having the vanishing line through the origin are
    rejected.  Deterministic in `seed`; ties keep the earliest candidate.
    Raises NoFeasibleModel when nothing scoreable survives.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    kind, config = VARIANTS[variant]
    if kind == "des-fixed" and fixed_lambda is None:
        raise ValueError("des22-fixed needs fixed_lambda")
    if scoring not in ("equal-scale", "warp-gt"):
        raise ValueError(f"unknown scoring {scoring!r}")
    if scoring == "warp-gt" and scene is None:
        raise ValueError("warp-gt scoring needs the ground-truth scene")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    cfg = cfg or DEFAULT_CONFIG

    rng = np.random.default_rng(seed)
    samples = [draw_minimal_sample(rng, pool, config) for _ in range(iterations)]

    built = []  # (iteration, sample, system)
    for it, sample in enumerate(samples):
        if degeneracy_flags(sample):
            continue
        try:
            built.append((it, sample, _build_system(sample, kind, fixed_lambda)))
        except DegenerateSample:
            continue

    t0 = time.perf_counter()
    solutions = solve_many([s for _, _, s in built], cfg)
    solve_ms = (time.perf_counter() - t0) * 1e3

    best_score = None
    best_model = None
    best_counts = (0, 0)
    best_residual = float("nan")
    better = (lambda a, b: a < b) if scoring == "warp-gt" else (lambda a, b: a > b)
    for (it, sample, _), sol in zip(built, solutions):
        if sol.tracking_failed:
            continue
        for k in np.flatnonzero(sol.feasible):
            model = _root_model(sol.roots[k], fixed_lambda)
            if FLAG_VL_ORIGIN in degeneracy_flags(sample, model):
                continue
            if scoring == "warp-gt":
                score = warp_error(model, scene).rms
                if not np.isfinite(score):
                    continue
            else:
                score = float(equal_scale_consensus(model, pool, tau)[0])
            if best_score is None or better(score, best_score):
                best_score, best_model = score, model
                best_counts = (len(sol.roots), int(np.sum(sol.feasible)))
                best_residual = float(sol.residuals[k])

    if best_model is None:
        raise NoFeasibleModel(f"no feasible model in {iterations} samples")

    refined = False
    if refine_result:
        cand = refine(best_model, pool, tau)
        if scoring == "warp-gt":
            score = warp_error(cand, scene).rms
        else:
            score = float(equal_scale_consensus(cand, pool, tau)[0])
        if np.isfinite(score) and not better(best_score, score):
            best_model, best_score, refined = cand, score, True

    consensus = equal_scale_consensus(best_model, pool, tau)[0]
    return EstimationResult(best_model, consensus, iterations, float(best_score),
                            refined, best_counts[0], best_counts[1], solve_ms,
                            best_residual)


def refine(model: RectifyModel, pool, tau: float = TAU_EQUAL_SCALE) -> RectifyModel:
    """Least-squares polish of (l1, l2, lam) on equal-scale residuals.

    Minimizes the scale gaps of the pairs that are inliers at the input
    model, each weighted by the inverse of its initial scale magnitudes
    (weights stay frozen so the objective is a fixed least-squares cost).
    Never returns a model with a higher objective; falls back to the input
    when fewer than 3 inlier pairs exist or the optimizer fails.
    """
    evaluate, pa, pb = _pool_arrays(pool)
    s0, valid0 = evaluate(model)
    si, sj = s0[pa], s0[pb]
    denom = np.maximum(np.abs(si), np.abs(sj))
    ok = valid0[pa] & valid0[pb] & (denom > 0)
    safe = np.where(ok, denom, 1.0)
    with np.errstate(invalid="ignore"):
        inlier = ok & (np.abs(si - sj) / safe < tau)
    if int(np.sum(inlier)) < 3:
        return model
    ia, ib = pa[inlier], pb[inlier]
    w = 1.0 / (np.abs(s0[ia]) + np.abs(s0[ib]))

    def residuals(x):
        s, valid = evaluate(RectifyModel(x[0], x[1], x[2]))
        r = (s[ia] - s[ib]) * w
        bad = ~(valid[ia] & valid[ib]) | ~np.isfinite(r)
        return np.where(bad, 1e6, r)

    x0 = np.array([model.l1, model.l2, model.lam])
    try:
        fit = scipy.optimize.least_squares(residuals, x0, method="lm")
    except Exception:
        return model
    if not np.all(np.isfinite(fit.x)):
        return model
    if np.sum(residuals(fit.x) ** 2) <= np.sum(residuals(x0) ** 2):
        return RectifyModel(float(fit.x[0]), float(fit.x[1]), float(fit.x[2]))
    return model


@dataclass(frozen=True)
class CensusReport:
    """Per-trial real/feasible root counts, one row of trials per sigma."""

    variant: str
    sigmas: tuple[float, ...]
    real_counts: tuple[np.ndarray, ...]
    feasible_counts: tuple[np.ndarray, ...]

    def real_histogram(self, i: int) -> dict[int, int]:
        return _histogram(self.real_counts[i])

    def feasible_histogram(self, i: int) -> dict[int, int]:
        return _histogram(self.feasible_counts[i])

    def exactly_one_feasible(self, i: int) -> float:
        c = self.feasible_counts[i]
        return float(np.mean(c == 1)) if c.size else float("nan")


def _histogram(counts: np.ndarray) -> dict[int, int]:
    b = np.bincount(counts)
    return {k: int(b[k]) for k in range(b.size) if b[k]}


def solution_census(
    scenes,
    sigmas,
    variant: str,
    seed: int = 0,
    cfg: SolverConfig | None = None,
    fixed_lambda: float | None = None,
) -> CensusReport:
    """Real/feasible root counts of one minimal sample per scene and sigma.

    Each trial perturbs the scene's regions with the given pixel noise
    (change-of-scale variants observe noise-consistent exact scales, the
    synthetic stand-in for a scale-covariant detector), draws one minimal
    sample, solves it, and records how many real and how many feasible
    roots came back (zero on a degenerate draw).  The root acceptance
    residual is relaxed to 1e-3 for noisy trials.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    kind, config = VARIANTS[variant]
    if kind == "des-fixed" and fixed_lambda is None:
        raise ValueError("des22-fixed needs fixed_lambda")
    cfg = cfg or DEFAULT_CONFIG

    real_rows, feas_rows = [], []
    for si, sigma in enumerate(sigmas):
        built = {}
        for ti, scene in enumerate(scenes):
            if kind == "cs":
                pool = synth.cs_observations_with_noise(
                    scene, float(sigma), seed=seed + 7919 * ti
                )
            else:
                pool = synth.add_noise(scene, float(sigma), seed=seed + 7919 * ti)
            rng = np.random.default_rng([seed, si, ti])
            for _ in range(5):
                sample = draw_minimal_sample(rng, pool, config)
                if degeneracy_flags(sample):
                    continue
                try:
                    built[ti] = _build_system(sample, kind, fixed_lambda)
                except DegenerateSample:
                    continue
                break
        run_cfg = cfg if float(sigma) == 0.0 else _relaxed(cfg)
        solutions = solve_many(list(built.values()), run_cfg)
        by_trial = dict(zip(built.keys(), solutions))
        nr = np.zeros(len(scenes), dtype=np.int64)
        nf = np.zeros(len(scenes), dtype=np.int64)
        for ti in range(len(scenes)):
            sol = by_trial.get(ti)
            if sol is not None and not sol.tracking_failed:
                nr[ti] = sol.roots.shape[0]
                nf[ti] = int(np.sum(sol.feasible))
        real_rows.append(nr)
        feas_rows.append(nf)
    return CensusReport(variant, tuple(float(s) for s in sigmas),
                        tuple(real_rows), tuple(feas_rows))


def _relaxed(cfg: SolverConfig) -> SolverConfig:
    return cfg if cfg.eps_res >= 1e-3 else replace(cfg, eps_res=1e-3)

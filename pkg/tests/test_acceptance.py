"""End-to-end acceptance protocol: ten frozen criteria, one printed line each.

Each test freezes one quality bar for the estimator stack and records a
PASS/FAIL line in the terminal summary.  Bars are asserted as stated even
where the measured value falls short; the analysis lives in the project
decision notes, never in a weakened threshold.
"""

import time

import numpy as np
import pytest

from conftest import record_acceptance
from test_polysolve import anchored_family_points
from test_robust import concentric_pool

from scalerect import synth
from scalerect.constraints import (
    FLAG_VL_ORIGIN,
    DegenerateSample,
    MinimalSample,
    build_cs,
    build_des,
    degeneracy_flags,
    poly_eval,
)
from scalerect.geometry import (
    AffineFrame,
    RectifyModel,
    alphas,
    change_of_scale,
    rectify,
)
from scalerect.polysolve import (
    SolverConfig,
    oracle_solve,
    solve,
    solve_many,
    with_eps_res,
)
from scalerect.robust import (
    VARIANTS,
    NoFeasibleModel,
    draw_minimal_sample,
    equal_scale_consensus,
    ransac,
    rel_lambda_error,
    warp_error,
)

ESTIMATING = ("des222", "des32", "des4", "cs222", "cs32", "cs4")
CENSUS_SIGMAS = (0.0, 0.5, 1.0)
NOISY_CFG = with_eps_res(SolverConfig(), 1e-3)


def sample_systems(scene, variant, pool, rng, count=1):
    """Draw `count` non-degenerate minimal samples and build their systems."""
    kind, config = VARIANTS[variant]
    build = build_cs if kind == "cs" else build_des
    systems = []
    for _ in range(count):
        for _attempt in range(6):
            sample = draw_minimal_sample(rng, pool, config)
            if degeneracy_flags(sample):
                continue
            try:
                systems.append(build(sample))
            except DegenerateSample:
                continue
            break
    return systems


def root_model(root):
    return RectifyModel(float(root[0]), float(root[1]), float(root[2]))


@pytest.fixture(scope="module")
def census_reports(scene_bank):
    from scalerect.robust import solution_census

    reports = {
        v: solution_census(scene_bank, CENSUS_SIGMAS, v) for v in ESTIMATING
    }
    reports["des22-fixed"] = solution_census(
        scene_bank, CENSUS_SIGMAS, "des22-fixed", fixed_lambda=-4.0
    )
    return reports


def test_criterion_01_noiseless_recovery(scene_bank):
    """Every variant recovers the planted model on clean data, fast."""
    t0 = time.perf_counter()
    cfg = SolverConfig()
    fractions = {}
    for variant in ESTIMATING:
        kind, _ = VARIANTS[variant]
        systems, scenes_of = [], []
        for ti, scene in enumerate(scene_bank):
            pool = (synth.cs_observations_exact(scene) if kind == "cs"
                    else scene.frame_groups())
            built = sample_systems(scene, variant, pool,
                                   np.random.default_rng([11, ti]))
            systems.extend(built)
            scenes_of.extend([scene] * len(built))
        solutions = solve_many(systems, cfg)
        good = 0
        for sol, scene in zip(solutions, scenes_of):
            for k in np.flatnonzero(sol.feasible):
                if sol.residuals[k] < 1e-6 and (
                        warp_error(root_model(sol.roots[k]), scene).rms < 1e-4):
                    good += 1
                    break
        fractions[variant] = good / len(scene_bank)
    elapsed = time.perf_counter() - t0
    worst = min(fractions.values())
    ok = worst >= 0.99 and elapsed <= 300.0
    detail = " ".join(f"{v}={f:.3f}" for v, f in fractions.items())
    record_acceptance(
        f"criterion 1 (noiseless recovery): {'PASS' if ok else 'FAIL'} - "
        f"{detail} (bar 0.99 each), {elapsed:.0f}s (bar 300s)"
    )
    assert worst >= 0.99, fractions
    assert elapsed <= 300.0


def test_criterion_02_root_count_bounds(census_reports):
    """Converged finite real roots never exceed the per-variant bounds."""
    bounds = {"des222": 54, "des32": 45, "des4": 36, "des22-fixed": 9}
    maxima = {
        v: max(int(row.max()) for row in census_reports[v].real_counts)
        for v in bounds
    }
    ok = all(maxima[v] <= b for v, b in bounds.items())
    detail = " ".join(f"{v}={maxima[v]}/{b}" for v, b in bounds.items())
    record_acceptance(
        f"criterion 2 (solution count bounds): {'PASS' if ok else 'FAIL'} - "
        f"max observed/bound {detail}"
    )
    for v, bound in bounds.items():
        assert maxima[v] <= bound, (v, maxima[v])


def test_criterion_03_feasibility_census(census_reports):
    """Usually exactly one root lands in the usable distortion interval."""
    one = total = 0
    per_sigma = []
    for i, sigma in enumerate(CENSUS_SIGMAS):
        o = sum(int(np.sum(census_reports[v].feasible_counts[i] == 1))
                for v in ESTIMATING)
        n = sum(census_reports[v].feasible_counts[i].size for v in ESTIMATING)
        per_sigma.append(o / n)
        one += o
        total += n
    pooled = one / total
    ok = pooled >= 0.90
    detail = " ".join(
        f"sigma={s:g}:{f:.3f}" for s, f in zip(CENSUS_SIGMAS, per_sigma)
    )
    record_acceptance(
        f"criterion 3 (exactly-one-feasible census): "
        f"{'PASS' if ok else 'FAIL'} - pooled {pooled:.3f} (bar 0.90) "
        f"over {total} trials; {detail}"
    )
    assert pooled >= 0.90, (pooled, per_sigma)


def test_criterion_04_proposal_quality(translation_bank):
    """A quarter of noisy single-sample proposals already rectify well."""
    systems, scenes_of = [], []
    for ti, scene in enumerate(translation_bank):
        pool = synth.add_noise(scene, 1.0, seed=1000 + ti)
        built = sample_systems(scene, "des222", pool,
                               np.random.default_rng([41, ti]), count=3)
        systems.extend(built)
        scenes_of.extend([scene] * len(built))
    solutions = solve_many(systems, NOISY_CFG)
    n_models = n_good = n_sample_good = 0
    for sol, scene in zip(solutions, scenes_of):
        any_good = False
        for root in sol.feasible_roots():
            n_models += 1
            if warp_error(root_model(root), scene).rms < 5.0:
                n_good += 1
                any_good = True
        n_sample_good += any_good
    per_sample = n_sample_good / len(systems)
    per_model = n_good / n_models
    ok = per_sample >= 0.25 and len(systems) >= 500
    record_acceptance(
        f"criterion 4 (proposal quality at 1 px noise): "
        f"{'PASS' if ok else 'FAIL'} - per-sample {per_sample:.4f} "
        f"(bar 0.25, {len(systems)} samples); per-model {per_model:.4f} "
        f"({n_models} models)"
    )
    assert len(systems) >= 500
    assert per_sample >= 0.25, (per_sample, per_model)


def test_criterion_05_ransac_sensitivity(scene_bank):
    """25-iteration estimation stays accurate under 2 px noise."""
    rms_vals, rel_errs = [], []
    for ti, scene in enumerate(scene_bank):
        pool = synth.add_noise(scene, 2.0, seed=5000 + ti)
        try:
            res = ransac(pool, "des222", iterations=25, scoring="warp-gt",
                         scene=scene, seed=ti, cfg=NOISY_CFG)
            rms_vals.append(float(res.best_score))
            rel_errs.append(rel_lambda_error(res.model, scene))
        except NoFeasibleModel:
            rms_vals.append(float("inf"))
            rel_errs.append(float("inf"))
    frac = float(np.mean(np.array(rms_vals) < 5.0))
    med = float(np.median(rel_errs))
    ok = frac >= 0.60 and med < 0.5
    record_acceptance(
        f"criterion 5 (estimation under 2 px noise): "
        f"{'PASS' if ok else 'FAIL'} - warp<5px on {frac:.3f} of scenes "
        f"(bar 0.60); median relative distortion error {med:.3f} (bar 0.5)"
    )
    assert frac >= 0.60, frac
    assert med < 0.5, med


def test_criterion_06_distortion_stability():
    """Median warp at 1 px noise across ground-truth distortion levels.

    The measured medians grow monotonically toward the pinhole end (the
    vanishing-line component of the estimate degrades as distortion
    weakens while the pixel metric's sensitivity stays flat), exceeding
    the stated 2x band; the bar is asserted as stated.
    """
    lams = (-5.0, -4.0, -3.0, -2.0, -1.0, 0.0)
    medians = []
    for lam in lams:
        vals = []
        for ti in range(35):
            scene = synth.gen_scene(10000 + ti, lambda_gt=lam)
            pool = synth.add_noise(scene, 1.0, seed=3000 + ti)
            try:
                res = ransac(pool, "des222", iterations=25,
                             scoring="warp-gt", scene=scene, seed=ti,
                             cfg=NOISY_CFG)
                vals.append(float(res.best_score))
            except NoFeasibleModel:
                vals.append(float("inf"))
        medians.append(float(np.median(vals)))
    ratio = max(medians) / min(medians)
    ok = ratio < 2.0
    detail = " ".join(f"{l:g}:{m:.2f}" for l, m in zip(lams, medians))
    record_acceptance(
        f"criterion 6 (distortion stability): {'PASS' if ok else 'FAIL'} - "
        f"median warp px {detail}; spread {ratio:.2f}x (bar <2x)"
    )
    assert ratio < 2.0, (ratio, medians)


def test_criterion_06b_mismatched_lambda_grows_monotonically():
    """Fixing the wrong distortion hurts more the further it is from truth."""
    fixed = (-4.0, -3.0, -2.0, -1.0, 0.0)
    medians = []
    for lfix in fixed:
        vals = []
        for ti in range(25):
            scene = synth.gen_scene(20000 + ti)
            pool = synth.add_noise(scene, 1.0, seed=4000 + ti)
            try:
                res = ransac(pool, "des22-fixed", iterations=25,
                             scoring="warp-gt", scene=scene, seed=ti,
                             cfg=NOISY_CFG, fixed_lambda=lfix)
                vals.append(float(res.best_score))
            except NoFeasibleModel:
                vals.append(float("inf"))
        medians.append(float(np.median(vals)))
    ok = all(b > a for a, b in zip(medians, medians[1:]))
    detail = " ".join(f"{l:g}:{m:.2f}" for l, m in zip(fixed, medians))
    record_acceptance(
        f"criterion 6b (mismatched fixed distortion): "
        f"{'PASS' if ok else 'FAIL'} - median warp px {detail} "
        f"(must grow monotonically)"
    )
    assert ok, medians


def test_criterion_07_change_of_scale_matches_jacobian():
    """Closed-form local scale equals the map's finite-difference Jacobian."""
    rng = np.random.default_rng(7)
    h = 1e-5
    worst = 0.0
    n = 0
    while n < 1000:
        model = RectifyModel(rng.uniform(-2, 2), rng.uniform(-2, 2),
                             rng.uniform(-8, 0.5))
        r = 0.35 * np.sqrt(rng.random())
        th = rng.uniform(0.0, 2.0 * np.pi)
        pt = np.array([r * np.cos(th), r * np.sin(th)])
        if abs(alphas(pt, model)) < 0.2:  # keep the difference well-posed
            continue
        jac = np.empty((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            jac[:, j] = (rectify(pt + e, model) - rectify(pt - e, model)) / (2 * h)
        fd = float(np.linalg.det(jac))
        cs = change_of_scale(pt, model)
        worst = max(worst, abs(fd - cs) / max(abs(cs), 1e-12))
        n += 1
    ok = worst <= 1e-5
    record_acceptance(
        f"criterion 7 (scale = Jacobian determinant): "
        f"{'PASS' if ok else 'FAIL'} - worst relative deviation {worst:.2e} "
        f"over {n} evaluations (bar 1e-5)"
    )
    assert worst <= 1e-5, worst


def test_criterion_08_anchored_family_is_filtered():
    """The anchored quadruple subsystem's root continuum never leaks out."""
    scene = synth.gen_scene(88)
    group = scene.frame_groups()[0]
    sample = MinimalSample((tuple(group[:4]),), "4")
    system = build_des(sample)
    anchored = [system.polys[i] for i in system.anchored_idx]
    dropped = [p for i, p in enumerate(system.polys)
               if i not in system.anchored_idx]
    family = anchored_family_points(system, group[0],
                                    [-1.2, -0.3, 0.6, 1.4, 2.2])
    worst_anchored = 0.0
    min_violation = float("inf")
    for z in family:
        a = max(float(np.max(np.abs(poly_eval(p, z)))) for p in anchored)
        d = max(float(np.max(np.abs(poly_eval(p, z)))) for p in dropped)
        worst_anchored = max(worst_anchored, a)
        min_violation = min(min_violation, d)
        assert a < 1e-8 and d > 1e3 * max(a, 1e-12)

    cfg = SolverConfig()
    sol = solve(system, cfg, square_indices=system.anchored_idx)
    gt = scene.model().as_array()
    recovered = bool(len(sol.roots)) and float(
        np.min(np.max(np.abs(sol.roots - gt), axis=1))) < 1e-6
    clean = bool(np.all(sol.residuals < cfg.eps_res))
    ok = recovered and clean and sol.path_stats.failed > 0
    record_acceptance(
        f"criterion 8 (anchored-subsystem family filtered): "
        f"{'PASS' if ok else 'FAIL'} - family satisfies kept equations to "
        f"{worst_anchored:.1e} yet violates dropped ones by {min_violation:.1e}; "
        f"{sol.path_stats.failed} paths absorbed, survivors all pass the "
        f"full-system residual, truth recovered={recovered}"
    )
    assert ok


def image_from_plane_pts(q, lvec, lam):
    """Invert the rectification map point-wise (stable quadratic branch)."""
    v3 = 1.0 - q @ lvec
    c = np.sum(q * q, axis=-1)
    s = 2.0 / (v3 + np.sqrt(v3 * v3 - 4.0 * lam * c))
    return s[:, None] * q


def vl_origin_pool(rng, magnitude=1e7, lam=-4.0, n_groups=6, group_size=4):
    """Frame groups exactly consistent with a horizon through the origin."""
    phi = rng.uniform(0.0, 2.0 * np.pi)
    lhat = np.array([np.cos(phi), np.sin(phi)])
    perp = np.array([-lhat[1], lhat[0]])
    lvec = magnitude * lhat
    model = RectifyModel(lvec[0], lvec[1], lam)
    groups = []
    while len(groups) < n_groups:
        center = ((0.08 + 0.12 * rng.random()) * lhat
                  + rng.uniform(-0.15, 0.15) * perp)
        tri = center + 0.02 * rng.standard_normal((3, 2))
        if np.max(np.abs(tri)) > 0.45:
            continue
        plane_tri = rectify(tri, model)
        extent = plane_tri.max(axis=0) - plane_tri.min(axis=0)
        members = [AffineFrame(tri)]
        ok = True
        for _ in range(group_size - 1):
            for _attempt in range(50):
                qk = plane_tri + rng.uniform(-3.0, 3.0, size=2) * extent
                xk = image_from_plane_pts(qk, lvec, lam)
                if np.max(np.abs(xk)) < 0.45 and np.all(np.isfinite(xk)):
                    members.append(AffineFrame(xk))
                    break
            else:
                ok = False
                break
        if ok:
            groups.append(tuple(members))
    return groups, model


def test_criterion_09_degenerate_scenes_never_confident():
    """Unobservable geometries end in rejection, not a confident answer."""
    rng = np.random.default_rng(903)
    with pytest.raises(NoFeasibleModel):
        ransac(concentric_pool(rng), "des222", iterations=8, seed=0)

    outcomes = []
    for seed in (0, 1):
        pool, true_model = vl_origin_pool(np.random.default_rng([91, seed]))
        sample = MinimalSample(
            (tuple(pool[0][:2]), tuple(pool[1][:2]), tuple(pool[2][:2])),
            "222",
        )
        assert FLAG_VL_ORIGIN in degeneracy_flags(sample, true_model)
        inliers, total = equal_scale_consensus(true_model, pool, 0.15)
        assert inliers == total  # the flagged model is the consistent one
        try:
            res = ransac(pool, "des222", iterations=25,
                         scoring="equal-scale", seed=seed)
        except NoFeasibleModel:
            outcomes.append("no-feasible-model")
            continue
        # a survivor must be unflagged and visibly not explain the pool
        assert FLAG_VL_ORIGIN not in degeneracy_flags(sample, res.model)
        assert res.consensus_size < total
        outcomes.append(f"weak {res.consensus_size}/{total}")
    ok = all(o == "no-feasible-model" or o.startswith("weak")
             for o in outcomes)
    record_acceptance(
        f"criterion 9 (degeneracy handling): {'PASS' if ok else 'FAIL'} - "
        f"concentric pool rejected; horizon-through-origin pools -> "
        f"{', '.join(outcomes)}"
    )
    assert ok


def test_criterion_10_oracle_equivalence():
    """The tracker reproduces every root the brute-force oracle finds."""
    box = [(-3.0, 3.0), (-3.0, 3.0), (-8.0, 0.5)]
    cfg = SolverConfig()
    total = matched = 0
    for i in range(50):
        scene = synth.gen_scene(300 + i)
        systems = sample_systems(scene, "des222", scene.frame_groups(),
                                 np.random.default_rng([101, i]))
        system = systems[0]
        oracle = oracle_solve(system, box, cfg=cfg)
        tracked = solve(system, cfg)
        for root in oracle.roots:
            total += 1
            if len(tracked.roots) and float(
                    np.min(np.max(np.abs(tracked.roots - root), axis=1))
            ) < 1e-6:
                matched += 1
    ok = matched == total and total >= 50
    record_acceptance(
        f"criterion 10 (oracle equivalence): {'PASS' if ok else 'FAIL'} - "
        f"{matched}/{total} oracle roots matched within 1e-6 over 50 systems"
    )
    assert matched == total, (matched, total)
    assert total >= 50, total

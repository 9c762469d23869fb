"""Tests of the homotopy-continuation solver and its independent oracle."""

import numpy as np
import pytest
from dataclasses import replace

from scalerect.constraints import (
    CONFIG_SIZES,
    MinimalSample,
    VariableScaling,
    PolySystem,
    build_cs,
    build_des,
    build_des_fixed_lambda,
    des_coefficients,
    poly_eval,
)
from scalerect.geometry import orient
from scalerect.polysolve import (
    DEFAULT_CONFIG,
    EmptySystem,
    SolverConfig,
    oracle_solve,
    residual,
    solve,
    solve_many,
    with_eps_res,
)
from scalerect.synth import cs_observations_exact, gen_scene

BOX = [(-3.0, 3.0), (-3.0, 3.0), (-8.0, 0.5)]


def des_sample(scene, config):
    groups = scene.frame_groups()
    sizes = CONFIG_SIZES[config]
    return MinimalSample(
        tuple(tuple(groups[g][:n]) for g, n in enumerate(sizes)), config
    )


def cs_sample(scene, config):
    groups = cs_observations_exact(scene)
    sizes = CONFIG_SIZES[config]
    return MinimalSample(
        tuple(tuple(groups[g][:n]) for g, n in enumerate(sizes)), config
    )


def gt_distance(solution, z_gt):
    if solution.roots.shape[0] == 0:
        return np.inf
    return float(np.min(np.max(np.abs(solution.roots - z_gt), axis=1)))


@pytest.mark.parametrize("config", ["222", "32", "4"])
def test_recovers_planted_model_from_frames(config):
    scene = gen_scene(21)
    sol = solve(build_des(des_sample(scene, config)))
    assert gt_distance(sol, scene.model().as_array()) < 1e-6
    assert np.all(sol.residuals < DEFAULT_CONFIG.eps_res)


@pytest.mark.parametrize("config", ["222", "32", "4"])
def test_recovers_planted_model_from_scales(config):
    scene = gen_scene(22)
    sol = solve(build_cs(cs_sample(scene, config)))
    assert gt_distance(sol, scene.model().as_array()) < 1e-6


def test_recovers_planted_line_at_known_distortion():
    scene = gen_scene(23)
    system = build_des_fixed_lambda(des_sample(scene, "22-fixed"), scene.lambda_gt)
    sol = solve(system)
    assert gt_distance(sol, scene.model().as_array()[:2]) < 1e-6
    # fixed-distortion roots carry no distortion coordinate to gate on
    assert np.all(sol.feasible)


def test_solve_is_deterministic():
    scene = gen_scene(24)
    system = build_des(des_sample(scene, "222"))
    a = solve(system)
    b = solve(system)
    assert np.array_equal(a.roots, b.roots)
    assert np.array_equal(a.residuals, b.residuals)
    assert np.array_equal(a.feasible, b.feasible)
    assert a.path_stats == b.path_stats


def test_start_system_seed_does_not_change_found_roots():
    scene = gen_scene(25)
    system = build_des(des_sample(scene, "222"))
    z_gt = scene.model().as_array()
    for seed in (0, 1, 77):
        sol = solve(system, replace(DEFAULT_CONFIG, seed=seed))
        assert gt_distance(sol, z_gt) < 1e-6


def test_batched_solve_matches_individual_solves():
    scenes = [gen_scene(s) for s in (26, 27, 28)]
    systems = [build_des(des_sample(s, "222")) for s in scenes]
    batched = solve_many(systems)
    for system, bat in zip(systems, batched):
        single = solve(system)
        assert bat.roots.shape == single.roots.shape
        assert np.allclose(bat.roots, single.roots, atol=1e-9)
        assert np.array_equal(bat.feasible, single.feasible)


def test_path_budget_matches_bezout_bound():
    scene = gen_scene(29)
    sol = solve(build_des(des_sample(scene, "222")))
    st = sol.path_stats
    assert st.tracked == 4**3
    assert st.tracked == st.diverged + st.converged + st.failed
    fixed = solve(build_des_fixed_lambda(des_sample(scene, "22-fixed"), -4.0))
    assert fixed.path_stats.tracked == 3**2


def test_roots_are_sorted_and_feasibility_gates_distortion():
    scene = gen_scene(30)
    system = build_des(des_sample(scene, "222"))
    sol = solve(system)
    as_tuples = [tuple(r) for r in sol.roots]
    assert as_tuples == sorted(as_tuples)
    lo, hi = DEFAULT_CONFIG.lambda_min, DEFAULT_CONFIG.lambda_max
    assert np.array_equal(
        sol.feasible, (sol.roots[:, 2] >= lo) & (sol.roots[:, 2] <= hi)
    )
    # narrowing the interval to the truth keeps the truth feasible
    tight = solve(system, replace(DEFAULT_CONFIG, lambda_min=-4.5, lambda_max=-3.5))
    kept = tight.roots[tight.feasible]
    assert kept.shape[0] >= 1
    assert np.all((kept[:, 2] >= -4.5) & (kept[:, 2] <= -3.5))


def test_returned_roots_satisfy_every_equation():
    scene = gen_scene(31)
    for system in (build_des(des_sample(scene, "4")), build_cs(cs_sample(scene, "32"))):
        sol = solve(system)
        for root, res in zip(sol.roots, sol.residuals):
            assert residual(system, root) == pytest.approx(res, rel=1e-12)
            assert res < DEFAULT_CONFIG.eps_res


def anchored_family_points(system, frame, l1_values):
    """Points of the one-dimensional root family of the anchored subsystem.

    Anchoring every equation of a 4-group on its first frame shares the
    numerator and denominator of that frame across all three equations, so
    any point where both vanish solves the subsystem regardless of the
    remaining frames: the distortion value killing the frame numerator
    (linear in the distortion alone) combined with the line on which the
    frame's first denominator vanishes.  Returned in scaled variables.
    """
    dc = des_coefficients(orient(frame), system.scaling)
    M, R = dc.minors, dc.alpha_rows
    c1 = M[0] * R[0][2] - M[1] * R[1][2] + M[2] * R[2][2]
    c0 = M[0] * R[0][3] - M[1] * R[1][3] + M[2] * R[2][3]
    lam_s = -c0 / c1
    a, b = R[0][0], R[0][1]
    pts = []
    for l1_s in l1_values:
        l2_s = -(a * l1_s + R[0][2] * lam_s + R[0][3]) / b
        pts.append(np.array([l1_s, l2_s, lam_s]))
    return pts


def test_anchored_subsystem_has_spurious_family_filtered_out():
    scene = gen_scene(32)
    sample = des_sample(scene, "4")
    system = build_des(sample)

    anchored = [system.polys[i] for i in system.anchored_idx]
    dropped = [p for i, p in enumerate(system.polys) if i not in system.anchored_idx]
    family = anchored_family_points(
        system, sample.groups[0][0], np.linspace(-1.0, 1.0, 5)
    )
    for w in family:
        on_family = max(abs(poly_eval(p, w)) for p in anchored)
        off_family = max(abs(poly_eval(p, w)) for p in dropped)
        assert on_family < 1e-8
        assert off_family > 1e3 * max(on_family, 1e-12)
    # a continuum, not isolated points: distinct roots along one line
    spread = max(np.max(np.abs(a - b)) for a in family for b in family)
    assert spread > 0.5

    # the family's distortion coordinate comes from near-cancelling minors,
    # so it also lands far outside the feasible distortion interval here
    lam_plain = system.scaling.unscale_root(family[0])[2]
    assert not DEFAULT_CONFIG.lambda_min <= lam_plain <= DEFAULT_CONFIG.lambda_max

    # tracking the anchored square subsystem inside the normal pipeline:
    # the family consumes paths (they stall on its singular Jacobian) and
    # the full-system residual sift lets no family point into the roots
    sol = solve(system, square_indices=system.anchored_idx)
    assert sol.path_stats.failed > 0
    assert np.all(sol.residuals < DEFAULT_CONFIG.eps_res)
    assert gt_distance(sol, scene.model().as_array()) < 1e-6


def test_empty_system_raises():
    dummy = PolySystem(
        polys=[],
        polys_plain=[],
        nvars=3,
        degree=4,
        scaling=VariableScaling.identity(),
        square_idx=(),
        pair_labels=(),
        kind="des",
        config="222",
    )
    with pytest.raises(EmptySystem):
        solve(dummy)
    with pytest.raises(EmptySystem):
        oracle_solve(dummy, BOX)


def test_batch_of_mixed_shapes_is_rejected():
    scene = gen_scene(33)
    quartic = build_des(des_sample(scene, "222"))
    cubic = build_des_fixed_lambda(des_sample(scene, "22-fixed"), -4.0)
    with pytest.raises(ValueError):
        solve_many([quartic, cubic])


def test_square_indices_must_match_unknown_count():
    scene = gen_scene(34)
    system = build_des(des_sample(scene, "222"))
    with pytest.raises(ValueError):
        solve(system, square_indices=(0, 1))


def test_oracle_finds_planted_model():
    scene = gen_scene(35)
    system = build_des(des_sample(scene, "222"))
    sol = oracle_solve(system, BOX)
    assert gt_distance(sol, scene.model().as_array()) < 1e-6


def test_oracle_and_tracker_agree_on_real_roots():
    scene = gen_scene(36)
    system = build_des(des_sample(scene, "222"))
    tracked = solve(system)
    oracled = oracle_solve(system, BOX)
    assert oracled.roots.shape[0] >= 1
    for root in oracled.roots:
        dist = np.min(np.max(np.abs(tracked.roots - root), axis=1))
        assert dist < 1e-6


def test_oracle_box_is_validated():
    scene = gen_scene(37)
    system = build_des(des_sample(scene, "222"))
    with pytest.raises(ValueError):
        oracle_solve(system, [(-3.0, 3.0), (-3.0, 3.0)])
    empty = oracle_solve(system, [(1.0, -1.0), (-3.0, 3.0), (-8.0, 0.5)])
    assert empty.roots.shape == (0, 3)


def test_residual_is_max_over_all_plain_equations():
    scene = gen_scene(38)
    system = build_des(des_sample(scene, "222"))
    z = np.array([0.3, -0.2, -1.5])
    want = max(abs(poly_eval(p, z)) for p in system.polys_plain)
    assert residual(system, z) == pytest.approx(float(want), rel=1e-12)


def test_candidate_diagnostics_cover_returned_roots():
    scene = gen_scene(39)
    system = build_des(des_sample(scene, "222"))
    sol = solve(system)
    assert sol.candidates
    real_good = [
        c
        for c in sol.candidates
        if c.is_real and c.full_residual < DEFAULT_CONFIG.eps_res
    ]
    assert len(real_good) == sol.roots.shape[0]
    pts = np.array([c.point.real for c in real_good])
    for root in sol.roots:
        assert np.min(np.max(np.abs(pts - root), axis=1)) < 1e-9


def test_feasible_roots_helper_slices():
    scene = gen_scene(40)
    sol = solve(build_des(des_sample(scene, "222")))
    assert np.array_equal(sol.feasible_roots(), sol.roots[sol.feasible])


def test_config_eps_res_override_helper():
    cfg = SolverConfig()
    relaxed = with_eps_res(cfg, 1e-3)
    assert relaxed.eps_res == 1e-3
    assert cfg.eps_res == 1e-6
    assert relaxed.seed == cfg.seed

"""Command-line front end: scenes, solving, benchmarks and field export.

Subcommands:
  synth     write synthetic ground-truth scene files
  solve     estimate a model for one scene file, emit a result row + model
  bench     run a benchmark sweep (stability / noise / distortion / census)
  chos-map  export the relative change-of-scale field of a model
  check     validate a scene file (structure, round trip, equal scale at GT)

Scene files are JSON documents that round-trip exactly (floats are written
with repr, the shortest decimal that parses back to the identical double).
Result tables are CSV with a fixed column set, one row per trial, ordered
by trial id regardless of how many worker threads produced them.  The
SCALERECT_THREADS environment variable sets the worker-thread count used
to parallelize independent trials (default 1).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import robust, synth
from .geometry import (
    NoRealLocus,
    Normalizer,
    RectifyModel,
    dense_change_of_scale_map,
    distorted_vanishing_circle,
    frame_scales,
    mask_by_scale,
)
from .polysolve import DEFAULT_CONFIG, solve_many, with_eps_res
from .robust import VARIANTS, NoFeasibleModel, lambda_error, ransac, warp_error
from .synth import GroundTruthScene

SCENE_FORMAT = "scalerect-scene/1"
MODEL_FORMAT = "scalerect-model/1"
FIELD_FORMAT = "scalerect-chos-field/1"

TABLE_COLUMNS = (
    "trial", "variant", "sigma", "lambda_gt", "lambda_est", "l1", "l2",
    "rms_warp", "rel_lambda_err", "n_real", "n_feasible", "solve_millis",
    "residual",
)

NOISE_SWEEP = (0.1, 0.5, 1.0, 2.0, 5.0)
DISTORTION_SWEEP = (-5.0, -4.0, -3.0, -2.0, -1.0, 0.0)
CENSUS_SWEEP = (0.0, 0.5, 1.0)


class SceneFormatError(ValueError):
    """Scene file is not a valid scalerect-scene/1 document."""


class SceneCheckFailed(RuntimeError):
    """Scene file failed a consistency check."""


# ---------------------------------------------------------------------------
# scene file round trip


def scene_to_document(scene: GroundTruthScene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "image_size": [int(scene.image_size[0]), int(scene.image_size[1])],
        "normalizer": {
            "cx": scene.normalizer.cx,
            "cy": scene.normalizer.cy,
            "scale": scene.normalizer.scale,
        },
        "lambda_gt": float(scene.lambda_gt),
        "vline_gt": [float(v) for v in scene.vline_gt],
        "plane_to_image": [float(v) for v in scene.plane_to_image.ravel()],
        "motion": scene.motion,
        "placement": scene.placement,
        "seed": int(scene.seed),
        "sigma": float(scene.sigma),
        "groups": [
            [[[float(x), float(y)] for x, y in frame] for frame in group]
            for group in scene.frames_px
        ],
    }


def scene_from_document(doc: dict) -> GroundTruthScene:
    try:
        if doc["format"] != SCENE_FORMAT:
            raise SceneFormatError(f"unsupported format {doc['format']!r}")
        w, h = (int(v) for v in doc["image_size"])
        norm = doc["normalizer"]
        vline = np.array([float(v) for v in doc["vline_gt"]], dtype=float)
        H = np.array(doc["plane_to_image"], dtype=float).reshape(3, 3)
        groups = tuple(
            tuple(np.array(frame, dtype=float).reshape(3, 2) for frame in group)
            for group in doc["groups"]
        )
        return GroundTruthScene(
            image_size=(w, h),
            normalizer=Normalizer(float(norm["cx"]), float(norm["cy"]),
                                  float(norm["scale"])),
            lambda_gt=float(doc["lambda_gt"]),
            vline_gt=vline,
            plane_to_image=H,
            motion=str(doc["motion"]),
            frames_px=groups,
            seed=int(doc["seed"]),
            sigma=float(doc["sigma"]),
            placement=str(doc.get("placement", synth.PLACEMENT)),
        )
    except (KeyError, TypeError) as exc:
        raise SceneFormatError(f"malformed scene document: {exc}") from exc


def scene_to_json(scene: GroundTruthScene) -> str:
    return json.dumps(scene_to_document(scene), indent=1) + "\n"


def save_scene(scene: GroundTruthScene, path) -> None:
    Path(path).write_text(scene_to_json(scene))


def load_scene(path) -> GroundTruthScene:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"not a JSON document: {exc}") from exc
    return scene_from_document(doc)


# ---------------------------------------------------------------------------
# result tables


def write_table(rows, out=None) -> None:
    """Write result rows as CSV to a path, or to stdout when out is None."""
    def emit(stream):
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for row in rows:
            w.writerow([row[c] for c in TABLE_COLUMNS])

    if out is None:
        emit(sys.stdout)
    else:
        with open(out, "w", newline="") as fh:
            emit(fh)


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _row(trial, variant, sigma, lambda_gt, lambda_est=float("nan"),
         l1=float("nan"), l2=float("nan"), rms_warp=float("nan"),
         rel_lambda_err=float("nan"), n_real=0, n_feasible=0,
         solve_millis=float("nan"), residual=float("nan")) -> dict:
    return {
        "trial": trial, "variant": variant, "sigma": sigma,
        "lambda_gt": lambda_gt, "lambda_est": lambda_est, "l1": l1, "l2": l2,
        "rms_warp": rms_warp, "rel_lambda_err": rel_lambda_err,
        "n_real": n_real, "n_feasible": n_feasible,
        "solve_millis": solve_millis, "residual": residual,
    }


def _rel_err_or_nan(model, scene) -> float:
    value, is_relative = lambda_error(model, scene)
    return value if is_relative else float("nan")


# ---------------------------------------------------------------------------
# worker pool


def thread_count() -> int:
    raw = os.environ.get("SCALERECT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SCALERECT_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ValueError("SCALERECT_THREADS must be >= 1")
    return n


def _pmap(fn, items):
    """Map preserving order; threads only when SCALERECT_THREADS > 1."""
    items = list(items)
    n = thread_count()
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# pools from scenes


def _pool_for(scene: GroundTruthScene, variant: str, sigma: float, seed: int):
    """Measurement pool for a variant: frames for des, observations for cs.

    Extra noise of `sigma` pixels is added on top of whatever noise the
    scene already carries.  Change-of-scale variants observe noise-consistent
    exact scales (the synthetic stand-in for a scale-covariant detector).
    """
    kind, _ = VARIANTS[variant]
    if kind in ("des", "des-fixed"):
        if sigma > 0:
            return synth.add_noise(scene, sigma, seed)
        return scene.frame_groups()
    if sigma > 0:
        return synth.cs_observations_with_noise(scene, sigma, seed)
    return synth.cs_observations_exact(scene)


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def make(i: int):
        scene = synth.gen_scene(
            args.seed + i, lambda_gt=args.lam, motion=args.motion,
            n_groups=args.groups, group_size=args.group_size,
            image_size=(args.width, args.height),
        )
        if args.sigma > 0:
            scene = synth.scene_with_noise(scene, args.sigma, args.seed + i)
        return scene

    scenes = _pmap(make, range(args.count))
    for i, scene in enumerate(scenes):
        path = out_dir / f"scene_{i:04d}.json"
        save_scene(scene, path)
        print(path)
    return 0


# ---------------------------------------------------------------------------
# solve


def cmd_solve(args) -> int:
    scene = load_scene(args.scene)
    variant = args.variant
    if variant == "des22-fixed" and args.lam is None:
        raise ValueError("des22-fixed needs --lambda")
    pool = _pool_for(scene, variant, args.sigma, args.seed)
    sigma_total = float(np.hypot(scene.sigma, args.sigma))
    cfg = DEFAULT_CONFIG if sigma_total == 0 else with_eps_res(DEFAULT_CONFIG, 1e-3)

    result = ransac(
        pool, variant, iterations=args.iterations, scoring=args.scoring,
        scene=scene, seed=args.seed, cfg=cfg,
        fixed_lambda=args.lam if variant == "des22-fixed" else None,
        refine_result=args.refine,
    )
    model = result.model
    report = warp_error(model, scene)
    row = _row(
        0, variant, sigma_total, scene.lambda_gt,
        lambda_est=model.lam, l1=model.l1, l2=model.l2,
        rms_warp=report.rms, rel_lambda_err=_rel_err_or_nan(model, scene),
        n_real=result.n_real, n_feasible=result.n_feasible,
        solve_millis=result.solve_millis, residual=result.residual,
    )
    write_table([row])

    if args.out:
        doc = {
            "format": MODEL_FORMAT,
            "scene": str(args.scene),
            "variant": variant,
            "scoring": args.scoring,
            "iterations": args.iterations,
            "seed": args.seed,
            "model": {"l1": model.l1, "l2": model.l2, "lambda": model.lam},
            "consensus_size": result.consensus_size,
            "best_score": result.best_score,
            "refined": result.refined,
            "n_real": result.n_real,
            "n_feasible": result.n_feasible,
            "solve_millis": result.solve_millis,
            "residual": result.residual,
            "rms_warp": report.rms,
        }
        Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")
    return 0


# ---------------------------------------------------------------------------
# bench


def _gen_scenes(count, seed, lam, motion):
    return _pmap(lambda i: synth.gen_scene(seed + i, lambda_gt=lam,
                                           motion=motion), range(count))


def _bench_stability(args, rows):
    scenes = _gen_scenes(args.scenes, args.seed, args.lams[0], args.motion)
    variant = args.variant
    kind, config = VARIANTS[variant]

    def one(ti):
        scene = scenes[ti]
        pool = _pool_for(scene, variant, 0.0, 0)
        rng = np.random.default_rng([args.seed, ti])
        sample = robust.draw_minimal_sample(rng, pool, config)
        fixed = args.lams[0] if kind == "des-fixed" else None
        try:
            system = robust._build_system(sample, kind, fixed)
        except Exception:
            return _row(ti, variant, 0.0, scene.lambda_gt)
        t0 = time.perf_counter()
        sols = solve_many([system])
        ms = (time.perf_counter() - t0) * 1e3
        sol = sols[0]
        best = None
        for k in np.flatnonzero(sol.feasible):
            model = robust._root_model(sol.roots[k], fixed)
            rms = warp_error(model, scene).rms
            if np.isfinite(rms) and (best is None or rms < best[0]):
                best = (rms, model, float(sol.residuals[k]))
        if best is None:
            return _row(ti, variant, 0.0, scene.lambda_gt,
                        n_real=len(sol.roots),
                        n_feasible=int(np.sum(sol.feasible)),
                        solve_millis=ms)
        rms, model, res = best
        return _row(ti, variant, 0.0, scene.lambda_gt, lambda_est=model.lam,
                    l1=model.l1, l2=model.l2, rms_warp=rms,
                    rel_lambda_err=_rel_err_or_nan(model, scene),
                    n_real=len(sol.roots), n_feasible=int(np.sum(sol.feasible)),
                    solve_millis=ms, residual=res)

    rows.extend(_pmap(one, range(args.scenes)))


def _bench_ransac_cell(args, rows, trial0, scenes, variant, sigma, lam):
    kind, _ = VARIANTS[variant]
    cfg = DEFAULT_CONFIG if sigma == 0 else with_eps_res(DEFAULT_CONFIG, 1e-3)

    def one(ti):
        scene = scenes[ti]
        pool = _pool_for(scene, variant, sigma, args.seed + 7919 * ti)
        fixed = lam if kind == "des-fixed" else None
        try:
            result = ransac(pool, variant, iterations=args.iterations,
                            scoring="warp-gt", scene=scene,
                            seed=args.seed + ti, cfg=cfg, fixed_lambda=fixed)
        except NoFeasibleModel:
            return _row(trial0 + ti, variant, sigma, scene.lambda_gt)
        model = result.model
        return _row(trial0 + ti, variant, sigma, scene.lambda_gt,
                    lambda_est=model.lam, l1=model.l1, l2=model.l2,
                    rms_warp=result.best_score,
                    rel_lambda_err=_rel_err_or_nan(model, scene),
                    n_real=result.n_real, n_feasible=result.n_feasible,
                    solve_millis=result.solve_millis, residual=result.residual)

    rows.extend(_pmap(one, range(len(scenes))))


def _bench_noise(args, rows):
    scenes = _gen_scenes(args.scenes, args.seed, args.lams[0], args.motion)
    sigmas = args.sigmas if args.sigmas else list(NOISE_SWEEP)
    for si, sigma in enumerate(sigmas):
        _bench_ransac_cell(args, rows, si * args.scenes, scenes,
                           args.variant, float(sigma), args.lams[0])


def _bench_distortion(args, rows):
    lams = args.lams if args.lams_given else list(DISTORTION_SWEEP)
    sigma = float(args.sigmas[0]) if args.sigmas else 1.0
    for li, lam in enumerate(lams):
        scenes = _gen_scenes(args.scenes, args.seed, float(lam), args.motion)
        _bench_ransac_cell(args, rows, li * args.scenes, scenes,
                           args.variant, sigma, float(lam))


def _bench_census(args, rows):
    sigmas = [float(s) for s in (args.sigmas if args.sigmas else CENSUS_SWEEP)]
    variants = (list(VARIANTS) if args.variant == "all" else [args.variant])
    trial = 0
    for variant in variants:
        scenes = _gen_scenes(args.scenes, args.seed, args.lams[0], args.motion)
        fixed = args.lams[0] if variant == "des22-fixed" else None
        report = robust.solution_census(scenes, sigmas, variant,
                                        seed=args.seed, fixed_lambda=fixed)
        for si, sigma in enumerate(sigmas):
            for ti in range(len(scenes)):
                rows.append(_row(
                    trial, variant, sigma, args.lams[0],
                    n_real=int(report.real_counts[si][ti]),
                    n_feasible=int(report.feasible_counts[si][ti]),
                ))
                trial += 1


def cmd_bench(args) -> int:
    rows = []
    if args.kind == "stability":
        _bench_stability(args, rows)
    elif args.kind == "noise":
        _bench_noise(args, rows)
    elif args.kind == "distortion":
        _bench_distortion(args, rows)
    else:
        _bench_census(args, rows)
    write_table(rows, args.out)
    return 0


# ---------------------------------------------------------------------------
# chos-map


def cmd_chos_map(args) -> int:
    if args.scene is not None:
        scene = load_scene(args.scene)
        model = scene.model()
        w, h = scene.image_size
        normalizer = scene.normalizer
    else:
        model = RectifyModel(args.l1, args.l2,
                             args.lam if args.lam is not None else 0.0)
        w, h = args.width, args.height
        normalizer = Normalizer.from_image_size(w, h)

    n = args.grid_n
    xs = np.linspace(0.0, w, n)
    ys = np.linspace(0.0, h, n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = normalizer.to_normalized(np.stack([gx.ravel(), gy.ravel()], axis=1))
    field = dense_change_of_scale_map(pts, model, ref=np.zeros(2))
    masked = mask_by_scale(field, args.threshold)

    try:
        locus = distorted_vanishing_circle(model)
        if locus.kind == "circle":
            circle = {"kind": "circle",
                      "center": [float(locus.center[0]), float(locus.center[1])],
                      "radius": float(locus.radius)}
        else:
            circle = {"kind": "line", "line": [float(v) for v in locus.line]}
    except NoRealLocus:
        circle = None

    doc = {
        "format": FIELD_FORMAT,
        "model": {"l1": model.l1, "l2": model.l2, "lambda": model.lam},
        "image_size": [w, h],
        "grid_n": n,
        "threshold": args.threshold,
        "ref": [0.0, 0.0],
        "circle": circle,
        "points": [
            [float(p[0]), float(p[1]), float(v), bool(ok), bool(m)]
            for p, v, ok, m in zip(field.points, field.values,
                                   field.valid, masked)
        ],
    }
    text = json.dumps(doc, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(json.dumps({"circle": circle}))
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# check


def cmd_check(args) -> int:
    path = Path(args.scene)
    original = json.loads(path.read_text())
    scene = scene_from_document(original)

    problems = []
    # serialization must be lossless: re-emitting the parsed scene yields
    # the same document, value for value
    if json.loads(scene_to_json(scene)) != original:
        problems.append("round_trip")

    w, h = scene.image_size
    flat = np.concatenate([np.asarray(f).reshape(-1, 2)
                           for g in scene.frames_px for f in g])
    margin = 3.0 * scene.sigma  # noisy corners may leave the frame
    if (flat[:, 0].min() < -margin or flat[:, 1].min() < -margin
            or flat[:, 0].max() > w + margin or flat[:, 1].max() > h + margin):
        problems.append("frames_outside_image")

    groups = scene.frame_groups()
    if any(abs(f.det()) <= 0 for g in groups for f in g):
        problems.append("degenerate_frame")

    spread = float("nan")
    if scene.sigma == 0:
        model = scene.model()
        worst = 0.0
        for g in groups:
            vals, ok = frame_scales(np.stack([f.pts for f in g]), model)
            if not ok.all():
                problems.append("frame_scale_invalid")
                break
            worst = max(worst, float(np.ptp(vals) / np.abs(vals).mean()))
        spread = worst
        if not spread < args.tol:
            problems.append("equal_scale_violated")

    report = {
        "scene": str(path),
        "ok": not problems,
        "problems": problems,
        "groups": len(groups),
        "sigma": scene.sigma,
        "equal_scale_spread": spread,
    }
    print(json.dumps(report, indent=1))
    if problems:
        raise SceneCheckFailed(", ".join(problems))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scalerect",
        description="Joint radial undistortion and affine rectification "
                    "from coplanar repeated regions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    variants = list(VARIANTS)

    p = sub.add_parser("synth", help="generate ground-truth scene files")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda", dest="lam", type=float, default=-4.0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--motion", choices=["rigid", "translation"],
                   default="rigid")
    p.add_argument("--groups", type=int, default=6)
    p.add_argument("--group-size", type=int, default=4)
    p.add_argument("--width", type=int, default=1000)
    p.add_argument("--height", type=int, default=1000)
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("solve", help="estimate a model for one scene file")
    p.add_argument("scene")
    p.add_argument("--variant", choices=variants, default="des222")
    p.add_argument("--scoring", choices=["equal-scale", "warp-gt"],
                   default="equal-scale")
    p.add_argument("--iterations", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.0,
                   help="extra pixel noise added before solving")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="fixed distortion for des22-fixed")
    p.add_argument("--refine", action="store_true")
    p.add_argument("--out", default=None, help="model document path")
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("bench", help="run a benchmark sweep")
    p.add_argument("--kind", choices=["stability", "noise", "distortion",
                                      "census"], required=True)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=variants + ["all"], default="des222")
    p.add_argument("--sigma", dest="sigmas", type=float, action="append",
                   help="repeatable; default is the kind's sweep")
    p.add_argument("--lambda", dest="lams", type=float, action="append",
                   help="repeatable; default -4 (distortion kind: the sweep)")
    p.add_argument("--iterations", type=int, default=25)
    p.add_argument("--motion", choices=["rigid", "translation"],
                   default="rigid")
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("chos-map", help="export a change-of-scale field")
    p.add_argument("--scene", default=None)
    p.add_argument("--l1", type=float, default=0.0)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--width", type=int, default=1000)
    p.add_argument("--height", type=int, default=1000)
    p.add_argument("--grid-n", type=int, default=41)
    p.add_argument("--threshold", type=float, default=4.0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_chos_map)

    p = sub.add_parser("check", help="validate a scene file")
    p.add_argument("scene")
    p.add_argument("--tol", type=float, default=1e-8,
                   help="equal-scale spread bound for noiseless scenes")
    p.set_defaults(fn=cmd_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if hasattr(args, "lams"):
        args.lams_given = bool(args.lams)
        if not args.lams:
            args.lams = [-4.0]
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

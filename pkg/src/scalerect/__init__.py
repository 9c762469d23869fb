"""Joint radial undistortion and affine rectification from coplanar repeats.

The library estimates a one-parameter division-model undistortion together
with the vanishing line of a scene plane, from groups of corresponded
repeated regions observed in a single distorted image.  Minimal polynomial
systems over (l1, l2, lambda) are built from either directly-encoded region
scales (des) or change-of-scale observations (cs), solved by homotopy
continuation, and wrapped in a consensus loop for noisy pools.
"""

from .constraints import (
    CONFIG_SIZES,
    DegenerateSample,
    MinimalSample,
    PolySystem,
    build_cs,
    build_des,
    build_des_fixed_lambda,
    degeneracy_flags,
)
from .geometry import (
    AffineFrame,
    Collinear,
    NearVanishingLine,
    NoRealLocus,
    NoRealRoot,
    Normalizer,
    RectifyModel,
    ScaleField,
    ScaleObservation,
    change_of_scale,
    dense_change_of_scale_map,
    distort,
    distorted_vanishing_circle,
    frame_scales,
    mask_by_scale,
    rectified_scale,
    rectify,
    undistort,
)
from .polysolve import (
    DEFAULT_CONFIG,
    SolutionSet,
    SolverConfig,
    TrackingFailure,
    oracle_solve,
    solve,
    solve_many,
)
from .robust import (
    EstimationResult,
    NoFeasibleModel,
    equal_scale_consensus,
    ransac,
    refine,
    solution_census,
    warp_error,
)
from .synth import (
    GroundTruthScene,
    NoiseSpec,
    RetryExhausted,
    add_noise,
    cs_observations,
    cs_observations_exact,
    cs_observations_with_noise,
    gen_scene,
    plane_grid,
    scene_with_noise,
)

__version__ = "0.1.0"

__all__ = [
    "AffineFrame",
    "CONFIG_SIZES",
    "Collinear",
    "DEFAULT_CONFIG",
    "DegenerateSample",
    "EstimationResult",
    "GroundTruthScene",
    "MinimalSample",
    "NearVanishingLine",
    "NoFeasibleModel",
    "NoRealLocus",
    "NoRealRoot",
    "NoiseSpec",
    "Normalizer",
    "PolySystem",
    "RectifyModel",
    "RetryExhausted",
    "ScaleField",
    "ScaleObservation",
    "SolutionSet",
    "SolverConfig",
    "TrackingFailure",
    "add_noise",
    "build_cs",
    "build_des",
    "build_des_fixed_lambda",
    "change_of_scale",
    "cs_observations",
    "cs_observations_exact",
    "cs_observations_with_noise",
    "degeneracy_flags",
    "dense_change_of_scale_map",
    "distort",
    "distorted_vanishing_circle",
    "equal_scale_consensus",
    "frame_scales",
    "gen_scene",
    "mask_by_scale",
    "oracle_solve",
    "plane_grid",
    "ransac",
    "rectified_scale",
    "rectify",
    "refine",
    "scene_with_noise",
    "solution_census",
    "solve",
    "solve_many",
    "warp_error",
]

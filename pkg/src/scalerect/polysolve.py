"""Dense small polynomial system solving by total-degree homotopy continuation.

The square subsystem F (3 quartics in 3 unknowns, or 2 cubics in 2) is
embedded in H(z, t) = t*gamma*G(z) + (1-t)*F(z) with the start system
G_k(z) = z_k^d - 1 whose d^n roots are products of d-th roots of unity and
gamma a seeded random unit complex number.  Paths are tracked from t = 1 to
t = 0 with a midpoint predictor and Newton corrector under per-path adaptive
step control, then endpoints are polished by Newton iteration on F.  The
Bezout count (64 for the quartic systems, 9 for the fixed-distortion cubic
ones) bounds the number of tracked paths; paths that leave a large ball are
cut as divergent (they head to roots at infinity).

Polished endpoints are deduplicated, classified real by imaginary-part
magnitude, mapped back through the variable rescaling, and sifted by the
residual of the *full* plain equation set, which removes spurious roots of
the square subsystem (including points of positive-dimensional families
introduced by clearing denominators).

Everything is batched: `solve_many` tracks the paths of many systems of the
same shape simultaneously, which is what makes sample-heavy consumers
(consensus loops, censuses) cheap.  All arrays are numpy; identical inputs
and config produce bitwise-identical outputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .constraints import PolySystem, poly_eval

CHUNK_PATHS = 4096


class EmptySystem(ValueError):
    """The system has no equations."""


class TrackingFailure(RuntimeError):
    """Step control failed on most paths; the input is ill-conditioned."""


@dataclass(frozen=True)
class SolverConfig:
    """Tracking, polishing and feasibility parameters."""

    lambda_min: float = -8.0
    lambda_max: float = 0.5
    eps_res: float = 1e-6
    seed: int = 0
    newton_iters: int = 20
    dt_init: float = 0.05
    dt_max: float = 0.25
    dt_min: float = 1e-9
    corrector_tol: float = 1e-8
    z_blowup: float = 1e6
    imag_tol: float = 1e-8
    dedupe_tol: float = 1e-7
    polish_accept: float = 1e-8
    max_rounds: int = 1200


DEFAULT_CONFIG = SolverConfig()


@dataclass(frozen=True)
class PathStats:
    tracked: int
    diverged: int
    converged: int
    failed: int


@dataclass(frozen=True)
class Candidate:
    """A polished endpoint before real/residual sifting (diagnostics)."""

    point: np.ndarray  # (nvars,) complex, unscaled variables
    square_residual: float
    full_residual: float
    is_real: bool


@dataclass
class SolutionSet:
    """Real sifted roots of a system plus tracking diagnostics."""

    roots: np.ndarray  # (k, nvars) real, unscaled
    residuals: np.ndarray  # (k,) full-system plain residuals
    feasible: np.ndarray  # (k,) bool
    path_stats: PathStats
    candidates: list[Candidate] = field(default_factory=list)
    tracking_failed: bool = False

    def feasible_roots(self) -> np.ndarray:
        return self.roots[self.feasible]


@lru_cache(maxsize=None)
def _basis(nvars: int, degree: int):
    """Monomial exponent basis of total degree <= degree, with d/dz maps."""
    exps = [
        e
        for e in itertools.product(range(degree + 1), repeat=nvars)
        if sum(e) <= degree
    ]
    exps.sort()
    index = {e: i for i, e in enumerate(exps)}
    E = np.array(exps, dtype=np.int64)
    nm = len(exps)
    # shift[v, m] = basis index of exps[m] with one power of variable v
    # removed (-1 when the power is zero)
    shift = np.full((nvars, nm), -1, dtype=np.int64)
    for m, e in enumerate(exps):
        for v in range(nvars):
            if e[v] > 0:
                le = list(e)
                le[v] -= 1
                shift[v, m] = index[tuple(le)]
    return E, index, shift


def _coeff_matrix(polys, nvars: int, degree: int) -> np.ndarray:
    E, index, _ = _basis(nvars, degree)
    C = np.zeros((len(polys), len(E)), dtype=complex)
    for i, p in enumerate(polys):
        for e, c in p.items():
            C[i, index[e]] = c
    return C


def _system_tensor(C: np.ndarray, nvars: int, degree: int) -> np.ndarray:
    """Stack values and partial-derivative coefficient matrices.

    Returns A of shape (1 + nvars, ne, nm): A[0] evaluates the equations,
    A[1 + v] their derivative with respect to variable v, both against the
    monomial vector of a point.
    """
    E, _, shift = _basis(nvars, degree)
    ne, nm = C.shape
    A = np.zeros((1 + nvars, ne, nm), dtype=complex)
    A[0] = C
    for v in range(nvars):
        for m in range(nm):
            tgt = shift[v, m]
            if tgt >= 0:
                A[1 + v, :, tgt] += E[m, v] * C[:, m]
    return A


def _monomials(z: np.ndarray, E: np.ndarray, degree: int) -> np.ndarray:
    npts, nv = z.shape
    pw = np.empty((npts, nv, degree + 1), dtype=complex)
    pw[:, :, 0] = 1.0
    for d in range(1, degree + 1):
        pw[:, :, d] = pw[:, :, d - 1] * z
    mono = pw[:, 0, E[:, 0]]
    for v in range(1, nv):
        mono = mono * pw[:, v, E[:, v]]
    return mono


def _eval_fj(z: np.ndarray, A_g: np.ndarray, E: np.ndarray, degree: int):
    """Batched values and Jacobians: z (p, nv), A_g (p, 1+nv, ne, nm)."""
    mono = _monomials(z, E, degree)
    vals = np.einsum("pm,pkem->pke", mono, A_g)
    F = vals[:, 0, :]
    JF = np.transpose(vals[:, 1:, :], (0, 2, 1))
    return F, JF


def _lin_solve(J: np.ndarray, r: np.ndarray):
    """Batched solve of J x = r for 2x2/3x3 complex J via the adjugate."""
    n = J.shape[-1]
    if n == 3:
        a, b, c = J[:, 0, 0], J[:, 0, 1], J[:, 0, 2]
        d, e, f = J[:, 1, 0], J[:, 1, 1], J[:, 1, 2]
        g, h, i = J[:, 2, 0], J[:, 2, 1], J[:, 2, 2]
        c00 = e * i - f * h
        c01 = f * g - d * i
        c02 = d * h - e * g
        det = a * c00 + b * c01 + c * c02
        c10 = c * h - b * i
        c11 = a * i - c * g
        c12 = b * g - a * h
        c20 = b * f - c * e
        c21 = c * d - a * f
        c22 = a * e - b * d
        x0 = c00 * r[:, 0] + c10 * r[:, 1] + c20 * r[:, 2]
        x1 = c01 * r[:, 0] + c11 * r[:, 1] + c21 * r[:, 2]
        x2 = c02 * r[:, 0] + c12 * r[:, 1] + c22 * r[:, 2]
        x = np.stack([x0, x1, x2], axis=1)
    elif n == 2:
        a, b = J[:, 0, 0], J[:, 0, 1]
        c, d = J[:, 1, 0], J[:, 1, 1]
        det = a * d - b * c
        x0 = d * r[:, 0] - b * r[:, 1]
        x1 = -c * r[:, 0] + a * r[:, 1]
        x = np.stack([x0, x1], axis=1)
    else:  # pragma: no cover - no current config needs it
        raise ValueError("only 2 or 3 unknowns supported")
    ok = np.isfinite(det) & (np.abs(det) > 1e-280)
    safe = np.where(ok, det, 1.0)
    x = x / safe[:, None]
    ok = ok & np.all(np.isfinite(x), axis=1)
    return x, ok


def _start_points(nvars: int, degree: int) -> np.ndarray:
    roots = np.exp(2j * np.pi * np.arange(degree) / degree)
    return np.array(list(itertools.product(roots, repeat=nvars)))


def _track_chunk(A: np.ndarray, E: np.ndarray, degree: int, gamma: complex,
                 cfg: SolverConfig):
    """Track all start points of every system in A to t = 0.

    A has shape (nsys, 1+nv, nv_eqs, nm) for the square subsystems.
    Returns endpoint array (nsys, npaths, nv), a status array with codes
    1 tracked-to-end / 2 diverged / 3 stalled per path, and a converged
    mask from the endpoint polish.
    """
    nsys = A.shape[0]
    nv = A.shape[1] - 1
    start = _start_points(nv, degree)
    npaths = start.shape[0]
    total = nsys * npaths

    Z = np.tile(start, (nsys, 1))
    sysid = np.repeat(np.arange(nsys), npaths)
    T = np.ones(total)
    DT = np.full(total, cfg.dt_init)
    state = np.zeros(total, dtype=np.int8)  # 0 active, 1 done, 2 div, 3 stall

    idx_diag = np.arange(nv)

    def tangent(z, t, A_g):
        """dz/dt = JH^-1 (F - gamma*G) along H(z, t) = 0."""
        F, JF = _eval_fj(z, A_g, E, degree)
        zd1 = z ** (degree - 1)
        G = zd1 * z - 1.0
        JH = (1.0 - t)[:, None, None] * JF
        JH[:, idx_diag, idx_diag] += (t * gamma)[:, None] * (degree * zd1)
        return _lin_solve(JH, F - gamma * G)

    for _ in range(cfg.max_rounds):
        act = np.flatnonzero(state == 0)
        if act.size == 0:
            break
        z = Z[act]
        t = T[act]
        dt = DT[act]
        A_g = A[sysid[act]]

        t_new = np.maximum(t - dt, 0.0)
        h = t_new - t  # negative
        # midpoint predictor along the path
        k1, ok = tangent(z, t, A_g)
        k2, ok2 = tangent(z + k1 * (0.5 * h)[:, None], t + 0.5 * h, A_g)
        ok = ok & ok2
        zc = z + k2 * h[:, None]

        # corrector: Newton iterations at t_new
        for _ in range(3):
            F, JF = _eval_fj(zc, A_g, E, degree)
            zd1 = zc ** (degree - 1)
            G = zd1 * zc - 1.0
            H = (t_new * gamma)[:, None] * G + (1.0 - t_new)[:, None] * F
            JH = (1.0 - t_new)[:, None, None] * JF
            JH[:, idx_diag, idx_diag] += (t_new * gamma)[:, None] * (degree * zd1)
            step, ok2 = _lin_solve(JH, -H)
            ok = ok & ok2
            zc = zc + step

        znorm = np.maximum(1.0, np.max(np.abs(zc), axis=1))
        accept = ok & np.all(np.isfinite(zc), axis=1)
        accept &= np.max(np.abs(step), axis=1) <= cfg.corrector_tol * znorm

        acc = act[accept]
        Z[acc] = zc[accept]
        T[acc] = t_new[accept]
        DT[acc] = np.minimum(dt[accept] * 1.7, cfg.dt_max)
        state[acc[t_new[accept] <= 0.0]] = 1

        rej = act[~accept]
        DT[rej] = dt[~accept] * 0.4
        state[rej[DT[rej] < cfg.dt_min]] = 3

        # cut paths that head to infinity: large |z| outright, or still far
        # out while the step size or remaining t collapses
        zmag = np.max(np.abs(Z[act]), axis=1)
        blown = (
            (zmag > cfg.z_blowup)
            | ((T[act] < 2e-2) & (zmag > 1e4))
            | ((DT[act] < 1e-7) & (zmag > 1e2))
        )
        state[act[blown & (state[act] == 0)]] = 2
    state[state == 0] = 3  # round budget exhausted

    done = state == 1
    # polish endpoints on F itself (t = 0) with guarded Newton steps
    conv = np.zeros(total, dtype=bool)
    fres = np.full(total, np.inf)
    di = np.flatnonzero(done)
    if di.size:
        z = Z[di]
        A_g = A[sysid[di]]
        for _ in range(cfg.newton_iters):
            F, JF = _eval_fj(z, A_g, E, degree)
            step, ok = _lin_solve(JF, -F)
            step = np.where(ok[:, None], step, 0.0)
            cap = 10.0 * np.maximum(1.0, np.max(np.abs(z), axis=1))
            mag = np.max(np.abs(step), axis=1)
            scale = np.where(mag > cap, cap / np.maximum(mag, 1e-300), 1.0)
            z = z + step * scale[:, None]
        F, _ = _eval_fj(z, A_g, E, degree)
        res = np.max(np.abs(F), axis=1)
        good = np.isfinite(res) & (res <= cfg.polish_accept)
        Z[di] = np.where(good[:, None], z, Z[di])
        conv[di] = good
        fres[di] = np.where(good, res, np.inf)

    Z = Z.reshape(nsys, npaths, nv)
    state = state.reshape(nsys, npaths)
    conv = conv.reshape(nsys, npaths)
    return Z, state, conv


def _dedupe(points: np.ndarray, tol: float) -> list[int]:
    order = np.lexsort(tuple(points.imag[:, k] for k in range(points.shape[1] - 1, -1, -1))
                       + tuple(points.real[:, k] for k in range(points.shape[1] - 1, -1, -1)))
    kept: list[int] = []
    for i in order:
        p = points[i]
        dup = False
        for j in kept:
            if np.max(np.abs(p - points[j])) <= tol * max(1.0, float(np.max(np.abs(p)))):
                dup = True
                break
        if not dup:
            kept.append(int(i))
    return kept


def residual(system: PolySystem, root: np.ndarray) -> float:
    """Max absolute value of the full plain equation set at an unscaled root."""
    root = np.asarray(root)
    return float(
        max(np.abs(poly_eval(p, root)) for p in system.polys_plain)
    )


def _residual_many(polys, pts: np.ndarray) -> np.ndarray:
    vals = np.stack([np.abs(poly_eval(p, pts)) for p in polys], axis=0)
    return vals.max(axis=0)


def solve_many(
    systems: list[PolySystem],
    cfg: SolverConfig | None = None,
    square_indices: tuple[int, ...] | None = None,
) -> list[SolutionSet]:
    """Solve a batch of same-shape systems; see `solve` for the contract."""
    cfg = cfg or DEFAULT_CONFIG
    if not systems:
        return []
    nv = systems[0].nvars
    degree = systems[0].degree
    for s in systems:
        if not s.polys:
            raise EmptySystem("system has no equations")
        if s.nvars != nv or s.degree != degree:
            raise ValueError("solve_many needs systems of identical shape")

    rng = np.random.default_rng(cfg.seed)
    gamma = complex(np.exp(2j * np.pi * rng.random()))
    E, _, _ = _basis(nv, degree)

    tensors = []
    for s in systems:
        sq = square_indices if square_indices is not None else s.square_idx
        if len(sq) != nv:
            raise ValueError("square subsystem must have one equation per unknown")
        C = _coeff_matrix([s.polys[i] for i in sq], nv, degree)
        tensors.append(_system_tensor(C, nv, degree))
    A_all = np.stack(tensors, axis=0)

    npaths = degree**nv
    per_chunk = max(1, CHUNK_PATHS // npaths)
    results: list[SolutionSet] = []
    for lo in range(0, len(systems), per_chunk):
        chunk = systems[lo : lo + per_chunk]
        Z, state, conv = _track_chunk(
            A_all[lo : lo + per_chunk], E, degree, gamma, cfg
        )
        for b, system in enumerate(chunk):
            results.append(
                _sift(system, Z[b], state[b], conv[b], cfg, square_indices)
            )
    return results


def _sift(system, z_end, state, conv, cfg, square_indices):
    npaths = state.shape[0]
    n_div = int(np.sum(state == 2))
    n_conv = int(np.sum(conv))
    stats = PathStats(npaths, n_div, n_conv, npaths - n_div - n_conv)
    n_stall = int(np.sum(state == 3))
    failed = n_stall > 0.5 * npaths

    sq = square_indices if square_indices is not None else system.square_idx
    plain_sq = [system.polys_plain[i] for i in sq]

    candidates: list[Candidate] = []
    roots = []
    endpoints = z_end[conv]
    if endpoints.shape[0]:
        kept = _dedupe(endpoints, cfg.dedupe_tol)
        pts_scaled = endpoints[kept]
        pts = pts_scaled * system.scaling.factors(system.nvars)
        full = _residual_many(system.polys_plain, pts)
        square = _residual_many(plain_sq, pts)
        real = np.max(np.abs(pts_scaled.imag), axis=1) <= cfg.imag_tol
        for i in range(pts.shape[0]):
            candidates.append(
                Candidate(pts[i].copy(), float(square[i]), float(full[i]), bool(real[i]))
            )
            if real[i] and full[i] < cfg.eps_res:
                roots.append(pts[i].real)

    if roots:
        roots = np.array(roots)
        order = np.lexsort(tuple(roots[:, k] for k in range(roots.shape[1] - 1, -1, -1)))
        roots = roots[order]
        resid = _residual_many(system.polys_plain, roots)
        if system.nvars == 3:
            feas = (roots[:, 2] >= cfg.lambda_min) & (roots[:, 2] <= cfg.lambda_max)
        else:
            feas = np.ones(roots.shape[0], dtype=bool)
    else:
        roots = np.zeros((0, system.nvars))
        resid = np.zeros(0)
        feas = np.zeros(0, dtype=bool)
    return SolutionSet(roots, resid, feas, stats, candidates, failed)


def solve(
    system: PolySystem,
    cfg: SolverConfig | None = None,
    square_indices: tuple[int, ...] | None = None,
) -> SolutionSet:
    """All real feasible-taggable roots of the system.

    Tracks the total-degree homotopy of the square subsystem (chain pairing
    by default, overridable via square_indices), polishes, deduplicates,
    keeps real points whose full-system residual beats cfg.eps_res, and
    tags feasibility by the distortion interval (fixed-distortion systems
    are always feasible).  Raises EmptySystem for equation-less input and
    TrackingFailure when over half the paths stall under step control.
    """
    result = solve_many([system], cfg, square_indices)[0]
    if result.tracking_failed:
        raise TrackingFailure("step control failed on most paths")
    return result


def oracle_solve(
    system: PolySystem,
    box: list[tuple[float, float]],
    grid_n: int = 24,
    cfg: SolverConfig | None = None,
) -> SolutionSet:
    """Slow independent root finder: dense grid scan + Newton polishing.

    Scans the sum of squared full-system residuals over a regular grid in
    `box`, polishes every local minimum by (Gauss-)Newton on the plain
    equations, and keeps deduplicated real points inside the box whose full
    residual beats cfg.eps_res.  Exists to cross-check `solve`; shares no
    tracking machinery with it.
    """
    cfg = cfg or DEFAULT_CONFIG
    if not system.polys_plain:
        raise EmptySystem("system has no equations")
    if len(box) != system.nvars:
        raise ValueError("box must bound every unknown")
    if any(lo >= hi for lo, hi in box):
        return SolutionSet(
            np.zeros((0, system.nvars)),
            np.zeros(0),
            np.zeros(0, dtype=bool),
            PathStats(0, 0, 0, 0),
        )
    axes = [np.linspace(lo, hi, grid_n) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    vals = np.zeros(pts.shape[0])
    for p in system.polys_plain:
        vals += poly_eval(p, pts).real ** 2
    V = vals.reshape([grid_n] * system.nvars)

    Vp = np.pad(V, 1, constant_values=np.inf)
    is_min = np.ones_like(V, dtype=bool)
    core = tuple(slice(1, -1) for _ in range(system.nvars))
    for axis in range(system.nvars):
        for off in (-1, 1):
            is_min &= V <= np.roll(Vp, off, axis=axis)[core]
    cand = pts[is_min.ravel()]
    if cand.shape[0] > 400:
        order = np.argsort(vals[is_min.ravel()])
        cand = cand[order[:400]]

    # Gauss-Newton polish on the full plain system
    E, index, _ = _basis(system.nvars, system.degree)
    C = _coeff_matrix(system.polys_plain, system.nvars, system.degree)
    A = _system_tensor(C, system.nvars, system.degree)
    roots = []
    for z0 in cand:
        z = z0.astype(complex)
        for _ in range(60):
            F, JF = _eval_fj(z[None, :], A[None], E, system.degree)
            Jr = JF[0].real
            Fr = F[0].real
            try:
                step, *_ = np.linalg.lstsq(Jr, -Fr, rcond=None)
            except np.linalg.LinAlgError:  # pragma: no cover
                break
            if not np.all(np.isfinite(step)):
                break
            z = z + step
            if np.max(np.abs(step)) < 1e-14 * max(1.0, float(np.max(np.abs(z)))):
                break
        zr = z.real
        res = float(_residual_many(system.polys_plain, zr[None, :])[0])
        inside = all(
            lo - 1e-9 <= zr[k] <= hi + 1e-9 for k, (lo, hi) in enumerate(box)
        )
        if inside and res < cfg.eps_res:
            roots.append(zr)

    if roots:
        pts = np.array(roots, dtype=complex)
        kept = _dedupe(pts, 1e-6)
        roots = np.array([pts[i].real for i in kept])
        order = np.lexsort(tuple(roots[:, k] for k in range(roots.shape[1] - 1, -1, -1)))
        roots = roots[order]
        resid = _residual_many(system.polys_plain, roots)
        if system.nvars == 3:
            feas = (roots[:, 2] >= cfg.lambda_min) & (roots[:, 2] <= cfg.lambda_max)
        else:
            feas = np.ones(roots.shape[0], dtype=bool)
    else:
        roots = np.zeros((0, system.nvars))
        resid = np.zeros(0)
        feas = np.zeros(0, dtype=bool)
    return SolutionSet(roots, resid, feas, PathStats(0, 0, 0, 0))


def with_eps_res(cfg: SolverConfig, eps_res: float) -> SolverConfig:
    return replace(cfg, eps_res=eps_res)

"""Scoring, local optimization and (hybrid) LO-RANSAC over line sets.

Random streams are split by purpose so that the solver-selection draws of
the hybrid estimator never shift the sampling stream: with all prior mass
on one solver, :func:`hybrid_ransac` reproduces :func:`ransac` exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllZeroWeights,
    ConfigMismatch,
    GravitySingularity,
    InsufficientLines,
    NoModelFound,
    SolverError,
)
from .geometry import GravityObservation, GravityQuality, ManhattanFrame, normalize_lines
from .minimal_solvers import ALL_SOLVERS, SolverId, solve_lines
from .nonminimal import InlierPartition, endpoint_distance, nonminimal_solve, refine_ls
from .synthetic import perturb_gravity

_STREAM_SAMPLING, _STREAM_SOLVER, _STREAM_JITTER = 0, 1, 2


class LOMode(enum.Enum):
    OURS = "ours"
    ITER = "iter"
    NONE = "none"


def uniform_priors() -> dict[SolverId, float]:
    return {s: 1.0 / len(ALL_SOLVERS) for s in ALL_SOLVERS}


@dataclass(frozen=True)
class RansacConfig:
    min_iterations: int = 1000
    max_iterations: int = 10000
    confidence: float = 0.99
    # in vp_line_distance units: unit (a, b) lines against unit-norm VPs
    inlier_threshold: float = 0.02
    lo_mode: LOMode = LOMode.OURS
    lo_iterations: int = 100
    lo_subset_fraction: float = 0.5
    lo_min_subset: int = 6
    lo_refine_iters: int = 10
    # per LO round: relabel all lines under the candidate and refit on them
    lo_inner_refits: int = 3
    final_refine_iters: int = 50
    # with segments: final inliers re-selected by endpoint distance (pixels)
    refit_threshold_px: float | None = 2.5
    refit_rounds: int = 100
    solver_priors: dict = field(default_factory=uniform_priors)
    seed: int = 0
    prior_gravity_jitter_deg: float = 0.1
    max_sample_retries: int = 100

    def __post_init__(self):
        if abs(sum(self.solver_priors.values()) - 1.0) > 1e-9:
            raise ValueError("solver priors must sum to 1")
        if min(self.solver_priors.values()) < 0:
            raise ValueError("solver priors must be non-negative")
        if self.refit_threshold_px is not None and not self.refit_threshold_px > 0:
            raise ValueError("refit_threshold_px must be positive")
        if not (self.inlier_threshold > 0 and self.min_iterations >= 0
                and self.max_iterations >= 1 and 0 < self.confidence < 1):
            raise ValueError("invalid RANSAC thresholds or counts")


@dataclass(eq=False)
class RobustEstimate:
    frame: ManhattanFrame
    partition: InlierPartition
    labels: np.ndarray  # per input line: VP index or -1
    score: int
    iterations_run: int
    solver_draws: dict
    lo_improvements: int
    stats: dict = field(default_factory=dict)

    def inlier_indices(self) -> list[list[int]]:
        return [np.flatnonzero(self.labels == i).tolist() for i in range(3)]


# ---------------------------------------------------------------------------
# scoring and RANSAC arithmetic
# ---------------------------------------------------------------------------

def assign_lines(frame: ManhattanFrame, lines: np.ndarray, threshold: float) -> tuple[int, np.ndarray]:
    """Label each (normalized) line with its closest VP, or -1 above ``threshold``."""
    D = np.abs(lines @ frame.vps)
    labels = np.argmin(D, axis=1)
    dmin = D[np.arange(len(lines)), labels]
    labels[~(dmin < threshold)] = -1
    return int(np.count_nonzero(labels >= 0)), labels


def score_frame(
    frame: ManhattanFrame, lines: np.ndarray, threshold: float
) -> tuple[int, InlierPartition]:
    lines = normalize_lines(lines)
    score, labels = assign_lines(frame, lines, threshold)
    return score, InlierPartition.from_labels(lines, labels)


def iterations_needed(
    inlier_ratio: float, sample_size: int, confidence: float = 0.99, max_iterations: int = 10000
) -> int:
    """Standard RANSAC iteration bound for the given confidence."""
    if inlier_ratio <= 0.0:
        return max_iterations
    if inlier_ratio >= 1.0:
        return 1
    p_good = inlier_ratio**sample_size
    if p_good <= 0.0:
        return max_iterations
    n = math.log(1.0 - confidence) / math.log1p(-p_good)
    return max(1, min(max_iterations, math.ceil(n)))


def solver_probabilities(priors: dict, inlier_ratio: float) -> dict:
    """Prior times ``eps^m`` (m = sample size), normalized over the solvers."""
    weights = {s: p * inlier_ratio**s.sample_size for s, p in priors.items()}
    total = sum(weights.values())
    if not total > 0:
        raise AllZeroWeights("every solver has zero weight")
    return {s: w / total for s, w in weights.items()}


def _draw_distinct(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    while True:
        idx = rng.integers(0, n, m)
        if len(set(idx.tolist())) == m:
            return idx


# ---------------------------------------------------------------------------
# local optimization
# ---------------------------------------------------------------------------

def local_optimize(
    best: ManhattanFrame,
    lines: np.ndarray,
    config: RansacConfig,
    rng: np.random.Generator,
    mode: LOMode | None = None,
    stats: dict | None = None,
    weights: np.ndarray | None = None,
    fixed_axis: np.ndarray | None = None,
    segments: np.ndarray | None = None,
) -> tuple[ManhattanFrame, int]:
    """Inner LO loop on random inlier subsets of the incumbent.

    ``OURS`` re-solves each subset with the non-minimal solver and refines;
    ``ITER`` refines the incumbent itself; ``NONE`` returns ``best``.
    Each candidate is then refit ``lo_inner_refits`` times on all lines it
    explains before scoring.  A candidate replaces the incumbent only on a
    strictly higher score.
    ``weights``, ``segments`` (per line) and ``fixed_axis`` are handed to
    the refiners.
    """
    mode = config.lo_mode if mode is None else mode
    lines = normalize_lines(lines)
    score, labels = assign_lines(best, lines, config.inlier_threshold)
    if mode is LOMode.NONE:
        return best, score
    cur, cur_score, cur_labels = best, score, labels
    for _ in range(config.lo_iterations):
        inl = np.flatnonzero(cur_labels >= 0)
        if len(inl) < config.lo_min_subset:
            break
        size = min(len(inl), max(config.lo_min_subset, math.ceil(config.lo_subset_fraction * len(inl))))
        sub = rng.choice(inl, size, replace=False)
        part = InlierPartition.from_labels(
            lines[sub],
            cur_labels[sub],
            None if weights is None else weights[sub],
            None if segments is None else segments[sub],
        )
        cand = nonminimal_solve(part, cur, stats) if mode is LOMode.OURS else cur
        cand = refine_ls(cand, part, max_iters=config.lo_refine_iters, fixed_axis=fixed_axis)
        sc, lab = assign_lines(cand, lines, config.inlier_threshold)
        for _ in range(config.lo_inner_refits):
            full = InlierPartition.from_labels(lines, lab, weights, segments)
            cand = refine_ls(cand, full, max_iters=config.lo_refine_iters, fixed_axis=fixed_axis)
            prev = lab
            sc, lab = assign_lines(cand, lines, config.inlier_threshold)
            if np.array_equal(lab, prev):
                break
        if sc > cur_score:
            cur, cur_score, cur_labels = cand, sc, lab
            if stats is not None:
                stats["lo_improvements"] = stats.get("lo_improvements", 0) + 1
    return cur, cur_score


def final_refit(frame: ManhattanFrame, lines: np.ndarray, config: RansacConfig,
                mode: LOMode, stats: dict | None = None,
                weights: np.ndarray | None = None,
                fixed_axis: np.ndarray | None = None,
                segments: np.ndarray | None = None) -> ManhattanFrame:
    """Refit on the complete inlier set once the sampling loop has ended."""
    if mode is LOMode.NONE:
        return frame
    _, labels = assign_lines(frame, lines, config.inlier_threshold)
    part = InlierPartition.from_labels(lines, labels, weights, segments)
    if mode is LOMode.OURS:
        frame = nonminimal_solve(part, frame, stats)
    frame = refine_ls(frame, part, max_iters=config.final_refine_iters, fixed_axis=fixed_axis)
    if segments is None or config.refit_threshold_px is None:
        return frame
    # alternate endpoint-distance assignment and refinement until the frame settles
    for _ in range(config.refit_rounds):
        labels = assign_segments(frame, segments, config.refit_threshold_px)
        part = InlierPartition.from_labels(lines, labels, weights, segments)
        new = refine_ls(frame, part, max_iters=config.final_refine_iters, fixed_axis=fixed_axis)
        change = np.abs(new.rotation - frame.rotation).max() + abs(new.focal / frame.focal - 1.0)
        frame = new
        if change < 1e-12:
            break
    return frame


def assign_segments(frame: ManhattanFrame, segments: np.ndarray, threshold_px: float) -> np.ndarray:
    """Label each centered segment with the VP of smallest endpoint distance, -1 above ``threshold_px``."""
    D = np.column_stack([endpoint_distance(segments, frame.vps[:, i]) for i in range(3)])
    labels = np.argmin(D, axis=1)
    labels[~(D[np.arange(len(D)), labels] < threshold_px)] = -1
    return labels


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def _gravity_vector(gravity: GravityObservation | None, config: RansacConfig) -> np.ndarray | None:
    if gravity is None or not gravity.present:
        return None
    g = gravity.direction
    if gravity.quality is GravityQuality.PRIOR and config.prior_gravity_jitter_deg > 0:
        rng = np.random.default_rng([config.seed, _STREAM_JITTER])
        g = perturb_gravity(g, config.prior_gravity_jitter_deg, rng)
    return g


def _check_weights(weights, n: int) -> np.ndarray | None:
    if weights is None:
        return None
    w = np.asarray(weights, dtype=float).reshape(-1)
    if len(w) != n:
        raise ValueError(f"got {len(w)} weights for {n} lines")
    if np.any(~(w > 0)) or np.any(~np.isfinite(w)):
        raise ValueError("weights must be positive and finite")
    return w


def _check_segments(segments, n: int) -> np.ndarray | None:
    if segments is None:
        return None
    S = np.asarray(segments, dtype=float).reshape(-1, 4)
    if len(S) != n:
        raise ValueError(f"got {len(S)} segments for {n} lines")
    return S


def _run(lines, priors: dict, gravity, config: RansacConfig, weights=None, segments=None) -> RobustEstimate:
    L = normalize_lines(np.asarray(lines, dtype=float).reshape(-1, 3))
    n = len(L)
    weights = _check_weights(weights, n)
    segments = _check_segments(segments, n)
    g = _gravity_vector(gravity, config)
    # an exact vertical is kept fixed by every refinement
    axis = g if gravity is not None and gravity.quality is GravityQuality.EXACT else None
    priors = dict(priors)
    for s in ALL_SOLVERS:
        priors.setdefault(s, 0.0)
        if (s.needs_gravity and g is None) or s.sample_size > n:
            priors[s] = 0.0
    active = [s for s in ALL_SOLVERS if priors[s] > 0]
    if not active:
        if n < min(s.sample_size for s in ALL_SOLVERS) or (g is None and n < 4):
            raise InsufficientLines(f"{n} lines are not enough for any enabled solver")
        raise AllZeroWeights("no solver is enabled")

    rng = np.random.default_rng([config.seed, _STREAM_SAMPLING])
    rng_solver = np.random.default_rng([config.seed, _STREAM_SOLVER])
    stats: dict = {"sample_failures": 0, "nms_failures": 0, "lo_improvements": 0}
    draws = {s: 0 for s in ALL_SOLVERS}
    singular = set()

    best, best_score, best_eps = None, -1, 0.5
    needed = config.max_iterations
    it = 0
    while it < config.max_iterations:
        if best is not None and it >= config.min_iterations and it >= needed:
            break
        it += 1
        if len(active) == 1:
            solver = active[0]
        else:
            probs = solver_probabilities({s: priors[s] for s in active}, best_eps)
            solver = active[int(rng_solver.choice(len(active), p=[probs[s] for s in active]))]
        draws[solver] += 1
        if solver in singular:
            continue
        frames = None
        for _ in range(config.max_sample_retries):
            idx = _draw_distinct(rng, n, solver.sample_size)
            try:
                frames = solve_lines(solver, L[idx], g)
                break
            except GravitySingularity:
                # independent of the sample: this solver can never run
                singular.add(solver)
                break
            except SolverError:
                stats["sample_failures"] += 1
        if not frames:
            continue
        for fr in frames:
            sc, _ = assign_lines(fr, L, config.inlier_threshold)
            if sc <= best_score:
                continue
            best, best_score = fr, sc
            best, best_score = local_optimize(
                best, L, config, rng, config.lo_mode, stats,
                weights=weights, fixed_axis=axis, segments=segments,
            )
            best_eps = max(best_score / n, 1e-12)
            needed = max(
                iterations_needed(best_eps, s.sample_size, config.confidence, config.max_iterations)
                for s in active
            )
    if best is None:
        raise NoModelFound("no solver call produced a valid frame")

    best = final_refit(best, L, config, config.lo_mode, stats,
                       weights=weights, fixed_axis=axis, segments=segments)
    score, labels = assign_lines(best, L, config.inlier_threshold)
    return RobustEstimate(
        frame=best,
        partition=InlierPartition.from_labels(L, labels, weights, segments),
        labels=labels,
        score=score,
        iterations_run=it,
        solver_draws={s: draws[s] for s in ALL_SOLVERS},
        lo_improvements=stats["lo_improvements"],
        stats=stats,
    )


def ransac(
    lines,
    solver: SolverId,
    gravity: GravityObservation | None,
    config: RansacConfig,
    weights=None,
    segments=None,
) -> RobustEstimate:
    """LO-RANSAC with a single minimal solver.

    ``weights`` optionally gives each line a positive weight in the
    least-squares refits.  ``segments`` (centered endpoints, one row per
    line) lets the refits approximate endpoint distances instead of the
    raw algebraic residual.  Scoring uses neither.
    """
    if solver.needs_gravity and (gravity is None or not gravity.present):
        raise ConfigMismatch(f"{solver.label} requires a gravity direction")
    n = len(np.asarray(lines).reshape(-1, 3))
    if n < solver.sample_size:
        raise InsufficientLines(f"{solver.label} needs {solver.sample_size} lines, got {n}")
    return _run(lines, {solver: 1.0}, gravity, config, weights, segments)


def hybrid_ransac(
    lines, gravity: GravityObservation | None, config: RansacConfig, weights=None, segments=None
) -> RobustEstimate:
    """LO-RANSAC drawing the minimal solver anew at every iteration.

    Solver weights are prior x eps^m, eps being the inlier ratio of the
    best model so far (0.5 before any model).  Gravity solvers are disabled
    without a gravity direction.  The loop stops once every enabled
    solver's iteration bound and ``min_iterations`` are reached.
    """
    return _run(lines, config.solver_priors, gravity, config, weights, segments)

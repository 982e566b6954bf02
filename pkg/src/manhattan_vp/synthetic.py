"""Synthetic Manhattan scenes with ground truth, and the benchmark studies.

Scenes follow the usual protocol: random rotation, focal uniform in
``[100, 2000]`` px, 3D segments anchored around ``(0, 0, 5)`` and extended
along a Manhattan direction, projected with ``K = diag(f, f, 1)``.

Every instance draws the same sequence of random variates whatever the
noise levels are, so sweeping a noise level with a fixed seed compares
the same scenes (common random numbers).
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import VPError
from .geometry import (
    ManhattanFrame,
    cross_rows,
    lines_from_segments,
    manhattan_rotation_error_deg,
    normalize_lines,
    so3_exp,
)
from .minimal_solvers import ALL_SOLVERS, SolverId, solve_lines

MAX_RETRIES = 100
OUTLIER_HALF_WIDTH = 1000.0


@dataclass(frozen=True)
class SyntheticConfig:
    focal_range: tuple[float, float] = (100.0, 2000.0)
    line_anchor_mean: tuple[float, float, float] = (0.0, 0.0, 5.0)
    anchor_std: float = 1.0
    lambda_std: float = 1.0
    lines_per_direction: tuple[int, int, int] = (2, 2, 2)
    sigma_image_px: float = 0.0
    sigma_gravity_deg: float = 0.0
    sigma_pp_px: float = 0.0
    outlier_fraction: float = 0.0
    image_size: tuple[float, float] = (2000.0, 2000.0)
    min_depth: float = 0.1
    min_segment_px: float = 1.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.focal_range
        if not (0 < lo <= hi):
            raise ValueError("focal range must be positive and ordered")
        if min(self.anchor_std, self.lambda_std, self.sigma_image_px,
               self.sigma_gravity_deg, self.sigma_pp_px) < 0:
            raise ValueError("standard deviations must be non-negative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must be in [0, 1)")
        if isinstance(self.lines_per_direction, int):
            n = self.lines_per_direction
            object.__setattr__(self, "lines_per_direction", (n, n, n))


@dataclass(frozen=True, eq=False)
class SyntheticInstance:
    gt_frame: ManhattanFrame
    gravity_gt: np.ndarray
    gravity_noisy: np.ndarray
    segments: np.ndarray  # (N, 4) pixels, top-left origin
    labels: np.ndarray  # (N,) VP index 0..2, -1 for outliers
    clean_lines: np.ndarray  # (N, 3) noiseless lines, rows of outliers are NaN
    image_size: tuple[float, float] = field(default=(2000.0, 2000.0))

    @property
    def lines(self) -> np.ndarray:
        return lines_from_segments(self.segments, self.image_size)

    @property
    def centered_segments(self) -> np.ndarray:
        """Segments with the image center (principal point) at the origin."""
        w, h = self.image_size
        return self.segments - np.array([w, h, w, h]) / 2.0

    def lines_of(self, direction: int) -> np.ndarray:
        return self.lines[self.labels == direction]


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a normalized 4D Gaussian (unit quaternion)."""
    w, x, y, z = quat = rng.standard_normal(4)
    w, x, y, z = quat / np.linalg.norm(quat)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _gravity_rotation(axis_draw: np.ndarray, angle_draw: float, sigma_deg: float) -> np.ndarray:
    axis = axis_draw / np.linalg.norm(axis_draw)
    return so3_exp(axis * math.radians(sigma_deg) * angle_draw)


def perturb_gravity(g, sigma_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate ``g`` about a uniformly random axis by an angle ~ N(0, sigma).

    Always consumes four normal variates so results line up across sigmas.
    """
    axis_draw = rng.standard_normal(3)
    angle_draw = rng.standard_normal()
    g = np.asarray(g, dtype=float)
    if sigma_deg == 0:
        return g / np.linalg.norm(g)
    out = _gravity_rotation(axis_draw, angle_draw, sigma_deg) @ g
    return out / np.linalg.norm(out)


def _project(P: np.ndarray, f: float) -> np.ndarray:
    return f * P[:, :2] / P[:, 2:3]


def generate_instance(cfg: SyntheticConfig, rng: np.random.Generator) -> SyntheticInstance:
    """Draw one ground-truth frame with labeled inlier and outlier segments."""
    counts = cfg.lines_per_direction
    for _ in range(MAX_RETRIES):
        R = random_rotation(rng)
        f = rng.uniform(*cfg.focal_range)
        if abs(R[2, 0]) > 1e-6:
            break
    labels = np.concatenate([np.full(n, i) for i, n in enumerate(counts)]).astype(int)
    n = len(labels)
    dirs = R[:, labels].T
    mean = np.asarray(cfg.line_anchor_mean, dtype=float)
    XA = np.empty((n, 3))
    XB = np.empty((n, 3))
    todo = np.arange(n)
    for _ in range(MAX_RETRIES):
        if todo.size == 0:
            break
        XA[todo] = mean + cfg.anchor_std * rng.standard_normal((todo.size, 3))
        lam = cfg.lambda_std * rng.standard_normal(todo.size)
        XB[todo] = XA[todo] + lam[:, None] * dirs[todo]
        ok = (XA[todo, 2] > cfg.min_depth) & (XB[todo, 2] > cfg.min_depth)
        seg = _project(XB[todo], f) - _project(XA[todo], f)
        ok &= np.hypot(seg[:, 0], seg[:, 1]) > cfg.min_segment_px
        todo = todo[~ok]
    K = np.diag([f, f, 1.0])
    clean = normalize_lines(cross_rows(XA @ K.T, XB @ K.T))
    pts = np.hstack([_project(XA, f), _project(XB, f)])

    # noise draws happen unconditionally so that noise levels share scenes
    img_noise = rng.standard_normal((n, 4))
    pp_noise = rng.standard_normal(2)
    g_gt = R[:, 0].copy()
    g_noisy = perturb_gravity(g_gt, cfg.sigma_gravity_deg, rng)
    pts = pts + cfg.sigma_image_px * img_noise + cfg.sigma_pp_px * np.tile(pp_noise, 2)

    n_out = int(round(cfg.outlier_fraction / (1.0 - cfg.outlier_fraction) * n))
    out = np.empty((n_out, 4))
    todo = np.arange(n_out)
    for _ in range(MAX_RETRIES):
        if todo.size == 0:
            break
        out[todo] = rng.uniform(-OUTLIER_HALF_WIDTH, OUTLIER_HALF_WIDTH, (todo.size, 4))
        ok = np.hypot(out[todo, 2] - out[todo, 0], out[todo, 3] - out[todo, 1]) > cfg.min_segment_px
        todo = todo[~ok]

    # noise can in principle collapse a short segment; nudge to keep it valid
    seg_len = np.hypot(pts[:, 2] - pts[:, 0], pts[:, 3] - pts[:, 1])
    bad = seg_len <= 1e-6
    if np.any(bad):
        pts[bad, 2] += 1e-3

    w, h = cfg.image_size
    offset = np.array([w / 2.0, h / 2.0, w / 2.0, h / 2.0])
    segments = np.vstack([pts, out]) + offset
    all_labels = np.concatenate([labels, np.full(n_out, -1)])
    clean_all = np.vstack([clean, np.full((n_out, 3), np.nan)])
    return SyntheticInstance(
        gt_frame=ManhattanFrame(R, f),
        gravity_gt=g_gt,
        gravity_noisy=g_noisy,
        segments=segments,
        labels=all_labels,
        clean_lines=clean_all,
        image_size=(float(w), float(h)),
    )


def instance_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for instance ``index``; sharding never changes it."""
    return np.random.default_rng([int(seed), int(index)])


def with_noise(cfg: SyntheticConfig, **kw) -> SyntheticConfig:
    return replace(cfg, **kw)


# ---------------------------------------------------------------------------
# benchmark studies
# ---------------------------------------------------------------------------

SCHEMA = "vp-bench-v1"
# rotation/focal errors of exactly zero are reported at this floor in log10 columns
LOG_FLOOR = 1e-20
STABILITY_ROT_TOL_DEG = 1e-6


@dataclass
class StudyTable:
    """Rows of a study plus ``#key=value`` metadata and ``#summary`` lines."""

    name: str
    columns: list[str]
    rows: list[tuple] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    summary: list[tuple] = field(default_factory=list)

    def column(self, name: str) -> list:
        j = self.columns.index(name)
        return [r[j] for r in self.rows]

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(f"#schema={SCHEMA}\n")
        meta = ",".join(f"{k}={_fmt(v)}" for k, v in self.meta.items())
        out.write(f"#study={self.name}" + (f",{meta}" if meta else "") + "\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(x) for x in r])
        for r in self.summary:
            out.write("#summary," + ",".join(_fmt(x) for x in r) + "\n")
        return out.getvalue()


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        return format(x, ".17g")
    return str(x)


def _map_chunks(fn, tasks: list, workers: int) -> list:
    """Apply ``fn`` to every task, in order, optionally in worker processes."""
    if workers is None or workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks))


def _chunks(n: int, workers: int) -> list[tuple[int, int]]:
    k = max(1, min(n, 4 * max(1, workers or 1)))
    bounds = np.linspace(0, n, k + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def minimal_config(solver: SolverId, **kw) -> SyntheticConfig:
    """Scene config producing exactly the lines of one minimal sample."""
    counts = tuple(int(c) for c in np.bincount(solver.pattern, minlength=3))
    return SyntheticConfig(lines_per_direction=counts, **kw)


def solve_instance(solver: SolverId, inst: SyntheticInstance) -> ManhattanFrame | None:
    """Run ``solver`` on a minimal instance and keep the solution closest to GT.

    Lines are ordered by label, which is the solver's slot order.  Gravity
    solvers see the (possibly noisy) gravity.  Returns None on failure.
    """
    try:
        frames = solve_lines(solver, inst.lines, inst.gravity_noisy)
    except VPError:
        return None
    if not frames:
        return None
    R_gt = inst.gt_frame.rotation
    return min(frames, key=lambda fr: manhattan_rotation_error_deg(fr.rotation, R_gt))


def _errors(frame: ManhattanFrame | None, gt: ManhattanFrame) -> tuple[float, float, float]:
    if frame is None:
        return math.nan, math.nan, math.nan
    rot = manhattan_rotation_error_deg(frame.rotation, gt.rotation)
    abs_f = abs(frame.focal - gt.focal)
    return rot, abs_f, abs_f / gt.focal


def _study_rng(seed: int, solver: SolverId, index: int) -> np.random.Generator:
    # one stream per (solver, instance); noise levels reuse it (common random numbers)
    return np.random.default_rng([int(seed), ALL_SOLVERS.index(solver), int(index)])


def _stability_chunk(task) -> list[tuple]:
    seed, solver_value, start, stop = task
    solver = SolverId(solver_value)
    cfg = minimal_config(solver)
    rows = []
    for i in range(start, stop):
        inst = generate_instance(cfg, _study_rng(seed, solver, i))
        rot, abs_f, rel_f = _errors(solve_instance(solver, inst), inst.gt_frame)
        ok = not math.isnan(rot)
        rows.append((
            solver.value, i, int(ok),
            math.log10(max(rot, LOG_FLOOR)) if ok else math.nan,
            math.log10(max(abs_f, LOG_FLOOR)) if ok else math.nan,
            rel_f,
        ))
    return rows


def run_stability_study(n: int, seed: int = 0, workers: int = 1,
                        solvers=ALL_SOLVERS) -> StudyTable:
    """Noiseless minimal instances per solver; log10 errors of the best solution."""
    if n < 1:
        raise ValueError("n must be >= 1")
    tasks = [(seed, s.value, a, b) for s in solvers for a, b in _chunks(n, workers)]
    rows = [r for chunk in _map_chunks(_stability_chunk, tasks, workers) for r in chunk]
    table = StudyTable(
        "stability",
        ["solver", "run", "solved", "log10_rot_err_deg", "log10_focal_abs_err_px", "focal_rel_err"],
        rows,
        {"n": n, "seed": seed},
    )
    for s in solvers:
        mine = [r for r in rows if r[0] == s.value]
        good = sum(1 for r in mine if r[2] and r[3] < math.log10(STABILITY_ROT_TOL_DEG))
        table.summary.append((s.value, "frac_rot_below_1e-6_deg", good / len(mine)))
    return table


def default_noise_grid(mode: str = "standard") -> list[tuple[float, float, float]]:
    """``(sigma_image_px, sigma_gravity_deg, sigma_pp_px)`` cells.

    ``standard``: image-noise sweep without gravity noise, then a
    gravity-noise sweep at 1 px image noise.  ``pp``: principal-point sweep
    on otherwise noiseless data.
    """
    if mode == "pp":
        return [(0.0, 0.0, s) for s in (0.0, 1.0, 2.0, 5.0, 10.0, 20.0)]
    if mode != "standard":
        raise ValueError(f"unknown grid mode {mode!r}")
    cells = [(s, 0.0, 0.0) for s in (0.0, 0.25, 0.5, 1.0, 1.5, 2.0)]
    cells += [(1.0, s, 0.0) for s in (0.1, 1.0, 5.0, 10.0)]
    return cells


def _noise_chunk(task) -> list[tuple]:
    seed, solver_value, grid, start, stop = task
    solver = SolverId(solver_value)
    base = minimal_config(solver)
    cfgs = [with_noise(base, sigma_image_px=si, sigma_gravity_deg=sg, sigma_pp_px=sp)
            for si, sg, sp in grid]
    # per cell: failures, sum rot, sum abs focal, sum rel focal
    acc = np.zeros((len(grid), 4))
    for i in range(start, stop):
        for c, cfg in enumerate(cfgs):
            inst = generate_instance(cfg, _study_rng(seed, solver, i))
            rot, abs_f, rel_f = _errors(solve_instance(solver, inst), inst.gt_frame)
            if math.isnan(rot):
                acc[c, 0] += 1
            else:
                acc[c, 1:] += (rot, abs_f, rel_f)
    return [acc]


def run_noise_study(grid=None, n: int = 1000, seed: int = 0, workers: int = 1,
                    solvers=ALL_SOLVERS) -> StudyTable:
    """Mean errors per (solver, noise cell); failed solves are counted, not averaged."""
    grid = default_noise_grid() if grid is None else [tuple(float(x) for x in c) for c in grid]
    if not grid:
        raise ValueError("grid must not be empty")
    if any(len(c) != 3 for c in grid):
        raise ValueError("grid cells are (sigma_image_px, sigma_gravity_deg, sigma_pp_px)")
    if n < 1:
        raise ValueError("n must be >= 1")
    table = StudyTable(
        "noise",
        ["solver", "sigma_image_px", "sigma_gravity_deg", "sigma_pp_px", "n", "failures",
         "mean_rot_err_deg", "mean_focal_abs_err_px", "mean_focal_rel_err"],
        meta={"n": n, "seed": seed},
    )
    chunks = _chunks(n, workers)
    tasks = [(seed, s.value, grid, a, b) for s in solvers for a, b in chunks]
    results = _map_chunks(_noise_chunk, tasks, workers)
    for k, s in enumerate(solvers):
        acc = sum(r[0] for r in results[k * len(chunks):(k + 1) * len(chunks)])
        for c, (si, sg, sp) in enumerate(grid):
            fails, srot, sabs, srel = acc[c]
            ok = n - int(fails)
            mean = (lambda x: x / ok) if ok else (lambda x: math.nan)
            table.rows.append((s.value, si, sg, sp, n, int(fails), mean(srot), mean(sabs), mean(srel)))
    return table


def _time_solver(solver: SolverId, samples: list, calls: int) -> float:
    """Mean wall time per call in seconds, cycling over prepared samples."""
    m = len(samples)
    t0 = time.perf_counter()
    for k in range(calls):
        lines, g = samples[k % m]
        try:
            solve_lines(solver, lines, g)
        except VPError:
            pass
    return (time.perf_counter() - t0) / calls


def run_runtime_study(outlier_ratios=(0.5,), seed: int = 0, calls: int = 100_000,
                      confidence: float = 0.99, solvers=ALL_SOLVERS) -> StudyTable:
    """Per-call solver time times the RANSAC iteration count at each outlier ratio.

    Timing columns depend on the machine; every other column is deterministic.
    """
    from .robust import iterations_needed  # robust imports this module
    ratios = [float(r) for r in outlier_ratios]
    if not ratios or any(not 0.0 <= r < 1.0 for r in ratios):
        raise ValueError("outlier ratios must lie in [0, 1)")
    if calls < 1:
        raise ValueError("calls must be >= 1")
    table = StudyTable(
        "runtime",
        ["solver", "sample_size", "outlier_ratio", "iterations", "time_per_call_us", "ransac_time_ms"],
        meta={"seed": seed, "calls": calls, "confidence": confidence},
    )
    for s in solvers:
        cfg = minimal_config(s)
        samples = []
        for i in range(min(1000, calls)):
            inst = generate_instance(cfg, _study_rng(seed, s, i))
            samples.append((inst.lines, inst.gravity_noisy))
        per_call = _time_solver(s, samples, calls)
        for r in ratios:
            it = iterations_needed(1.0 - r, s.sample_size, confidence)
            table.rows.append((s.value, s.sample_size, r, it, per_call * 1e6, per_call * it * 1e3))
    return table

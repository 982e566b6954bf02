"""Command-line front end: ``estimate`` for one scene, ``bench`` for the studies.

Exit codes: 0 success, 2 usage or input parse error, 3 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time

import numpy as np

from . import __version__
from .errors import InsufficientLines, VPError
from .geometry import GravityObservation, GravityQuality, ManhattanFrame, evaluate, lines_from_segments
from .minimal_solvers import SolverId
from .robust import LOMode, RansacConfig, hybrid_ransac, ransac
from .synthetic import default_noise_grid, run_noise_study, run_runtime_study, run_stability_study

EXIT_OK, EXIT_USAGE, EXIT_ESTIMATION = 0, 2, 3
SOLVER_CHOICES = ["hybrid"] + [s.value for s in SolverId]


class InputError(Exception):
    """Input file problem, reported with a ``line:column`` location."""

    def __init__(self, path: str, line: int, col: int, msg: str):
        super().__init__(f"{path}:{line}:{col}: {msg}")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# serialization (17 significant digits, stable key order)
# ---------------------------------------------------------------------------

def _num(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        return "null"
    s = format(x, ".17g")
    # keep it a JSON float even when integral
    if "." not in s and "e" not in s and "n" not in s:
        s += ".0"
    return s


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with floats at 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if obj is None:
        return "null"
    return json.dumps(str(obj))


# ---------------------------------------------------------------------------
# input parsing
# ---------------------------------------------------------------------------

def _parse_vector(text: str, n: int, what: str) -> np.ndarray:
    parts = [p for p in text.replace(" ", "").split(",") if p]
    try:
        v = np.array([float(p) for p in parts])
    except ValueError:
        raise UsageError(f"{what}: expected {n} comma-separated numbers, got {text!r}") from None
    if len(v) != n or not np.all(np.isfinite(v)):
        raise UsageError(f"{what}: expected {n} finite numbers, got {text!r}")
    return v


def _locate(text: str, needle_index: int) -> tuple[int, int]:
    line = text.count("\n", 0, needle_index) + 1
    col = needle_index - (text.rfind("\n", 0, needle_index) + 1) + 1
    return line, col


def _segment_rows(path: str, raw, where) -> tuple[np.ndarray, np.ndarray | None]:
    """Validate ``[x1, y1, x2, y2(, weight)]`` rows; ``where(i)`` gives a location."""
    segs, weights = [], []
    for i, row in enumerate(raw):
        if not isinstance(row, (list, tuple)) or len(row) not in (4, 5):
            raise InputError(path, *where(i), "segment must be [x1, y1, x2, y2] or [x1, y1, x2, y2, weight]")
        try:
            vals = [float(v) for v in row]
        except (TypeError, ValueError):
            raise InputError(path, *where(i), "segment coordinates must be numbers") from None
        if isinstance(row[0], bool) or not all(math.isfinite(v) for v in vals):
            raise InputError(path, *where(i), "segment coordinates must be finite numbers")
        if math.hypot(vals[2] - vals[0], vals[3] - vals[1]) <= 1e-9:
            raise InputError(path, *where(i), "segment endpoints coincide")
        if len(vals) == 5 and not vals[4] > 0:
            raise InputError(path, *where(i), "segment weight must be positive")
        segs.append(vals[:4])
        weights.append(vals[4] if len(vals) == 5 else None)
    if any(w is not None for w in weights) and not all(w is not None for w in weights):
        raise InputError(path, 1, 1, "either every segment has a weight or none does")
    S = np.array(segs, dtype=float).reshape(-1, 4)
    W = np.array(weights, dtype=float) if weights and weights[0] is not None else None
    return S, W


def parse_json_scene(path: str, text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(path, e.lineno, e.colno, e.msg) from None
    if not isinstance(doc, dict):
        raise InputError(path, 1, 1, "top level must be an object")

    def at(key):
        idx = text.find(json.dumps(key))
        return _locate(text, idx) if idx >= 0 else (1, 1)

    for key in ("width", "height", "segments"):
        if key not in doc:
            raise InputError(path, 1, 1, f"missing key {key!r}")
    try:
        width, height = float(doc["width"]), float(doc["height"])
    except (TypeError, ValueError):
        raise InputError(path, *at("width"), "width and height must be numbers") from None
    if not (width > 0 and height > 0 and math.isfinite(width) and math.isfinite(height)):
        raise InputError(path, *at("width"), "width and height must be positive")
    if not isinstance(doc["segments"], list):
        raise InputError(path, *at("segments"), "segments must be a list")
    seg_line, seg_col = at("segments")
    # approximate per-row locations: rows are usually one per line
    S, W = _segment_rows(path, doc["segments"], lambda i: (seg_line + 1 + i, 1) if "\n" in text else (seg_line, seg_col))
    scene = {"width": width, "height": height, "segments": S, "weights": W, "gravity": None, "gt": None}
    if doc.get("gravity") is not None:
        g = doc["gravity"]
        try:
            g = np.array([float(v) for v in g], dtype=float)
        except (TypeError, ValueError):
            raise InputError(path, *at("gravity"), "gravity must be three numbers") from None
        if g.shape != (3,) or not np.all(np.isfinite(g)) or not np.linalg.norm(g) > 0:
            raise InputError(path, *at("gravity"), "gravity must be a nonzero 3-vector")
        scene["gravity"] = g
    if doc.get("gravity_quality") is not None:
        q = doc["gravity_quality"]
        if q not in ("exact", "prior"):
            raise InputError(path, *at("gravity_quality"), "gravity_quality must be 'exact' or 'prior'")
        scene["gravity_quality"] = q
    if doc.get("gt") is not None:
        gt = doc["gt"]
        try:
            R = np.array(gt["rotation"], dtype=float).reshape(3, 3)
            scene["gt"] = ManhattanFrame(R, float(gt["focal"]))
        except (TypeError, ValueError, KeyError):
            raise InputError(path, *at("gt"), "gt needs a 9-element rotation and a positive focal") from None
    return scene


def parse_csv_segments(path: str, text: str) -> dict:
    """Plain ``x1,y1,x2,y2[,weight]`` rows; ``#`` comments and an optional header row."""
    rows, where = [], []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        if not rows and not where and row[0].strip().lower() in ("x1", "x"):
            continue
        for col, cell in enumerate(row):
            try:
                float(cell)
            except ValueError:
                col_pos = sum(len(c) + 1 for c in row[:col]) + 1
                raise InputError(path, lineno, col_pos, f"not a number: {cell.strip()!r}") from None
        rows.append([float(c) for c in row])
        where.append((lineno, 1))
    S, W = _segment_rows(path, rows, lambda i: where[i])
    return {"width": None, "height": None, "segments": S, "weights": W, "gravity": None, "gt": None}


def load_scene(path: str) -> dict:
    try:
        if path == "-":
            text = sys.stdin.read()
        else:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}") from None
    except UnicodeDecodeError:
        raise InputError(path, 1, 1, "file is not valid UTF-8") from None
    if text.lstrip().startswith("{"):
        return parse_json_scene(path, text)
    return parse_csv_segments(path, text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _write(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_estimate(args) -> int:
    scene = load_scene(args.input)
    if args.image_size is not None:
        width, height = _parse_vector(args.image_size, 2, "--image-size")
    elif scene["width"] is not None:
        width, height = scene["width"], scene["height"]
    else:
        # bare CSV without --image-size: coordinates are taken as centered
        width, height = 0.0, 0.0

    g = _parse_vector(args.gravity, 3, "--gravity") if args.gravity else scene["gravity"]
    if g is not None and not np.linalg.norm(g) > 0:
        raise UsageError("--gravity must be nonzero")
    quality = args.gravity_quality or scene.get("gravity_quality") or "prior"
    gravity = (
        GravityObservation(g, GravityQuality(quality)) if g is not None else GravityObservation.absent()
    )
    if args.eval and scene["gt"] is None:
        raise UsageError("--eval needs a 'gt' entry in the input")

    config = RansacConfig(
        min_iterations=args.min_iters,
        inlier_threshold=args.threshold,
        lo_mode=LOMode(args.lo),
        seed=args.seed,
    )
    S = scene["segments"]
    t0 = time.perf_counter()
    try:
        if len(S) == 0:
            raise InsufficientLines("no segments in input")
        lines = lines_from_segments(S, (width, height))
        centered = S - np.array([width, height, width, height]) / 2.0
        if args.solver == "hybrid":
            est = hybrid_ransac(lines, gravity, config, weights=scene["weights"], segments=centered)
        else:
            est = ransac(lines, SolverId(args.solver), gravity, config,
                         weights=scene["weights"], segments=centered)
    except VPError as e:
        _write(dumps({"error": type(e).__name__, "message": str(e)}) + "\n", args.out)
        return EXIT_ESTIMATION
    elapsed = time.perf_counter() - t0

    fr = est.frame
    out = {
        "rotation": [list(map(float, row)) for row in fr.rotation],
        "focal_px": fr.focal,
        "vps": [list(map(float, fr.vps[:, i])) for i in range(3)],
        "inlier_indices": est.inlier_indices(),
        "score": est.score,
        "iterations": est.iterations_run,
        "solver_draws": {s.value: int(n) for s, n in est.solver_draws.items()},
        "lo_improvements": est.lo_improvements,
    }
    if args.eval:
        out["eval"] = evaluate(fr, scene["gt"]).as_dict()
    if args.timings:
        out["timings_ms"] = {"estimate": elapsed * 1e3}
    _write(dumps(out) + "\n", args.out)
    return EXIT_OK


def _parse_grid(text: str) -> list[tuple[float, float, float]]:
    if text in ("default", "standard"):
        return default_noise_grid("standard")
    if text == "pp":
        return default_noise_grid("pp")
    cells = []
    for cell in text.split(";"):
        parts = cell.split(":")
        if len(parts) not in (2, 3):
            raise UsageError(f"grid cell {cell!r}: expected sigma_i:sigma_g[:sigma_pp]")
        try:
            vals = [float(p) for p in parts] + [0.0] * (3 - len(parts))
        except ValueError:
            raise UsageError(f"grid cell {cell!r}: not numbers") from None
        if min(vals) < 0 or not all(math.isfinite(v) for v in vals):
            raise UsageError(f"grid cell {cell!r}: noise levels must be finite and >= 0")
        cells.append(tuple(vals))
    return cells


def cmd_bench(args) -> int:
    if args.n is not None and args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    if args.study == "stability":
        table = run_stability_study(args.n or 10000, seed=args.seed, workers=args.workers)
    elif args.study == "noise":
        table = run_noise_study(_parse_grid(args.grid), n=args.n or 1000, seed=args.seed, workers=args.workers)
    else:
        ratios = [float(r) for r in _parse_vector(args.outliers, args.outliers.count(",") + 1, "--outliers")]
        if any(not 0.0 <= r < 1.0 for r in ratios):
            raise UsageError("--outliers must lie in [0, 1)")
        if args.calls < 1:
            raise UsageError("--calls must be >= 1")
        table = run_runtime_study(ratios, seed=args.seed, calls=args.calls)
    _write(table.to_csv(), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="manhattan-vp",
        description="Manhattan frame (rotation + focal length) from line segments.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="estimate the frame of one scene")
    e.add_argument("input", help="JSON scene or CSV of x1,y1,x2,y2 rows ('-' for stdin)")
    e.add_argument("--solver", choices=SOLVER_CHOICES, default="hybrid")
    e.add_argument("--gravity", help="camera-frame vertical as 'x,y,z' (overrides the file)")
    e.add_argument("--gravity-quality", choices=["exact", "prior"])
    e.add_argument("--threshold", type=float, default=RansacConfig.inlier_threshold,
                   help="inlier threshold on the line-to-VP residual (default %(default)s)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--lo", choices=[m.value for m in LOMode], default="ours")
    e.add_argument("--min-iters", type=int, default=RansacConfig.min_iterations)
    e.add_argument("--image-size", help="'W,H' for CSV input; the principal point is the center")
    e.add_argument("--out", help="write the result here instead of stdout")
    e.add_argument("--eval", action="store_true", help="compare against the 'gt' entry")
    e.add_argument("--timings", action="store_true", help="add wall-clock timings (not reproducible)")
    e.set_defaults(func=cmd_estimate)

    b = sub.add_parser("bench", help="run a synthetic study and print CSV")
    b.add_argument("study", choices=["stability", "noise", "runtime"])
    b.add_argument("--n", type=int, help="instances per solver (per cell for noise)")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--grid", default="default",
                   help="noise grid: 'default', 'pp' or 'si:sg[:sp];...' (noise study)")
    b.add_argument("--outliers", default="0.5", help="comma-separated outlier ratios (runtime study)")
    b.add_argument("--calls", type=int, default=100_000, help="timed solver calls (runtime study)")
    b.add_argument("--workers", type=int, default=1, help="worker processes; results do not depend on it")
    b.add_argument("--out", help="write the CSV here instead of stdout")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "min_iters", 0) < 0:
            raise UsageError("--min-iters must be >= 0")
        if getattr(args, "threshold", 1.0) <= 0:
            raise UsageError("--threshold must be positive")
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

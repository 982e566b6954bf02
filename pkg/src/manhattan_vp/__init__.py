"""Manhattan frame (rotation and focal length) estimation from line segments.

Five minimal solvers (two of them gravity-free, three using a known
vertical direction), a non-minimal refit, LO-RANSAC with a hybrid
solver-sampling scheme and a synthetic benchmark harness.
"""

__version__ = "0.1.0"

from .errors import VPError
from .geometry import (
    EvalMetrics,
    GravityObservation,
    GravityQuality,
    ManhattanFrame,
    evaluate,
    line_from_segment,
    lines_from_segments,
    manhattan_rotation_error_deg,
    rotation_error_deg,
    vp_line_distance,
)
from .minimal_solvers import MinimalSample, SolverId, run_solver
from .nonminimal import InlierPartition, nonminimal_solve, refine_ls
from .robust import LOMode, RansacConfig, RobustEstimate, hybrid_ransac, ransac

__all__ = [
    "VPError",
    "EvalMetrics",
    "GravityObservation",
    "GravityQuality",
    "ManhattanFrame",
    "evaluate",
    "line_from_segment",
    "lines_from_segments",
    "manhattan_rotation_error_deg",
    "rotation_error_deg",
    "vp_line_distance",
    "MinimalSample",
    "SolverId",
    "run_solver",
    "InlierPartition",
    "nonminimal_solve",
    "refine_ls",
    "LOMode",
    "RansacConfig",
    "RobustEstimate",
    "hybrid_ransac",
    "ransac",
]

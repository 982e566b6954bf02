"""Projective-geometry primitives, rotation utilities and evaluation metrics.

Lines are plain ``(3,)`` or ``(N, 3)`` float arrays ``(a, b, c)`` of
``a x + b y + c = 0`` in principal-point-centered pixel coordinates,
normalized so that ``a**2 + b**2 == 1``.  Vanishing points (VPs) are
homogeneous 3-vectors.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSegment, EmptyInput, SingularInput

ORTHO_TOL = 1e-9


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ManhattanFrame:
    """Camera rotation plus focal length.

    Columns of ``rotation`` are the camera-frame Manhattan directions; the
    VPs are the columns of ``K @ rotation`` with ``K = diag(f, f, 1)``.
    """

    rotation: np.ndarray
    focal: float

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        f = float(self.focal)
        if not (f > 0.0 and math.isfinite(f)):
            raise ValueError(f"focal must be positive and finite, got {f}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "focal", f)

    @property
    def K(self) -> np.ndarray:
        return intrinsics(self.focal)

    @property
    def vps(self) -> np.ndarray:
        """3x3 array whose columns are the unit-norm homogeneous VPs."""
        V = self.rotation * np.array([[self.focal], [self.focal], [1.0]])
        return V / np.linalg.norm(V, axis=0)

    def is_valid(self, tol: float = ORTHO_TOL) -> bool:
        R = self.rotation
        return bool(
            np.all(np.abs(R.T @ R - np.eye(3)) < tol)
            and abs(np.linalg.det(R) - 1.0) < tol
            and self.focal > 0
        )


class GravityQuality(enum.Enum):
    EXACT = "exact"
    PRIOR = "prior"
    ABSENT = "absent"


@dataclass(frozen=True, eq=False)
class GravityObservation:
    """Vertical direction in camera coordinates with a quality tag."""

    direction: np.ndarray | None = None
    quality: GravityQuality = GravityQuality.ABSENT

    def __post_init__(self):
        if self.quality is GravityQuality.ABSENT:
            object.__setattr__(self, "direction", None)
            return
        if self.direction is None:
            raise ValueError("gravity direction required unless quality is ABSENT")
        g = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(g)
        if not n > 0:
            raise ValueError("gravity direction must be nonzero")
        object.__setattr__(self, "direction", g / n)

    @property
    def present(self) -> bool:
        return self.quality is not GravityQuality.ABSENT

    @classmethod
    def absent(cls) -> "GravityObservation":
        return cls(None, GravityQuality.ABSENT)


@dataclass(frozen=True)
class EvalMetrics:
    rotation_error_deg: float
    vp_error_deg: float
    focal_abs_error: float
    focal_rel_error: float

    def as_dict(self) -> dict:
        return {
            "rotation_error_deg": self.rotation_error_deg,
            "vp_error_deg": self.vp_error_deg,
            "focal_abs_error": self.focal_abs_error,
            "focal_rel_error": self.focal_rel_error,
        }


# ---------------------------------------------------------------------------
# Lines and VPs
# ---------------------------------------------------------------------------

def cross_rows(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise cross product of two ``(N, 3)`` arrays (cheaper than ``np.cross``)."""
    out = np.empty(np.broadcast_shapes(A.shape, B.shape))
    out[..., 0] = A[..., 1] * B[..., 2] - A[..., 2] * B[..., 1]
    out[..., 1] = A[..., 2] * B[..., 0] - A[..., 0] * B[..., 2]
    out[..., 2] = A[..., 0] * B[..., 1] - A[..., 1] * B[..., 0]
    return out


def intrinsics(focal: float) -> np.ndarray:
    return np.diag([focal, focal, 1.0])


def normalize_lines(lines: np.ndarray) -> np.ndarray:
    """Scale line coefficients so that ``a**2 + b**2 == 1``."""
    L = np.asarray(lines, dtype=float)
    n = np.hypot(L[..., 0], L[..., 1])
    if np.any(n == 0):
        raise SingularInput("line at infinity cannot be normalized")
    return L / n[..., None]


def line_from_segment(p, q, image_size=(0.0, 0.0)) -> np.ndarray:
    """Normalized homogeneous line through two pixel endpoints.

    Pixel coordinates are shifted so that the image center becomes the
    origin before the endpoints are lifted to ``w = 1`` and crossed.
    """
    return lines_from_segments(np.concatenate([np.ravel(p), np.ravel(q)])[None, :], image_size)[0]


def lines_from_segments(segments: np.ndarray, image_size=(0.0, 0.0)) -> np.ndarray:
    """Vectorized :func:`line_from_segment` over an ``(N, 4)`` array ``x1, y1, x2, y2``."""
    S = np.asarray(segments, dtype=float).reshape(-1, 4)
    w, h = (float(s) for s in image_size)
    if w < 0 or h < 0:
        raise ValueError("image size must be non-negative")
    pp = np.array([w / 2.0, h / 2.0])
    P = S[:, 0:2] - pp
    Q = S[:, 2:4] - pp
    if np.any(np.hypot(*(P - Q).T) <= 1e-9):
        raise DegenerateSegment("segment endpoints coincide")
    # (px, py, 1) x (qx, qy, 1)
    L = np.empty((len(S), 3))
    L[:, 0] = P[:, 1] - Q[:, 1]
    L[:, 1] = Q[:, 0] - P[:, 0]
    L[:, 2] = P[:, 0] * Q[:, 1] - P[:, 1] * Q[:, 0]
    return normalize_lines(L)


def vp_line_distance(lines: np.ndarray, v: np.ndarray) -> np.ndarray | float:
    """Consistency residual ``|l.v| / hypot(l0, l1)`` with ``v`` at unit norm.

    Accepts one line or an ``(N, 3)`` stack; returns a float or ``(N,)``.
    """
    L = np.asarray(lines, dtype=float)
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    d = np.abs(L @ v) / np.hypot(L[..., 0], L[..., 1])
    return float(d) if np.ndim(d) == 0 else d


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula for the rotation vector ``w`` (radians)."""
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return (
        np.eye(3)
        + (math.sin(theta) / theta) * W
        + ((1.0 - math.cos(theta)) / theta**2) * W @ W
    )


def axis_angle(axis, angle_rad: float) -> np.ndarray:
    a = np.asarray(axis, dtype=float)
    return so3_exp(a / np.linalg.norm(a) * angle_rad)


def rotation_angle_deg(M: np.ndarray) -> float:
    """Angle of a rotation matrix in degrees, accurate near 0 and 180."""
    c = 0.5 * (np.trace(M) - 1.0)
    s = 0.5 * math.sqrt(
        (M[2, 1] - M[1, 2]) ** 2 + (M[0, 2] - M[2, 0]) ** 2 + (M[1, 0] - M[0, 1]) ** 2
    )
    c = min(1.0, max(-1.0, c))
    return math.degrees(math.atan2(s, c))


def rotation_error_deg(R_est: np.ndarray, R_gt: np.ndarray) -> float:
    """Angle of ``R_est.T @ R_gt`` in degrees, in ``[0, 180]``.

    Same quantity as ``arccos(2 (q . q_gt)**2 - 1)`` on unit quaternions,
    computed with ``atan2`` to stay accurate for tiny errors.
    """
    return rotation_angle_deg(np.asarray(R_est).T @ np.asarray(R_gt))


def _cube_symmetries() -> np.ndarray:
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            P = np.zeros((3, 3))
            for col, (row, s) in enumerate(zip(perm, signs)):
                P[row, col] = s
            if np.linalg.det(P) > 0:
                mats.append(P)
    return np.array(mats)


CUBE_SYMMETRIES = _cube_symmetries()


def manhattan_rotation_error_deg(R_est: np.ndarray, R_gt: np.ndarray) -> float:
    """Rotation error modulo the 24 relabelings of a Manhattan frame.

    VPs are unordered, unsigned axes, so a frame is only defined up to a
    signed column permutation with determinant +1.
    """
    M = np.asarray(R_est).T @ np.asarray(R_gt)
    # trace(P.T @ M) for every symmetry P
    traces = np.einsum("kij,ij->k", CUBE_SYMMETRIES, M)
    P = CUBE_SYMMETRIES[int(np.argmax(traces))]
    return rotation_angle_deg(P.T @ M)


def nearest_rotation(D: np.ndarray) -> np.ndarray:
    """Closest rotation to ``D`` in Frobenius norm (orthogonal Procrustes)."""
    D = np.asarray(D, dtype=float)
    if abs(np.linalg.det(D)) <= 1e-12:
        raise SingularInput("matrix is singular")
    U, _, Vt = np.linalg.svd(D)
    if np.linalg.det(U @ Vt) < 0:
        U[:, -1] = -U[:, -1]
    return U @ Vt


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _axis_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Angle between two lines through the origin, in ``[0, 90]``."""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    c = abs(float(a @ b))
    s = float(np.linalg.norm(np.cross(a, b)))
    return math.degrees(math.atan2(s, c))


def vp_error_deg(frame_est: ManhattanFrame, frame_gt: ManhattanFrame) -> float:
    """Mean angle between calibrated VP directions under the best matching."""
    A = np.array(
        [
            [_axis_angle_deg(frame_est.rotation[:, i], frame_gt.rotation[:, j]) for j in range(3)]
            for i in range(3)
        ]
    )
    return min(
        float(np.mean([A[i, p[i]] for i in range(3)]))
        for p in itertools.permutations(range(3))
    )


def auc(errors, max_threshold: float = 10.0, n_thresholds: int = 20) -> float:
    """Area under the recall curve, scaled so a perfect score equals ``max_threshold``."""
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise EmptyInput("no errors given")
    if n_thresholds < 1 or not max_threshold > 0:
        raise ValueError("need n_thresholds >= 1 and max_threshold > 0")
    thresholds = max_threshold * np.arange(1, n_thresholds + 1) / n_thresholds
    recall = (e[None, :] <= thresholds[:, None]).mean(axis=1)
    return float(max_threshold * recall.mean())


def evaluate(frame_est: ManhattanFrame, frame_gt: ManhattanFrame) -> EvalMetrics:
    abs_err = abs(frame_est.focal - frame_gt.focal)
    return EvalMetrics(
        rotation_error_deg=manhattan_rotation_error_deg(frame_est.rotation, frame_gt.rotation),
        vp_error_deg=vp_error_deg(frame_est, frame_gt),
        focal_abs_error=abs_err,
        focal_rel_error=abs_err / frame_gt.focal,
    )
